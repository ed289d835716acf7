#pragma once

#include <stdexcept>
#include <string>

namespace m4oe {

// Every error carries a short machine-readable category; the CLI prints it
// verbatim so scripts can branch on it.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(message), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& m) : Error("format", m) {}
};

struct DataError : Error {
    explicit DataError(const std::string& m) : Error("data", m) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io", m) {}
};

/// Call from inside a catch block: rethrows the active m4oe error with `where`
/// prepended, preserving its type.
[[noreturn]] inline void rethrow_in(const std::string& where) {
    try {
        throw;
    } catch (const DimensionError& e) {
        throw DimensionError(where + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError(where + ": " + e.what());
    }
}

}  // namespace m4oe
