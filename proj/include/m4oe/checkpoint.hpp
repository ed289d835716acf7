#pragma once

// Binary record container shared by model checkpoints and corpus samples.
//
//   "M4OE"                      4 bytes magic
//   version                     u32
//   count                       u32
//   count x record:
//     name_length               u32
//     name                      name_length bytes, UTF-8
//     rank                      u32
//     extents                   rank x u64
//     payload                   product(extents) x f32
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "m4oe/error.hpp"
#include "m4oe/params.hpp"
#include "m4oe/tensor.hpp"

namespace m4oe {

inline constexpr char kRecordMagic[4] = {'M', '4', 'O', 'E'};
inline constexpr std::uint32_t kRecordVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor<float> tensor;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

    template <typename U>
    U get_le() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s(bytes_.substr(pos_, n));
        pos_ += n;
        return s;
    }

    bool at_end() const noexcept { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw FormatError("truncated record stream");
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_records(const std::vector<NamedTensor>& records) {
    std::string out(kRecordMagic, 4);
    detail::put_le<std::uint32_t>(out, kRecordVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
        out += r.name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.tensor.rank()));
        for (auto e : r.tensor.shape()) detail::put_le<std::uint64_t>(out, e);
        for (float v : r.tensor.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

inline std::vector<NamedTensor> decode_records(std::string_view bytes) {
    detail::ByteReader in(bytes);
    if (in.get_bytes(4) != std::string(kRecordMagic, 4)) throw FormatError("bad magic: not an M4OE record file");
    const auto version = in.get_le<std::uint32_t>();
    if (version != kRecordVersion)
        throw FormatError("unsupported record format version " + std::to_string(version));
    const auto count = in.get_le<std::uint32_t>();
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        NamedTensor r;
        r.name = in.get_bytes(in.get_le<std::uint32_t>());
        const auto rank = in.get_le<std::uint32_t>();
        Shape shape(rank);
        for (auto& e : shape) {
            e = static_cast<std::size_t>(in.get_le<std::uint64_t>());
            if (e == 0) throw FormatError("record '" + r.name + "' has a zero extent");
        }
        std::vector<float> data(numel(shape));
        for (auto& v : data) v = std::bit_cast<float>(in.get_le<std::uint32_t>());
        r.tensor = Tensor<float>(std::move(shape), std::move(data));
        out.push_back(std::move(r));
    }
    if (!in.at_end()) throw FormatError("trailing bytes after last record");
    return out;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + path.string());
}

inline void save_records(const std::filesystem::path& path, const std::vector<NamedTensor>& records) {
    write_file(path, encode_records(records));
}

inline std::vector<NamedTensor> load_records(const std::filesystem::path& path) {
    return decode_records(read_file(path));
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterStore<float>& store) {
    std::vector<NamedTensor> records;
    records.reserve(store.size());
    for (const auto& p : store.params()) records.push_back({p.name, p.value});
    save_records(path, records);
}

inline ParameterStore<float> load_checkpoint(const std::filesystem::path& path) {
    ParameterStore<float> store;
    for (auto& r : load_records(path)) store.add(std::move(r.name), std::move(r.tensor));
    return store;
}

}  // namespace m4oe
