#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "errors.hpp"

namespace ecgstress::io {

// Little-endian encoder into an in-memory buffer.
class ByteWriter {
public:
    template <typename T>
        requires std::is_arithmetic_v<T>
    void put(T value) {
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
        const U bits = std::bit_cast<U>(value);
        for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }

    void put_bytes(std::string_view raw) { bytes_.insert(bytes_.end(), raw.begin(), raw.end()); }

    void put_string(std::string_view s) {
        put(static_cast<std::uint32_t>(s.size()));
        put_bytes(s);
    }

    const std::vector<char>& bytes() const noexcept { return bytes_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open " + path.string() + " for writing");
        out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
        if (!out) throw DataError("write failed for " + path.string());
    }

private:
    std::vector<char> bytes_;
};

// Bounds-checked little-endian decoder; every failure reports its byte offset.
class ByteReader {
public:
    explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    static ByteReader from_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot open " + path.string());
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return ByteReader(std::move(bytes));
    }

    std::uint64_t offset() const noexcept { return pos_; }
    std::uint64_t remaining() const noexcept { return bytes_.size() - pos_; }

    template <typename T>
        requires std::is_arithmetic_v<T>
    T get(const char* what) {
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
        need(sizeof(T), what);
        U bits = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            bits |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
        }
        pos_ += sizeof(T);
        return std::bit_cast<T>(bits);
    }

    std::string get_bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string out(bytes_.data() + pos_, n);
        pos_ += n;
        return out;
    }

    std::string get_string(const char* what) {
        const auto n = get<std::uint32_t>(what);
        return get_bytes(n, what);
    }

    void expect_magic(std::string_view magic) {
        const auto start = pos_;
        if (remaining() < magic.size() || std::string_view(bytes_.data() + pos_, magic.size()) != magic) {
            throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", start);
        }
        pos_ += magic.size();
    }

    void expect_end() const {
        if (pos_ != bytes_.size()) {
            throw FormatError(std::to_string(bytes_.size() - pos_) + " unexpected trailing bytes", pos_);
        }
    }

    void need(std::uint64_t n, const char* what) const {
        if (remaining() < n) {
            throw FormatError(std::string("truncated payload reading ") + what + ": need " + std::to_string(n) +
                                  " bytes, " + std::to_string(remaining()) + " left",
                              pos_);
        }
    }

private:
    std::vector<char> bytes_;
    std::uint64_t pos_ = 0;
};

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace ecgstress::io
