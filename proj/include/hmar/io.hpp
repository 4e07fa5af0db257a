#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hmar/errors.hpp"

namespace hmar {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Creates missing parent directories.
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

/// Little-endian binary writer.
class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        const auto u = static_cast<std::uint64_t>(v);
        for (std::size_t b = 0; b < sizeof(T); ++b) bytes_.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
    }
    void put_f32(float v) {
        std::uint32_t u;
        std::memcpy(&u, &v, sizeof u);
        put(u);
    }
    void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

/// Little-endian binary reader; throws FormatError tagged with `what` on truncation.
class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t b = 0; b < sizeof(T); ++b) v |= static_cast<std::uint64_t>(bytes_[pos_ + b]) << (8 * b);
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }
    float get_f32() {
        const auto u = get<std::uint32_t>();
        float v;
        std::memcpy(&v, &u, sizeof v);
        return v;
    }
    std::string get_string(std::size_t n) {
        need(n);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    std::size_t position() const { return pos_; }
    [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg); }

private:
    void need(std::size_t n) const {
        if (n > remaining()) fail("truncated at byte " + std::to_string(pos_));
    }

    std::span<const std::uint8_t> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

} // namespace hmar
