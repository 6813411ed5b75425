#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace retrobm25::io {

/// Little-endian append-only encoder used by every on-disk format.
class ByteWriter {
  public:
    void magic(std::string_view tag);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f64(double v);
    void varint(std::uint64_t v);
    void string(std::string_view s);
    void raw(std::span<const std::uint8_t> bytes);

    const std::vector<std::uint8_t>& bytes() const noexcept { return buf_; }
    std::vector<std::uint8_t> take() && { return std::move(buf_); }

  private:
    std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian decoder. Running off the end throws
/// Error(truncated); a wrong tag throws Error(bad_magic).
class ByteReader {
  public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    void expect_magic(std::string_view tag, std::string_view what);
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::uint64_t varint();
    std::string string();

    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    bool at_end() const noexcept { return pos_ == data_.size(); }

  private:
    std::span<const std::uint8_t> take(std::size_t n);

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace retrobm25::io
