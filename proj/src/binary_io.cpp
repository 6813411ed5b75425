#include "retrobm25/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/core.h>

#include "retrobm25/common.hpp"

namespace retrobm25::io {

static_assert(std::endian::native == std::endian::little, "formats assume a little-endian host");

void ByteWriter::magic(std::string_view tag) {
    buf_.insert(buf_.end(), tag.begin(), tag.end());
}

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::varint(std::uint64_t v) {
    while (v >= 0x80) {
        buf_.push_back(static_cast<std::uint8_t>(v | 0x80));
        v >>= 7;
    }
    buf_.push_back(static_cast<std::uint8_t>(v));
}

void ByteWriter::string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
}

void ByteWriter::raw(std::span<const std::uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
}

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
    if (n > remaining()) {
        throw Error(ErrorCode::truncated,
                    fmt::format("truncated: needed {} bytes at offset {}, {} left", n, pos_, remaining()));
    }
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
}

void ByteReader::expect_magic(std::string_view tag, std::string_view what) {
    if (remaining() < tag.size()) throw Error(ErrorCode::truncated, fmt::format("truncated: {} header", what));
    auto got = take(tag.size());
    if (std::memcmp(got.data(), tag.data(), tag.size()) != 0) {
        throw Error(ErrorCode::bad_magic, fmt::format("bad magic: not a {} file", what));
    }
}

std::uint32_t ByteReader::u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t ByteReader::u64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::uint64_t ByteReader::varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
        std::uint8_t byte = take(1)[0];
        v |= static_cast<std::uint64_t>(byte & 0x7f) << shift;
        if ((byte & 0x80) == 0) return v;
    }
    throw Error(ErrorCode::bad_magic, "malformed varint");
}

std::string ByteReader::string() {
    auto n = u32();
    auto b = take(n);
    return {reinterpret_cast<const char*>(b.data()), b.size()};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::missing_input, fmt::format("cannot open {}", path.string()));
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", tmp.string()));
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error(ErrorCode::io, fmt::format("short write to {}", tmp.string()));
    }
    std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace retrobm25::io
