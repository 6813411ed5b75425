#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace retrobm25 {

inline constexpr std::string_view kToolVersion = "0.1.0";

/// Flat config: one "key = value" per line, '#' starts a comment, blank lines
/// ignored. Keys keep their order; a repeated key appears twice (last wins
/// downstream). Malformed lines throw Error(invalid_argument) naming the line.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_hex(std::span<const std::uint8_t> bytes);

/// Written as "<command>.manifest.json" beside a command's outputs.
struct Manifest {
    std::string command;
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<std::filesystem::path> inputs;
    std::vector<std::filesystem::path> outputs;

    /// JSON with tool version, command, config echo and SHA-256 of every input
    /// and output file.
    std::string to_json() const;
    void write(const std::filesystem::path& dir) const;
};

}  // namespace retrobm25
