#include "retrobm25/run_config.hpp"

#include <fmt/core.h>
#include <nlohmann/json.hpp>
#include <openssl/sha.h>

#include "retrobm25/binary_io.hpp"
#include "retrobm25/common.hpp"

namespace retrobm25 {

namespace {

std::string_view trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw Error(ErrorCode::invalid_argument, fmt::format("config line {}: expected 'key = value'", line_no));
        }
        auto key = trim(line.substr(0, eq));
        if (key.empty()) throw Error(ErrorCode::invalid_argument, fmt::format("config line {}: empty key", line_no));
        out.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
    }
    return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[SHA256_DIGEST_LENGTH];
    SHA256(bytes.data(), bytes.size(), digest);
    std::string out;
    for (auto c : digest) out += fmt::format("{:02x}", c);
    return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(io::read_file(path)); }

std::string Manifest::to_json() const {
    nlohmann::ordered_json j;
    j["tool"] = "retrobm25";
    j["version"] = kToolVersion;
    j["command"] = command;
    auto& cfg = j["config"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config) cfg[k] = v;
    auto digests = [](const std::vector<std::filesystem::path>& paths) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& p : paths) arr.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
        return arr;
    };
    j["inputs"] = digests(inputs);
    j["outputs"] = digests(outputs);
    return j.dump(2) + "\n";
}

void Manifest::write(const std::filesystem::path& dir) const {
    io::write_file_atomic(dir / (command + ".manifest.json"), to_json());
}

}  // namespace retrobm25
