// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ira/error.hpp"

namespace ira {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Strings

inline std::string_view trim_view(std::string_view s) {
    auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    while (!s.empty() && is_space(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && is_space(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline std::string trim(std::string_view s) { return std::string(trim_view(s)); }

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline bool starts_with(std::string_view s, std::string_view prefix) {
    return s.substr(0, prefix.size()) == prefix;
}

inline bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

template <typename Range>
std::string join(const Range& parts, std::string_view sep) {
    std::string out;
    bool first = true;
    for (const auto& p : parts) {
        if (!first) out += sep;
        out += p;
        first = false;
    }
    return out;
}

inline std::vector<std::string> split(std::string_view s, std::string_view sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        auto next = s.find(sep, pos);
        if (next == std::string_view::npos) {
            out.emplace_back(s.substr(pos));
            return out;
        }
        out.emplace_back(s.substr(pos, next - pos));
        pos = next + sep.size();
    }
}

/// Collapses line breaks so a value can sit on one prompt line.
inline std::string single_line(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hashing and encoding (OpenSSL EVP)

inline std::array<unsigned char, 32> sha256(std::string_view data) {
    std::array<unsigned char, 32> digest{};
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr);
    return digest;
}

inline std::string sha256_hex(std::string_view data) {
    static constexpr char kHex[] = "0123456789abcdef";
    auto digest = sha256(data);
    std::string out;
    out.reserve(64);
    for (unsigned char b : digest) {
        out += kHex[b >> 4];
        out += kHex[b & 0x0f];
    }
    return out;
}

/// First 8 bytes of SHA-256, big-endian. Stable across platforms and builds.
inline std::uint64_t stable_hash64(std::string_view data) {
    auto digest = sha256(data);
    std::uint64_t h = 0;
    for (int i = 0; i < 8; ++i) h = (h << 8) | digest[static_cast<std::size_t>(i)];
    return h;
}

inline std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                            reinterpret_cast<const unsigned char*>(bytes.data()),
                            static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic randomness
//
// std::uniform_*_distribution output is implementation-defined, so sampling
// goes through these helpers to keep seeded runs bitwise reproducible.

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n) without modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = 0;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
        }
    }

  private:
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::MissingFile, "cannot open " + path.string(), path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes via a sibling temp file and rename so readers never see a torn file.
inline void write_file_atomic(const fs::path& path, std::string_view contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp" + std::to_string(std::hash<std::string>{}(path.string()) ^
                                   static_cast<std::size_t>(std::random_device{}()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::Io, "cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) fail(ErrorCode::Io, "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline json parse_json_file(const fs::path& path) {
    auto text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        fail(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
    }
}

/// Reads a line-delimited JSON file; blank lines are skipped.
inline std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::MissingFile, "cannot open " + path.string(), path.string());
    std::vector<json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim_view(line).empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            fail(ErrorCode::MalformedRecord,
                 path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline std::string to_jsonl(const std::vector<json>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.dump();
        out += '\n';
    }
    return out;
}

}  // namespace ira
