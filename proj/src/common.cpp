// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/common.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <memory>

#include "procroute/ip.hpp"

namespace procroute {

Digest sha256(std::string_view data) {
    Digest out{};
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), out.data(), &len) != 1 || len != out.size()) {
        throw std::runtime_error("sha256 failed");
    }
    return out;
}

std::string to_hex(const Digest& d) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (const auto b : d) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xf]);
    }
    return s;
}

Digest digest_from_hex(std::string_view text) {
    if (text.starts_with("sha256:")) {
        text.remove_prefix(7);
    }
    if (text.size() != 64) {
        throw ParseError("digest must be 64 hex digits");
    }
    Digest d{};
    for (std::size_t i = 0; i < d.size(); ++i) {
        unsigned v = 0;
        const auto [ptr, ec] = std::from_chars(text.data() + 2 * i, text.data() + 2 * i + 2, v, 16);
        if (ec != std::errc{} || ptr != text.data() + 2 * i + 2) {
            throw ParseError("invalid hex digit in digest");
        }
        d[i] = static_cast<std::uint8_t>(v);
    }
    return d;
}

SimTime parse_duration(std::string_view text) {
    std::int64_t value = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr == text.data() || value < 0) {
        throw ParseError("invalid duration '" + std::string(text) + "'");
    }
    const std::string_view unit(ptr, text.data() + text.size() - ptr);
    using namespace std::chrono;
    if (unit == "ns") return nanoseconds(value);
    if (unit == "us") return microseconds(value);
    if (unit == "ms") return milliseconds(value);
    if (unit == "s" || unit.empty()) return seconds(value);
    if (unit == "m") return minutes(value);
    throw ParseError("unknown duration unit in '" + std::string(text) + "'");
}

std::string format_duration(SimTime t) {
    using namespace std::chrono;
    const auto ns = t.count();
    if (ns % 1'000'000'000 == 0) return std::to_string(ns / 1'000'000'000) + "s";
    if (ns % 1'000'000 == 0) return std::to_string(ns / 1'000'000) + "ms";
    if (ns % 1'000 == 0) return std::to_string(ns / 1'000) + "us";
    return std::to_string(ns) + "ns";
}

} // namespace procroute
