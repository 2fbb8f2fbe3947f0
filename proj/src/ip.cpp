// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/ip.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <charconv>

namespace procroute {

IpAddress IpAddress::v4(std::uint32_t host_order) {
    IpAddress ip;
    ip.family_ = Family::V4;
    ip.bytes_[0] = static_cast<std::uint8_t>(host_order >> 24);
    ip.bytes_[1] = static_cast<std::uint8_t>(host_order >> 16);
    ip.bytes_[2] = static_cast<std::uint8_t>(host_order >> 8);
    ip.bytes_[3] = static_cast<std::uint8_t>(host_order);
    return ip;
}

IpAddress IpAddress::v4(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d) {
    return v4((std::uint32_t{a} << 24) | (std::uint32_t{b} << 16) | (std::uint32_t{c} << 8) | d);
}

IpAddress IpAddress::v6(const std::array<std::uint8_t, 16>& bytes) {
    IpAddress ip;
    ip.family_ = Family::V6;
    ip.bytes_ = bytes;
    return ip;
}

IpAddress IpAddress::from_bytes(Family f, std::span<const std::uint8_t> bytes) {
    if (bytes.size() != address_bytes(f)) {
        throw ParseError("address byte length does not match family");
    }
    IpAddress ip;
    ip.family_ = f;
    std::copy(bytes.begin(), bytes.end(), ip.bytes_.begin());
    return ip;
}

IpAddress IpAddress::parse(std::string_view text) {
    const std::string s(text);
    IpAddress ip;
    if (s.find(':') != std::string::npos) {
        if (inet_pton(AF_INET6, s.c_str(), ip.bytes_.data()) != 1) {
            throw ParseError("invalid IPv6 address '" + s + "'");
        }
        ip.family_ = Family::V6;
        return ip;
    }
    if (inet_pton(AF_INET, s.c_str(), ip.bytes_.data()) != 1) {
        throw ParseError("invalid IPv4 address '" + s + "'");
    }
    ip.family_ = Family::V4;
    return ip;
}

std::uint32_t IpAddress::v4_value() const {
    return (std::uint32_t{bytes_[0]} << 24) | (std::uint32_t{bytes_[1]} << 16) |
           (std::uint32_t{bytes_[2]} << 8) | bytes_[3];
}

std::array<std::uint8_t, 16> IpAddress::as_v6_mapped() const {
    if (family_ == Family::V6) {
        return bytes_;
    }
    std::array<std::uint8_t, 16> out{};
    out[10] = 0xff;
    out[11] = 0xff;
    std::copy_n(bytes_.begin(), 4, out.begin() + 12);
    return out;
}

IpAddress IpAddress::masked(unsigned prefix_len) const {
    IpAddress out = *this;
    const unsigned width = bit_width();
    for (unsigned i = prefix_len; i < width; ++i) {
        out.bytes_[i / 8] &= static_cast<std::uint8_t>(~(0x80U >> (i % 8)));
    }
    return out;
}

std::string IpAddress::to_string() const {
    char buf[INET6_ADDRSTRLEN] = {};
    inet_ntop(family_ == Family::V4 ? AF_INET : AF_INET6, bytes_.data(), buf, sizeof buf);
    return buf;
}

std::ostream& operator<<(std::ostream& os, const IpAddress& ip) { return os << ip.to_string(); }

Cidr::Cidr(IpAddress network, unsigned prefix_len) : network_(network), prefix_len_(prefix_len) {
    if (prefix_len > network.bit_width()) {
        throw ParseError("prefix length " + std::to_string(prefix_len) + " out of range for " + network.to_string());
    }
    if (network.masked(prefix_len) != network) {
        throw ParseError("non-canonical prefix " + network.to_string() + "/" + std::to_string(prefix_len) +
                         " (host bits set)");
    }
}

Cidr Cidr::parse(std::string_view text) {
    const auto slash = text.find('/');
    const IpAddress ip = IpAddress::parse(text.substr(0, slash));
    if (slash == std::string_view::npos) {
        return Cidr(ip, ip.bit_width());
    }
    const auto len_text = text.substr(slash + 1);
    unsigned len = 0;
    const auto [ptr, ec] = std::from_chars(len_text.data(), len_text.data() + len_text.size(), len);
    if (ec != std::errc{} || ptr != len_text.data() + len_text.size() || len_text.empty()) {
        throw ParseError("invalid prefix length in '" + std::string(text) + "'");
    }
    return Cidr(ip, len);
}

bool Cidr::contains(const IpAddress& ip) const {
    return ip.family() == family() && ip.masked(prefix_len_) == network_;
}

bool Cidr::contains(const Cidr& inner) const {
    return inner.family() == family() && inner.prefix_len_ >= prefix_len_ && contains(inner.network_);
}

bool Cidr::overlaps(const Cidr& other) const { return contains(other) || other.contains(*this); }

std::string Cidr::to_string() const { return network_.to_string() + "/" + std::to_string(prefix_len_); }

std::ostream& operator<<(std::ostream& os, const Cidr& c) { return os << c.to_string(); }

} // namespace procroute

std::size_t std::hash<procroute::IpAddress>::operator()(const procroute::IpAddress& ip) const noexcept {
    std::size_t h = ip.is_v4() ? 0x9e3779b97f4a7c15ULL : 0x7f4a7c159e3779b9ULL;
    for (const auto b : ip.bytes()) {
        h = (h ^ b) * 0x100000001b3ULL;
    }
    return h;
}
