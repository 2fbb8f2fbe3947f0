// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace procroute {

enum class Family : std::uint8_t { V4, V6 };

constexpr unsigned address_bits(Family f) { return f == Family::V4 ? 32 : 128; }
constexpr unsigned address_bytes(Family f) { return address_bits(f) / 8; }

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

// An IPv4 or IPv6 address. IPv4 occupies the first four bytes of `bytes_`;
// the rest stay zero so that value comparison is family-aware.
class IpAddress {
  public:
    IpAddress() = default;

    static IpAddress v4(std::uint32_t host_order);
    static IpAddress v4(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d);
    static IpAddress v6(const std::array<std::uint8_t, 16>& bytes);
    static IpAddress from_bytes(Family f, std::span<const std::uint8_t> bytes);

    // Throws ParseError.
    static IpAddress parse(std::string_view text);

    [[nodiscard]] Family family() const { return family_; }
    [[nodiscard]] bool is_v4() const { return family_ == Family::V4; }
    [[nodiscard]] unsigned bit_width() const { return address_bits(family_); }

    // Network-order bytes; 4 for v4, 16 for v6.
    [[nodiscard]] std::span<const std::uint8_t> bytes() const {
        return {bytes_.data(), address_bytes(family_)};
    }
    [[nodiscard]] bool bit(unsigned i) const { return (bytes_[i / 8] >> (7 - i % 8)) & 1U; }
    [[nodiscard]] std::uint32_t v4_value() const;

    // 16-byte form; IPv4 addresses are mapped into ::ffff:0:0/96.
    [[nodiscard]] std::array<std::uint8_t, 16> as_v6_mapped() const;

    [[nodiscard]] IpAddress masked(unsigned prefix_len) const;
    [[nodiscard]] std::string to_string() const;

    auto operator<=>(const IpAddress&) const = default;

  private:
    Family family_ = Family::V4;
    std::array<std::uint8_t, 16> bytes_{};
};

std::ostream& operator<<(std::ostream& os, const IpAddress& ip);

// A canonical CIDR block: host bits below the prefix boundary are zero.
class Cidr {
  public:
    Cidr() = default;
    // Throws ParseError when host bits are set or the length is out of range.
    Cidr(IpAddress network, unsigned prefix_len);

    // Accepts "a.b.c.d/n", "x::/n" and bare addresses (full-length prefix).
    static Cidr parse(std::string_view text);

    [[nodiscard]] const IpAddress& network() const { return network_; }
    [[nodiscard]] unsigned prefix_len() const { return prefix_len_; }
    [[nodiscard]] Family family() const { return network_.family(); }

    [[nodiscard]] bool contains(const IpAddress& ip) const;
    [[nodiscard]] bool contains(const Cidr& inner) const;
    [[nodiscard]] bool overlaps(const Cidr& other) const;
    [[nodiscard]] std::string to_string() const;

    auto operator<=>(const Cidr&) const = default;

  private:
    IpAddress network_;
    unsigned prefix_len_ = 0;
};

std::ostream& operator<<(std::ostream& os, const Cidr& c);

} // namespace procroute

template <>
struct std::hash<procroute::IpAddress> {
    std::size_t operator()(const procroute::IpAddress& ip) const noexcept;
};
