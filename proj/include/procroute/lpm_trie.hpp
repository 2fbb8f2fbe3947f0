// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Longest-prefix-match trie over composite keys shaped like a BPF LPM map
// key: a run of fixed-width header fields that must match exactly, followed by
// an address matched up to a prefix length.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "procroute/ip.hpp"

namespace procroute {

struct GeometryMismatch : std::invalid_argument {
    explicit GeometryMismatch(const std::string& what) : std::invalid_argument(what) {}
};

struct KeyGeometry {
    std::size_t fixed_bytes = 0;
    Family family = Family::V4;

    [[nodiscard]] unsigned total_bits() const {
        return static_cast<unsigned>(fixed_bytes * 8) + address_bits(family);
    }
    bool operator==(const KeyGeometry&) const = default;
};

// Fixed fields are serialized big-endian in key order.
class LpmKey {
  public:
    LpmKey() = default;

    // Stored-entry key: fixed fields match exactly, then prefix.prefix_len() bits.
    static LpmKey prefix(std::span<const std::uint8_t> fixed, const Cidr& prefix);
    // Full-length lookup key.
    static LpmKey full(std::span<const std::uint8_t> fixed, const IpAddress& ip);

    [[nodiscard]] std::span<const std::uint8_t> bytes() const { return bytes_; }
    [[nodiscard]] unsigned match_len() const { return match_len_; }
    [[nodiscard]] std::size_t fixed_bytes() const { return fixed_bytes_; }
    [[nodiscard]] Family family() const { return family_; }
    [[nodiscard]] KeyGeometry geometry() const { return {fixed_bytes_, family_}; }
    [[nodiscard]] bool bit(unsigned i) const { return (bytes_[i / 8] >> (7 - i % 8)) & 1U; }

    bool operator==(const LpmKey&) const = default;

  private:
    std::vector<std::uint8_t> bytes_;
    unsigned match_len_ = 0;
    std::size_t fixed_bytes_ = 0;
    Family family_ = Family::V4;
};

inline LpmKey LpmKey::prefix(std::span<const std::uint8_t> fixed, const Cidr& prefix) {
    LpmKey k;
    k.family_ = prefix.family();
    k.fixed_bytes_ = fixed.size();
    k.bytes_.assign(fixed.begin(), fixed.end());
    const auto addr = prefix.network().bytes();
    k.bytes_.insert(k.bytes_.end(), addr.begin(), addr.end());
    k.match_len_ = static_cast<unsigned>(fixed.size() * 8) + prefix.prefix_len();
    return k;
}

inline LpmKey LpmKey::full(std::span<const std::uint8_t> fixed, const IpAddress& ip) {
    return prefix(fixed, Cidr(ip, ip.bit_width()));
}

// Big-endian helpers for building fixed fields.
inline void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

template <typename Value>
struct LpmLookup {
    const Value* value = nullptr; // nullptr on a miss
    unsigned match_len = 0;
    unsigned visits = 0; // trie nodes touched, including the root
    std::optional<LpmKey> matched; // stored key of the hit

    explicit operator bool() const { return value != nullptr; }
};

// Uncompressed binary trie. A lookup touches at most total_bits() + 1 nodes,
// independent of how many entries are stored.
//
// Not internally synchronized: the simulator serializes writers and readers,
// and each insert/erase completes before the next lookup starts.
template <typename Value>
class LpmTrie {
  public:
    explicit LpmTrie(KeyGeometry geometry = {}) : geometry_(geometry), nodes_(1) {}

    [[nodiscard]] const KeyGeometry& geometry() const { return geometry_; }
    [[nodiscard]] std::size_t size() const { return size_; }
    [[nodiscard]] bool empty() const { return size_ == 0; }
    [[nodiscard]] unsigned max_visits() const { return geometry_.total_bits() + 1; }

    // Inserts or atomically replaces the entry stored under `key`.
    void insert(const LpmKey& key, Value value) {
        check_stored(key);
        std::int32_t node = 0;
        for (unsigned i = 0; i < key.match_len(); ++i) {
            const unsigned b = key.bit(i);
            if (nodes_[node].child[b] < 0) {
                nodes_[node].child[b] = static_cast<std::int32_t>(nodes_.size());
                nodes_.emplace_back();
            }
            node = nodes_[node].child[b];
        }
        if (!nodes_[node].value) ++size_;
        nodes_[node].value = std::move(value);
    }

    bool erase(const LpmKey& key) {
        check_stored(key);
        const std::int32_t node = find_exact(key);
        if (node < 0 || !nodes_[node].value) return false;
        nodes_[node].value.reset();
        --size_;
        return true;
    }

    [[nodiscard]] const Value* find(const LpmKey& key) const {
        check_stored(key);
        const std::int32_t node = find_exact(key);
        return node < 0 || !nodes_[node].value ? nullptr : &*nodes_[node].value;
    }

    [[nodiscard]] LpmLookup<Value> lookup(const LpmKey& full_key) const {
        if (full_key.geometry() != geometry_ || full_key.match_len() != geometry_.total_bits()) {
            throw GeometryMismatch("lookup key does not have the trie's full-length geometry");
        }
        LpmLookup<Value> result;
        std::int32_t node = 0;
        unsigned depth = 0;
        std::int32_t best = -1;
        unsigned best_depth = 0;
        while (true) {
            ++result.visits;
            // Entries shorter than the fixed fields cannot exist, so the
            // fixed part behaves as an exact match.
            if (nodes_[node].value) {
                best = node;
                best_depth = depth;
            }
            if (depth == full_key.match_len()) break;
            const std::int32_t next = nodes_[node].child[full_key.bit(depth)];
            if (next < 0) break;
            node = next;
            ++depth;
        }
        if (best >= 0) {
            result.value = &*nodes_[best].value;
            result.match_len = best_depth;
            result.matched = truncate(full_key, best_depth);
        }
        return result;
    }

    // Visits every stored entry as (key, value).
    template <typename F>
    void for_each(F&& f) const {
        std::vector<std::uint8_t> path((geometry_.total_bits() + 7) / 8, 0);
        walk(0, 0, path, f);
    }

  private:
    struct Node {
        std::array<std::int32_t, 2> child{-1, -1};
        std::optional<Value> value;
    };

    void check_stored(const LpmKey& key) const {
        if (key.geometry() != geometry_) {
            throw GeometryMismatch("key geometry does not match the trie");
        }
        if (key.match_len() < key.fixed_bytes() * 8 || key.match_len() > geometry_.total_bits()) {
            throw GeometryMismatch("stored key must cover every fixed field and fit the key width");
        }
    }

    std::int32_t find_exact(const LpmKey& key) const {
        std::int32_t node = 0;
        for (unsigned i = 0; i < key.match_len() && node >= 0; ++i) {
            node = nodes_[node].child[key.bit(i)];
        }
        return node;
    }

    LpmKey truncate(const LpmKey& full_key, unsigned len) const {
        const auto bytes = full_key.bytes();
        const auto fixed = bytes.first(geometry_.fixed_bytes);
        const auto addr = IpAddress::from_bytes(geometry_.family, bytes.subspan(geometry_.fixed_bytes));
        const unsigned plen = len - static_cast<unsigned>(geometry_.fixed_bytes * 8);
        return LpmKey::prefix(fixed, Cidr(addr.masked(plen), plen));
    }

    template <typename F>
    void walk(std::int32_t node, unsigned depth, std::vector<std::uint8_t>& path, F& f) const {
        if (nodes_[node].value) {
            const auto fixed = std::span<const std::uint8_t>(path).first(geometry_.fixed_bytes);
            const auto addr = IpAddress::from_bytes(
                geometry_.family, std::span<const std::uint8_t>(path).subspan(geometry_.fixed_bytes));
            const unsigned plen = depth - static_cast<unsigned>(geometry_.fixed_bytes * 8);
            f(LpmKey::prefix(fixed, Cidr(addr, plen)), *nodes_[node].value);
        }
        for (unsigned b = 0; b < 2; ++b) {
            const std::int32_t c = nodes_[node].child[b];
            if (c < 0) continue;
            const auto mask = static_cast<std::uint8_t>(0x80U >> (depth % 8));
            if (b) path[depth / 8] |= mask;
            walk(c, depth + 1, path, f);
            path[depth / 8] &= static_cast<std::uint8_t>(~mask);
        }
    }

    KeyGeometry geometry_;
    std::vector<Node> nodes_;
    std::size_t size_ = 0;
};

} // namespace procroute
