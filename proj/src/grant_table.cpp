// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/grant_table.hpp"

namespace procroute {

namespace {

CascadeKey cascade_key(std::span<const std::uint8_t> fixed, const Cidr& prefix, Transport proto) {
    return {{fixed.begin(), fixed.end()}, prefix, proto};
}

// The Cidr that a trie hit corresponds to, recovered from its stored key.
Cidr matched_prefix(const LpmKey& key) {
    const auto bytes = key.bytes();
    const auto addr = IpAddress::from_bytes(key.family(), bytes.subspan(key.fixed_bytes()));
    return {addr, key.match_len() - static_cast<unsigned>(key.fixed_bytes() * 8)};
}

} // namespace

GrantTable::GrantTable(std::size_t fixed_bytes)
    : fixed_bytes_(fixed_bytes), v4_({fixed_bytes, Family::V4}), v6_({fixed_bytes, Family::V6}) {}

void GrantTable::check_fixed(std::span<const std::uint8_t> fixed) const {
    if (fixed.size() != fixed_bytes_) {
        throw GeometryMismatch("fixed field width " + std::to_string(fixed.size()) + " != " +
                               std::to_string(fixed_bytes_));
    }
}

void GrantTable::put(std::span<const std::uint8_t> fixed, const Cidr& prefix, AllowEntry entry) {
    check_fixed(fixed);
    trie_for(prefix.family()).insert(LpmKey::prefix(fixed, prefix), entry);
}

bool GrantTable::erase(std::span<const std::uint8_t> fixed, const Cidr& prefix) {
    check_fixed(fixed);
    return trie_for(prefix.family()).erase(LpmKey::prefix(fixed, prefix));
}

const AllowEntry* GrantTable::find(std::span<const std::uint8_t> fixed, const Cidr& prefix) const {
    check_fixed(fixed);
    return trie(prefix.family()).find(LpmKey::prefix(fixed, prefix));
}

void GrantTable::put_cascade(std::span<const std::uint8_t> fixed, const Cidr& prefix, Transport proto,
                             PortRange ports) {
    check_fixed(fixed);
    cascade_[cascade_key(fixed, prefix, proto)] = ports;
}

bool GrantTable::erase_cascade(std::span<const std::uint8_t> fixed, const Cidr& prefix, Transport proto) {
    check_fixed(fixed);
    return cascade_.erase(cascade_key(fixed, prefix, proto)) > 0;
}

const PortRange* GrantTable::find_cascade(std::span<const std::uint8_t> fixed, const Cidr& prefix,
                                          Transport proto) const {
    check_fixed(fixed);
    const auto it = cascade_.find(cascade_key(fixed, prefix, proto));
    return it == cascade_.end() ? nullptr : &it->second;
}

void GrantTable::load(std::span<const std::uint8_t> fixed, std::span<const Grant> grants, bool cascaded) {
    for (const auto& g : grants) {
        if (!cascaded) {
            put(fixed, g.prefix, AllowRule{g.proto, g.ports});
            continue;
        }
        put(fixed, g.prefix, CascadeMarker{});
        for (const auto t : {Transport::Tcp, Transport::Udp}) {
            if (proto_matches(g.proto, t)) put_cascade(fixed, g.prefix, t, g.ports);
        }
    }
}

GrantLookup GrantTable::match(std::span<const std::uint8_t> fixed, const Destination& dst) const {
    check_fixed(fixed);
    GrantLookup out;
    const auto hit = trie(dst.ip.family()).lookup(LpmKey::full(fixed, dst.ip));
    out.visits = hit.visits;
    out.table_accesses = 1;
    if (!hit) return out;

    out.prefix = matched_prefix(*hit.matched);
    if (const auto* rule = std::get_if<AllowRule>(hit.value)) {
        const bool ok = proto_matches(rule->proto, dst.proto) && rule->ports.contains(dst.port);
        out.outcome = ok ? GrantLookup::Outcome::Covered : GrantLookup::Outcome::PredicateFailed;
        return out;
    }
    out.cascaded = true;
    ++out.table_accesses;
    const auto it = cascade_.find(cascade_key(fixed, *out.prefix, dst.proto));
    const bool ok = it != cascade_.end() && it->second.contains(dst.port);
    out.outcome = ok ? GrantLookup::Outcome::Covered : GrantLookup::Outcome::PredicateFailed;
    return out;
}

std::optional<PortRange> GrantTable::cascaded_lookup(std::span<const std::uint8_t> fixed,
                                                     const Destination& dst) const {
    check_fixed(fixed);
    const auto hit = trie(dst.ip.family()).lookup(LpmKey::full(fixed, dst.ip));
    if (!hit) return std::nullopt;
    const auto it = cascade_.find(cascade_key(fixed, matched_prefix(*hit.matched), dst.proto));
    if (it == cascade_.end()) return std::nullopt;
    return it->second;
}

} // namespace procroute
