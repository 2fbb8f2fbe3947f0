// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reference models used as test oracles. They are written directly from the
// definitions, scanning every rule with no tries, no normalization and no
// shared helpers from the library beyond the plain data types.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "procroute/policy.hpp"

namespace oracle {

using namespace procroute;

// Membership by comparing the leading `len` bits one at a time.
inline bool in_prefix(const Cidr& c, const IpAddress& ip) {
    if (c.network().family() != ip.family()) return false;
    const auto net = c.network().bytes();
    const auto addr = ip.bytes();
    for (unsigned i = 0; i < c.prefix_len(); ++i) {
        const unsigned a = (net[i / 8] >> (7 - i % 8)) & 1U;
        const unsigned b = (addr[i / 8] >> (7 - i % 8)) & 1U;
        if (a != b) return false;
    }
    return true;
}

inline bool port_ok(const PortRange& r, std::uint16_t port) {
    if (r.lo == 0) return true;
    return r.lo <= port && port <= r.hi;
}

inline bool proto_ok(ProtoSel s, Transport t) {
    switch (s) {
    case ProtoSel::Any: return true;
    case ProtoSel::Tcp: return t == Transport::Tcp;
    case ProtoSel::Udp: return t == Transport::Udp;
    }
    return false;
}

inline bool grant_covers(const Grant& g, const Destination& d) {
    return in_prefix(g.prefix, d.ip) && proto_ok(g.proto, d.proto) && port_ok(g.ports, d.port);
}

inline bool internal(const std::vector<Cidr>& set, const IpAddress& ip) {
    return std::any_of(set.begin(), set.end(), [&](const Cidr& c) { return in_prefix(c, ip); });
}

inline const std::vector<Grant>* grants_for(const PolicyInstance& p, const Principal& prin) {
    const auto it = p.grants.find(prin.name);
    return it == p.grants.end() ? nullptr : &it->second;
}

// Union semantics: allowed iff some grant covers the destination.
inline Verdict union_decide(const Principal* prin, bool verified, const Destination& d, const PolicyInstance& p) {
    if (!internal(p.internal, d.ip)) return Verdict::allow(Reason::External);
    if (prin == nullptr) return Verdict::deny(Reason::NoBinding);
    if (prin->exec_hash && !verified) return Verdict::deny(Reason::HashUnverified);
    const auto* gs = grants_for(p, *prin);
    if (gs == nullptr) return Verdict::deny(Reason::NoGrant);
    bool prefix_hit = false;
    for (const auto& g : *gs) {
        if (grant_covers(g, d)) return Verdict::allow(Reason::GrantMatch);
        prefix_hit = prefix_hit || in_prefix(g.prefix, d.ip);
    }
    return Verdict::deny(prefix_hit ? Reason::PortMismatch : Reason::NoGrant);
}

// Most-specific semantics: only grants on the longest matching prefix count.
inline Verdict most_specific_decide(const Principal* prin, bool verified, const Destination& d,
                                    const PolicyInstance& p) {
    if (!internal(p.internal, d.ip)) return Verdict::allow(Reason::External);
    if (prin == nullptr) return Verdict::deny(Reason::NoBinding);
    if (prin->exec_hash && !verified) return Verdict::deny(Reason::HashUnverified);
    const auto* gs = grants_for(p, *prin);
    if (gs == nullptr) return Verdict::deny(Reason::NoGrant);
    int best = -1;
    for (const auto& g : *gs) {
        if (in_prefix(g.prefix, d.ip)) best = std::max(best, static_cast<int>(g.prefix.prefix_len()));
    }
    if (best < 0) return Verdict::deny(Reason::NoGrant);
    for (const auto& g : *gs) {
        if (static_cast<int>(g.prefix.prefix_len()) == best && in_prefix(g.prefix, d.ip) &&
            proto_ok(g.proto, d.proto) && port_ok(g.ports, d.port)) {
            return Verdict::allow(Reason::GrantMatch);
        }
    }
    return Verdict::deny(Reason::PortMismatch);
}

// Longest matching prefix by linear scan.
inline std::optional<Cidr> linear_lpm(std::span<const Cidr> prefixes, const IpAddress& ip) {
    std::optional<Cidr> best;
    for (const auto& c : prefixes) {
        if (in_prefix(c, ip) && (!best || c.prefix_len() > best->prefix_len())) best = c;
    }
    return best;
}

// Gateway admission for an internal, correctly tagged, fresh packet.
inline bool gateway_admits(const PolicyInstance& p, const IpAddress& peer, std::uint32_t app, const Destination& d) {
    const auto it = p.gateway_grants.find(PeerApp{peer, app});
    if (it == p.gateway_grants.end()) return false;
    return std::any_of(it->second.begin(), it->second.end(), [&](const Grant& g) { return grant_covers(g, d); });
}

inline IpAddress random_v4(std::mt19937_64& rng) {
    return IpAddress::v4(static_cast<std::uint32_t>(rng()));
}

// A uniformly random address inside `c` (v4 only).
inline IpAddress random_in(std::mt19937_64& rng, const Cidr& c) {
    const unsigned host = 32 - c.prefix_len();
    const std::uint32_t mask = host >= 32 ? 0xffffffffU : ((1U << host) - 1U);
    return IpAddress::v4(c.network().v4_value() | (static_cast<std::uint32_t>(rng()) & mask));
}

} // namespace oracle
