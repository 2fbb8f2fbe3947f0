// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Policy core: resources, principals, policy instances and the local
// decision function. Everything here is a pure function of its inputs.

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "procroute/common.hpp"
#include "procroute/ip.hpp"

namespace procroute {

enum class Transport : std::uint8_t { Tcp, Udp };
enum class ProtoSel : std::uint8_t { Tcp, Udp, Any };

std::string_view to_string(Transport t);
std::string_view to_string(ProtoSel p);
Transport parse_transport(std::string_view text);
// "tcp", "udp", "any" or "*".
ProtoSel parse_proto_sel(std::string_view text);

constexpr bool proto_matches(ProtoSel sel, Transport t) {
    return sel == ProtoSel::Any || (sel == ProtoSel::Tcp) == (t == Transport::Tcp);
}

// Inclusive port range. lo == 0 is the all-ports sentinel and hi is ignored.
struct PortRange {
    std::uint16_t lo = 0;
    std::uint16_t hi = 0;

    PortRange() = default;
    // Throws PolicyError when lo > hi on a non-sentinel range.
    PortRange(std::uint16_t lo, std::uint16_t hi);

    static PortRange all() { return {}; }
    static PortRange single(std::uint16_t p) { return {p, p}; }
    // "443", "1000-2000", "0-0", "*".
    static PortRange parse(std::string_view text);

    [[nodiscard]] bool is_all() const { return lo == 0; }
    [[nodiscard]] bool contains(std::uint16_t port) const { return lo == 0 || (lo <= port && port <= hi); }
    [[nodiscard]] std::string to_string() const;

    // The sentinel compares equal regardless of hi.
    bool operator==(const PortRange& o) const { return is_all() ? o.is_all() : (lo == o.lo && hi == o.hi); }
    std::strong_ordering operator<=>(const PortRange& o) const;
};

// The resource tuple <prefix, proto, [lo, hi]>.
struct Grant {
    Cidr prefix;
    ProtoSel proto = ProtoSel::Any;
    PortRange ports;

    // "10.0.0.0/24 tcp 443-443".
    static Grant parse(std::string_view text);
    [[nodiscard]] std::string to_string() const;
    bool operator==(const Grant&) const = default;
    std::strong_ordering operator<=>(const Grant&) const = default;
};

struct Principal {
    std::string name;
    std::uint32_t app_index = 0; // 0 is reserved for "unbound"
    std::optional<Digest> exec_hash;

    bool operator==(const Principal&) const = default;
};

struct Destination {
    IpAddress ip;
    Transport proto = Transport::Tcp;
    std::uint16_t port = 0;

    // "IP:PORT/PROTO"; IPv6 addresses are bracketed: "[fd00::1]:443/tcp".
    static Destination parse(std::string_view text);
    [[nodiscard]] std::string to_string() const;
    auto operator<=>(const Destination&) const = default;
};

enum class NormalizationMode : std::uint8_t { Strict, Cascaded };
std::string_view to_string(NormalizationMode m);

struct PeerApp {
    IpAddress peer;
    std::uint32_t app_index = 0;
    auto operator<=>(const PeerApp&) const = default;
};

struct PolicyError : std::runtime_error {
    explicit PolicyError(const std::string& what) : std::runtime_error(what) {}
};

// Two overlapping prefixes carry different constraints for one principal.
struct AmbiguousOverlap : PolicyError {
    AmbiguousOverlap(Cidr a, Cidr b, std::string owner);
    Cidr prefix_a;
    Cidr prefix_b;
    std::string owner;
};

struct UnknownPrincipal : PolicyError {
    explicit UnknownPrincipal(const std::string& name) : PolicyError("unknown principal '" + name + "'") {}
};

// <internal set, principals, grant map> plus the gateway's per-peer grants
// and the controller's cgroup bindings. This is the unit of atomic replacement.
struct PolicyInstance {
    std::vector<Cidr> internal;
    std::vector<Principal> principals;
    std::map<std::string, std::vector<Grant>> grants;
    std::map<PeerApp, std::vector<Grant>> gateway_grants;
    std::map<std::uint64_t, std::string> bindings; // cgroup id -> principal name
    NormalizationMode mode = NormalizationMode::Strict;

    [[nodiscard]] const Principal* find(std::string_view name) const;
    [[nodiscard]] const Principal* find_index(std::uint32_t app_index) const;
    [[nodiscard]] std::span<const Grant> grants_of(const Principal& p) const;
    [[nodiscard]] std::span<const Grant> gateway_grants_of(const IpAddress& peer, std::uint32_t app_index) const;
    // bind(cgroup); nullptr for an unbound cgroup.
    [[nodiscard]] const Principal* bound_principal(std::uint64_t cgroup_id) const;

    bool operator==(const PolicyInstance&) const = default;
};

enum class Decision : std::uint8_t { Allow, Deny };

enum class Reason : std::uint8_t {
    External,
    GrantMatch,
    CacheHit,
    Exempt,
    Tagged,
    Unmediated,
    NoBinding,
    NoGrant,
    PortMismatch,
    HashUnverified,
    Untagged,
    StaleEpoch,
};

std::string_view to_string(Reason r);
std::string_view to_string(Decision d);
Reason parse_reason(std::string_view text);

struct Verdict {
    Decision decision = Decision::Deny;
    Reason reason = Reason::NoBinding;

    static constexpr Verdict allow(Reason r) { return {Decision::Allow, r}; }
    static constexpr Verdict deny(Reason r) { return {Decision::Deny, r}; }
    [[nodiscard]] constexpr bool allowed() const { return decision == Decision::Allow; }
    [[nodiscard]] std::string to_string() const;
    bool operator==(const Verdict&) const = default;
};

// Reasons that may accompany an ALLOW.
constexpr bool is_allow_reason(Reason r) {
    return r == Reason::External || r == Reason::GrantMatch || r == Reason::CacheHit || r == Reason::Exempt ||
           r == Reason::Tagged || r == Reason::Unmediated;
}

bool covers(const Destination& dst, const Grant& r);
bool is_internal(const IpAddress& ip, std::span<const Cidr> internal);

struct NormalizedGrants {
    std::vector<Grant> grants; // sorted
    bool cascaded = false;
};

// Strict: merges duplicates and nested prefixes with identical constraints and
// throws AmbiguousOverlap for any other overlap, so the result is
// destination-disjoint. Cascaded: merges exact duplicates only and rejects
// conflicting <prefix, proto> slots; nested prefixes resolve most-specific-first.
NormalizedGrants normalize(std::span<const Grant> grants, NormalizationMode mode, std::string_view owner = {});

// Validates principal/binding/gateway invariants and normalizes every grant
// set. Throws PolicyError (or AmbiguousOverlap).
PolicyInstance normalize_policy(const PolicyInstance& policy);

// The grant whose prefix is the longest one containing dst.ip, if any, and
// whether a grant under that prefix covers dst. On a destination-disjoint set
// this is the same as "exists r covering dst".
struct GrantMatch {
    std::optional<Cidr> prefix;
    bool covered = false;
};
GrantMatch match_grants(const Destination& dst, std::span<const Grant> grants);

// Total local decision function. `prin` is nullptr for an unbound process;
// `verified` means the process holds a current exec-hash verification for prin.
Verdict decide_local(const Principal* prin, bool verified, const Destination& dst, const PolicyInstance& policy);

struct LocalSide {};
struct SplitSide {
    IpAddress peer;
};
using Side = std::variant<LocalSide, SplitSide>;

// Coverage of prin's grants on the given side; empty for nullptr. Throws
// UnknownPrincipal when prin is not a member of the policy.
std::vector<Grant> reachable_set(const Principal* prin, const PolicyInstance& policy, const Side& side);

} // namespace procroute
