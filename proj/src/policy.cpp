// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/policy.hpp"

#include <algorithm>
#include <charconv>
#include <set>
#include <sstream>

namespace procroute {

namespace {

std::uint16_t parse_port(std::string_view text) {
    unsigned v = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty() || v > 65535) {
        throw ParseError("invalid port '" + std::string(text) + "'");
    }
    return static_cast<std::uint16_t>(v);
}

std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
        const std::size_t start = i;
        while (i < s.size() && s[i] != ' ' && s[i] != '\t') ++i;
        if (i > start) out.push_back(s.substr(start, i - start));
    }
    return out;
}

} // namespace

std::string_view to_string(Transport t) { return t == Transport::Tcp ? "tcp" : "udp"; }

std::string_view to_string(ProtoSel p) {
    switch (p) {
    case ProtoSel::Tcp: return "tcp";
    case ProtoSel::Udp: return "udp";
    case ProtoSel::Any: return "*";
    }
    return "?";
}

Transport parse_transport(std::string_view text) {
    if (text == "tcp" || text == "TCP") return Transport::Tcp;
    if (text == "udp" || text == "UDP") return Transport::Udp;
    throw ParseError("invalid transport '" + std::string(text) + "'");
}

ProtoSel parse_proto_sel(std::string_view text) {
    if (text == "*" || text == "any" || text == "ANY") return ProtoSel::Any;
    return parse_transport(text) == Transport::Tcp ? ProtoSel::Tcp : ProtoSel::Udp;
}

PortRange::PortRange(std::uint16_t lo_, std::uint16_t hi_) : lo(lo_), hi(hi_) {
    if (lo != 0 && lo > hi) {
        throw PolicyError("port range " + std::to_string(lo) + "-" + std::to_string(hi) + " has lo > hi");
    }
    if (lo == 0) {
        hi = 0;
    }
}

PortRange PortRange::parse(std::string_view text) {
    if (text == "*") return all();
    const auto dash = text.find('-');
    if (dash == std::string_view::npos) {
        const auto p = parse_port(text);
        return {p, p};
    }
    return {parse_port(text.substr(0, dash)), parse_port(text.substr(dash + 1))};
}

std::string PortRange::to_string() const { return std::to_string(lo) + "-" + std::to_string(hi); }

std::strong_ordering PortRange::operator<=>(const PortRange& o) const {
    if (is_all() || o.is_all()) {
        return o.is_all() <=> is_all();
    }
    if (const auto c = lo <=> o.lo; c != 0) return c;
    return hi <=> o.hi;
}

Grant Grant::parse(std::string_view text) {
    const auto parts = split_ws(text);
    if (parts.empty() || parts.size() > 3) {
        throw ParseError("grant must be 'CIDR [proto] [lo-hi]': '" + std::string(text) + "'");
    }
    Grant g;
    g.prefix = Cidr::parse(parts[0]);
    if (parts.size() >= 2) g.proto = parse_proto_sel(parts[1]);
    if (parts.size() == 3) g.ports = PortRange::parse(parts[2]);
    return g;
}

std::string Grant::to_string() const {
    return prefix.to_string() + " " + std::string(procroute::to_string(proto)) + " " + ports.to_string();
}

Destination Destination::parse(std::string_view text) {
    const auto slash = text.rfind('/');
    if (slash == std::string_view::npos) {
        throw ParseError("destination must be IP:PORT/PROTO: '" + std::string(text) + "'");
    }
    const auto proto = parse_transport(text.substr(slash + 1));
    const auto hostport = text.substr(0, slash);
    const auto colon = hostport.rfind(':');
    if (colon == std::string_view::npos) {
        throw ParseError("destination must be IP:PORT/PROTO: '" + std::string(text) + "'");
    }
    auto host = hostport.substr(0, colon);
    if (host.size() >= 2 && host.front() == '[' && host.back() == ']') {
        host = host.substr(1, host.size() - 2);
    }
    return {IpAddress::parse(host), proto, parse_port(hostport.substr(colon + 1))};
}

std::string Destination::to_string() const {
    const auto host = ip.is_v4() ? ip.to_string() : "[" + ip.to_string() + "]";
    return host + ":" + std::to_string(port) + "/" + std::string(procroute::to_string(proto));
}

std::string_view to_string(NormalizationMode m) { return m == NormalizationMode::Strict ? "strict" : "cascaded"; }

AmbiguousOverlap::AmbiguousOverlap(Cidr a, Cidr b, std::string owner_)
    : PolicyError("ambiguous overlap" + (owner_.empty() ? std::string{} : " for '" + owner_ + "'") + ": " +
                  a.to_string() + " and " + b.to_string() + " carry different constraints"),
      prefix_a(a), prefix_b(b), owner(std::move(owner_)) {}

const Principal* PolicyInstance::find(std::string_view name) const {
    const auto it = std::find_if(principals.begin(), principals.end(), [&](const Principal& p) { return p.name == name; });
    return it == principals.end() ? nullptr : &*it;
}

const Principal* PolicyInstance::find_index(std::uint32_t app_index) const {
    const auto it = std::find_if(principals.begin(), principals.end(),
                                 [&](const Principal& p) { return p.app_index == app_index; });
    return it == principals.end() ? nullptr : &*it;
}

std::span<const Grant> PolicyInstance::grants_of(const Principal& p) const {
    const auto it = grants.find(p.name);
    return it == grants.end() ? std::span<const Grant>{} : std::span<const Grant>(it->second);
}

std::span<const Grant> PolicyInstance::gateway_grants_of(const IpAddress& peer, std::uint32_t app_index) const {
    const auto it = gateway_grants.find(PeerApp{peer, app_index});
    return it == gateway_grants.end() ? std::span<const Grant>{} : std::span<const Grant>(it->second);
}

const Principal* PolicyInstance::bound_principal(std::uint64_t cgroup_id) const {
    const auto it = bindings.find(cgroup_id);
    return it == bindings.end() ? nullptr : find(it->second);
}

std::string_view to_string(Reason r) {
    switch (r) {
    case Reason::External: return "external";
    case Reason::GrantMatch: return "grant_match";
    case Reason::CacheHit: return "cache_hit";
    case Reason::Exempt: return "exempt";
    case Reason::Tagged: return "tagged";
    case Reason::Unmediated: return "unmediated";
    case Reason::NoBinding: return "no_binding";
    case Reason::NoGrant: return "no_grant";
    case Reason::PortMismatch: return "port_mismatch";
    case Reason::HashUnverified: return "hash_unverified";
    case Reason::Untagged: return "untagged";
    case Reason::StaleEpoch: return "stale_epoch";
    }
    return "?";
}

std::string_view to_string(Decision d) { return d == Decision::Allow ? "ALLOW" : "DENY"; }

Reason parse_reason(std::string_view text) {
    for (const auto r : {Reason::External, Reason::GrantMatch, Reason::CacheHit, Reason::Exempt, Reason::Tagged,
                         Reason::Unmediated, Reason::NoBinding,
                         Reason::NoGrant, Reason::PortMismatch, Reason::HashUnverified, Reason::Untagged,
                         Reason::StaleEpoch}) {
        if (to_string(r) == text) return r;
    }
    throw ParseError("unknown reason '" + std::string(text) + "'");
}

std::string Verdict::to_string() const {
    return std::string(procroute::to_string(decision)) + " " + std::string(procroute::to_string(reason));
}

bool covers(const Destination& dst, const Grant& r) {
    return r.prefix.contains(dst.ip) && proto_matches(r.proto, dst.proto) && r.ports.contains(dst.port);
}

bool is_internal(const IpAddress& ip, std::span<const Cidr> internal) {
    return std::any_of(internal.begin(), internal.end(), [&](const Cidr& c) { return c.contains(ip); });
}

namespace {

// Collapses grants that share a prefix into one entry per <prefix, transport>
// slot and re-emits them, folding equal TCP/UDP slots back into '*'.
std::vector<Grant> merge_same_prefix(std::span<const Grant> grants, std::string_view owner) {
    std::map<Cidr, std::map<Transport, PortRange>> slots;
    for (const auto& g : grants) {
        auto& per_prefix = slots[g.prefix];
        for (const auto t : {Transport::Tcp, Transport::Udp}) {
            if (!proto_matches(g.proto, t)) continue;
            const auto [it, inserted] = per_prefix.emplace(t, g.ports);
            if (!inserted && !(it->second == g.ports)) {
                throw AmbiguousOverlap(g.prefix, g.prefix, std::string(owner));
            }
        }
    }
    std::vector<Grant> out;
    for (const auto& [prefix, per_prefix] : slots) {
        const auto tcp = per_prefix.find(Transport::Tcp);
        const auto udp = per_prefix.find(Transport::Udp);
        if (tcp != per_prefix.end() && udp != per_prefix.end() && tcp->second == udp->second) {
            out.push_back({prefix, ProtoSel::Any, tcp->second});
            continue;
        }
        if (tcp != per_prefix.end()) out.push_back({prefix, ProtoSel::Tcp, tcp->second});
        if (udp != per_prefix.end()) out.push_back({prefix, ProtoSel::Udp, udp->second});
    }
    return out;
}

} // namespace

NormalizedGrants normalize(std::span<const Grant> grants, NormalizationMode mode, std::string_view owner) {
    std::vector<Grant> merged = merge_same_prefix(grants, owner);
    NormalizedGrants out;
    if (mode == NormalizationMode::Cascaded) {
        out.grants = std::move(merged);
        out.cascaded = true;
        return out;
    }

    // Shorter prefixes first, so each grant only has to be checked against
    // the already-accepted (enclosing) ones.
    std::stable_sort(merged.begin(), merged.end(),
                     [](const Grant& a, const Grant& b) { return a.prefix.prefix_len() < b.prefix.prefix_len(); });
    for (const auto& g : merged) {
        bool redundant = false;
        for (const auto& k : out.grants) {
            if (!k.prefix.overlaps(g.prefix)) continue;
            if (k.proto != g.proto || !(k.ports == g.ports)) {
                throw AmbiguousOverlap(k.prefix, g.prefix, std::string(owner));
            }
            redundant = true;
            break;
        }
        if (!redundant) out.grants.push_back(g);
    }
    std::sort(out.grants.begin(), out.grants.end());
    return out;
}

PolicyInstance normalize_policy(const PolicyInstance& policy) {
    PolicyInstance out;
    out.mode = policy.mode;

    std::set<std::string> names;
    std::set<std::uint32_t> indices;
    for (const auto& p : policy.principals) {
        if (p.name.empty()) throw PolicyError("principal with empty name");
        if (p.app_index == 0) throw PolicyError("principal '" + p.name + "': app_index 0 is reserved for unbound");
        if (!names.insert(p.name).second) throw PolicyError("duplicate principal '" + p.name + "'");
        if (!indices.insert(p.app_index).second) {
            throw PolicyError("duplicate app_index " + std::to_string(p.app_index));
        }
    }

    bool any_v6 = false;
    bool any_v4_tagged = false;
    for (const auto& [name, gs] : policy.grants) {
        if (!names.contains(name)) throw UnknownPrincipal(name);
        for (const auto& g : gs) any_v6 |= g.prefix.family() == Family::V6;
    }
    for (const auto& [key, gs] : policy.gateway_grants) {
        if (!indices.contains(key.app_index)) {
            throw PolicyError("gateway grant for unknown app_index " + std::to_string(key.app_index));
        }
        for (const auto& g : gs) {
            any_v6 |= g.prefix.family() == Family::V6;
            any_v4_tagged |= g.prefix.family() == Family::V4;
        }
    }
    for (const auto& p : policy.principals) {
        if (any_v6 && p.app_index >= (1U << 20)) {
            throw PolicyError("principal '" + p.name + "': app_index exceeds the 20-bit IPv6 flow label");
        }
        if (any_v4_tagged && p.app_index >= (1U << 16)) {
            throw PolicyError("principal '" + p.name + "': app_index exceeds the 16-bit IPv4 id field");
        }
    }
    for (const auto& [cg, name] : policy.bindings) {
        if (!names.contains(name)) throw UnknownPrincipal(name);
    }

    out.principals = policy.principals;
    std::sort(out.principals.begin(), out.principals.end(),
              [](const Principal& a, const Principal& b) { return a.app_index < b.app_index; });
    out.internal = policy.internal;
    std::sort(out.internal.begin(), out.internal.end());
    out.internal.erase(std::unique(out.internal.begin(), out.internal.end()), out.internal.end());
    out.bindings = policy.bindings;

    for (const auto& [name, gs] : policy.grants) {
        auto n = normalize(gs, policy.mode, name);
        if (!n.grants.empty()) out.grants[name] = std::move(n.grants);
    }
    for (const auto& [key, gs] : policy.gateway_grants) {
        auto n = normalize(gs, policy.mode, key.peer.to_string() + "/" + std::to_string(key.app_index));
        if (!n.grants.empty()) out.gateway_grants[key] = std::move(n.grants);
    }
    return out;
}

GrantMatch match_grants(const Destination& dst, std::span<const Grant> grants) {
    GrantMatch m;
    for (const auto& g : grants) {
        if (!g.prefix.contains(dst.ip)) continue;
        if (!m.prefix || g.prefix.prefix_len() > m.prefix->prefix_len()) {
            m.prefix = g.prefix;
        }
    }
    if (m.prefix) {
        m.covered = std::any_of(grants.begin(), grants.end(),
                                [&](const Grant& g) { return g.prefix == *m.prefix && covers(dst, g); });
    }
    return m;
}

Verdict decide_local(const Principal* prin, bool verified, const Destination& dst, const PolicyInstance& policy) {
    if (!is_internal(dst.ip, policy.internal)) return Verdict::allow(Reason::External);
    if (prin == nullptr) return Verdict::deny(Reason::NoBinding);
    if (prin->exec_hash && !verified) return Verdict::deny(Reason::HashUnverified);
    const auto m = match_grants(dst, policy.grants_of(*prin));
    if (!m.prefix) return Verdict::deny(Reason::NoGrant);
    if (!m.covered) return Verdict::deny(Reason::PortMismatch);
    return Verdict::allow(Reason::GrantMatch);
}

std::vector<Grant> reachable_set(const Principal* prin, const PolicyInstance& policy, const Side& side) {
    if (prin == nullptr) return {};
    const Principal* member = policy.find(prin->name);
    if (member == nullptr || member->app_index != prin->app_index) {
        throw UnknownPrincipal(prin->name);
    }
    std::span<const Grant> src;
    if (const auto* split = std::get_if<SplitSide>(&side)) {
        src = policy.gateway_grants_of(split->peer, member->app_index);
    } else {
        src = policy.grants_of(*member);
    }
    std::vector<Grant> out(src.begin(), src.end());
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace procroute
