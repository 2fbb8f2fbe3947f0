// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/gateway.hpp"

#include "json.hpp"

namespace procroute {

std::uint32_t tag_socket(const Principal* prin) { return prin == nullptr ? 0 : prin->app_index; }

SimPacket encode_tag(SimPacket pkt, std::uint32_t mark, std::uint64_t epoch) {
    const auto tos = static_cast<std::uint8_t>(epoch % 256);
    if (pkt.family() == Family::V4) {
        if (mark >= kV4MarkLimit) throw TagOverflow("mark " + std::to_string(mark) + " exceeds the 16-bit IPv4 id");
        pkt.v4_id = static_cast<std::uint16_t>(mark);
        pkt.v4_tos = tos;
    } else {
        if (mark >= kV6MarkLimit) throw TagOverflow("mark " + std::to_string(mark) + " exceeds the 20-bit flow label");
        pkt.v6_flow_label = mark;
        pkt.v6_traffic_class = tos;
    }
    return pkt;
}

Tag decode_tag(const SimPacket& pkt) {
    if (pkt.family() == Family::V4) return {pkt.v4_id, pkt.v4_tos};
    return {pkt.v6_flow_label & (kV6MarkLimit - 1), pkt.v6_traffic_class};
}

std::string_view to_string(GatewayAction a) { return a == GatewayAction::Pass ? "PASS" : "DROP"; }

FlowKey FlowKey::of(const SimPacket& pkt) {
    return {pkt.inner_src, pkt.inner_dst.ip, pkt.src_port, pkt.inner_dst.port, pkt.inner_dst.proto};
}

std::size_t FlowKeyHash::operator()(const FlowKey& k) const noexcept {
    std::size_t h = std::hash<IpAddress>{}(k.src);
    const auto mix = [&h](std::size_t v) { h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2); };
    mix(std::hash<IpAddress>{}(k.dst));
    mix((std::size_t{k.src_port} << 17) | (std::size_t{k.dst_port} << 1) | static_cast<std::size_t>(k.proto));
    return h;
}

FlowCache::FlowCache(std::size_t capacity, SimTime ttl) : capacity_(capacity), ttl_(ttl) {
    if (capacity == 0) throw std::invalid_argument("flow cache capacity must be positive");
    if (ttl <= SimTime{0}) throw std::invalid_argument("flow cache ttl must be positive");
}

bool FlowCache::lookup(const FlowKey& key, std::uint32_t app_index, SimTime now, std::uint64_t epoch) {
    const auto it = index_.find(key);
    if (it == index_.end()) return false;
    const Entry& e = *it->second;
    if (now - e.inserted_at >= ttl_ || e.epoch != epoch || e.app_index != app_index) return false;
    lru_.splice(lru_.begin(), lru_, it->second);
    return true;
}

void FlowCache::insert(const FlowKey& key, std::uint32_t app_index, SimTime now, std::uint64_t epoch) {
    if (const auto it = index_.find(key); it != index_.end()) {
        *it->second = Entry{key, app_index, now, epoch};
        lru_.splice(lru_.begin(), lru_, it->second);
        return;
    }
    if (index_.size() >= capacity_) {
        index_.erase(lru_.back().key);
        lru_.pop_back();
        ++evictions_;
    }
    lru_.push_front(Entry{key, app_index, now, epoch});
    index_[key] = lru_.begin();
}

void FlowCache::clear() {
    lru_.clear();
    index_.clear();
}

std::vector<std::uint8_t> gateway_key(const IpAddress& peer, std::uint32_t app_index) {
    const auto mapped = peer.as_v6_mapped();
    std::vector<std::uint8_t> k(mapped.begin(), mapped.end());
    append_be32(k, app_index);
    return k;
}

Gateway::Gateway(GatewayConfig cfg, EventBuffer* audit)
    : cfg_(std::move(cfg)), audit_(audit), cache_(cfg_.cache_capacity, cfg_.cache_ttl) {}

void Gateway::install(const PolicyInstance& policy) {
    internal_ = policy.internal;
    allow_ = GrantTable(20);
    const bool cascaded = policy.mode == NormalizationMode::Cascaded;
    for (const auto& [key, grants] : policy.gateway_grants) {
        allow_.load(gateway_key(key.peer, key.app_index), grants, cascaded);
    }
}

bool Gateway::is_internal(const IpAddress& ip) const { return procroute::is_internal(ip, internal_); }

GatewayVerdict Gateway::drop(const SimPacket& pkt, std::uint32_t mark, Reason reason, SimTime now) {
    ++counters_.drops;
    if (audit_ != nullptr) {
        ++counters_.audit_events;
        audit_->emit(AuditEvent{AuditKind::GatewayDrop, 0, "", 0, mark, pkt.inner_dst.ip, pkt.inner_dst.port,
                                pkt.inner_dst.proto, now, reason});
    }
    return {GatewayAction::Drop, reason, false};
}

GatewayVerdict Gateway::pass(SimPacket& pkt, Reason reason, bool hit) {
    ++counters_.passes;
    pkt.v4_id = 0;
    pkt.v4_tos = 0;
    pkt.v6_flow_label = 0;
    pkt.v6_traffic_class = 0;
    return {GatewayAction::Pass, reason, hit};
}

GatewayVerdict Gateway::ingress(SimPacket& pkt, SimTime now) {
    ++counters_.packets;
    if (cfg_.exempt_ports.count(pkt.inner_dst.port) > 0) return pass(pkt, Reason::Exempt, false);

    const Tag tag = decode_tag(pkt);
    if (tag.mark == 0) return drop(pkt, 0, Reason::Untagged, now);
    if (!is_internal(pkt.inner_dst.ip)) return pass(pkt, Reason::External, false);
    if (tag.epoch != static_cast<std::uint8_t>(epoch_ % 256)) return drop(pkt, tag.mark, Reason::StaleEpoch, now);

    const FlowKey key = FlowKey::of(pkt);
    if (cfg_.cache_enabled) {
        if (cache_.lookup(key, tag.mark, now, epoch_)) {
            ++counters_.cache_hits;
            return pass(pkt, Reason::CacheHit, true);
        }
        ++counters_.cache_misses;
    }

    ++counters_.lpm_lookups;
    const auto m = allow_.match(gateway_key(pkt.inner_src, tag.mark), pkt.inner_dst);
    switch (m.outcome) {
    case GrantLookup::Outcome::NoPrefix: return drop(pkt, tag.mark, Reason::NoGrant, now);
    case GrantLookup::Outcome::PredicateFailed: return drop(pkt, tag.mark, Reason::PortMismatch, now);
    case GrantLookup::Outcome::Covered: break;
    }
    if (cfg_.cache_enabled) cache_.insert(key, tag.mark, now, epoch_);
    return pass(pkt, Reason::GrantMatch, false);
}

namespace {

using ordered_json = nlohmann::ordered_json;

template <class T>
T field(const ordered_json& j, const char* name) {
    if (!j.contains(name)) throw ParseError(std::string("trace line missing field '") + name + "'");
    try {
        return j.at(name).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError(std::string("trace field '") + name + "' has the wrong type");
    }
}

} // namespace

std::string format_trace(const TraceRecord& rec) {
    const SimPacket& p = rec.packet;
    ordered_json j;
    j["time"] = rec.time.count();
    j["family"] = p.family() == Family::V4 ? "v4" : "v6";
    j["src"] = p.inner_src.to_string();
    j["src_port"] = p.src_port;
    j["dst"] = p.inner_dst.ip.to_string();
    j["dst_port"] = p.inner_dst.port;
    j["proto"] = to_string(p.inner_dst.proto);
    if (p.family() == Family::V4) {
        j["id"] = p.v4_id;
        j["tos"] = p.v4_tos;
    } else {
        j["flow_label"] = p.v6_flow_label;
        j["traffic_class"] = p.v6_traffic_class;
    }
    if (rec.verdict) {
        j["verdict"] = to_string(rec.verdict->action);
        j["reason"] = to_string(rec.verdict->reason);
        j["cache_hit"] = rec.verdict->cache_hit;
    }
    return j.dump();
}

TraceRecord parse_trace(std::string_view line) {
    ordered_json j;
    try {
        j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("trace line is not JSON: ") + ex.what());
    }
    TraceRecord rec;
    if (j.contains("time")) rec.time = SimTime(field<std::int64_t>(j, "time"));
    SimPacket& p = rec.packet;
    p.inner_src = IpAddress::parse(field<std::string>(j, "src"));
    p.src_port = field<std::uint16_t>(j, "src_port");
    p.inner_dst.ip = IpAddress::parse(field<std::string>(j, "dst"));
    p.inner_dst.port = field<std::uint16_t>(j, "dst_port");
    p.inner_dst.proto = parse_transport(field<std::string>(j, "proto"));
    const auto family = field<std::string>(j, "family");
    if (family != (p.family() == Family::V4 ? "v4" : "v6")) throw ParseError("trace family does not match dst");
    if (p.family() == Family::V4) {
        p.v4_id = field<std::uint16_t>(j, "id");
        p.v4_tos = field<std::uint8_t>(j, "tos");
    } else {
        p.v6_flow_label = field<std::uint32_t>(j, "flow_label");
        if (p.v6_flow_label >= kV6MarkLimit) throw ParseError("flow label exceeds 20 bits");
        p.v6_traffic_class = field<std::uint8_t>(j, "traffic_class");
    }
    if (j.contains("verdict")) {
        GatewayVerdict v;
        const auto action = field<std::string>(j, "verdict");
        if (action != "PASS" && action != "DROP") throw ParseError("bad verdict '" + action + "'");
        v.action = action == "PASS" ? GatewayAction::Pass : GatewayAction::Drop;
        v.reason = parse_reason(field<std::string>(j, "reason"));
        v.cache_hit = field<bool>(j, "cache_hit");
        rec.verdict = v;
    }
    return rec;
}

} // namespace procroute
