// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Split architecture: header tagging on the client and the ingress pipeline
// with per-peer grants and a flow cache on the gateway.

#include <cstdint>
#include <list>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "procroute/audit.hpp"
#include "procroute/common.hpp"
#include "procroute/grant_table.hpp"
#include "procroute/policy.hpp"

namespace procroute {

struct TagOverflow : std::runtime_error {
    explicit TagOverflow(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr std::uint32_t kV4MarkLimit = 1U << 16;
inline constexpr std::uint32_t kV6MarkLimit = 1U << 20;

// Inner packet as seen on the gateway's tunnel interface. Only the tag
// fields of the destination's family are meaningful; DF is assumed.
struct SimPacket {
    IpAddress inner_src; // the peer's tunnel address
    std::uint16_t src_port = 0;
    Destination inner_dst;
    std::uint16_t v4_id = 0;
    std::uint8_t v4_tos = 0;
    std::uint32_t v6_flow_label = 0; // 20 bits
    std::uint8_t v6_traffic_class = 0;

    [[nodiscard]] Family family() const { return inner_dst.ip.family(); }
    bool operator==(const SimPacket&) const = default;
};

// SO_MARK for a process: its app_index, or 0 when unbound.
std::uint32_t tag_socket(const Principal* prin);

// Throws TagOverflow when the mark does not fit the family's carrier.
SimPacket encode_tag(SimPacket pkt, std::uint32_t mark, std::uint64_t epoch);

struct Tag {
    std::uint32_t mark = 0;
    std::uint8_t epoch = 0;
    bool operator==(const Tag&) const = default;
};
Tag decode_tag(const SimPacket& pkt);

enum class GatewayAction : std::uint8_t { Pass, Drop };
std::string_view to_string(GatewayAction a);

struct GatewayVerdict {
    GatewayAction action = GatewayAction::Drop;
    Reason reason = Reason::Untagged;
    bool cache_hit = false;

    [[nodiscard]] bool passed() const { return action == GatewayAction::Pass; }
    bool operator==(const GatewayVerdict&) const = default;
};

struct FlowKey {
    IpAddress src;
    IpAddress dst;
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    Transport proto = Transport::Tcp;

    static FlowKey of(const SimPacket& pkt);
    bool operator==(const FlowKey&) const = default;
};

struct FlowKeyHash {
    std::size_t operator()(const FlowKey& k) const noexcept;
};

// LRU map of allowed flows. An entry is valid while now - inserted_at < ttl,
// its epoch equals the current epoch and it was stored for the same app.
class FlowCache {
  public:
    FlowCache(std::size_t capacity, SimTime ttl);

    [[nodiscard]] bool lookup(const FlowKey& key, std::uint32_t app_index, SimTime now, std::uint64_t epoch);
    void insert(const FlowKey& key, std::uint32_t app_index, SimTime now, std::uint64_t epoch);
    void clear();

    [[nodiscard]] std::size_t size() const { return index_.size(); }
    [[nodiscard]] std::size_t capacity() const { return capacity_; }
    [[nodiscard]] std::uint64_t evictions() const { return evictions_; }

  private:
    struct Entry {
        FlowKey key;
        std::uint32_t app_index;
        SimTime inserted_at;
        std::uint64_t epoch;
    };
    using List = std::list<Entry>;

    std::size_t capacity_;
    SimTime ttl_;
    List lru_; // front = most recently used
    std::unordered_map<FlowKey, List::iterator, FlowKeyHash> index_;
    std::uint64_t evictions_ = 0;
};

struct GatewayConfig {
    bool cache_enabled = true;
    std::size_t cache_capacity = 65536;
    SimTime cache_ttl = std::chrono::seconds(5);
    std::set<std::uint16_t> exempt_ports;
};

struct GatewayCounters {
    std::uint64_t packets = 0;
    std::uint64_t passes = 0;
    std::uint64_t drops = 0;
    std::uint64_t cache_hits = 0;
    std::uint64_t cache_misses = 0;
    std::uint64_t lpm_lookups = 0;
    std::uint64_t audit_events = 0;

    [[nodiscard]] double hit_rate() const {
        const auto total = cache_hits + cache_misses;
        return total == 0 ? 0.0 : static_cast<double>(cache_hits) / static_cast<double>(total);
    }
};

class Gateway {
  public:
    explicit Gateway(GatewayConfig cfg = {}, EventBuffer* audit = nullptr);

    // Replaces the internal set and per-peer grants with the policy's.
    void install(const PolicyInstance& policy);

    // Runs the ingress pipeline. On PASS the tag fields are cleared in place.
    GatewayVerdict ingress(SimPacket& pkt, SimTime now);

    void epoch_bump() { ++epoch_; }
    [[nodiscard]] std::uint64_t epoch() const { return epoch_; }

    [[nodiscard]] const GatewayCounters& counters() const { return counters_; }
    [[nodiscard]] const FlowCache& cache() const { return cache_; }
    [[nodiscard]] const GatewayConfig& config() const { return cfg_; }
    [[nodiscard]] bool is_internal(const IpAddress& ip) const;

  private:
    GatewayVerdict drop(const SimPacket& pkt, std::uint32_t mark, Reason reason, SimTime now);
    GatewayVerdict pass(SimPacket& pkt, Reason reason, bool hit);

    GatewayConfig cfg_;
    EventBuffer* audit_;
    std::vector<Cidr> internal_;
    GrantTable allow_{20}; // <peer (16 bytes, v4-mapped), app_index (be32)>
    FlowCache cache_;
    std::uint64_t epoch_ = 0;
    GatewayCounters counters_;
};

// Fixed key part for a peer/app pair.
std::vector<std::uint8_t> gateway_key(const IpAddress& peer, std::uint32_t app_index);

// Line-delimited packet trace records (one JSON object per line).
struct TraceRecord {
    SimTime time{};
    SimPacket packet;
    std::optional<GatewayVerdict> verdict;
};
std::string format_trace(const TraceRecord& rec);
// Throws ParseError on malformed lines.
TraceRecord parse_trace(std::string_view line);

} // namespace procroute
