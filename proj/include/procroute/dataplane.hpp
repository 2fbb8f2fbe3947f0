// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Endpoint enforcement state laid out like the BPF maps the hooks consult,
// and the staged decision pipeline that reads it.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "procroute/grant_table.hpp"
#include "procroute/lpm_trie.hpp"
#include "procroute/policy.hpp"

namespace procroute {

using Pid = std::uint32_t;

enum class MapId : std::uint8_t {
    InternalPrefixes,
    CgroupToApp,
    AppExecHash,
    TaskVerified,
    AppAllow,
    AppCascade,
    Epoch,
};

std::string_view to_string(MapId m);

// Maps whose missing entry makes the internal path deny.
constexpr bool is_deny_biased(MapId m) {
    return m == MapId::CgroupToApp || m == MapId::TaskVerified || m == MapId::AppAllow || m == MapId::AppCascade;
}

struct PrefixEntry {
    Cidr prefix;
    bool operator==(const PrefixEntry&) const = default;
};
struct BindingEntry {
    std::uint64_t cgroup_id = 0;
    std::uint32_t app_index = 0;
    bool operator==(const BindingEntry&) const = default;
};
struct ExecHashEntry {
    std::uint32_t app_index = 0;
    Digest digest{};
    bool operator==(const ExecHashEntry&) const = default;
};
struct TaskEntry {
    Pid tgid = 0;
    std::uint32_t app_index = 0;
    bool operator==(const TaskEntry&) const = default;
};
struct AllowMapEntry {
    std::uint32_t app_index = 0;
    Cidr prefix;
    AllowEntry value;
    bool operator==(const AllowMapEntry&) const = default;
};
struct CascadeEntry {
    std::uint32_t app_index = 0;
    Cidr prefix;
    Transport proto = Transport::Tcp;
    PortRange ports;
    bool operator==(const CascadeEntry&) const = default;
};
struct EpochBump {
    bool operator==(const EpochBump&) const = default;
};

using OpPayload =
    std::variant<PrefixEntry, BindingEntry, ExecHashEntry, TaskEntry, AllowMapEntry, CascadeEntry, EpochBump>;

// One atomic map operation (a single update_elem / delete_elem call).
struct MapOp {
    enum class Kind : std::uint8_t { Upsert, Delete, Bump };
    Kind kind = Kind::Upsert;
    OpPayload payload;

    [[nodiscard]] MapId map() const;
    [[nodiscard]] std::string describe() const;
    bool operator==(const MapOp&) const = default;
};

// Fixed field of an app_allow key: app_index as 32-bit big-endian.
std::vector<std::uint8_t> app_key(std::uint32_t app_index);

class DataPlaneState {
  public:
    DataPlaneState();

    void apply(const MapOp& op);

    // The staged pipeline: internal-prefix LPM, principal resolution,
    // exec-hash gate, per-app LPM, port/protocol predicate.
    [[nodiscard]] Verdict evaluate(std::uint64_t cgroup_id, Pid tgid, const Destination& dst) const;

    [[nodiscard]] bool is_internal(const IpAddress& ip) const;
    [[nodiscard]] std::optional<std::uint32_t> app_of(std::uint64_t cgroup_id) const;
    [[nodiscard]] const Digest* exec_hash(std::uint32_t app_index) const;
    [[nodiscard]] std::optional<std::uint32_t> verified_app(Pid tgid) const;
    [[nodiscard]] std::uint64_t epoch() const { return epoch_; }

    void set_task_verified(Pid tgid, std::uint32_t app_index) { task_verified_[tgid] = app_index; }
    void clear_task_verified(Pid tgid) { task_verified_.erase(tgid); }

    [[nodiscard]] const GrantTable& app_allow() const { return app_allow_; }
    [[nodiscard]] std::size_t internal_prefix_count() const { return internal_v4_.size() + internal_v6_.size(); }
    [[nodiscard]] std::size_t binding_count() const { return cgroup_to_app_.size(); }

  private:
    struct Present {};
    LpmTrie<Present> internal_v4_;
    LpmTrie<Present> internal_v6_;
    std::unordered_map<std::uint64_t, std::uint32_t> cgroup_to_app_;
    std::map<std::uint32_t, Digest> app_exec_hash_;
    std::unordered_map<Pid, std::uint32_t> task_verified_;
    GrantTable app_allow_{4};
    std::uint64_t epoch_ = 0;
};

} // namespace procroute
