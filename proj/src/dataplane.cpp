// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/dataplane.hpp"

#include <sstream>

namespace procroute {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

const std::vector<std::uint8_t> no_fixed;

} // namespace

std::string_view to_string(MapId m) {
    switch (m) {
    case MapId::InternalPrefixes: return "internal_prefixes";
    case MapId::CgroupToApp: return "cgroup_to_app";
    case MapId::AppExecHash: return "app_exec_hash";
    case MapId::TaskVerified: return "task_verified";
    case MapId::AppAllow: return "app_allow";
    case MapId::AppCascade: return "app_cascade";
    case MapId::Epoch: return "epoch";
    }
    return "?";
}

MapId MapOp::map() const {
    return std::visit(overloaded{
                          [](const PrefixEntry&) { return MapId::InternalPrefixes; },
                          [](const BindingEntry&) { return MapId::CgroupToApp; },
                          [](const ExecHashEntry&) { return MapId::AppExecHash; },
                          [](const TaskEntry&) { return MapId::TaskVerified; },
                          [](const AllowMapEntry&) { return MapId::AppAllow; },
                          [](const CascadeEntry&) { return MapId::AppCascade; },
                          [](const EpochBump&) { return MapId::Epoch; },
                      },
                      payload);
}

std::string MapOp::describe() const {
    std::ostringstream os;
    os << (kind == Kind::Upsert ? "upsert " : kind == Kind::Delete ? "delete " : "bump ") << to_string(map());
    std::visit(overloaded{
                   [&](const PrefixEntry& e) { os << " " << e.prefix; },
                   [&](const BindingEntry& e) { os << " cgroup=" << e.cgroup_id << " app=" << e.app_index; },
                   [&](const ExecHashEntry& e) { os << " app=" << e.app_index << " sha256=" << to_hex(e.digest).substr(0, 12); },
                   [&](const TaskEntry& e) { os << " tgid=" << e.tgid << " app=" << e.app_index; },
                   [&](const AllowMapEntry& e) {
                       os << " app=" << e.app_index << " " << e.prefix;
                       if (const auto* r = std::get_if<AllowRule>(&e.value)) {
                           os << " " << to_string(r->proto) << " " << r->ports.to_string();
                       } else {
                           os << " cascaded";
                       }
                   },
                   [&](const CascadeEntry& e) {
                       os << " app=" << e.app_index << " " << e.prefix << " " << to_string(e.proto) << " "
                          << e.ports.to_string();
                   },
                   [&](const EpochBump&) {},
               },
               payload);
    return os.str();
}

std::vector<std::uint8_t> app_key(std::uint32_t app_index) {
    std::vector<std::uint8_t> k;
    append_be32(k, app_index);
    return k;
}

DataPlaneState::DataPlaneState()
    : internal_v4_({0, Family::V4}), internal_v6_({0, Family::V6}) {}

void DataPlaneState::apply(const MapOp& op) {
    const bool del = op.kind == MapOp::Kind::Delete;
    std::visit(overloaded{
                   [&](const PrefixEntry& e) {
                       auto& trie = e.prefix.family() == Family::V4 ? internal_v4_ : internal_v6_;
                       const auto key = LpmKey::prefix(no_fixed, e.prefix);
                       if (del) {
                           trie.erase(key);
                       } else {
                           trie.insert(key, Present{});
                       }
                   },
                   [&](const BindingEntry& e) {
                       if (del) {
                           cgroup_to_app_.erase(e.cgroup_id);
                       } else {
                           cgroup_to_app_[e.cgroup_id] = e.app_index;
                       }
                   },
                   [&](const ExecHashEntry& e) {
                       if (del) {
                           app_exec_hash_.erase(e.app_index);
                       } else {
                           app_exec_hash_[e.app_index] = e.digest;
                       }
                   },
                   [&](const TaskEntry& e) {
                       if (del) {
                           task_verified_.erase(e.tgid);
                       } else {
                           task_verified_[e.tgid] = e.app_index;
                       }
                   },
                   [&](const AllowMapEntry& e) {
                       const auto k = app_key(e.app_index);
                       if (del) {
                           app_allow_.erase(k, e.prefix);
                       } else {
                           app_allow_.put(k, e.prefix, e.value);
                       }
                   },
                   [&](const CascadeEntry& e) {
                       const auto k = app_key(e.app_index);
                       if (del) {
                           app_allow_.erase_cascade(k, e.prefix, e.proto);
                       } else {
                           app_allow_.put_cascade(k, e.prefix, e.proto, e.ports);
                       }
                   },
                   [&](const EpochBump&) { ++epoch_; },
               },
               op.payload);
}

bool DataPlaneState::is_internal(const IpAddress& ip) const {
    const auto& trie = ip.is_v4() ? internal_v4_ : internal_v6_;
    return static_cast<bool>(trie.lookup(LpmKey::full(no_fixed, ip)));
}

std::optional<std::uint32_t> DataPlaneState::app_of(std::uint64_t cgroup_id) const {
    const auto it = cgroup_to_app_.find(cgroup_id);
    if (it == cgroup_to_app_.end()) return std::nullopt;
    return it->second;
}

const Digest* DataPlaneState::exec_hash(std::uint32_t app_index) const {
    const auto it = app_exec_hash_.find(app_index);
    return it == app_exec_hash_.end() ? nullptr : &it->second;
}

std::optional<std::uint32_t> DataPlaneState::verified_app(Pid tgid) const {
    const auto it = task_verified_.find(tgid);
    if (it == task_verified_.end()) return std::nullopt;
    return it->second;
}

Verdict DataPlaneState::evaluate(std::uint64_t cgroup_id, Pid tgid, const Destination& dst) const {
    if (!is_internal(dst.ip)) return Verdict::allow(Reason::External);

    const auto app = app_of(cgroup_id);
    if (!app) return Verdict::deny(Reason::NoBinding);

    if (exec_hash(*app) != nullptr && verified_app(tgid) != app) {
        return Verdict::deny(Reason::HashUnverified);
    }

    const auto m = app_allow_.match(app_key(*app), dst);
    switch (m.outcome) {
    case GrantLookup::Outcome::NoPrefix: return Verdict::deny(Reason::NoGrant);
    case GrantLookup::Outcome::PredicateFailed: return Verdict::deny(Reason::PortMismatch);
    case GrantLookup::Outcome::Covered: return Verdict::allow(Reason::GrantMatch);
    }
    return Verdict::deny(Reason::NoGrant);
}

} // namespace procroute
