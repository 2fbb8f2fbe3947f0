// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/update.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <tuple>

namespace procroute {

std::string_view to_string(UpdateModel m) {
    switch (m) {
    case UpdateModel::FailClosed: return "fail-closed";
    case UpdateModel::FlushReload: return "flush-reload";
    case UpdateModel::Reversed: return "reversed";
    }
    return "?";
}

UpdateModel parse_update_model(std::string_view text) {
    for (const auto m : {UpdateModel::FailClosed, UpdateModel::FlushReload, UpdateModel::Reversed}) {
        if (to_string(m) == text) return m;
    }
    throw ParseError("unknown update model '" + std::string(text) + "'");
}

std::string_view to_string(Phase p) {
    switch (p) {
    case Phase::InternalInsert: return "internal-insert";
    case Phase::HashUpsert: return "hash-upsert";
    case Phase::MarkerInsert: return "marker-insert";
    case Phase::RestrictDelete: return "restrict-delete";
    case Phase::HashDelete: return "hash-delete";
    case Phase::RestrictInsert: return "restrict-insert";
    case Phase::MarkerDelete: return "marker-delete";
    case Phase::InternalDelete: return "internal-delete";
    case Phase::Flush: return "flush";
    case Phase::Reload: return "reload";
    case Phase::EpochBump: return "epoch-bump";
    }
    return "?";
}

std::vector<std::pair<std::size_t, std::size_t>> UpdatePlan::phase_ranges() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t begin = 0;
    for (std::size_t i = 1; i <= ops.size(); ++i) {
        if (i == ops.size() || phase[i] != phase[begin]) {
            out.emplace_back(begin, i);
            begin = i;
        }
    }
    return out;
}

namespace {

using AllowKey = std::pair<std::uint32_t, Cidr>;
using SlotKey = std::tuple<std::uint32_t, Cidr, Transport>;

// Every map entry a policy instance installs.
struct Entries {
    std::set<Cidr> internal;
    std::map<std::uint64_t, std::uint32_t> bindings;
    std::map<std::uint32_t, Digest> hashes;
    std::map<AllowKey, AllowEntry> allow;
    std::map<SlotKey, PortRange> slots;
};

Entries entries_of(const PolicyInstance& p) {
    Entries e;
    e.internal.insert(p.internal.begin(), p.internal.end());
    for (const auto& [cg, name] : p.bindings) {
        const Principal* prin = p.find(name);
        if (prin == nullptr) throw UnknownPrincipal(name);
        e.bindings[cg] = prin->app_index;
    }
    for (const auto& prin : p.principals) {
        if (prin.exec_hash) e.hashes[prin.app_index] = *prin.exec_hash;
        for (const auto& g : p.grants_of(prin)) {
            if (p.mode == NormalizationMode::Strict) {
                e.allow[{prin.app_index, g.prefix}] = AllowRule{g.proto, g.ports};
                continue;
            }
            e.allow[{prin.app_index, g.prefix}] = CascadeMarker{};
            for (const auto t : {Transport::Tcp, Transport::Udp}) {
                if (proto_matches(g.proto, t)) e.slots[{prin.app_index, g.prefix, t}] = g.ports;
            }
        }
    }
    return e;
}

MapOp upsert(OpPayload p) { return {MapOp::Kind::Upsert, std::move(p)}; }
MapOp erase(OpPayload p) { return {MapOp::Kind::Delete, std::move(p)}; }

bool is_marker(const AllowEntry& e) { return std::holds_alternative<CascadeMarker>(e); }

int rank(Phase p, UpdateModel model) {
    if (model == UpdateModel::Reversed) {
        if (p == Phase::RestrictInsert) return static_cast<int>(Phase::RestrictDelete);
        if (p == Phase::RestrictDelete) return static_cast<int>(Phase::RestrictDelete) + 1;
        if (p == Phase::HashDelete) return static_cast<int>(Phase::RestrictInsert);
    }
    return static_cast<int>(p);
}

class PlanBuilder {
  public:
    void add(Phase ph, MapOp op) { staged_.push_back({ph, std::move(op)}); }

    UpdatePlan finish(UpdateModel model, bool shrinks) {
        std::stable_sort(staged_.begin(), staged_.end(), [&](const auto& a, const auto& b) {
            return rank(a.first, model) < rank(b.first, model);
        });
        UpdatePlan plan;
        plan.model = model;
        for (auto& [ph, op] : staged_) {
            plan.phase.push_back(ph);
            plan.ops.push_back(std::move(op));
        }
        if (shrinks) {
            plan.bumps_epoch = true;
            plan.phase.push_back(Phase::EpochBump);
            plan.ops.push_back({MapOp::Kind::Bump, EpochBump{}});
        }
        return plan;
    }

  private:
    std::vector<std::pair<Phase, MapOp>> staged_;
};

// Walks two sorted maps and reports removed, added and changed keys.
template <class Map, class OnRemoved, class OnAdded, class OnChanged>
void diff(const Map& a, const Map& b, OnRemoved removed, OnAdded added, OnChanged changed) {
    for (const auto& [k, v] : a) {
        const auto it = b.find(k);
        if (it == b.end()) {
            removed(k, v);
        } else if (!(it->second == v)) {
            changed(k, v, it->second);
        }
    }
    for (const auto& [k, v] : b) {
        if (a.find(k) == a.end()) added(k, v);
    }
}

UpdatePlan plan_flush_reload(const Entries& a, const Entries& b) {
    PlanBuilder pb;
    for (const auto& c : a.internal) pb.add(Phase::Flush, erase(PrefixEntry{c}));
    for (const auto& [cg, app] : a.bindings) pb.add(Phase::Flush, erase(BindingEntry{cg, app}));
    for (const auto& [app, d] : a.hashes) pb.add(Phase::Flush, erase(ExecHashEntry{app, d}));
    for (const auto& [k, v] : a.allow) pb.add(Phase::Flush, erase(AllowMapEntry{k.first, k.second, v}));
    for (const auto& [k, v] : a.slots) {
        pb.add(Phase::Flush, erase(CascadeEntry{std::get<0>(k), std::get<1>(k), std::get<2>(k), v}));
    }
    for (const auto& c : b.internal) pb.add(Phase::Reload, upsert(PrefixEntry{c}));
    for (const auto& [cg, app] : b.bindings) pb.add(Phase::Reload, upsert(BindingEntry{cg, app}));
    for (const auto& [app, d] : b.hashes) pb.add(Phase::Reload, upsert(ExecHashEntry{app, d}));
    for (const auto& [k, v] : b.allow) pb.add(Phase::Reload, upsert(AllowMapEntry{k.first, k.second, v}));
    for (const auto& [k, v] : b.slots) {
        pb.add(Phase::Reload, upsert(CascadeEntry{std::get<0>(k), std::get<1>(k), std::get<2>(k), v}));
    }
    const bool shrinks = !a.internal.empty() || !a.bindings.empty() || !a.allow.empty() || !b.hashes.empty();
    return pb.finish(UpdateModel::FlushReload, shrinks);
}

} // namespace

UpdatePlan plan_update(const PolicyInstance& old, const PolicyInstance& next, UpdateModel model) {
    const Entries a = entries_of(old);
    const Entries b = entries_of(next);
    if (model == UpdateModel::FlushReload) return plan_flush_reload(a, b);

    const bool reversed = model == UpdateModel::Reversed;
    PlanBuilder pb;
    bool shrinks = false;

    for (const auto& c : b.internal) {
        if (a.internal.count(c) == 0) {
            pb.add(Phase::InternalInsert, upsert(PrefixEntry{c}));
            shrinks = true;
        }
    }
    for (const auto& c : a.internal) {
        if (b.internal.count(c) == 0) pb.add(Phase::InternalDelete, erase(PrefixEntry{c}));
    }

    diff(
        a.hashes, b.hashes, [&](auto app, const auto& d) { pb.add(Phase::HashDelete, erase(ExecHashEntry{app, d})); },
        [&](auto app, const auto& d) {
            pb.add(Phase::HashUpsert, upsert(ExecHashEntry{app, d}));
            shrinks = true;
        },
        [&](auto app, const auto&, const auto& d) {
            pb.add(Phase::HashUpsert, upsert(ExecHashEntry{app, d}));
            shrinks = true;
        });

    // A changed value on a deny-biased map is a delete followed by an insert;
    // the reversed model overwrites in place ahead of the deletes instead.
    const Phase del_phase = Phase::RestrictDelete;
    const Phase ins_phase = Phase::RestrictInsert;

    diff(
        a.bindings, b.bindings,
        [&](auto cg, auto app) {
            pb.add(del_phase, erase(BindingEntry{cg, app}));
            shrinks = true;
        },
        [&](auto cg, auto app) { pb.add(ins_phase, upsert(BindingEntry{cg, app})); },
        [&](auto cg, auto old_app, auto new_app) {
            shrinks = true;
            if (reversed) {
                pb.add(ins_phase, upsert(BindingEntry{cg, new_app}));
                return;
            }
            pb.add(del_phase, erase(BindingEntry{cg, old_app}));
            pb.add(ins_phase, upsert(BindingEntry{cg, new_app}));
        });

    diff(
        a.allow, b.allow,
        [&](const AllowKey& k, const AllowEntry& v) {
            shrinks = true;
            if (is_marker(v)) {
                pb.add(Phase::MarkerDelete, erase(AllowMapEntry{k.first, k.second, v}));
            } else {
                pb.add(del_phase, erase(AllowMapEntry{k.first, k.second, v}));
            }
        },
        [&](const AllowKey& k, const AllowEntry& v) {
            pb.add(is_marker(v) ? Phase::MarkerInsert : ins_phase, upsert(AllowMapEntry{k.first, k.second, v}));
        },
        [&](const AllowKey& k, const AllowEntry& ov, const AllowEntry& nv) {
            shrinks = true;
            if (is_marker(nv)) {
                pb.add(Phase::MarkerInsert, upsert(AllowMapEntry{k.first, k.second, nv}));
            } else if (is_marker(ov) || reversed) {
                pb.add(ins_phase, upsert(AllowMapEntry{k.first, k.second, nv}));
            } else {
                pb.add(del_phase, erase(AllowMapEntry{k.first, k.second, ov}));
                pb.add(ins_phase, upsert(AllowMapEntry{k.first, k.second, nv}));
            }
        });

    diff(
        a.slots, b.slots,
        [&](const SlotKey& k, const PortRange& v) {
            shrinks = true;
            pb.add(del_phase,
                   erase(CascadeEntry{std::get<0>(k), std::get<1>(k), std::get<2>(k), v}));
        },
        [&](const SlotKey& k, const PortRange& v) {
            pb.add(ins_phase, upsert(CascadeEntry{std::get<0>(k), std::get<1>(k), std::get<2>(k), v}));
        },
        [&](const SlotKey& k, const PortRange& ov, const PortRange& nv) {
            shrinks = true;
            if (!reversed) pb.add(del_phase, erase(CascadeEntry{std::get<0>(k), std::get<1>(k), std::get<2>(k), ov}));
            pb.add(ins_phase, upsert(CascadeEntry{std::get<0>(k), std::get<1>(k), std::get<2>(k), nv}));
        });

    return pb.finish(model, shrinks);
}

void apply_plan(DataPlaneState& state, const UpdatePlan& plan) {
    for (const auto& op : plan.ops) state.apply(op);
}

DataPlaneState build_dataplane(const PolicyInstance& policy) {
    DataPlaneState s;
    PolicyInstance empty;
    empty.mode = policy.mode;
    const auto plan = plan_update(empty, policy);
    for (const auto& op : plan.ops) {
        if (op.kind != MapOp::Kind::Bump) s.apply(op);
    }
    return s;
}

Verdict decide_probe(const Probe& probe, const PolicyInstance& policy, const TaskEnv& env) {
    const Principal* prin = policy.bound_principal(probe.cgroup_id);
    const auto it = env.find(probe.tgid);
    const bool verified = prin != nullptr && it != env.end() && it->second == prin->app_index;
    return decide_local(prin, verified, probe.dst, policy);
}

namespace {

class ProbeChecker {
  public:
    ProbeChecker(const PolicyInstance& old, const PolicyInstance& next, std::span<const Probe> probes,
                 const TaskEnv& env, ExploreReport& report, std::size_t max_examples)
        : probes_(probes), report_(report), max_examples_(max_examples) {
        permitted_.reserve(probes.size());
        for (const auto& p : probes) {
            permitted_.push_back(decide_probe(p, old, env).allowed() || decide_probe(p, next, env).allowed());
        }
    }

    void check(const DataPlaneState& state, std::size_t schedule, std::size_t step) {
        ++report_.states;
        for (std::size_t i = 0; i < probes_.size(); ++i) {
            const auto& p = probes_[i];
            const Verdict v = state.evaluate(p.cgroup_id, p.tgid, p.dst);
            ++report_.probe_evaluations;
            if (v.allowed() && !permitted_[i]) {
                ++report_.violations;
                if (report_.examples.size() < max_examples_) report_.examples.push_back({schedule, step, p, v});
            }
        }
    }

  private:
    std::span<const Probe> probes_;
    std::vector<bool> permitted_;
    ExploreReport& report_;
    std::size_t max_examples_;
};

DataPlaneState initial_state(const PolicyInstance& old, const TaskEnv& env) {
    DataPlaneState s = build_dataplane(old);
    for (const auto& [tgid, app] : env) s.set_task_verified(tgid, app);
    return s;
}

} // namespace

ExploreReport explore_interleavings(const PolicyInstance& old, const PolicyInstance& next, const UpdatePlan& plan,
                                    std::span<const Probe> probes, const TaskEnv& env, const ExploreConfig& cfg) {
    ExploreReport report;
    report.seed = cfg.seed;
    report.plan_ops = plan.size();
    ProbeChecker checker(old, next, probes, env, report, cfg.max_examples);
    const auto ranges = plan.phase_ranges();
    const DataPlaneState start = initial_state(old, env);

    if (plan.size() <= cfg.exhaustive_limit) {
        // Ops inside a phase touch distinct keys, so the reachable states are
        // exactly: all earlier phases applied plus any subset of this phase.
        report.exhaustive = true;
        report.schedules = 1;
        DataPlaneState base = start;
        checker.check(base, 0, 0);
        std::size_t applied = 0;
        for (const auto& [begin, end] : ranges) {
            const std::size_t n = end - begin;
            for (std::uint64_t mask = 1; mask < (std::uint64_t{1} << n); ++mask) {
                DataPlaneState s = base;
                std::size_t bits = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    if ((mask >> i) & 1U) {
                        s.apply(plan.ops[begin + i]);
                        ++bits;
                    }
                }
                checker.check(s, 0, applied + bits);
            }
            for (std::size_t i = begin; i < end; ++i) base.apply(plan.ops[i]);
            applied += n;
        }
    } else {
        std::mt19937_64 rng(cfg.seed);
        const std::uint64_t per_schedule = static_cast<std::uint64_t>(plan.size() + 1) * probes.size();
        const std::uint64_t schedules =
            per_schedule == 0 ? 1 : std::max<std::uint64_t>(1, (cfg.probe_budget + per_schedule - 1) / per_schedule);
        std::vector<std::size_t> order(plan.size());
        for (std::uint64_t sch = 0; sch < schedules; ++sch) {
            std::iota(order.begin(), order.end(), 0);
            for (const auto& [begin, end] : ranges) {
                std::shuffle(order.begin() + static_cast<std::ptrdiff_t>(begin),
                             order.begin() + static_cast<std::ptrdiff_t>(end), rng);
            }
            DataPlaneState s = start;
            checker.check(s, sch, 0);
            for (std::size_t k = 0; k < order.size(); ++k) {
                s.apply(plan.ops[order[k]]);
                checker.check(s, sch, k + 1);
            }
        }
        report.schedules = schedules;
    }

    DataPlaneState final_state = start;
    apply_plan(final_state, plan);
    for (const auto& p : probes) {
        if (final_state.evaluate(p.cgroup_id, p.tgid, p.dst) != decide_probe(p, next, env)) ++report.final_mismatches;
    }
    return report;
}

void RevocationConfig::validate() const {
    if (sweep_interval <= SimTime{0}) throw std::invalid_argument("sweep interval must be positive");
}

Verdict revoke_check(const Host& host, SocketId sock) {
    const SimSocket& s = host.socket(sock);
    const SimProcess& p = host.process(s.pid);
    return host.probe(SockContext{p.pid, p.tgid, p.cgroup, Syscall::SendMsg, s.dst, s.epoch});
}

std::vector<SocketId> sweeper_tick(Host& host) {
    std::vector<SocketId> out;
    const std::uint64_t epoch = host.state().epoch();
    for (const SocketId id : host.live_sockets()) {
        const SimSocket& s = host.socket(id);
        if (s.dst.proto != Transport::Tcp || !s.epoch || *s.epoch >= epoch) continue;
        if (!host.alive(s.pid)) continue;
        const SimProcess& p = host.process(s.pid);
        const Verdict v = host.probe(SockContext{p.pid, p.tgid, p.cgroup, Syscall::Connect, s.dst, std::nullopt});
        if (v.allowed()) continue;
        host.terminate_socket(id);
        out.push_back(id);
    }
    return out;
}

Sweeper::Sweeper(RevocationConfig cfg, SimTime start) : cfg_(cfg), next_(start + cfg.sweep_interval) {
    cfg_.validate();
}

std::vector<SocketId> Sweeper::run_until(Host& host, SimTime now) {
    std::vector<SocketId> out;
    while (next_ <= now) {
        if (next_ > host.now()) host.advance_to(next_);
        const auto killed = sweeper_tick(host);
        out.insert(out.end(), killed.begin(), killed.end());
        ++ticks_;
        next_ += cfg_.sweep_interval;
    }
    if (now > host.now()) host.advance_to(now);
    return out;
}

} // namespace procroute
