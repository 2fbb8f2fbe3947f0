// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Policy transitions: ordered map-operation plans, the interleaving
// explorer, the authorization epoch and the revocation sweeper.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "procroute/dataplane.hpp"
#include "procroute/host.hpp"
#include "procroute/policy.hpp"

namespace procroute {

enum class UpdateModel : std::uint8_t {
    FailClosed,  // deny-biased deletes before inserts, classifier inserts before deletes
    FlushReload, // delete everything, then insert the new instance
    Reversed,    // inserts before deletes on deny-biased maps
};

std::string_view to_string(UpdateModel m);
UpdateModel parse_update_model(std::string_view text);

// Barrier-separated groups. Operations inside one phase touch distinct keys
// and may land in any order; phases land in sequence.
enum class Phase : std::uint8_t {
    InternalInsert,
    HashUpsert,
    MarkerInsert,
    RestrictDelete,
    HashDelete,
    RestrictInsert,
    MarkerDelete,
    InternalDelete,
    Flush,
    Reload,
    EpochBump,
};

std::string_view to_string(Phase p);

struct UpdatePlan {
    UpdateModel model = UpdateModel::FailClosed;
    std::vector<MapOp> ops;
    std::vector<Phase> phase; // parallel to ops, non-decreasing
    bool bumps_epoch = false;

    [[nodiscard]] std::size_t size() const { return ops.size(); }
    [[nodiscard]] bool empty() const { return ops.empty(); }
    // Index ranges [begin, end) of each non-empty phase, in order.
    [[nodiscard]] std::vector<std::pair<std::size_t, std::size_t>> phase_ranges() const;
};

// Both instances must already be normalized.
UpdatePlan plan_update(const PolicyInstance& old, const PolicyInstance& next,
                       UpdateModel model = UpdateModel::FailClosed);

void apply_plan(DataPlaneState& state, const UpdatePlan& plan);
// Map state for `policy` installed on an empty data plane.
DataPlaneState build_dataplane(const PolicyInstance& policy);

// tgid -> app_index the task was verified as; fixed while exploring.
using TaskEnv = std::map<Pid, std::uint32_t>;

struct Probe {
    std::uint64_t cgroup_id = 0;
    Pid tgid = 0;
    Destination dst;
};

// decide_local for a probe under `policy`, with verification read from `env`.
Verdict decide_probe(const Probe& probe, const PolicyInstance& policy, const TaskEnv& env);

struct ExploreConfig {
    std::uint64_t seed = 1;
    std::size_t exhaustive_limit = 12;
    // Target number of probe evaluations for randomized exploration.
    std::uint64_t probe_budget = 100000;
    std::size_t max_examples = 5;
};

struct Violation {
    std::size_t schedule = 0;
    std::size_t step = 0; // operations applied when the probe ran
    Probe probe;
    Verdict verdict;
};

struct ExploreReport {
    bool exhaustive = false;
    std::uint64_t seed = 0;
    std::size_t plan_ops = 0;
    std::uint64_t schedules = 0;
    std::uint64_t states = 0;
    std::uint64_t probe_evaluations = 0;
    std::uint64_t violations = 0; // transient allows outside Allow(old) and Allow(new)
    std::uint64_t final_mismatches = 0;
    std::vector<Violation> examples;

    [[nodiscard]] bool ok() const { return violations == 0 && final_mismatches == 0; }
};

// Evaluates every probe at every intermediate state of `plan`. Exhaustive over
// all within-phase orderings when the plan has at most `exhaustive_limit`
// operations; otherwise seeded random within-phase shuffles until the probe
// budget is met. Also checks that the final state decides like `next`.
ExploreReport explore_interleavings(const PolicyInstance& old, const PolicyInstance& next, const UpdatePlan& plan,
                                    std::span<const Probe> probes, const TaskEnv& env, const ExploreConfig& cfg);

struct RevocationConfig {
    SimTime sweep_interval = std::chrono::seconds(1);
    bool udp_epoch_check = true;

    void validate() const;
};

// The verdict a send on `sock` receives right now.
Verdict revoke_check(const Host& host, SocketId sock);

// Terminates every connected TCP socket whose stamp is older than the current
// epoch and whose destination the owning process can no longer reach.
std::vector<SocketId> sweeper_tick(Host& host);

// Runs sweeper ticks on a fixed grid of simulated time.
class Sweeper {
  public:
    explicit Sweeper(RevocationConfig cfg = {}, SimTime start = SimTime{0});
    // Ticks for every grid point in (last, now]; returns terminated sockets.
    std::vector<SocketId> run_until(Host& host, SimTime now);
    [[nodiscard]] SimTime next_tick() const { return next_; }
    [[nodiscard]] std::uint64_t ticks() const { return ticks_; }

  private:
    RevocationConfig cfg_;
    SimTime next_;
    std::uint64_t ticks_ = 0;
};

} // namespace procroute
