// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Event-loop simulation of one endpoint and the gateway, the built-in
// experiment scenarios and the scenario-script runner.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "procroute/audit.hpp"
#include "procroute/gateway.hpp"
#include "procroute/host.hpp"
#include "procroute/policy.hpp"
#include "procroute/policy_file.hpp"
#include "procroute/update.hpp"

namespace procroute {

struct ScriptError : std::runtime_error {
    ScriptError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line(line) {}
    std::size_t line;
};

struct SimulationConfig {
    HostConfig host;
    GatewayConfig gateway;
    RevocationConfig revocation;
    IpAddress peer = IpAddress::v4(10, 8, 0, 2); // this endpoint's tunnel address
    std::size_t audit_capacity = 1 << 20;

    static SimulationConfig from(const PolicyOptions& opts);
};

// One endpoint plus the gateway, driven in simulated time. The controller
// role (policy updates, epoch bumps, sweeping) lives here too.
class Simulation {
  public:
    // `policy` must be normalized.
    explicit Simulation(PolicyInstance policy, SimulationConfig cfg = {});
    Simulation(const Simulation&) = delete;
    Simulation& operator=(const Simulation&) = delete;

    [[nodiscard]] Host& host() { return host_; }
    [[nodiscard]] Gateway& gateway() { return gateway_; }
    [[nodiscard]] DataPlaneState& state() { return state_; }
    [[nodiscard]] EventBuffer& audit() { return audit_; }
    [[nodiscard]] EventBuffer& exec_events() { return exec_events_; }
    [[nodiscard]] const PolicyInstance& policy() const { return policy_; }
    [[nodiscard]] const SimulationConfig& config() const { return cfg_; }

    // Applies the transition plan to the endpoint maps, reinstalls the
    // gateway, and bumps the gateway epoch together with the endpoint's.
    UpdatePlan update(PolicyInstance next, UpdateModel model = UpdateModel::FailClosed);
    void epoch_bump();

    // Moves time forward, running due sweeper ticks and exec verifications.
    std::vector<SocketId> advance_to(SimTime t);
    [[nodiscard]] SimTime now() const { return host_.now(); }
    [[nodiscard]] std::optional<SimTime> last_bump() const { return last_bump_; }

    // Sends one packet on `sock` through the tunnel to the gateway.
    GatewayVerdict send_packet(SocketId sock, std::uint16_t src_port);
    [[nodiscard]] SimPacket packet_for(SocketId sock, std::uint16_t src_port) const;

    // Host denies plus gateway drops.
    [[nodiscard]] std::uint64_t deny_verdicts() const;
    // Audit events emitted or dropped for lack of capacity.
    [[nodiscard]] std::uint64_t audit_events() const;

  private:
    PolicyInstance policy_;
    SimulationConfig cfg_;
    EventBuffer audit_;
    EventBuffer exec_events_;
    DataPlaneState state_;
    Host host_;
    Gateway gateway_;
    Sweeper sweeper_;
    std::optional<SimTime> last_bump_;
};

// Plain key: value report.
class Report {
  public:
    explicit Report(std::string scenario) : scenario_(std::move(scenario)) {}

    template <class T>
    void add(const std::string& key, const T& value) {
        if constexpr (std::is_convertible_v<T, std::string>) {
            fields_.emplace_back(key, std::string(value));
        } else {
            fields_.emplace_back(key, std::to_string(value));
        }
    }
    // Records a failed expectation when `ok` is false.
    bool check(bool ok, const std::string& what);

    [[nodiscard]] bool ok() const { return failures_.empty(); }
    [[nodiscard]] const std::vector<std::string>& failures() const { return failures_; }
    [[nodiscard]] std::optional<std::string> get(const std::string& key) const;
    [[nodiscard]] std::string render() const;

  private:
    std::string scenario_;
    std::vector<std::pair<std::string, std::string>> fields_;
    std::vector<std::string> failures_;
};

struct ScenarioOptions {
    std::uint64_t seed = 1;
    std::uint64_t probes = 1000000;
    UpdateModel model = UpdateModel::FailClosed;
    bool cache = true;
    std::size_t flows = 1000;
    std::size_t pkts = 4;
    std::size_t long_pkts = 10000;
    std::size_t stacks = 1000;
    std::optional<NormalizationMode> mode;
    std::optional<std::filesystem::path> policy;
    std::optional<std::filesystem::path> script;
    std::optional<std::filesystem::path> audit_out;
};

// Names accepted by run_scenario.
std::vector<std::string> scenario_names();
// Throws std::invalid_argument for an unknown name.
Report run_scenario(const std::string& name, const ScenarioOptions& opts);

Report run_pivot(const ScenarioOptions& opts);
Report run_update_safety(const ScenarioOptions& opts);
Report run_revocation(const ScenarioOptions& opts);
Report run_flowcache(const ScenarioOptions& opts);
Report run_monotonicity(const ScenarioOptions& opts);
Report run_split(const ScenarioOptions& opts);
Report run_cascaded(const ScenarioOptions& opts);
Report run_scaling(const ScenarioOptions& opts);
// Throws ScriptError on malformed scripts.
Report run_script(const std::filesystem::path& script, const ScenarioOptions& opts);
Report run_script_text(std::string_view text, const std::filesystem::path& base_dir, const ScenarioOptions& opts);

// Executable image digest used by scripts: "sha256:<hex>" literally, or the
// SHA-256 of the given name.
Digest exe_digest(std::string_view spec);

// Principals, targets and policy of the pivot matrix.
struct PivotTarget {
    std::string service;
    Destination dst;
};
std::vector<PivotTarget> pivot_matrix();
std::vector<Destination> pivot_externals();

// Writes every pending audit event to `path` (appending). Returns the count.
std::size_t write_audit(EventBuffer& buffer, const std::filesystem::path& path);

} // namespace procroute
