// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Simulated endpoint: cgroup tree, process table, sockets and the
// connect/sendmsg hooks that run the attached program stack.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "procroute/audit.hpp"
#include "procroute/common.hpp"
#include "procroute/dataplane.hpp"
#include "procroute/policy.hpp"

namespace procroute {

using CgroupId = std::uint64_t;
using SocketId = std::uint64_t;

enum class Actor : std::uint8_t { Controller, User };
enum class AttachFlag : std::uint8_t { AllowMulti, AllowOverride };
enum class Syscall : std::uint8_t { Connect, SendMsg };
enum class EnforcementMode : std::uint8_t { Local, Tagging, Both };

std::string_view to_string(EnforcementMode m);
EnforcementMode parse_enforcement_mode(std::string_view text);

struct UnauthorizedMigration : std::runtime_error {
    explicit UnauthorizedMigration(const std::string& what) : std::runtime_error(what) {}
};
struct PermissionDenied : std::runtime_error {
    explicit PermissionDenied(const std::string& what) : std::runtime_error(what) {}
};
struct HostError : std::runtime_error {
    explicit HostError(const std::string& what) : std::runtime_error(what) {}
};

// What a hook program sees.
struct SockContext {
    Pid pid = 0;
    Pid tgid = 0;
    CgroupId cgroup_id = 0;
    Syscall call = Syscall::Connect;
    Destination dst;
    std::optional<std::uint64_t> socket_epoch; // set for sends on an existing socket
};

// A filter-only decision program. Programs never rewrite the destination.
class Program {
  public:
    virtual ~Program() = default;
    [[nodiscard]] virtual Verdict evaluate(const SockContext& ctx, const DataPlaneState& state) const = 0;
    [[nodiscard]] virtual std::string name() const = 0;
};

// The enforcement program: the staged pipeline plus the UDP stale-epoch check.
class ProcRouteProgram final : public Program {
  public:
    explicit ProcRouteProgram(bool udp_epoch_check = true) : udp_epoch_check_(udp_epoch_check) {}
    [[nodiscard]] Verdict evaluate(const SockContext& ctx, const DataPlaneState& state) const override;
    [[nodiscard]] std::string name() const override { return "procroute"; }

  private:
    bool udp_epoch_check_;
};

// Allows exactly the destinations accepted by a predicate.
class PredicateProgram final : public Program {
  public:
    using Predicate = std::function<bool(const Destination&)>;
    PredicateProgram(std::string name, Predicate allow, Reason deny_reason = Reason::PortMismatch)
        : name_(std::move(name)), allow_(std::move(allow)), deny_reason_(deny_reason) {}
    [[nodiscard]] Verdict evaluate(const SockContext& ctx, const DataPlaneState& state) const override;
    [[nodiscard]] std::string name() const override { return name_; }

  private:
    std::string name_;
    Predicate allow_;
    Reason deny_reason_;
};

struct Attachment {
    std::shared_ptr<const Program> program;
    AttachFlag flag = AttachFlag::AllowMulti;
};

struct CgroupNode {
    CgroupId id = 0;
    std::optional<CgroupId> parent;
    std::string name;
    bool delegated = false;
    std::vector<Attachment> programs;
    std::vector<CgroupId> children;
};

struct Capabilities {
    bool net_raw = false;
    bool net_admin = false;
};

struct SimProcess {
    Pid pid = 0;
    Pid tgid = 0;
    CgroupId cgroup = 0;
    Digest exe_digest{};
    std::string comm;
    Capabilities caps;
};

enum class SocketState : std::uint8_t { Connected, Closed, Terminated };

struct SimSocket {
    SocketId id = 0;
    Pid pid = 0;
    Destination dst;
    SocketState state = SocketState::Connected;
    std::optional<std::uint64_t> epoch; // stamped only on a grant-based allow
    std::uint32_t mark = 0;             // SO_MARK, set in tagging modes
    SimTime created{};
    std::optional<SimTime> terminated_at;
};

struct MediationResult {
    Verdict verdict;
    std::optional<SocketId> socket; // the socket used or created on ALLOW
};

struct HostCounters {
    std::uint64_t hook_calls = 0;       // connect/sendmsg invocations
    std::uint64_t mediated_calls = 0;   // calls from cgroups with a non-empty stack
    std::uint64_t stack_evaluations = 0;
    std::uint64_t program_runs = 0;
    std::uint64_t allows = 0;
    std::uint64_t denies = 0;
    std::uint64_t audit_events = 0;
    std::uint64_t raw_rejected = 0;
    std::uint64_t exec_events = 0;
    std::uint64_t verifications = 0;
};

struct HostConfig {
    EnforcementMode mode = EnforcementMode::Local;
    bool udp_epoch_check = true;
    SimTime verify_delay{0}; // 0: exec events are verified synchronously
};

class Host {
  public:
    Host(DataPlaneState& state, HostConfig config = {}, EventBuffer* audit = nullptr,
         EventBuffer* exec_events = nullptr);

    // Creates /session (ProcRoute program, AllowMulti), /session/procroute
    // (controller-owned) and /session/user (delegated). Returns /session.
    CgroupId setup_session();

    // --- cgroup tree ---
    [[nodiscard]] CgroupId root() const { return root_; }
    CgroupId create_cgroup(CgroupId parent, const std::string& name, bool delegated, Actor actor,
                           std::optional<CgroupId> id = std::nullopt);
    // Creates /session/procroute/<name>.
    CgroupId create_app_cgroup(const std::string& name, std::optional<CgroupId> id = std::nullopt);
    [[nodiscard]] const CgroupNode& cgroup(CgroupId id) const;
    [[nodiscard]] std::optional<CgroupId> find_cgroup(std::string_view path) const;
    [[nodiscard]] std::string path_of(CgroupId id) const;
    void attach_program(CgroupId cg, std::shared_ptr<const Program> program, AttachFlag flag);
    // Programs evaluated for a call from `cg`, ancestor first.
    [[nodiscard]] std::vector<const Program*> effective_stack(CgroupId cg) const;
    // True once any AllowOverride attach exists.
    [[nodiscard]] bool non_monotonic() const { return override_attached_; }

    // --- processes ---
    // Clone directly into `target` followed by an exec of `exe`.
    Pid spawn(std::optional<Pid> parent, CgroupId target, const Digest& exe, const std::string& comm,
              Actor actor = Actor::Controller, Capabilities caps = {});
    // Same cgroup, same verification state, same image.
    Pid fork(Pid parent);
    // Replaces the image; clears verification and queues an exec event.
    void exec(Pid pid, const Digest& exe, const std::string& comm);
    void migrate(Pid pid, CgroupId target, Actor actor);
    void exit(Pid pid);
    // Runs the verifier for a pending exec event of `pid` now.
    void verify_exec(Pid pid);
    [[nodiscard]] bool verification_pending(Pid pid) const;
    [[nodiscard]] const SimProcess& process(Pid pid) const;
    [[nodiscard]] bool alive(Pid pid) const { return procs_.count(pid) > 0; }
    [[nodiscard]] std::vector<Pid> pids() const;
    void grant_capabilities(Pid pid, Capabilities caps);

    // --- hooks ---
    MediationResult connect(Pid pid, const Destination& dst);
    // Send on an existing socket, or an unconnected send when `sock` is empty.
    MediationResult sendmsg(Pid pid, std::optional<SocketId> sock, const Destination& dst);
    // Raw sends are outside hook coverage and require CAP_NET_RAW.
    void raw_send(Pid pid, const Destination& dst);
    void set_socket_mark(Pid actor, SocketId sock, std::uint32_t mark);

    // Evaluates the stack for `ctx` without side effects or counters.
    [[nodiscard]] Verdict probe(const SockContext& ctx) const;

    // --- sockets ---
    [[nodiscard]] const SimSocket& socket(SocketId id) const;
    [[nodiscard]] std::vector<SocketId> live_sockets() const;
    void close_socket(SocketId id);
    void terminate_socket(SocketId id);

    // --- clock ---
    [[nodiscard]] SimTime now() const { return now_; }
    // Advances the clock and delivers due exec events.
    void advance_to(SimTime t);

    [[nodiscard]] const HostCounters& counters() const { return counters_; }
    [[nodiscard]] const HostConfig& config() const { return config_; }
    [[nodiscard]] DataPlaneState& state() { return state_; }
    [[nodiscard]] const DataPlaneState& state() const { return state_; }

  private:
    struct PendingExec {
        Pid pid;
        SimTime due;
    };

    SimProcess& proc_mut(Pid pid);
    CgroupNode& node_mut(CgroupId id);
    MediationResult mediate(SimProcess& p, Syscall call, const Destination& dst, SimSocket* sock);
    void queue_exec_event(const SimProcess& p);
    void emit_deny(const SimProcess& p, const Destination& dst, Reason reason);
    void check_membership_write(CgroupId target, Actor actor) const;
    SocketId open_socket(const SimProcess& p, const Destination& dst, const Verdict& v);

    DataPlaneState& state_;
    HostConfig config_;
    EventBuffer* audit_;
    EventBuffer* exec_events_;

    std::map<CgroupId, CgroupNode> cgroups_;
    CgroupId root_ = 1;
    CgroupId next_cgroup_ = 2;
    std::optional<CgroupId> procroute_parent_;
    bool override_attached_ = false;

    std::map<Pid, SimProcess> procs_;
    Pid next_pid_ = 100;
    std::vector<PendingExec> pending_exec_;

    std::map<SocketId, SimSocket> sockets_;
    SocketId next_socket_ = 1;

    SimTime now_{0};
    HostCounters counters_;
};

} // namespace procroute
