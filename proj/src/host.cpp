// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/host.hpp"

#include <algorithm>

namespace procroute {

std::string_view to_string(EnforcementMode m) {
    switch (m) {
    case EnforcementMode::Local: return "local";
    case EnforcementMode::Tagging: return "tagging";
    case EnforcementMode::Both: return "both";
    }
    return "?";
}

EnforcementMode parse_enforcement_mode(std::string_view text) {
    for (const auto m : {EnforcementMode::Local, EnforcementMode::Tagging, EnforcementMode::Both}) {
        if (to_string(m) == text) return m;
    }
    throw ParseError("unknown enforcement mode '" + std::string(text) + "'");
}

Verdict ProcRouteProgram::evaluate(const SockContext& ctx, const DataPlaneState& state) const {
    if (udp_epoch_check_ && ctx.call == Syscall::SendMsg && ctx.dst.proto == Transport::Udp && ctx.socket_epoch &&
        *ctx.socket_epoch < state.epoch()) {
        return Verdict::deny(Reason::StaleEpoch);
    }
    return state.evaluate(ctx.cgroup_id, ctx.tgid, ctx.dst);
}

Verdict PredicateProgram::evaluate(const SockContext& ctx, const DataPlaneState&) const {
    return allow_(ctx.dst) ? Verdict::allow(Reason::GrantMatch) : Verdict::deny(deny_reason_);
}

Host::Host(DataPlaneState& state, HostConfig config, EventBuffer* audit, EventBuffer* exec_events)
    : state_(state), config_(config), audit_(audit), exec_events_(exec_events) {
    cgroups_[root_] = CgroupNode{root_, std::nullopt, "", false, {}, {}};
}

CgroupId Host::setup_session() {
    const CgroupId session = create_cgroup(root_, "session", false, Actor::Controller);
    attach_program(session, std::make_shared<ProcRouteProgram>(config_.udp_epoch_check), AttachFlag::AllowMulti);
    procroute_parent_ = create_cgroup(session, "procroute", false, Actor::Controller);
    create_cgroup(session, "user", true, Actor::Controller);
    return session;
}

CgroupId Host::create_cgroup(CgroupId parent, const std::string& name, bool delegated, Actor actor,
                             std::optional<CgroupId> id) {
    auto& p = node_mut(parent);
    if (name.empty() || name.find('/') != std::string::npos) throw HostError("bad cgroup name '" + name + "'");
    if (actor == Actor::User) {
        if (!p.delegated) throw UnauthorizedMigration("cannot create a cgroup under " + path_of(parent));
        delegated = true;
    }
    for (const auto c : p.children) {
        if (cgroups_.at(c).name == name) throw HostError("cgroup " + path_of(c) + " already exists");
    }
    CgroupId new_id = 0;
    if (id) {
        if (*id == 0 || cgroups_.count(*id) > 0) throw HostError("cgroup id " + std::to_string(*id) + " in use");
        new_id = *id;
    } else {
        while (cgroups_.count(next_cgroup_) > 0) ++next_cgroup_;
        new_id = next_cgroup_++;
    }
    cgroups_[new_id] = CgroupNode{new_id, parent, name, delegated, {}, {}};
    cgroups_.at(parent).children.push_back(new_id);
    return new_id;
}

CgroupId Host::create_app_cgroup(const std::string& name, std::optional<CgroupId> id) {
    if (!procroute_parent_) throw HostError("session layout not set up");
    return create_cgroup(*procroute_parent_, name, false, Actor::Controller, id);
}

const CgroupNode& Host::cgroup(CgroupId id) const {
    const auto it = cgroups_.find(id);
    if (it == cgroups_.end()) throw HostError("no cgroup " + std::to_string(id));
    return it->second;
}

CgroupNode& Host::node_mut(CgroupId id) { return const_cast<CgroupNode&>(cgroup(id)); }

std::optional<CgroupId> Host::find_cgroup(std::string_view path) const {
    if (path.empty() || path.front() != '/') return std::nullopt;
    CgroupId cur = root_;
    std::size_t pos = 1;
    while (pos < path.size()) {
        const auto end = std::min(path.find('/', pos), path.size());
        const auto part = path.substr(pos, end - pos);
        pos = end + 1;
        if (part.empty()) continue;
        const auto& kids = cgroups_.at(cur).children;
        const auto it = std::find_if(kids.begin(), kids.end(), [&](CgroupId c) { return cgroups_.at(c).name == part; });
        if (it == kids.end()) return std::nullopt;
        cur = *it;
    }
    return cur;
}

std::string Host::path_of(CgroupId id) const {
    if (id == root_) return "/";
    std::string out;
    for (std::optional<CgroupId> cur = id; cur && *cur != root_; cur = cgroup(*cur).parent) {
        out.insert(0, "/" + cgroup(*cur).name);
    }
    return out;
}

void Host::attach_program(CgroupId cg, std::shared_ptr<const Program> program, AttachFlag flag) {
    if (!program) throw HostError("null program");
    node_mut(cg).programs.push_back({std::move(program), flag});
    if (flag == AttachFlag::AllowOverride) override_attached_ = true;
}

std::vector<const Program*> Host::effective_stack(CgroupId cg) const {
    std::vector<CgroupId> chain;
    for (std::optional<CgroupId> cur = cg; cur; cur = cgroup(*cur).parent) chain.push_back(*cur);
    std::reverse(chain.begin(), chain.end());

    std::vector<const Program*> out;
    for (const auto id : chain) {
        const auto& progs = cgroups_.at(id).programs;
        const bool overrides = std::any_of(progs.begin(), progs.end(),
                                           [](const Attachment& a) { return a.flag == AttachFlag::AllowOverride; });
        if (overrides) out.clear();
        for (const auto& a : progs) out.push_back(a.program.get());
    }
    return out;
}

void Host::check_membership_write(CgroupId target, Actor actor) const {
    if (actor == Actor::User && !cgroup(target).delegated) {
        throw UnauthorizedMigration("membership of " + path_of(target) + " is controller-owned");
    }
}

SimProcess& Host::proc_mut(Pid pid) {
    const auto it = procs_.find(pid);
    if (it == procs_.end()) throw HostError("no process " + std::to_string(pid));
    return it->second;
}

const SimProcess& Host::process(Pid pid) const { return const_cast<Host*>(this)->proc_mut(pid); }

std::vector<Pid> Host::pids() const {
    std::vector<Pid> out;
    for (const auto& [pid, p] : procs_) out.push_back(pid);
    return out;
}

void Host::grant_capabilities(Pid pid, Capabilities caps) { proc_mut(pid).caps = caps; }

Pid Host::spawn(std::optional<Pid> parent, CgroupId target, const Digest& exe, const std::string& comm, Actor actor,
                Capabilities caps) {
    (void)cgroup(target);
    if (parent) {
        if (proc_mut(*parent).cgroup != target) check_membership_write(target, actor);
    } else {
        check_membership_write(target, actor);
    }
    const Pid pid = next_pid_++;
    procs_[pid] = SimProcess{pid, pid, target, exe, comm, caps};
    queue_exec_event(procs_.at(pid));
    return pid;
}

Pid Host::fork(Pid parent) {
    const SimProcess p = proc_mut(parent);
    const Pid pid = next_pid_++;
    procs_[pid] = SimProcess{pid, pid, p.cgroup, p.exe_digest, p.comm, p.caps};
    if (const auto app = state_.verified_app(p.tgid)) state_.set_task_verified(pid, *app);
    std::vector<PendingExec> inherited;
    for (const auto& e : pending_exec_) {
        if (e.pid == parent) inherited.push_back({pid, e.due});
    }
    pending_exec_.insert(pending_exec_.end(), inherited.begin(), inherited.end());
    return pid;
}

void Host::exec(Pid pid, const Digest& exe, const std::string& comm) {
    auto& p = proc_mut(pid);
    p.exe_digest = exe;
    p.comm = comm;
    state_.clear_task_verified(p.tgid);
    std::erase_if(pending_exec_, [&](const PendingExec& e) { return e.pid == pid; });
    queue_exec_event(p);
}

void Host::migrate(Pid pid, CgroupId target, Actor actor) {
    auto& p = proc_mut(pid);
    check_membership_write(p.cgroup, actor);
    check_membership_write(target, actor);
    p.cgroup = target;
}

void Host::exit(Pid pid) {
    const auto& p = proc_mut(pid);
    state_.clear_task_verified(p.tgid);
    std::erase_if(pending_exec_, [&](const PendingExec& e) { return e.pid == pid; });
    for (auto& [id, s] : sockets_) {
        if (s.pid == pid && s.state == SocketState::Connected) s.state = SocketState::Closed;
    }
    procs_.erase(pid);
}

void Host::queue_exec_event(const SimProcess& p) {
    ++counters_.exec_events;
    if (exec_events_ != nullptr) {
        AuditEvent e;
        e.kind = AuditKind::ExecEvent;
        e.pid = p.pid;
        e.comm = p.comm;
        e.cgroup_id = p.cgroup;
        e.app_index = state_.app_of(p.cgroup).value_or(0);
        e.dst_ip = IpAddress::v4(0);
        e.timestamp = now_;
        e.reason = Reason::HashUnverified;
        exec_events_->emit(std::move(e));
    }
    pending_exec_.push_back({p.pid, now_ + config_.verify_delay});
    if (config_.verify_delay == SimTime{0}) verify_exec(p.pid);
}

bool Host::verification_pending(Pid pid) const {
    return std::any_of(pending_exec_.begin(), pending_exec_.end(), [&](const PendingExec& e) { return e.pid == pid; });
}

void Host::verify_exec(Pid pid) {
    const auto n = std::erase_if(pending_exec_, [&](const PendingExec& e) { return e.pid == pid; });
    if (n == 0) return;
    ++counters_.verifications;
    const auto& p = proc_mut(pid);
    const auto app = state_.app_of(p.cgroup);
    if (!app) return;
    const Digest* expected = state_.exec_hash(*app);
    if (expected != nullptr && *expected == p.exe_digest) state_.set_task_verified(p.tgid, *app);
}

void Host::advance_to(SimTime t) {
    if (t < now_) throw HostError("simulated time must not go backwards");
    now_ = t;
    std::vector<Pid> due;
    for (const auto& e : pending_exec_) {
        if (e.due <= now_) due.push_back(e.pid);
    }
    for (const auto pid : due) verify_exec(pid);
}

Verdict Host::probe(const SockContext& ctx) const {
    Reason allow_reason = Reason::Unmediated;
    for (const Program* prog : effective_stack(ctx.cgroup_id)) {
        const bool enforcement = dynamic_cast<const ProcRouteProgram*>(prog) != nullptr;
        if (enforcement && config_.mode == EnforcementMode::Tagging) {
            allow_reason = Reason::Tagged;
            continue;
        }
        const Verdict v = prog->evaluate(ctx, state_);
        if (!v.allowed()) return v;
        if (enforcement || allow_reason == Reason::Unmediated) allow_reason = v.reason;
    }
    return Verdict::allow(allow_reason);
}

MediationResult Host::mediate(SimProcess& p, Syscall call, const Destination& dst, SimSocket* sock) {
    ++counters_.hook_calls;
    const SockContext ctx{p.pid, p.tgid, p.cgroup, call, dst,
                          sock != nullptr ? sock->epoch : std::optional<std::uint64_t>{}};

    const auto stack = effective_stack(p.cgroup);
    Verdict verdict = Verdict::allow(Reason::Unmediated);
    if (!stack.empty()) {
        ++counters_.mediated_calls;
        ++counters_.stack_evaluations;
        counters_.program_runs += stack.size();
        verdict = probe(ctx);
    }

    if (!verdict.allowed()) {
        ++counters_.denies;
        emit_deny(p, dst, verdict.reason);
        return {verdict, std::nullopt};
    }
    ++counters_.allows;
    if (sock != nullptr) return {verdict, sock->id};
    return {verdict, open_socket(p, dst, verdict)};
}

void Host::emit_deny(const SimProcess& p, const Destination& dst, Reason reason) {
    if (audit_ == nullptr) return;
    ++counters_.audit_events;
    audit_->emit(AuditEvent{AuditKind::Deny, p.pid, p.comm, p.cgroup, state_.app_of(p.cgroup).value_or(0), dst.ip,
                            dst.port, dst.proto, now_, reason});
}

SocketId Host::open_socket(const SimProcess& p, const Destination& dst, const Verdict& v) {
    SimSocket s;
    s.id = next_socket_++;
    s.pid = p.pid;
    s.dst = dst;
    s.created = now_;
    if (config_.mode != EnforcementMode::Local) s.mark = state_.app_of(p.cgroup).value_or(0);
    if (v.reason == Reason::GrantMatch || (v.reason == Reason::Tagged && s.mark != 0)) s.epoch = state_.epoch();
    sockets_[s.id] = s;
    return s.id;
}

MediationResult Host::connect(Pid pid, const Destination& dst) {
    return mediate(proc_mut(pid), Syscall::Connect, dst, nullptr);
}

MediationResult Host::sendmsg(Pid pid, std::optional<SocketId> sock, const Destination& dst) {
    auto& p = proc_mut(pid);
    if (!sock) return mediate(p, Syscall::SendMsg, dst, nullptr);
    const auto it = sockets_.find(*sock);
    if (it == sockets_.end()) throw HostError("no socket " + std::to_string(*sock));
    if (it->second.state != SocketState::Connected) throw HostError("socket " + std::to_string(*sock) + " is closed");
    return mediate(p, Syscall::SendMsg, it->second.dst, &it->second);
}

void Host::raw_send(Pid pid, const Destination& dst) {
    const auto& p = proc_mut(pid);
    if (!p.caps.net_raw) {
        ++counters_.raw_rejected;
        throw PermissionDenied("raw send to " + dst.to_string() + " requires CAP_NET_RAW");
    }
}

void Host::set_socket_mark(Pid actor, SocketId sock, std::uint32_t mark) {
    if (!proc_mut(actor).caps.net_admin) throw PermissionDenied("SO_MARK requires CAP_NET_ADMIN");
    const auto it = sockets_.find(sock);
    if (it == sockets_.end()) throw HostError("no socket " + std::to_string(sock));
    it->second.mark = mark;
}

const SimSocket& Host::socket(SocketId id) const {
    const auto it = sockets_.find(id);
    if (it == sockets_.end()) throw HostError("no socket " + std::to_string(id));
    return it->second;
}

std::vector<SocketId> Host::live_sockets() const {
    std::vector<SocketId> out;
    for (const auto& [id, s] : sockets_) {
        if (s.state == SocketState::Connected) out.push_back(id);
    }
    return out;
}

void Host::close_socket(SocketId id) {
    auto it = sockets_.find(id);
    if (it == sockets_.end()) throw HostError("no socket " + std::to_string(id));
    if (it->second.state == SocketState::Connected) it->second.state = SocketState::Closed;
}

void Host::terminate_socket(SocketId id) {
    auto it = sockets_.find(id);
    if (it == sockets_.end()) throw HostError("no socket " + std::to_string(id));
    if (it->second.state != SocketState::Connected) return;
    it->second.state = SocketState::Terminated;
    it->second.terminated_at = now_;
}

} // namespace procroute
