// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include <charconv>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "procroute/scenario.hpp"

namespace procroute {

namespace {

struct Event {
    std::size_t line = 0;
    std::string verb;
    std::vector<std::string> positional;
    std::map<std::string, std::string> args;
};

Event parse_event(std::string_view text, std::size_t line) {
    Event ev;
    ev.line = line;
    std::istringstream is{std::string(text)};
    std::string tok;
    while (is >> tok) {
        if (ev.verb.empty()) {
            ev.verb = tok;
            continue;
        }
        const auto eq = tok.find('=');
        if (eq == std::string::npos) {
            ev.positional.push_back(tok);
        } else if (eq == 0) {
            throw ScriptError(line, "empty key in '" + tok + "'");
        } else if (!ev.args.emplace(tok.substr(0, eq), tok.substr(eq + 1)).second) {
            throw ScriptError(line, "duplicate key '" + tok.substr(0, eq) + "'");
        }
    }
    return ev;
}

template <class T>
T number(const std::string& text, const std::string& key) {
    T value{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw ParseError("'" + key + "' expects a number, got '" + text + "'");
    }
    return value;
}

bool boolean(const std::string& text) {
    if (text == "true" || text == "yes" || text == "on" || text == "1") return true;
    if (text == "false" || text == "no" || text == "off" || text == "0") return false;
    throw ParseError("expected a boolean, got '" + text + "'");
}

Actor parse_actor(const std::string& text) {
    if (text == "controller") return Actor::Controller;
    if (text == "user") return Actor::User;
    throw ParseError("actor must be controller or user, got '" + text + "'");
}

SocketState parse_socket_state(const std::string& text) {
    if (text == "connected") return SocketState::Connected;
    if (text == "closed") return SocketState::Closed;
    if (text == "terminated") return SocketState::Terminated;
    throw ParseError("unknown socket state '" + text + "'");
}

std::string_view to_string(SocketState s) {
    switch (s) {
    case SocketState::Connected: return "connected";
    case SocketState::Closed: return "closed";
    case SocketState::Terminated: return "terminated";
    }
    return "?";
}

Capabilities parse_caps(const std::string& text) {
    Capabilities c;
    std::string list = text;
    for (char& ch : list) {
        if (ch == ',') ch = ' ';
    }
    std::istringstream is(list);
    std::string cap;
    while (is >> cap) {
        if (cap == "net_raw" || cap == "CAP_NET_RAW") c.net_raw = true;
        else if (cap == "net_admin" || cap == "CAP_NET_ADMIN") c.net_admin = true;
        else if (cap != "none") throw ParseError("unknown capability '" + cap + "'");
    }
    return c;
}

class ScriptRunner {
  public:
    ScriptRunner(std::filesystem::path base, const ScenarioOptions& opts) : base_(std::move(base)), opts_(opts) {}

    Report run(std::string_view text) {
        if (opts_.policy) load_initial(*opts_.policy);
        std::size_t line_no = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            const auto end = std::min(text.find('\n', pos), text.size());
            ++line_no;
            auto raw = text.substr(pos, end - pos);
            pos = end + 1;
            raw = raw.substr(0, raw.find('#'));
            Event ev = parse_event(raw, line_no);
            if (ev.verb.empty()) continue;
            ++events_;
            step(ev);
        }
        return finish();
    }

  private:
    // ---- plumbing ----

    Simulation& sim(const Event& ev) {
        if (!sim_) throw ScriptError(ev.line, "no policy loaded; start with 'policy <path>'");
        return *sim_;
    }

    std::filesystem::path resolve(const std::string& p) const {
        const std::filesystem::path path(p);
        return path.is_absolute() ? path : base_ / path;
    }

    static const std::string& need(const Event& ev, const std::string& key) {
        const auto it = ev.args.find(key);
        if (it == ev.args.end()) throw ScriptError(ev.line, ev.verb + " needs " + key + "=");
        return it->second;
    }

    static std::optional<std::string> opt(const Event& ev, const std::string& key) {
        const auto it = ev.args.find(key);
        if (it == ev.args.end()) return std::nullopt;
        return it->second;
    }

    Pid proc(const Event& ev, const std::string& key = "proc") const {
        const auto& name = need(ev, key);
        const auto it = procs_.find(name);
        if (it == procs_.end()) throw ScriptError(ev.line, "unknown process '" + name + "'");
        return it->second;
    }

    SocketId sock(const Event& ev) const {
        const auto& name = need(ev, "sock");
        const auto it = socks_.find(name);
        if (it == socks_.end()) throw ScriptError(ev.line, "unknown socket '" + name + "'");
        return it->second;
    }

    CgroupId cgroup_ref(const Event& ev, const std::string& text) {
        if (!text.empty() && text.front() == '/') {
            const auto id = sim(ev).host().find_cgroup(text);
            if (!id) throw ScriptError(ev.line, "no cgroup " + text);
            return *id;
        }
        return number<CgroupId>(text, "cgroup");
    }

    void load_initial(const std::filesystem::path& path) {
        const PolicyFile file = load_policy_file(path);
        sim_ = std::make_unique<Simulation>(normalize_policy(file.policy), SimulationConfig::from(file.options));
        sim_->host().setup_session();
        for (const auto& [cg, name] : sim_->policy().bindings) ensure_app_cgroup(cg, name);
    }

    void ensure_app_cgroup(CgroupId id, const std::string& principal) {
        Host& host = sim_->host();
        try {
            (void)host.cgroup(id);
            return;
        } catch (const HostError&) {
        }
        std::string name = principal;
        if (host.find_cgroup("/session/procroute/" + name)) name += "-" + std::to_string(id);
        host.create_app_cgroup(name, id);
    }

    // ---- expectations ----

    void expect_verdict(const Event& ev, const std::string& what, bool allowed, Reason reason) {
        const auto e = opt(ev, "expect");
        if (e) {
            if (*e != "allow" && *e != "deny" && *e != "pass" && *e != "drop") {
                throw ScriptError(ev.line, "expect=" + *e + " does not apply to " + ev.verb);
            }
            const bool want_allow = *e == "allow" || *e == "pass";
            report_.check(want_allow == allowed, "line " + std::to_string(ev.line) + ": expected " + *e + ", got " + what);
        }
        if (const auto r = opt(ev, "reason")) {
            report_.check(parse_reason(*r) == reason,
                          "line " + std::to_string(ev.line) + ": expected reason " + *r + ", got " + what);
        }
    }

    void log(const Event& ev, const std::string& what) {
        trace_.push_back("line " + std::to_string(ev.line) + ": " + ev.verb + " -> " + what);
    }

    // ---- events ----

    void step(const Event& ev) {
        const auto expect = opt(ev, "expect");
        const bool wants_error = expect && *expect == "error";
        try {
            dispatch(ev);
        } catch (const ScriptError&) {
            throw;
        } catch (const std::exception& e) {
            if (wants_error) {
                log(ev, std::string("error: ") + e.what());
                return;
            }
            if (expect && *expect == "ok") {
                report_.check(false, "line " + std::to_string(ev.line) + ": expected ok, got error: " + e.what());
                log(ev, std::string("error: ") + e.what());
                return;
            }
            throw ScriptError(ev.line, e.what());
        }
        if (wants_error) report_.check(false, "line " + std::to_string(ev.line) + ": expected an error");
    }

    void dispatch(const Event& ev) {
        const auto& v = ev.verb;
        if (v == "policy") return on_policy(ev);
        if (v == "cgroup") return on_cgroup(ev);
        if (v == "bind") return on_bind(ev);
        if (v == "spawn") return on_spawn(ev);
        if (v == "fork") return on_fork(ev);
        if (v == "exec") return on_exec(ev);
        if (v == "migrate") return on_migrate(ev);
        if (v == "verify") return on_verify(ev);
        if (v == "connect") return on_connect(ev);
        if (v == "sendmsg") return on_sendmsg(ev);
        if (v == "raw") return on_raw(ev);
        if (v == "packet") return on_packet(ev);
        if (v == "mark") return on_mark(ev);
        if (v == "update") return on_update(ev);
        if (v == "epoch-bump") return on_bump(ev);
        if (v == "advance" || v == "advance-time") return on_advance(ev);
        if (v == "close") return on_close(ev);
        if (v == "check") return on_check(ev);
        throw ScriptError(ev.line, "unknown event '" + v + "'");
    }

    void on_policy(const Event& ev) {
        if (ev.positional.size() != 1) throw ScriptError(ev.line, "policy takes one path");
        if (sim_) throw ScriptError(ev.line, "policy already loaded; use 'update policy=<path>'");
        load_initial(resolve(ev.positional[0]));
        log(ev, "loaded " + ev.positional[0]);
    }

    void on_cgroup(const Event& ev) {
        Host& host = sim(ev).host();
        const std::string path = need(ev, "path");
        const auto slash = path.find_last_of('/');
        if (path.empty() || path.front() != '/' || slash == path.size() - 1) {
            throw ScriptError(ev.line, "bad cgroup path '" + path + "'");
        }
        const std::string parent_path = slash == 0 ? "/" : path.substr(0, slash);
        const auto parent = host.find_cgroup(parent_path);
        if (!parent) throw ScriptError(ev.line, "no cgroup " + parent_path);
        std::optional<CgroupId> id;
        if (const auto s = opt(ev, "id")) id = number<CgroupId>(*s, "id");
        const bool delegated = opt(ev, "delegated") ? boolean(*opt(ev, "delegated")) : false;
        const Actor actor = opt(ev, "actor") ? parse_actor(*opt(ev, "actor")) : Actor::Controller;
        const CgroupId got = host.create_cgroup(*parent, path.substr(slash + 1), delegated, actor, id);
        log(ev, path + " id=" + std::to_string(got));
    }

    void on_bind(const Event& ev) {
        Simulation& s = sim(ev);
        const auto cg = number<CgroupId>(need(ev, "cgroup"), "cgroup");
        PolicyInstance next = s.policy();
        next.bindings[cg] = need(ev, "principal");
        const auto plan = s.update(normalize_policy(next));
        ensure_app_cgroup(cg, need(ev, "principal"));
        log(ev, std::to_string(plan.size()) + " ops");
    }

    void on_spawn(const Event& ev) {
        Host& host = sim(ev).host();
        const std::string name = need(ev, "as");
        const CgroupId cg = cgroup_ref(ev, need(ev, "cgroup"));
        const std::string exe = need(ev, "exe");
        std::optional<Pid> parent;
        if (opt(ev, "parent")) parent = proc(ev, "parent");
        const Actor actor = opt(ev, "actor") ? parse_actor(*opt(ev, "actor")) : Actor::Controller;
        const Capabilities caps = opt(ev, "caps") ? parse_caps(*opt(ev, "caps")) : Capabilities{};
        const std::string comm = opt(ev, "comm").value_or(exe.rfind("sha256:", 0) == 0 ? name : exe);
        const Pid pid = host.spawn(parent, cg, exe_digest(exe), comm, actor, caps);
        procs_[name] = pid;
        log(ev, name + " pid=" + std::to_string(pid));
    }

    void on_fork(const Event& ev) {
        const Pid pid = sim(ev).host().fork(proc(ev, "parent"));
        procs_[need(ev, "as")] = pid;
        log(ev, need(ev, "as") + " pid=" + std::to_string(pid));
    }

    void on_exec(const Event& ev) {
        const std::string exe = need(ev, "exe");
        sim(ev).host().exec(proc(ev), exe_digest(exe), opt(ev, "comm").value_or(exe));
        log(ev, "ok");
    }

    void on_migrate(const Event& ev) {
        const Actor actor = opt(ev, "actor") ? parse_actor(*opt(ev, "actor")) : Actor::User;
        sim(ev).host().migrate(proc(ev), cgroup_ref(ev, need(ev, "cgroup")), actor);
        log(ev, "ok");
    }

    void on_verify(const Event& ev) {
        sim(ev).host().verify_exec(proc(ev));
        log(ev, "ok");
    }

    void record(const Event& ev, const MediationResult& res) {
        if (res.verdict.allowed()) ++allows_;
        else ++denies_;
        const auto what = res.verdict.to_string();
        log(ev, what);
        expect_verdict(ev, what, res.verdict.allowed(), res.verdict.reason);
        if (res.socket) {
            if (const auto as = opt(ev, "as")) socks_[*as] = *res.socket;
        }
    }

    std::size_t count(const Event& ev) const {
        const auto c = opt(ev, "count");
        return c ? number<std::size_t>(*c, "count") : 1;
    }

    void on_connect(const Event& ev) {
        record(ev, sim(ev).host().connect(proc(ev), Destination::parse(need(ev, "dst"))));
    }

    void on_sendmsg(const Event& ev) {
        Host& host = sim(ev).host();
        const Pid pid = proc(ev);
        std::optional<SocketId> s;
        Destination d;
        if (opt(ev, "sock")) s = sock(ev);
        else d = Destination::parse(need(ev, "dst"));
        for (std::size_t i = 0, n = count(ev); i < n; ++i) record(ev, host.sendmsg(pid, s, d));
    }

    void on_raw(const Event& ev) {
        sim(ev).host().raw_send(proc(ev), Destination::parse(need(ev, "dst")));
        log(ev, "sent");
    }

    void on_packet(const Event& ev) {
        Simulation& s = sim(ev);
        const SocketId id = sock(ev);
        const auto port = opt(ev, "src_port") ? number<std::uint16_t>(*opt(ev, "src_port"), "src_port")
                                              : static_cast<std::uint16_t>(40000 + id % 20000);
        for (std::size_t i = 0, n = count(ev); i < n; ++i) {
            const GatewayVerdict v = s.send_packet(id, port);
            if (v.passed()) ++passes_;
            else ++drops_;
            const std::string what = std::string(to_string(v.action)) + " " + std::string(to_string(v.reason));
            log(ev, what);
            expect_verdict(ev, what, v.passed(), v.reason);
        }
    }

    void on_mark(const Event& ev) {
        sim(ev).host().set_socket_mark(proc(ev), sock(ev), number<std::uint32_t>(need(ev, "value"), "value"));
        log(ev, "ok");
    }

    void on_update(const Event& ev) {
        Simulation& s = sim(ev);
        const PolicyFile file = load_policy_file(resolve(need(ev, "policy")));
        const UpdateModel model = opt(ev, "model") ? parse_update_model(*opt(ev, "model")) : opts_.model;
        const auto plan = s.update(normalize_policy(file.policy), model);
        for (const auto& [cg, name] : s.policy().bindings) ensure_app_cgroup(cg, name);
        log(ev, std::to_string(plan.size()) + " ops, epoch " + std::to_string(s.state().epoch()));
    }

    void on_bump(const Event& ev) {
        sim(ev).epoch_bump();
        log(ev, "epoch " + std::to_string(sim(ev).state().epoch()));
    }

    void on_advance(const Event& ev) {
        Simulation& s = sim(ev);
        SimTime t;
        if (const auto to = opt(ev, "to")) t = parse_duration(*to);
        else t = s.now() + parse_duration(need(ev, "by"));
        if (t < s.now()) throw ScriptError(ev.line, "time cannot move backwards");
        const auto killed = s.advance_to(t);
        terminated_ += killed.size();
        log(ev, format_duration(t) + ", " + std::to_string(killed.size()) + " terminated");
    }

    void on_close(const Event& ev) {
        sim(ev).host().close_socket(sock(ev));
        log(ev, "ok");
    }

    void on_check(const Event& ev) {
        const SocketState want = parse_socket_state(need(ev, "state"));
        const SocketState got = sim(ev).host().socket(sock(ev)).state;
        report_.check(want == got, "line " + std::to_string(ev.line) + ": socket " + need(ev, "sock") + " is " +
                                       std::string(to_string(got)) + ", expected " + need(ev, "state"));
        log(ev, std::string(to_string(got)));
    }

    Report finish() {
        report_.add("events", events_);
        report_.add("allows", allows_);
        report_.add("denies", denies_);
        report_.add("gateway_passes", passes_);
        report_.add("gateway_drops", drops_);
        report_.add("terminated_sockets", terminated_);
        if (sim_) {
            report_.add("epoch", sim_->state().epoch());
            report_.add("deny_verdicts", sim_->deny_verdicts());
            report_.add("audit_events", sim_->audit_events());
            report_.check(sim_->deny_verdicts() == sim_->audit_events(), "deny verdicts equal audit events");
            if (opts_.audit_out) write_audit(sim_->audit(), *opts_.audit_out);
        }
        for (const auto& t : trace_) report_.add("trace", t);
        return std::move(report_);
    }

    std::filesystem::path base_;
    ScenarioOptions opts_;
    std::unique_ptr<Simulation> sim_;
    std::map<std::string, Pid> procs_;
    std::map<std::string, SocketId> socks_;
    Report report_{"script"};
    std::vector<std::string> trace_;
    std::uint64_t events_ = 0, allows_ = 0, denies_ = 0, passes_ = 0, drops_ = 0, terminated_ = 0;
};

} // namespace

Report run_script_text(std::string_view text, const std::filesystem::path& base_dir, const ScenarioOptions& opts) {
    return ScriptRunner(base_dir, opts).run(text);
}

Report run_script(const std::filesystem::path& script, const ScenarioOptions& opts) {
    std::ifstream in(script);
    if (!in) throw std::invalid_argument("cannot open script " + script.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return run_script_text(ss.str(), script.parent_path(), opts);
}

} // namespace procroute
