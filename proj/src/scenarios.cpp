// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "procroute/scenario.hpp"

namespace procroute {

namespace {

using std::chrono::milliseconds;
using std::chrono::microseconds;
using std::chrono::seconds;

std::string percent(std::uint64_t num, std::uint64_t den) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den));
    return buf;
}

std::string ratio(std::uint64_t num, std::uint64_t den) { return std::to_string(num) + "/" + std::to_string(den); }

Destination dst(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d, std::uint16_t port,
                Transport t = Transport::Tcp) {
    return {IpAddress::v4(a, b, c, d), t, port};
}

Grant grant(std::string_view text) { return Grant::parse(text); }

void write_events(const std::vector<AuditEvent>& events, const std::optional<std::filesystem::path>& path) {
    if (!path) return;
    std::ofstream out(*path, std::ios::app);
    if (!out) throw SinkError("cannot open audit sink " + path->string());
    for (const auto& e : events) out << serialize(e) << "\n";
}

std::uint64_t pick(std::mt19937_64& rng, std::uint64_t lo, std::uint64_t hi) {
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(rng);
}

IpAddress random_host_in(std::mt19937_64& rng, const Cidr& c) {
    const unsigned host_bits = 32 - c.prefix_len();
    const std::uint32_t span = host_bits >= 32 ? 0xffffffffU : ((1U << host_bits) - 1);
    return IpAddress::v4(c.network().v4_value() | static_cast<std::uint32_t>(pick(rng, 0, span)));
}

// ----------------------------------------------------------------- pivot

PolicyInstance pivot_policy() {
    PolicyInstance p;
    p.internal = {Cidr::parse("10.0.0.0/8")};
    p.principals = {{"ssh-client", 1, {}}, {"browser", 2, {}}, {"db-client", 3, {}}, {"resolver", 4, {}}};
    p.grants["ssh-client"] = {grant("10.0.0.0/24 tcp 22")};
    p.grants["browser"] = {grant("10.0.0.0/24 tcp 443")};
    p.grants["db-client"] = {grant("10.0.1.0/24 tcp 5432")};
    p.grants["resolver"] = {grant("10.0.0.2/32 udp 53"), grant("10.0.1.2/32 udp 53")};
    p.bindings = {{101, "ssh-client"}, {102, "browser"}, {103, "db-client"}, {104, "resolver"}};
    return normalize_policy(p);
}

} // namespace

std::vector<PivotTarget> pivot_matrix() {
    std::vector<PivotTarget> out;
    const auto add = [&](const char* svc, const Destination& d) { out.push_back({svc, d}); };
    for (std::uint8_t i = 0; i < 15; ++i) add("ssh", dst(10, 0, 0, 10 + i, 22));
    for (std::uint8_t i = 0; i < 15; ++i) add("ssh", dst(10, 250, 0, 10 + i, 22));
    for (std::uint8_t i = 0; i < 20; ++i) add("https", dst(10, 0, 0, 30 + i, 443));
    for (std::uint8_t i = 0; i < 10; ++i) add("rdp", dst(10, 0, 0, 60 + i, 3389));
    for (std::uint8_t i = 0; i < 5; ++i) add("postgresql", dst(10, 0, 0, 80 + i, 5432));
    for (std::uint8_t i = 0; i < 5; ++i) add("postgresql", dst(10, 0, 1, 80 + i, 5432));
    for (std::uint8_t i = 0; i < 10; ++i) add("alt-http", dst(10, 0, 0, 100 + i, 8080));
    add("dns", dst(10, 0, 0, 2, 53, Transport::Udp));
    add("dns", dst(10, 0, 1, 2, 53, Transport::Udp));
    return out;
}

std::vector<Destination> pivot_externals() {
    return {
        dst(93, 184, 216, 34, 443),  dst(1, 1, 1, 1, 53, Transport::Udp), dst(8, 8, 8, 8, 53, Transport::Udp),
        dst(140, 82, 112, 3, 22),    dst(151, 101, 1, 69, 443),          dst(104, 16, 132, 229, 80),
        dst(9, 9, 9, 9, 53, Transport::Udp), dst(142, 250, 72, 14, 443), dst(13, 107, 42, 14, 443),
        dst(17, 253, 144, 10, 443),  dst(52, 94, 236, 248, 3389),        dst(185, 199, 108, 153, 8080),
    };
}

Report run_pivot(const ScenarioOptions& opts) {
    Report r("pivot");
    Simulation sim(pivot_policy());
    Host& host = sim.host();
    host.setup_session();
    for (CgroupId id = 101; id <= 104; ++id) host.create_app_cgroup("app" + std::to_string(id), id);
    const CgroupId user_cg = *host.find_cgroup("/session/user");

    const Pid attacker = host.spawn(std::nullopt, user_cg, exe_digest("python3"), "python3", Actor::User);

    bool migration_blocked = false;
    try {
        host.migrate(attacker, 101, Actor::User);
    } catch (const UnauthorizedMigration&) {
        migration_blocked = true;
    }
    bool spawn_blocked = false;
    try {
        host.spawn(attacker, 101, exe_digest("ssh"), "ssh", Actor::User);
    } catch (const UnauthorizedMigration&) {
        spawn_blocked = true;
    }

    auto matrix = pivot_matrix();
    std::mt19937_64 rng(opts.seed);
    std::shuffle(matrix.begin(), matrix.end(), rng);

    std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> by_service; // denied, total
    std::uint64_t denied = 0;
    std::uint64_t wrong_reason = 0;
    for (const auto& t : matrix) {
        const auto res = t.dst.proto == Transport::Tcp ? host.connect(attacker, t.dst)
                                                       : host.sendmsg(attacker, std::nullopt, t.dst);
        auto& [d, total] = by_service[t.service];
        ++total;
        if (!res.verdict.allowed()) {
            ++denied;
            ++d;
            if (res.verdict.reason != Reason::NoBinding) ++wrong_reason;
        }
    }
    const auto internal_events = sim.audit().take();

    std::uint64_t complete = 0;
    for (std::size_t i = 0; i < internal_events.size() && i < matrix.size(); ++i) {
        const auto& e = internal_events[i];
        const bool ok = e.kind == AuditKind::Deny && e.pid == attacker && e.comm == "python3" &&
                        e.cgroup_id == user_cg && e.app_index == 0 && e.dst_ip == matrix[i].dst.ip &&
                        e.dst_port == matrix[i].dst.port && e.proto == matrix[i].dst.proto &&
                        e.reason == Reason::NoBinding && parse_audit_line(serialize(e)) == e;
        if (ok) ++complete;
    }

    const auto externals = pivot_externals();
    std::uint64_t ext_allowed = 0;
    for (const auto& d : externals) {
        const auto res =
            d.proto == Transport::Tcp ? host.connect(attacker, d) : host.sendmsg(attacker, std::nullopt, d);
        if (res.verdict == Verdict::allow(Reason::External)) ++ext_allowed;
    }
    const auto external_events = sim.audit().take();

    const Pid ssh = host.spawn(std::nullopt, 101, exe_digest("ssh"), "ssh");
    const Verdict control = host.connect(ssh, dst(10, 0, 0, 10, 22)).verdict;
    const auto control_events = sim.audit().take();

    const std::uint64_t n = matrix.size();
    r.add("internal_attempts", n);
    r.add("denied", ratio(denied, n));
    for (const auto& [svc, c] : by_service) r.add("service." + svc, ratio(c.first, c.second) + " denied");
    r.add("deny_reason", wrong_reason == 0 ? "no_binding" : "mixed");
    r.add("audit_events", internal_events.size());
    r.add("audit_fields_complete", ratio(complete, internal_events.size()));
    r.add("external_attempts", externals.size());
    r.add("external_allowed", ratio(ext_allowed, externals.size()));
    r.add("external_audit_events", external_events.size());
    r.add("migration_blocked", migration_blocked ? "yes" : "no");
    r.add("spawn_into_app_blocked", spawn_blocked ? "yes" : "no");
    r.add("authorized_control", control.to_string());
    r.add("summary", std::to_string(denied) + "/" + std::to_string(n) + " denied, " +
                         std::to_string(internal_events.size()) + " audit events, externals " +
                         (ext_allowed == externals.size() ? "allowed" : "NOT all allowed"));

    r.check(n == 82, "matrix has 82 internal attempts");
    r.check(denied == n && wrong_reason == 0, "every internal attempt denied with no_binding");
    r.check(internal_events.size() == n, "one audit event per denial");
    r.check(complete == n, "every audit event carries the full field set");
    r.check(externals.size() >= 10 && ext_allowed == externals.size(), "every external attempt allowed");
    r.check(external_events.empty(), "allowed attempts emit no audit events");
    r.check(migration_blocked && spawn_blocked, "user cannot move processes into an app cgroup");
    r.check(control == Verdict::allow(Reason::GrantMatch) && control_events.empty(), "bound process still allowed");
    r.check(sim.deny_verdicts() == sim.audit_events(), "deny verdicts equal audit events");

    write_events(internal_events, opts.audit_out);
    return r;
}

// --------------------------------------------------------- update safety

namespace {

struct SafetyWorld {
    std::vector<PolicyInstance> instances; // alternating endpoints of the reload cycles
    std::vector<Probe> probes;
    TaskEnv env;
};

PolicyInstance random_safety_policy(std::mt19937_64& rng, bool odd, NormalizationMode mode) {
    PolicyInstance p;
    p.mode = mode;
    p.internal = {Cidr::parse("10.0.0.0/16"), Cidr::parse("10.1.0.0/16"),
                  Cidr::parse(odd ? "10.3.0.0/16" : "10.2.0.0/16")};
    for (std::uint32_t i = 1; i <= 6; ++i) {
        Principal pr{"app" + std::to_string(i), i, {}};
        if (i == 2) pr.exec_hash = sha256("app2-bin");
        if (i == 5) pr.exec_hash = sha256(odd ? "app5-bin-v2" : "app5-bin");
        p.principals.push_back(pr);
    }
    static const std::uint16_t ports[] = {22, 53, 80, 443, 5432, 8080};
    for (const auto& pr : p.principals) {
        std::set<std::pair<unsigned, unsigned>> used;
        const auto n = pick(rng, 2, 4);
        while (used.size() < n) used.insert({static_cast<unsigned>(pick(rng, 0, 3)), static_cast<unsigned>(pick(rng, 0, 7))});
        for (const auto& [b, c] : used) {
            Grant g;
            g.prefix = Cidr(IpAddress::v4(10, static_cast<std::uint8_t>(b), static_cast<std::uint8_t>(c), 0), 24);
            if (mode == NormalizationMode::Cascaded && pick(rng, 0, 3) == 0) {
                g.prefix = Cidr(IpAddress::v4(10, static_cast<std::uint8_t>(b), 0, 0), 16);
            }
            g.proto = static_cast<ProtoSel>(pick(rng, 0, 2));
            switch (pick(rng, 0, 2)) {
            case 0: g.ports = PortRange::single(ports[pick(rng, 0, 5)]); break;
            case 1: g.ports = PortRange(1000, 1999); break;
            default: g.ports = PortRange::all(); break;
            }
            p.grants[pr.name].push_back(g);
        }
    }
    for (std::uint64_t cg = 100; cg < 108; ++cg) {
        const auto choice = pick(rng, 0, 6);
        if (choice < 6) p.bindings[cg] = "app" + std::to_string(choice + 1);
    }
    // Fold any same-prefix pairs a principal drew twice into one grant.
    for (auto& [name, gs] : p.grants) {
        std::map<Cidr, Grant> uniq;
        for (const auto& g : gs) uniq.emplace(g.prefix, g);
        gs.clear();
        for (const auto& [c, g] : uniq) gs.push_back(g);
    }
    return normalize_policy(p);
}

SafetyWorld make_safety_world(std::uint64_t seed, NormalizationMode mode) {
    std::mt19937_64 rng(seed);
    SafetyWorld w;
    const PolicyInstance a = random_safety_policy(rng, false, mode);
    const PolicyInstance b = random_safety_policy(rng, true, mode);
    for (int i = 0; i <= 10; ++i) w.instances.push_back(i % 2 == 0 ? a : b);

    // One task per cgroup plus an unbound attacker; a few tasks hold a
    // verification for the principal of their cgroup.
    std::vector<std::pair<std::uint64_t, Pid>> tasks;
    for (std::uint64_t cg = 100; cg < 108; ++cg) tasks.push_back({cg, static_cast<Pid>(900 + cg)});
    tasks.push_back({999, 1999});
    for (const auto& [cg, tgid] : tasks) {
        if (const Principal* pr = a.bound_principal(cg); pr != nullptr && pick(rng, 0, 1) == 0) {
            w.env[tgid] = pr->app_index;
        }
    }

    std::vector<Grant> pool;
    for (const auto* pol : {&a, &b}) {
        for (const auto& [name, gs] : pol->grants) pool.insert(pool.end(), gs.begin(), gs.end());
    }
    static const std::uint16_t ports[] = {22, 53, 80, 443, 1500, 5432, 8080};
    for (const auto& [cg, tgid] : tasks) {
        for (int k = 0; k < 8; ++k) {
            Destination d;
            if (k == 7) {
                d = dst(93, 184, 216, static_cast<std::uint8_t>(pick(rng, 1, 254)), 443);
            } else if (k == 6) {
                d = dst(10, static_cast<std::uint8_t>(pick(rng, 2, 3)), static_cast<std::uint8_t>(pick(rng, 0, 255)),
                        static_cast<std::uint8_t>(pick(rng, 1, 254)), ports[pick(rng, 0, 6)]);
            } else {
                // Bias toward grants of either side's principal for this cgroup.
                std::vector<Grant> near;
                for (const auto* pol : {&a, &b}) {
                    if (const Principal* pr = pol->bound_principal(cg)) {
                        for (const auto* side : {&a, &b}) {
                            const auto gs = side->grants_of(*side->find(pr->name));
                            near.insert(near.end(), gs.begin(), gs.end());
                        }
                    }
                }
                const auto& src = (k % 2 == 0 && !near.empty()) ? near : pool;
                const Grant& g = src[pick(rng, 0, src.size() - 1)];
                d.ip = random_host_in(rng, g.prefix);
                d.proto = g.proto == ProtoSel::Udp || (g.proto == ProtoSel::Any && pick(rng, 0, 1) == 1)
                              ? Transport::Udp
                              : Transport::Tcp;
                d.port = g.ports.is_all() || pick(rng, 0, 3) == 0
                             ? ports[pick(rng, 0, 6)]
                             : static_cast<std::uint16_t>(pick(rng, g.ports.lo, g.ports.hi));
            }
            if (d.proto == Transport::Udp && k == 7) d.proto = Transport::Tcp;
            w.probes.push_back({cg, tgid, d});
        }
    }
    return w;
}

} // namespace

Report run_update_safety(const ScenarioOptions& opts) {
    Report r("update-safety");
    const NormalizationMode mode = opts.mode.value_or(NormalizationMode::Strict);
    const SafetyWorld w = make_safety_world(opts.seed, mode);
    const std::size_t cycles = w.instances.size() - 1;

    ExploreConfig cfg;
    cfg.seed = opts.seed;
    cfg.probe_budget = (opts.probes + cycles - 1) / cycles;

    std::uint64_t evaluations = 0, violations = 0, mismatches = 0, schedules = 0, states = 0;
    std::size_t max_ops = 0;
    bool all_exhaustive = true;
    bool budget_met = true;
    std::optional<Violation> example;
    for (std::size_t c = 0; c < cycles; ++c) {
        const auto& from = w.instances[c];
        const auto& to = w.instances[c + 1];
        const UpdatePlan plan = plan_update(from, to, opts.model);
        cfg.seed = opts.seed + c;
        const ExploreReport rep = explore_interleavings(from, to, plan, w.probes, w.env, cfg);
        evaluations += rep.probe_evaluations;
        violations += rep.violations;
        mismatches += rep.final_mismatches;
        schedules += rep.schedules;
        states += rep.states;
        max_ops = std::max(max_ops, plan.size());
        all_exhaustive = all_exhaustive && rep.exhaustive;
        budget_met = budget_met && (rep.exhaustive || rep.probe_evaluations >= cfg.probe_budget);
        if (!example && !rep.examples.empty()) example = rep.examples.front();
    }

    r.add("model", std::string(to_string(opts.model)));
    r.add("mode", std::string(to_string(mode)));
    r.add("seed", opts.seed);
    r.add("reload_cycles", cycles);
    r.add("plan_ops_max", max_ops);
    r.add("exploration", all_exhaustive ? "exhaustive" : "randomized");
    r.add("schedules", schedules);
    r.add("states", states);
    r.add("probes", w.probes.size());
    r.add("probe_evaluations", evaluations);
    r.add("violations", violations);
    r.add("final_state_mismatches", mismatches);
    if (example) {
        r.add("example_violation", "cgroup=" + std::to_string(example->probe.cgroup_id) +
                                       " dst=" + example->probe.dst.to_string() + " " + example->verdict.to_string() +
                                       " after " + std::to_string(example->step) + " ops");
    }

    r.check(budget_met, "probe budget met on every randomized cycle");
    r.check(mismatches == 0, "final state decides like the new policy");
    if (opts.model == UpdateModel::FailClosed) {
        r.check(violations == 0, "no transient allow outside old and new policy");
    } else {
        r.add("expectation", "violations > 0 (counter-model)");
        r.check(violations > 0, "counter-model exhibits a transient allow");
    }
    return r;
}

// ------------------------------------------------------------ revocation

Report run_revocation(const ScenarioOptions& opts) {
    Report r("revocation");
    PolicyInstance before;
    before.internal = {Cidr::parse("10.0.0.0/8")};
    before.principals = {{"db", 1, {}}};
    before.grants["db"] = {grant("10.0.5.0/24 tcp 5432"), grant("10.0.6.0/24 udp 514"), grant("10.0.7.0/24 tcp 22")};
    before.bindings = {{100, "db"}};
    before = normalize_policy(before);
    PolicyInstance after = before;
    after.grants["db"] = {grant("10.0.7.0/24 tcp 22"), grant("10.0.8.0/24 tcp 443")};
    after = normalize_policy(after);

    Simulation sim(before);
    Host& host = sim.host();
    host.setup_session();
    host.create_app_cgroup("db", 100);
    const Pid p = host.spawn(std::nullopt, 100, exe_digest("dbtool"), "dbtool");

    std::vector<SocketId> revoked_tcp, granted_tcp, udp;
    for (std::uint8_t i = 1; i <= 50; ++i) {
        if (auto s = host.connect(p, dst(10, 0, 5, i, 5432)).socket) revoked_tcp.push_back(*s);
    }
    for (std::uint8_t i = 1; i <= 5; ++i) {
        if (auto s = host.connect(p, dst(10, 0, 7, i, 22)).socket) granted_tcp.push_back(*s);
    }
    for (std::uint8_t i = 1; i <= 10; ++i) {
        if (auto s = host.sendmsg(p, std::nullopt, dst(10, 0, 6, i, 514, Transport::Udp)).socket) udp.push_back(*s);
    }
    r.check(revoked_tcp.size() == 50 && granted_tcp.size() == 5 && udp.size() == 10, "setup connections allowed");

    sim.advance_to(milliseconds(300));
    const UpdatePlan plan = sim.update(after);
    const SimTime bump_time = *sim.last_bump();

    // G1: right after the last plan op, fresh decisions follow the new policy.
    std::mt19937_64 rng(opts.seed);
    std::uint64_t g1_mismatch = 0;
    const std::uint16_t ports[] = {22, 443, 514, 5432};
    const Principal* db = after.find("db");
    for (int i = 0; i < 500; ++i) {
        const Destination d = dst(10, 0, static_cast<std::uint8_t>(pick(rng, 4, 9)),
                                  static_cast<std::uint8_t>(pick(rng, 1, 254)), ports[pick(rng, 0, 3)],
                                  pick(rng, 0, 1) == 0 ? Transport::Tcp : Transport::Udp);
        const SockContext ctx{p, p, 100, Syscall::Connect, d, std::nullopt};
        if (host.probe(ctx) != decide_local(db, false, d, after)) ++g1_mismatch;
    }
    const Verdict new_revoked = host.connect(p, dst(10, 0, 5, 1, 5432)).verdict;
    const Verdict new_udp = host.sendmsg(p, std::nullopt, dst(10, 0, 6, 1, 514, Transport::Udp)).verdict;

    std::uint64_t udp_stale = 0;
    for (int i = 0; i < 1000; ++i) {
        const auto res = host.sendmsg(p, udp[static_cast<std::size_t>(i) % udp.size()], {});
        if (res.verdict == Verdict::deny(Reason::StaleEpoch)) ++udp_stale;
    }

    std::uint64_t alive_before = 0;
    for (const auto s : revoked_tcp) alive_before += host.socket(s).state == SocketState::Connected ? 1 : 0;

    const SimTime delta = sim.config().revocation.sweep_interval;
    const auto killed = sim.advance_to(bump_time + delta);
    std::uint64_t revoked_killed = 0;
    SimTime worst{0};
    for (const auto s : revoked_tcp) {
        const auto& sock = host.socket(s);
        if (sock.state == SocketState::Terminated && sock.terminated_at) {
            ++revoked_killed;
            worst = std::max(worst, *sock.terminated_at - bump_time);
        }
    }
    std::uint64_t granted_alive = 0;
    for (const auto s : granted_tcp) granted_alive += host.socket(s).state == SocketState::Connected ? 1 : 0;

    const auto fresh = host.connect(p, dst(10, 0, 7, 20, 22));
    const std::uint64_t fresh_epoch = fresh.socket ? host.socket(*fresh.socket).epoch.value_or(0) : 0;

    r.add("plan_ops", plan.size());
    r.add("epoch", sim.state().epoch());
    r.add("g1_probe_mismatches", g1_mismatch);
    r.add("new_connect_revoked", new_revoked.to_string());
    r.add("new_send_revoked", new_udp.to_string());
    r.add("udp_stale_denied", ratio(udp_stale, 1000));
    r.add("tcp_alive_before_sweep", alive_before);
    r.add("tcp_terminated", ratio(revoked_killed, revoked_tcp.size()));
    r.add("sweep_terminations", killed.size());
    r.add("max_termination_delay", format_duration(worst));
    r.add("sweep_interval", format_duration(delta));
    r.add("still_granted_alive", ratio(granted_alive, granted_tcp.size()));
    r.add("new_connection", fresh.verdict.to_string() + " epoch=" + std::to_string(fresh_epoch));
    r.add("deny_verdicts", sim.deny_verdicts());
    r.add("audit_events", sim.audit_events());

    r.check(plan.bumps_epoch && sim.state().epoch() == 1, "shrinking update bumps the epoch");
    r.check(g1_mismatch == 0, "decisions follow the new policy right after the update");
    r.check(new_revoked == Verdict::deny(Reason::NoGrant) && new_udp == Verdict::deny(Reason::NoGrant),
            "new flows to revoked destinations denied");
    r.check(udp_stale == 1000, "every UDP send on a stale socket denied with stale_epoch");
    r.check(revoked_killed == 50 && worst <= delta, "all revoked TCP sockets terminated within one sweep interval");
    r.check(granted_alive == granted_tcp.size(), "sockets to still-granted destinations survive");
    r.check(fresh.verdict == Verdict::allow(Reason::GrantMatch) && fresh_epoch == 1, "re-created socket allowed");
    r.check(sim.deny_verdicts() == sim.audit_events(), "deny verdicts equal audit events");

    write_events(sim.audit().take(), opts.audit_out);
    return r;
}

// ------------------------------------------------------------- flowcache

namespace {

constexpr std::uint32_t kWebApp = 3;

PolicyInstance flowcache_policy(const IpAddress& peer) {
    PolicyInstance p;
    p.internal = {Cidr::parse("10.0.0.0/8")};
    p.principals = {{"web", kWebApp, {}}};
    p.grants["web"] = {grant("10.0.0.0/16 tcp 443")};
    p.gateway_grants[PeerApp{peer, kWebApp}] = {grant("10.0.0.0/16 tcp 443")};
    return normalize_policy(p);
}

SimPacket flow_packet(const IpAddress& peer, std::size_t flow, std::uint32_t mark, std::uint64_t epoch,
                      std::uint16_t port = 443) {
    SimPacket pkt;
    pkt.inner_src = peer;
    pkt.src_port = static_cast<std::uint16_t>(20000 + flow % 40000);
    pkt.inner_dst = dst(10, 0, static_cast<std::uint8_t>((flow / 200) % 256), static_cast<std::uint8_t>(flow % 200 + 1),
                        port);
    return encode_tag(pkt, mark, epoch);
}

struct CacheRun {
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
};

// Round-robin over flows so each flow's packets stay inside one TTL window.
CacheRun run_flows(Gateway& gw, const IpAddress& peer, std::size_t flows, std::size_t pkts, SimTime window) {
    const std::uint64_t total = static_cast<std::uint64_t>(flows) * pkts;
    const SimTime spacing = std::max<SimTime>(SimTime{1}, std::min<SimTime>(milliseconds(1), window / (total + 1)));
    SimTime t{0};
    for (std::size_t k = 0; k < pkts; ++k) {
        for (std::size_t f = 0; f < flows; ++f) {
            SimPacket pkt = flow_packet(peer, f, kWebApp, gw.epoch());
            gw.ingress(pkt, t);
            t += spacing;
        }
    }
    return {gw.counters().cache_hits, gw.counters().cache_misses};
}

} // namespace

Report run_flowcache(const ScenarioOptions& opts) {
    Report r("flowcache");
    const IpAddress peer = IpAddress::v4(10, 8, 0, 2);
    const PolicyInstance policy = flowcache_policy(peer);
    GatewayConfig gcfg;
    gcfg.cache_enabled = opts.cache;
    const SimTime window = gcfg.cache_ttl - milliseconds(1);

    EventBuffer events(1 << 16);
    Gateway short_gw(gcfg, &events);
    short_gw.install(policy);
    const CacheRun s = run_flows(short_gw, peer, opts.flows, opts.pkts, window);

    Gateway long_gw(gcfg, &events);
    long_gw.install(policy);
    const CacheRun l = run_flows(long_gw, peer, 4, opts.long_pkts, window);

    // Transparency: a mixed trace through cache-on and cache-off gateways.
    GatewayConfig on_cfg, off_cfg;
    on_cfg.cache_enabled = true;
    off_cfg.cache_enabled = false;
    Gateway on(on_cfg, &events), off(off_cfg, &events);
    on.install(policy);
    off.install(policy);
    std::mt19937_64 rng(opts.seed);
    std::uint64_t trace_len = 0, divergent = 0, post_bump_hits = 0;
    std::set<std::size_t> seen_after_bump;
    bool bumped = false;
    SimTime t{0};
    const std::size_t trace_packets = 20000;
    for (std::size_t i = 0; i < trace_packets; ++i) {
        if (i == trace_packets / 2) {
            on.epoch_bump();
            off.epoch_bump();
            bumped = true;
        }
        const std::size_t flow = pick(rng, 0, 299);
        std::uint32_t mark = kWebApp;
        std::uint16_t port = 443;
        if (flow % 10 == 7) mark = 9;       // a principal without gateway grants
        if (flow % 10 == 8) port = 22;      // port outside the grant
        if (flow % 10 == 9) mark = 0;       // untagged
        SimPacket a = flow_packet(peer, flow, mark, on.epoch(), port);
        if (flow % 25 == 3) a.inner_dst.ip = IpAddress::v4(93, 184, 216, static_cast<std::uint8_t>(flow % 200));
        SimPacket b = a;
        const auto va = on.ingress(a, t);
        const auto vb = off.ingress(b, t);
        ++trace_len;
        if (va.action != vb.action || a != b) ++divergent;
        if (bumped && seen_after_bump.insert(flow).second && va.cache_hit) ++post_bump_hits;
        t += microseconds(200);
    }

    const std::uint64_t n = s.hits + s.misses;
    r.add("cache", opts.cache ? "on" : "off");
    r.add("flows", opts.flows);
    r.add("packets_per_flow", opts.pkts);
    r.add("hits", s.hits);
    r.add("misses", s.misses);
    r.add("hit_rate", percent(s.hits, n));
    r.add("long_flows", 4);
    r.add("long_packets_per_flow", opts.long_pkts);
    r.add("long_hits", l.hits);
    r.add("long_misses", l.misses);
    r.add("long_hit_rate", percent(l.hits, l.hits + l.misses));
    r.add("evictions", short_gw.cache().evictions());
    r.add("transparency_packets", trace_len);
    r.add("transparency", divergent == 0 ? "identical" : std::to_string(divergent) + " divergent");
    r.add("post_bump_first_packet_hits", post_bump_hits);
    const std::uint64_t drops = short_gw.counters().drops + long_gw.counters().drops + on.counters().drops +
                                off.counters().drops;
    const std::uint64_t audit = events.emitted_count() + events.dropped_count();
    r.add("gateway_drops", drops);
    r.add("audit_events", audit);
    r.add("summary", "hit rate " + percent(s.hits, n) + ", long flows " + std::to_string(l.misses) + " misses");

    if (opts.cache) {
        r.check(s.misses == opts.flows && s.hits == static_cast<std::uint64_t>(opts.flows) * (opts.pkts - 1),
                "one miss per short flow, hits for the rest");
        r.check(l.misses == 4, "long flows miss exactly once each");
    }
    r.check(divergent == 0, "cache never changes verdicts");
    r.check(post_bump_hits == 0, "first packet of each flow after an epoch bump re-evaluates");
    r.check(drops == audit, "one audit event per gateway drop");
    write_events(events.take(), opts.audit_out);
    return r;
}

// ---------------------------------------------------------- monotonicity

namespace {

struct Universe {
    unsigned nip;
    unsigned nport;
    [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(nip) * 2 * nport; }
    [[nodiscard]] Destination at(std::size_t i) const {
        const unsigned port = static_cast<unsigned>(i % nport);
        const unsigned proto = static_cast<unsigned>((i / nport) % 2);
        const unsigned ip = static_cast<unsigned>(i / (2 * static_cast<std::size_t>(nport)));
        return {IpAddress::v4(0x0a000000U + ip), proto == 0 ? Transport::Tcp : Transport::Udp,
                static_cast<std::uint16_t>(1000 + port)};
    }
    [[nodiscard]] std::size_t index(const Destination& d) const {
        const std::size_t ip = d.ip.v4_value() - 0x0a000000U;
        return (ip * 2 + (d.proto == Transport::Tcp ? 0 : 1)) * nport + (d.port - 1000U);
    }
};

std::shared_ptr<const Program> random_filter(std::mt19937_64& rng, const Universe& u, const std::string& name) {
    auto bits = std::make_shared<std::vector<bool>>(u.size());
    const double density = std::uniform_real_distribution<double>(0.3, 0.97)(rng);
    std::bernoulli_distribution coin(density);
    for (std::size_t i = 0; i < u.size(); ++i) (*bits)[i] = coin(rng);
    return std::make_shared<PredicateProgram>(
        name, [bits, u](const Destination& d) { return (*bits)[u.index(d)]; }, Reason::NoGrant);
}

struct StackResult {
    std::uint64_t comparisons = 0;
    std::uint64_t counterexamples = 0;
};

// Builds a random chain and compares each node's allow set with its ancestors'.
StackResult check_stack(std::mt19937_64& rng, bool with_override) {
    const unsigned nip = static_cast<unsigned>(pick(rng, 1, 64));
    const unsigned nport = static_cast<unsigned>(pick(rng, 1, std::max<std::uint64_t>(1, 2048 / nip)));
    const Universe u{nip, std::min(nport, 2048U)};
    DataPlaneState state;
    Host host(state);
    const auto depth = pick(rng, 2, 5);
    std::vector<CgroupId> chain{host.root()};
    for (std::uint64_t d = 1; d < depth; ++d) {
        chain.push_back(host.create_cgroup(chain.back(), "n" + std::to_string(d), false, Actor::Controller));
    }
    for (const auto cg : chain) {
        const auto progs = pick(rng, 0, 2);
        for (std::uint64_t k = 0; k < progs; ++k) {
            host.attach_program(cg, random_filter(rng, u, "f"), AttachFlag::AllowMulti);
        }
    }
    if (with_override) {
        host.attach_program(chain.back(), std::make_shared<PredicateProgram>("open", [](const Destination&) { return true; }),
                            AttachFlag::AllowOverride);
    }

    std::vector<std::vector<bool>> allow(chain.size(), std::vector<bool>(u.size()));
    for (std::size_t n = 0; n < chain.size(); ++n) {
        for (std::size_t i = 0; i < u.size(); ++i) {
            allow[n][i] = host.probe(SockContext{1, 1, chain[n], Syscall::Connect, u.at(i), std::nullopt}).allowed();
        }
    }
    StackResult res;
    for (std::size_t n = 1; n < chain.size(); ++n) {
        for (std::size_t a = 0; a < n; ++a) {
            ++res.comparisons;
            for (std::size_t i = 0; i < u.size(); ++i) {
                if (allow[n][i] && !allow[a][i]) {
                    ++res.counterexamples;
                    break;
                }
            }
        }
    }
    return res;
}

} // namespace

Report run_monotonicity(const ScenarioOptions& opts) {
    Report r("monotonicity");
    std::mt19937_64 rng(opts.seed);
    std::uint64_t comparisons = 0, counterexamples = 0;
    for (std::size_t s = 0; s < opts.stacks; ++s) {
        const auto res = check_stack(rng, false);
        comparisons += res.comparisons;
        counterexamples += res.counterexamples;
    }
    std::uint64_t override_stacks = 0;
    const std::size_t controls = std::max<std::size_t>(1, opts.stacks / 10);
    for (std::size_t s = 0; s < controls; ++s) {
        if (check_stack(rng, true).counterexamples > 0) ++override_stacks;
    }
    r.add("stacks", opts.stacks);
    r.add("subset_checks", comparisons);
    r.add("counterexamples", counterexamples);
    r.add("override_controls", controls);
    r.add("override_counterexample_stacks", override_stacks);
    r.check(counterexamples == 0, "AllowMulti stacks never widen a descendant");
    r.check(override_stacks > 0, "AllowOverride control breaks monotonicity");
    return r;
}

// ------------------------------------------------------------------ split

namespace {

struct Endpoint {
    IpAddress peer;
    DataPlaneState state;
    std::unique_ptr<Host> host;
};

} // namespace

Report run_split(const ScenarioOptions& opts) {
    Report r("split");
    std::mt19937_64 rng(opts.seed);
    const std::size_t trials = 40;
    std::uint64_t attempts = 0, passes = 0, internal_passes = 0, outside_split = 0, outside_local = 0;
    std::uint64_t unbound_attempts = 0, unbound_internal_passes = 0, client_denies = 0;
    std::uint64_t drops = 0, audit = 0;

    for (std::size_t trial = 0; trial < trials; ++trial) {
        PolicyInstance p;
        p.internal = {Cidr::parse("10.0.0.0/8"), Cidr::parse("172.16.0.0/12")};
        const std::vector<IpAddress> peers{IpAddress::v4(10, 8, 0, 2), IpAddress::v4(10, 8, 0, 3),
                                           IpAddress::v4(10, 8, 0, 4)};
        for (std::uint32_t a = 1; a <= 4; ++a) {
            p.principals.push_back({"app" + std::to_string(a), a, {}});
            std::set<unsigned> subnets;
            while (subnets.size() < 4) subnets.insert(static_cast<unsigned>(pick(rng, 0, 15)));
            auto& gs = p.grants["app" + std::to_string(a)];
            for (const auto sn : subnets) {
                Grant g;
                g.prefix = Cidr(IpAddress::v4(10, 0, static_cast<std::uint8_t>(sn), 0), 24);
                g.proto = static_cast<ProtoSel>(pick(rng, 0, 2));
                g.ports = pick(rng, 0, 1) == 0 ? PortRange::single(static_cast<std::uint16_t>(pick(rng, 20, 25)))
                                               : PortRange::all();
                gs.push_back(g);
            }
            for (const auto& peer : peers) {
                std::vector<Grant> sub;
                for (const auto& g : gs) {
                    if (pick(rng, 0, 2) != 0) sub.push_back(g);
                }
                if (!sub.empty()) p.gateway_grants[PeerApp{peer, a}] = sub;
            }
            p.bindings[100 + a] = "app" + std::to_string(a);
        }
        p = normalize_policy(p);

        EventBuffer events(1 << 16);
        Gateway gw({}, &events);
        gw.install(p);

        for (const auto& peer : peers) {
            DataPlaneState state = build_dataplane(p);
            HostConfig hc;
            hc.mode = EnforcementMode::Tagging;
            Host host(state, hc, &events);
            host.setup_session();
            std::vector<std::pair<Pid, const Principal*>> procs;
            for (std::uint32_t a = 1; a <= 4; ++a) {
                host.create_app_cgroup("app" + std::to_string(a), 100 + a);
                procs.push_back({host.spawn(std::nullopt, 100 + a, exe_digest("bin"), "bin"), p.find_index(a)});
            }
            procs.push_back({host.spawn(std::nullopt, *host.find_cgroup("/session/user"), exe_digest("sh"), "sh",
                                        Actor::User),
                             nullptr});

            for (int k = 0; k < 150; ++k) {
                const auto& [pid, prin] = procs[pick(rng, 0, procs.size() - 1)];
                Destination d = dst(10, 0, static_cast<std::uint8_t>(pick(rng, 0, 15)),
                                    static_cast<std::uint8_t>(pick(rng, 1, 254)),
                                    static_cast<std::uint16_t>(pick(rng, 20, 25)),
                                    pick(rng, 0, 1) == 0 ? Transport::Tcp : Transport::Udp);
                if (k % 10 == 0) d.ip = IpAddress::v4(172, 16, 0, static_cast<std::uint8_t>(pick(rng, 1, 254)));
                if (k % 13 == 0) d.ip = IpAddress::v4(93, 184, 216, 34);
                const auto res = d.proto == Transport::Tcp ? host.connect(pid, d) : host.sendmsg(pid, std::nullopt, d);
                ++attempts;
                if (!res.verdict.allowed() || !res.socket) {
                    ++client_denies;
                    continue;
                }
                const SimSocket& s = host.socket(*res.socket);
                SimPacket pkt{peer, static_cast<std::uint16_t>(30000 + k), d};
                pkt = encode_tag(pkt, s.mark, s.epoch.value_or(state.epoch()));
                const auto v = gw.ingress(pkt, host.now());
                if (prin == nullptr) ++unbound_attempts;
                if (!v.passed()) {
                    ++drops;
                    continue;
                }
                ++passes;
                if (!gw.is_internal(d.ip)) continue;
                ++internal_passes;
                if (prin == nullptr) {
                    ++unbound_internal_passes;
                    continue;
                }
                const auto split = reachable_set(prin, p, SplitSide{peer});
                const auto local = reachable_set(prin, p, LocalSide{});
                if (!match_grants(d, split).covered) ++outside_split;
                if (!match_grants(d, local).covered) ++outside_local;
            }
        }
        audit += events.emitted_count() + events.dropped_count();
        write_events(events.take(), opts.audit_out);
    }

    r.add("trials", trials);
    r.add("attempts", attempts);
    r.add("client_denies", client_denies);
    r.add("gateway_passes", passes);
    r.add("internal_passes", internal_passes);
    r.add("outside_split_reach", outside_split);
    r.add("outside_local_reach", outside_local);
    r.add("unbound_attempts", unbound_attempts);
    r.add("unbound_internal_passes", unbound_internal_passes);
    r.add("gateway_drops", drops);
    r.add("audit_events", audit);
    r.check(client_denies == 0, "tagging-mode client hooks never deny");
    r.check(internal_passes > 0, "some internal traffic passes");
    r.check(outside_split == 0 && outside_local == 0, "every internal pass lies in split and local reach");
    r.check(unbound_internal_passes == 0, "unbound processes get no internal passes");
    r.check(drops == audit, "one audit event per gateway drop");
    return r;
}

// --------------------------------------------------------------- cascaded

Report run_cascaded(const ScenarioOptions& opts) {
    (void)opts;
    Report r("cascaded");
    PolicyInstance p;
    p.internal = {Cidr::parse("10.0.0.0/8")};
    p.principals = {{"svc", 1, {}}};
    p.grants["svc"] = {grant("10.0.0.0/8 tcp 443"), grant("10.1.0.0/16 tcp 22")};
    p.bindings = {{100, "svc"}};

    std::string strict_error;
    try {
        (void)normalize_policy(p);
    } catch (const AmbiguousOverlap& e) {
        strict_error = e.what();
    }
    r.add("strict", strict_error.empty() ? "accepted" : "rejected: " + strict_error);
    r.check(!strict_error.empty() && strict_error.find("10.0.0.0/8") != std::string::npos &&
                strict_error.find("10.1.0.0/16") != std::string::npos,
            "strict mode rejects the overlap naming both prefixes");

    p.mode = NormalizationMode::Cascaded;
    PolicyInstance cascaded;
    try {
        cascaded = normalize_policy(p);
        r.add("cascaded", "accepted");
    } catch (const PolicyError& e) {
        r.add("cascaded", std::string("rejected: ") + e.what());
        r.check(false, "cascaded mode accepts the overlap");
        return r;
    }

    const DataPlaneState state = build_dataplane(cascaded);
    const Principal* prin = cascaded.find("svc");
    const std::uint16_t ports[] = {22, 80, 443};
    std::uint64_t evaluations = 0, mismatches = 0, allows = 0;
    for (const std::uint32_t base : {0x0a000000U, 0x0a010000U}) {
        for (std::uint32_t host = 0; host < 65536; ++host) {
            for (const auto t : {Transport::Tcp, Transport::Udp}) {
                for (const auto port : ports) {
                    const Destination d{IpAddress::v4(base + host), t, port};
                    const Verdict got = state.evaluate(100, 1, d);
                    ++evaluations;
                    if (got.allowed()) ++allows;
                    if (got != decide_local(prin, false, d, cascaded)) ++mismatches;
                }
            }
        }
    }
    const Verdict example = state.evaluate(100, 1, Destination::parse("10.1.2.3:443/tcp"));
    r.add("universe", "10.0.0.0/16 + 10.1.0.0/16 x {22,80,443} x {tcp,udp}");
    r.add("evaluations", evaluations);
    r.add("allows", allows);
    r.add("mismatches", mismatches);
    r.add("example_10.1.2.3:443/tcp", example.to_string());
    r.check(mismatches == 0, "cascaded lookups match the most-specific-prefix decision");
    r.check(example == Verdict::deny(Reason::PortMismatch), "nested prefix overrides the enclosing grant");
    return r;
}

// ---------------------------------------------------------------- scaling

Report run_scaling(const ScenarioOptions& opts) {
    Report r("scaling");
    std::mt19937_64 rng(opts.seed);
    const auto fixed = app_key(1);
    std::set<unsigned> bounds, observed;
    std::uint64_t total_mismatch = 0;
    for (const std::size_t n : {std::size_t{4}, std::size_t{64}, std::size_t{4096}}) {
        std::set<Cidr> prefixes;
        prefixes.insert(Cidr(IpAddress::v4(10, 255, 255, 1), 32));
        while (prefixes.size() < n) {
            const auto len = static_cast<unsigned>(pick(rng, 8, 32));
            prefixes.insert(Cidr(IpAddress::v4(static_cast<std::uint32_t>(pick(rng, 0, 0xffffffffULL))).masked(len), len));
        }
        GrantTable table;
        for (const auto& c : prefixes) table.put(fixed, c, AllowRule{ProtoSel::Any, PortRange::all()});
        const std::vector<Cidr> list(prefixes.begin(), prefixes.end());

        unsigned max_seen = 0;
        std::uint64_t mismatch = 0;
        const std::size_t lookups = 10000;
        for (std::size_t i = 0; i <= lookups; ++i) {
            IpAddress ip = i == lookups ? IpAddress::v4(10, 255, 255, 1)
                                        : (i % 2 == 0 ? IpAddress::v4(static_cast<std::uint32_t>(pick(rng, 0, 0xffffffffULL)))
                                                      : random_host_in(rng, list[pick(rng, 0, list.size() - 1)]));
            const auto m = table.match(fixed, Destination{ip, Transport::Tcp, 1});
            max_seen = std::max(max_seen, m.visits);
            std::optional<Cidr> best;
            for (const auto& c : list) {
                if (c.contains(ip) && (!best || c.prefix_len() > best->prefix_len())) best = c;
            }
            if (best != m.prefix) ++mismatch;
        }
        const unsigned bound = table.trie(Family::V4).max_visits();
        bounds.insert(bound);
        observed.insert(max_seen);
        total_mismatch += mismatch;
        const std::string key = "entries_" + std::to_string(n);
        r.add(key + ".visit_bound", bound);
        r.add(key + ".max_visits", max_seen);
        r.add(key + ".linear_scan_mismatches", mismatch);
    }
    r.add("visit_bound_identical", bounds.size() == 1 ? "yes" : "no");
    r.add("max_visits_identical", observed.size() == 1 ? "yes" : "no");
    r.check(bounds.size() == 1 && observed.size() == 1, "visit counts independent of entry count");
    r.check(total_mismatch == 0, "trie lookups agree with a linear scan");
    return r;
}

} // namespace procroute
