#include <random>

#include "doctest.h"
#include "procroute/host.hpp"
#include "procroute/update.hpp"
#include "support/oracles.hpp"

using namespace procroute;

namespace {

Destination D(const char* s) { return Destination::parse(s); }

PolicyInstance host_policy() {
    PolicyInstance p;
    p.internal = {Cidr::parse("10.0.0.0/8")};
    p.principals = {{"ssh", 1, {}}, {"db", 2, sha256("psql")}};
    p.grants["ssh"] = {Grant::parse("10.0.0.0/24 tcp 22")};
    p.grants["db"] = {Grant::parse("10.0.1.0/24 tcp 5432")};
    p.bindings = {{101, "ssh"}, {102, "db"}};
    return normalize_policy(p);
}

struct Fixture {
    PolicyInstance policy = host_policy();
    DataPlaneState state = build_dataplane(policy);
    EventBuffer audit{1 << 14};
    EventBuffer execs{4096};
    Host host;
    CgroupId session = 0;
    CgroupId user = 0;

    explicit Fixture(HostConfig cfg = {}) : host(state, cfg, &audit, &execs) {
        session = host.setup_session();
        host.create_app_cgroup("ssh", 101);
        host.create_app_cgroup("db", 102);
        user = *host.find_cgroup("/session/user");
    }
};

} // namespace

TEST_CASE("session layout") {
    Fixture f;
    CHECK(f.host.path_of(f.session) == "/session");
    CHECK(f.host.path_of(101) == "/session/procroute/ssh");
    CHECK_FALSE(f.host.cgroup(101).delegated);
    CHECK_FALSE(f.host.cgroup(*f.host.find_cgroup("/session/procroute")).delegated);
    CHECK(f.host.cgroup(f.user).delegated);
    CHECK(f.host.effective_stack(101).size() == 1);
    CHECK(f.host.effective_stack(f.host.root()).empty());
    const CgroupId own = f.host.create_cgroup(f.user, "tmp", false, Actor::User);
    CHECK(f.host.cgroup(own).delegated);
    CHECK_THROWS_AS(f.host.create_cgroup(101, "x", true, Actor::User), UnauthorizedMigration);
}

TEST_CASE("binding through cgroup membership") {
    Fixture f;
    const Pid ssh = f.host.spawn(std::nullopt, 101, sha256("ssh"), "ssh");
    CHECK(f.host.connect(ssh, D("10.0.0.7:22/tcp")).verdict == Verdict::allow(Reason::GrantMatch));
    const Pid child = f.host.fork(ssh);
    CHECK(f.host.process(child).cgroup == 101);
    CHECK(f.host.connect(child, D("10.0.0.7:22/tcp")).verdict == Verdict::allow(Reason::GrantMatch));
    CHECK(f.host.connect(child, D("10.0.0.7:80/tcp")).verdict == Verdict::deny(Reason::PortMismatch));
}

TEST_CASE("unbound process is denied internally and allowed externally") {
    Fixture f;
    const Pid sh = f.host.spawn(std::nullopt, f.user, sha256("sh"), "sh", Actor::User);
    const auto r = f.host.connect(sh, D("10.0.0.5:22/tcp"));
    CHECK(r.verdict == Verdict::deny(Reason::NoBinding));
    CHECK_FALSE(r.socket);
    CHECK(f.host.connect(sh, D("1.1.1.1:443/tcp")).verdict == Verdict::allow(Reason::External));
    CHECK(f.host.sendmsg(sh, std::nullopt, D("8.8.8.8:53/udp")).verdict == Verdict::allow(Reason::External));
    const auto events = f.audit.take();
    REQUIRE(events.size() == 1);
    CHECK(events[0].pid == sh);
    CHECK(events[0].comm == "sh");
    CHECK(events[0].cgroup_id == f.user);
    CHECK(events[0].app_index == 0);
    CHECK(events[0].dst_port == 22);
    CHECK(events[0].reason == Reason::NoBinding);
}

TEST_CASE("self-migration is refused") {
    Fixture f;
    const Pid sh = f.host.spawn(std::nullopt, f.user, sha256("sh"), "sh", Actor::User);
    CHECK_THROWS_AS(f.host.migrate(sh, 101, Actor::User), UnauthorizedMigration);
    CHECK(f.host.process(sh).cgroup == f.user);
    CHECK_THROWS_AS(f.host.spawn(sh, 101, sha256("ssh"), "ssh", Actor::User), UnauthorizedMigration);
    const Pid ssh = f.host.spawn(std::nullopt, 101, sha256("ssh"), "ssh");
    CHECK_THROWS_AS(f.host.migrate(ssh, f.user, Actor::User), UnauthorizedMigration);
    f.host.migrate(ssh, 102, Actor::Controller);
    CHECK(f.host.process(ssh).cgroup == 102);
}

TEST_CASE("exec-hash gate") {
    SUBCASE("matching digest verifies") {
        Fixture f;
        const Pid db = f.host.spawn(std::nullopt, 102, sha256("psql"), "psql");
        CHECK(f.host.connect(db, D("10.0.1.4:5432/tcp")).verdict == Verdict::allow(Reason::GrantMatch));
        CHECK(f.execs.take().size() == 1);
    }
    SUBCASE("mismatched digest stays denied") {
        Fixture f;
        const Pid db = f.host.spawn(std::nullopt, 102, sha256("evil"), "psql");
        CHECK(f.host.connect(db, D("10.0.1.4:5432/tcp")).verdict == Verdict::deny(Reason::HashUnverified));
        f.host.advance_to(std::chrono::seconds(5));
        CHECK(f.host.connect(db, D("10.0.1.4:5432/tcp")).verdict == Verdict::deny(Reason::HashUnverified));
    }
    SUBCASE("connects before asynchronous verification are denied") {
        HostConfig cfg;
        cfg.verify_delay = std::chrono::milliseconds(5);
        Fixture f(cfg);
        const Pid db = f.host.spawn(std::nullopt, 102, sha256("psql"), "psql");
        CHECK(f.host.verification_pending(db));
        CHECK(f.host.connect(db, D("10.0.1.4:5432/tcp")).verdict == Verdict::deny(Reason::HashUnverified));
        f.host.advance_to(std::chrono::milliseconds(5));
        CHECK_FALSE(f.host.verification_pending(db));
        CHECK(f.host.connect(db, D("10.0.1.4:5432/tcp")).verdict == Verdict::allow(Reason::GrantMatch));
        f.host.exec(db, sha256("bash"), "bash");
        CHECK(f.host.connect(db, D("10.0.1.4:5432/tcp")).verdict == Verdict::deny(Reason::HashUnverified));
        f.host.advance_to(std::chrono::milliseconds(20));
        CHECK(f.host.connect(db, D("10.0.1.4:5432/tcp")).verdict == Verdict::deny(Reason::HashUnverified));
    }
    SUBCASE("principals without a hash never consult verification") {
        HostConfig cfg;
        cfg.verify_delay = std::chrono::seconds(60);
        Fixture f(cfg);
        const Pid ssh = f.host.spawn(std::nullopt, 101, sha256("anything"), "ssh");
        CHECK(f.host.connect(ssh, D("10.0.0.4:22/tcp")).verdict == Verdict::allow(Reason::GrantMatch));
    }
}

TEST_CASE("stacked programs narrow access") {
    Fixture f;
    const CgroupId inner = f.host.create_cgroup(101, "inner", false, Actor::Controller);
    f.host.attach_program(inner,
                          std::make_shared<PredicateProgram>("no-22", [](const Destination& d) { return d.port != 22; }),
                          AttachFlag::AllowMulti);
    const Pid p = f.host.spawn(std::nullopt, inner, sha256("ssh"), "ssh");
    CHECK(f.host.connect(p, D("10.0.0.4:22/tcp")).verdict.allowed() == false);
    CHECK(f.host.connect(p, D("93.184.216.34:22/tcp")).verdict.allowed() == false);
    CHECK(f.host.connect(p, D("93.184.216.34:443/tcp")).verdict == Verdict::allow(Reason::External));
    CHECK_FALSE(f.host.non_monotonic());
}

TEST_CASE("empty stack allows by default") {
    Fixture f;
    const Pid p = f.host.spawn(std::nullopt, f.host.root(), sha256("init"), "init");
    CHECK(f.host.connect(p, D("10.0.0.4:22/tcp")).verdict == Verdict::allow(Reason::Unmediated));
    CHECK(f.host.counters().mediated_calls == 0);
}

TEST_CASE("monotonicity over random stacks") {
    std::mt19937_64 rng(31);
    std::vector<Destination> universe;
    for (std::uint32_t ip = 0; ip < 16; ++ip) {
        for (std::uint16_t port = 0; port < 16; ++port) {
            universe.push_back({IpAddress::v4(0x0a000000U + ip), Transport::Tcp, static_cast<std::uint16_t>(port + 1)});
        }
    }
    for (int trial = 0; trial < 200; ++trial) {
        DataPlaneState state;
        Host host(state);
        std::vector<CgroupId> chain{host.root()};
        for (int d = 0; d < 3; ++d) chain.push_back(host.create_cgroup(chain.back(), "c", false, Actor::Controller));
        for (const auto cg : chain) {
            if (rng() % 3 == 0) continue;
            const std::uint64_t mask = rng();
            host.attach_program(cg,
                                std::make_shared<PredicateProgram>(
                                    "f", [mask](const Destination& d) { return ((mask >> (d.port % 64)) & 1U) != 0; }),
                                AttachFlag::AllowMulti);
        }
        for (std::size_t n = 1; n < chain.size(); ++n) {
            for (const auto& d : universe) {
                const bool child = host.probe({1, 1, chain[n], Syscall::Connect, d, {}}).allowed();
                for (std::size_t a = 0; a < n; ++a) {
                    if (child) REQUIRE(host.probe({1, 1, chain[a], Syscall::Connect, d, {}}).allowed());
                }
            }
        }
    }
}

TEST_CASE("override attachment drops ancestor programs") {
    Fixture f;
    const CgroupId inner = f.host.create_cgroup(f.user, "escape", true, Actor::Controller);
    f.host.attach_program(inner, std::make_shared<PredicateProgram>("open", [](const Destination&) { return true; }),
                          AttachFlag::AllowOverride);
    CHECK(f.host.non_monotonic());
    const Pid p = f.host.spawn(std::nullopt, inner, sha256("sh"), "sh", Actor::User);
    CHECK(f.host.connect(p, D("10.0.0.4:22/tcp")).verdict.allowed());
}

TEST_CASE("complete mediation and audit completeness under random activity") {
    std::mt19937_64 rng(41);
    Fixture f;
    std::vector<Pid> procs{f.host.spawn(std::nullopt, 101, sha256("ssh"), "ssh"),
                           f.host.spawn(std::nullopt, 102, sha256("psql"), "psql"),
                           f.host.spawn(std::nullopt, 102, sha256("other"), "other"),
                           f.host.spawn(std::nullopt, f.user, sha256("sh"), "sh", Actor::User)};
    std::uint64_t calls = 0, denies = 0;
    for (int i = 0; i < 5000; ++i) {
        const Pid p = procs[rng() % procs.size()];
        const Destination d{IpAddress::v4(10, 0, static_cast<std::uint8_t>(rng() % 3), 9),
                            rng() % 2 == 0 ? Transport::Tcp : Transport::Udp,
                            static_cast<std::uint16_t>(rng() % 2 == 0 ? 22 : 5432)};
        const auto r = d.proto == Transport::Tcp ? f.host.connect(p, d) : f.host.sendmsg(p, std::nullopt, d);
        ++calls;
        if (!r.verdict.allowed()) ++denies;
        if (i % 500 == 0) procs.push_back(f.host.fork(procs[rng() % procs.size()]));
    }
    const auto& c = f.host.counters();
    CHECK(c.hook_calls == calls);
    CHECK(c.stack_evaluations == calls);
    CHECK(c.mediated_calls == calls);
    CHECK(c.denies == denies);
    CHECK(f.audit.emitted_count() == denies);
    CHECK(f.audit.dropped_count() == 0);
}

TEST_CASE("adversary operations never acquire a binding") {
    std::mt19937_64 rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        Fixture f;
        std::vector<Pid> mine{f.host.spawn(std::nullopt, f.user, sha256("sh"), "sh", Actor::User)};
        std::vector<CgroupId> own{f.user};
        const std::vector<CgroupId> protected_cgs{101, 102, *f.host.find_cgroup("/session/procroute"), f.session};
        for (int step = 0; step < 60; ++step) {
            const Pid p = mine[rng() % mine.size()];
            try {
                switch (rng() % 6) {
                case 0: mine.push_back(f.host.fork(p)); break;
                case 1: f.host.exec(p, sha256(rng() % 2 == 0 ? "psql" : "ssh"), "x"); break;
                case 2: own.push_back(f.host.create_cgroup(own[rng() % own.size()], "d" + std::to_string(step), false,
                                                   Actor::User));
                    break;
                case 3: f.host.migrate(p, own[rng() % own.size()], Actor::User); break;
                case 4: f.host.migrate(p, protected_cgs[rng() % protected_cgs.size()], Actor::User); break;
                default:
                    mine.push_back(
                        f.host.spawn(p, protected_cgs[rng() % protected_cgs.size()], sha256("ssh"), "ssh", Actor::User));
                    break;
                }
            } catch (const UnauthorizedMigration&) {
            }
            f.host.advance_to(f.host.now() + std::chrono::milliseconds(1));
        }
        for (const Pid p : mine) {
            REQUIRE_FALSE(f.state.app_of(f.host.process(p).cgroup).has_value());
            REQUIRE(f.host.connect(p, D("10.0.0.4:22/tcp")).verdict == Verdict::deny(Reason::NoBinding));
        }
    }
}

TEST_CASE("capabilities guard raw sends and marks") {
    Fixture f;
    const Pid p = f.host.spawn(std::nullopt, 101, sha256("ssh"), "ssh");
    CHECK_THROWS_AS(f.host.raw_send(p, D("10.0.0.4:22/tcp")), PermissionDenied);
    CHECK(f.host.counters().raw_rejected == 1);
    const auto s = f.host.connect(p, D("10.0.0.4:22/tcp")).socket;
    REQUIRE(s);
    CHECK_THROWS_AS(f.host.set_socket_mark(p, *s, 7), PermissionDenied);
    f.host.grant_capabilities(p, {true, true});
    f.host.raw_send(p, D("10.0.0.4:22/tcp"));
    f.host.set_socket_mark(p, *s, 7);
    CHECK(f.host.socket(*s).mark == 7);
}

TEST_CASE("tagging mode marks sockets and skips the local check") {
    HostConfig cfg;
    cfg.mode = EnforcementMode::Tagging;
    Fixture f(cfg);
    const Pid ssh = f.host.spawn(std::nullopt, 101, sha256("ssh"), "ssh");
    const auto r = f.host.connect(ssh, D("10.0.0.4:80/tcp"));
    CHECK(r.verdict == Verdict::allow(Reason::Tagged));
    REQUIRE(r.socket);
    CHECK(f.host.socket(*r.socket).mark == 1);
    const Pid sh = f.host.spawn(std::nullopt, f.user, sha256("sh"), "sh", Actor::User);
    const auto u = f.host.connect(sh, D("10.0.0.4:22/tcp"));
    CHECK(u.verdict.allowed());
    CHECK(f.host.socket(*u.socket).mark == 0);
    CHECK_FALSE(f.host.socket(*u.socket).epoch);
}

TEST_CASE("socket epoch stamping") {
    Fixture f;
    const Pid ssh = f.host.spawn(std::nullopt, 101, sha256("ssh"), "ssh");
    const auto internal = f.host.connect(ssh, D("10.0.0.4:22/tcp"));
    const auto external = f.host.connect(ssh, D("1.1.1.1:443/tcp"));
    CHECK(f.host.socket(*internal.socket).epoch == 0);
    CHECK_FALSE(f.host.socket(*external.socket).epoch);
    f.state.apply(MapOp{MapOp::Kind::Bump, EpochBump{}});
    CHECK(f.host.connect(ssh, D("10.0.0.5:22/tcp")).socket.has_value());
    CHECK(f.host.socket(*f.host.connect(ssh, D("10.0.0.5:22/tcp")).socket).epoch == 1);
}
