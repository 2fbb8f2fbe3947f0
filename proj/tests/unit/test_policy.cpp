#include <random>

#include "doctest.h"
#include "procroute/policy.hpp"
#include "support/oracles.hpp"

using namespace procroute;

namespace {

Destination D(const char* s) { return Destination::parse(s); }

PolicyInstance two_app_policy() {
    PolicyInstance p;
    p.internal = {Cidr::parse("10.0.0.0/8")};
    p.principals = {{"web", 1, {}}, {"db", 2, sha256("psql")}};
    p.grants["web"] = {Grant::parse("10.0.0.0/24 tcp 443")};
    p.grants["db"] = {Grant::parse("10.0.1.0/24 tcp 5432-5433"), Grant::parse("10.0.2.0/24 * 0-0")};
    return normalize_policy(p);
}

} // namespace

TEST_CASE("addresses and prefixes") {
    CHECK(IpAddress::parse("10.1.2.3") == IpAddress::v4(10, 1, 2, 3));
    CHECK(Cidr::parse("10.0.0.0/8").contains(IpAddress::parse("10.250.0.7")));
    CHECK_FALSE(Cidr::parse("10.0.0.0/8").contains(IpAddress::parse("8.8.8.8")));
    CHECK(Cidr::parse("fd00::/8").contains(IpAddress::parse("fd00:1::5")));
    CHECK_FALSE(Cidr::parse("10.0.0.0/8").contains(IpAddress::parse("::ffff:10.0.0.1")));
    CHECK_THROWS_AS(Cidr::parse("10.0.0.1/8"), ParseError);
    CHECK_THROWS_AS(Cidr::parse("10.0.0.0/33"), ParseError);
    CHECK_THROWS_AS(IpAddress::parse("10.0.0"), ParseError);
    CHECK(Cidr::parse("10.0.0.0/8").contains(Cidr::parse("10.1.0.0/16")));
    CHECK(Cidr::parse("10.1.0.0/16").overlaps(Cidr::parse("10.0.0.0/8")));
    CHECK(Cidr::parse("fd00::/8").to_string() == "fd00::/8");
}

TEST_CASE("destination and grant syntax") {
    const auto d = D("[fd00::1]:443/tcp");
    CHECK(d.ip == IpAddress::parse("fd00::1"));
    CHECK(d.port == 443);
    CHECK(D("10.0.0.5:53/udp").proto == Transport::Udp);
    CHECK_THROWS_AS(D("10.0.0.5:53"), ParseError);
    CHECK_THROWS_AS(D("10.0.0.5/tcp"), ParseError);
    CHECK(PortRange::parse("0-0").is_all());
    CHECK(PortRange::parse("*").is_all());
    CHECK(PortRange::parse("443") == PortRange::single(443));
    CHECK_THROWS(PortRange::parse("500-400"));
    const auto g = Grant::parse("10.0.0.0/24 udp 1000-2000");
    CHECK(Grant::parse(g.to_string()) == g);
}

TEST_CASE("covers") {
    CHECK(covers(D("10.0.0.5:443/tcp"), Grant::parse("10.0.0.0/24 * 0-0")));
    CHECK_FALSE(covers(D("10.0.0.5:53/udp"), Grant::parse("10.0.0.0/24 tcp 0-0")));
    CHECK_FALSE(covers(D("10.0.1.5:443/tcp"), Grant::parse("10.0.0.0/24 tcp 443")));
    CHECK(covers(D("10.0.0.5:1500/udp"), Grant::parse("10.0.0.0/24 udp 1000-2000")));
    CHECK_FALSE(covers(D("10.0.0.5:2001/udp"), Grant::parse("10.0.0.0/24 udp 1000-2000")));
}

TEST_CASE("covers agrees with bit-by-bit membership") {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 20000; ++i) {
        const unsigned len = static_cast<unsigned>(rng() % 33);
        const Cidr c(oracle::random_v4(rng).masked(len), len);
        const IpAddress ip = i % 2 == 0 ? oracle::random_in(rng, c) : oracle::random_v4(rng);
        Grant g{c, static_cast<ProtoSel>(rng() % 3), {}};
        if (rng() % 2 == 0) {
            const auto lo = static_cast<std::uint16_t>(1 + rng() % 1000);
            g.ports = PortRange(lo, static_cast<std::uint16_t>(lo + rng() % 100));
        }
        const Destination d{ip, rng() % 2 == 0 ? Transport::Tcp : Transport::Udp,
                            static_cast<std::uint16_t>(rng() % 1200)};
        REQUIRE(covers(d, g) == oracle::grant_covers(g, d));
        REQUIRE(c.contains(ip) == oracle::in_prefix(c, ip));
    }
}

TEST_CASE("internal set is a union") {
    const std::vector<Cidr> set{Cidr::parse("10.0.0.0/8"), Cidr::parse("10.0.1.0/24")};
    CHECK(is_internal(IpAddress::parse("10.0.1.9"), set));
    CHECK(is_internal(IpAddress::parse("10.9.1.9"), set));
    CHECK_FALSE(is_internal(IpAddress::parse("11.0.0.1"), set));
    CHECK_FALSE(is_internal(IpAddress::parse("10.0.0.1"), {}));
}

TEST_CASE("strict normalization") {
    SUBCASE("overlapping constraints are rejected naming both prefixes") {
        const std::vector<Grant> gs{Grant::parse("10.0.0.0/8 tcp 443"), Grant::parse("10.1.0.0/16 tcp 22")};
        try {
            (void)normalize(gs, NormalizationMode::Strict, "svc");
            FAIL("expected AmbiguousOverlap");
        } catch (const AmbiguousOverlap& e) {
            CHECK(e.prefix_a == Cidr::parse("10.0.0.0/8"));
            CHECK(e.prefix_b == Cidr::parse("10.1.0.0/16"));
            CHECK(std::string(e.what()).find("10.1.0.0/16") != std::string::npos);
        }
    }
    SUBCASE("duplicates merge") {
        const std::vector<Grant> gs{Grant::parse("10.0.0.0/24 * 0-0"), Grant::parse("10.0.0.0/24 * 0-0")};
        CHECK(normalize(gs, NormalizationMode::Strict).grants.size() == 1);
    }
    SUBCASE("nested prefixes with identical constraints merge into the outer") {
        const std::vector<Grant> gs{Grant::parse("10.0.0.0/16 tcp 443"), Grant::parse("10.0.3.0/24 tcp 443")};
        const auto n = normalize(gs, NormalizationMode::Strict);
        REQUIRE(n.grants.size() == 1);
        CHECK(n.grants[0].prefix == Cidr::parse("10.0.0.0/16"));
    }
    SUBCASE("tcp and udp on one prefix with equal ports fold together") {
        const std::vector<Grant> gs{Grant::parse("10.0.0.0/24 tcp 53"), Grant::parse("10.0.0.0/24 udp 53")};
        const auto n = normalize(gs, NormalizationMode::Strict);
        REQUIRE(n.grants.size() == 1);
        CHECK(n.grants[0].proto == ProtoSel::Any);
    }
    SUBCASE("disjoint prefixes stay apart") {
        const std::vector<Grant> gs{Grant::parse("10.0.0.0/24 tcp 22"), Grant::parse("10.0.1.0/24 udp 53")};
        const auto n = normalize(gs, NormalizationMode::Strict);
        CHECK(n.grants.size() == 2);
        CHECK_FALSE(n.cascaded);
    }
}

TEST_CASE("cascaded normalization keeps nested prefixes") {
    const std::vector<Grant> gs{Grant::parse("10.0.0.0/8 tcp 443"), Grant::parse("10.1.0.0/16 tcp 22")};
    const auto n = normalize(gs, NormalizationMode::Cascaded);
    CHECK(n.grants.size() == 2);
    CHECK(n.cascaded);
}

TEST_CASE("policy validation") {
    PolicyInstance p;
    p.internal = {Cidr::parse("10.0.0.0/8")};
    p.principals = {{"a", 1, {}}, {"b", 1, {}}};
    CHECK_THROWS_AS(normalize_policy(p), PolicyError);
    p.principals = {{"a", 0, {}}};
    CHECK_THROWS_AS(normalize_policy(p), PolicyError);
    p.principals = {{"a", 1, {}}};
    p.grants["ghost"] = {Grant::parse("10.0.0.0/24")};
    CHECK_THROWS_AS(normalize_policy(p), UnknownPrincipal);
    p.grants.clear();
    p.bindings[5] = "ghost";
    CHECK_THROWS_AS(normalize_policy(p), UnknownPrincipal);
}

TEST_CASE("local decision examples") {
    const auto p = two_app_policy();
    const Principal* web = p.find("web");
    const Principal* db = p.find("db");
    CHECK(decide_local(nullptr, false, D("10.0.0.5:22/tcp"), p) == Verdict::deny(Reason::NoBinding));
    CHECK(decide_local(nullptr, false, D("1.1.1.1:443/tcp"), p) == Verdict::allow(Reason::External));
    CHECK(decide_local(web, false, D("10.0.0.9:443/tcp"), p) == Verdict::allow(Reason::GrantMatch));
    CHECK(decide_local(web, false, D("10.0.0.9:8443/tcp"), p) == Verdict::deny(Reason::PortMismatch));
    CHECK(decide_local(web, false, D("10.0.5.9:443/tcp"), p) == Verdict::deny(Reason::NoGrant));
    CHECK(decide_local(db, false, D("10.0.1.9:5432/tcp"), p) == Verdict::deny(Reason::HashUnverified));
    CHECK(decide_local(db, true, D("10.0.1.9:5433/tcp"), p) == Verdict::allow(Reason::GrantMatch));
    CHECK(decide_local(db, false, D("93.184.216.34:443/tcp"), p) == Verdict::allow(Reason::External));
    CHECK(Verdict::deny(Reason::NoBinding).to_string() == "DENY no_binding");
}

TEST_CASE("local decision equals the formula on an exhaustive small universe") {
    const auto p = two_app_policy();
    const std::vector<const Principal*> prins{nullptr, p.find("web"), p.find("db")};
    const std::uint16_t ports[] = {22, 443, 5432, 5433};
    std::size_t n = 0;
    for (const auto* prin : prins) {
        for (const bool verified : {false, true}) {
            for (std::uint32_t net = 0; net < 4; ++net) {
                for (std::uint32_t host = 0; host < 16; ++host) {
                    for (const auto t : {Transport::Tcp, Transport::Udp}) {
                        for (const auto port : ports) {
                            const Destination d{IpAddress::v4(0x0a000000U | (net << 8) | host), t, port};
                            REQUIRE(decide_local(prin, verified, d, p) == oracle::union_decide(prin, verified, d, p));
                            ++n;
                        }
                    }
                }
            }
        }
    }
    const Destination ext{IpAddress::v4(11, 0, 0, 1), Transport::Tcp, 1};
    CHECK(decide_local(prins[1], false, ext, p) == oracle::union_decide(prins[1], false, ext, p));
    CHECK(n == 3 * 2 * 4 * 16 * 2 * 4);
}

TEST_CASE("properties of the local decision on random strict policies") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        PolicyInstance p;
        p.internal = {Cidr::parse("10.0.0.0/12")};
        p.principals = {{"a", 1, {}}};
        for (unsigned i = 0; i < 1 + rng() % 6; ++i) {
            Grant g;
            g.prefix = Cidr(IpAddress::v4(10, 0, static_cast<std::uint8_t>(i * 16), 0), 20 + rng() % 5);
            g.proto = static_cast<ProtoSel>(rng() % 3);
            if (rng() % 2 == 0) g.ports = PortRange::single(static_cast<std::uint16_t>(20 + rng() % 4));
            p.grants["a"].push_back(g);
        }
        const auto pol = normalize_policy(p);
        const Principal* a = pol.find("a");
        auto narrowed = pol;
        narrowed.grants["a"].erase(narrowed.grants["a"].begin() + static_cast<long>(rng() % pol.grants.at("a").size()));

        for (int i = 0; i < 300; ++i) {
            const Destination d{IpAddress::v4(0x0a000000U | static_cast<std::uint32_t>(rng() % (1U << 21))),
                                rng() % 2 == 0 ? Transport::Tcp : Transport::Udp,
                                static_cast<std::uint16_t>(20 + rng() % 5)};
            const auto v = decide_local(a, false, d, pol);
            // Totality: exactly one verdict with a reason that fits the decision.
            REQUIRE(is_allow_reason(v.reason) == v.allowed());
            REQUIRE(v == oracle::union_decide(a, false, d, pol));
            // Default-deny for the unbound process on internal destinations.
            if (is_internal(d.ip, pol.internal)) REQUIRE_FALSE(decide_local(nullptr, false, d, pol).allowed());
            else REQUIRE(decide_local(nullptr, false, d, pol) == Verdict::allow(Reason::External));
            // Purely positive: removing a grant never turns a deny into an allow.
            if (!v.allowed()) REQUIRE_FALSE(decide_local(narrowed.find("a"), false, d, narrowed).allowed());
            // LPM-equivalence on a destination-disjoint set.
            const auto m = match_grants(d, pol.grants_of(*a));
            bool any = false;
            for (const auto& g : pol.grants_of(*a)) any = any || oracle::grant_covers(g, d);
            REQUIRE(m.covered == any);
        }
    }
}

TEST_CASE("cascaded decisions follow the most specific prefix") {
    PolicyInstance p;
    p.internal = {Cidr::parse("10.0.0.0/8")};
    p.principals = {{"svc", 1, {}}};
    p.grants["svc"] = {Grant::parse("10.0.0.0/8 tcp 443"), Grant::parse("10.1.0.0/16 tcp 22")};
    p.mode = NormalizationMode::Cascaded;
    const auto pol = normalize_policy(p);
    const Principal* svc = pol.find("svc");
    CHECK(decide_local(svc, false, D("10.1.2.3:22/tcp"), pol) == Verdict::allow(Reason::GrantMatch));
    CHECK(decide_local(svc, false, D("10.1.2.3:443/tcp"), pol) == Verdict::deny(Reason::PortMismatch));
    CHECK(decide_local(svc, false, D("10.200.0.1:443/tcp"), pol) == Verdict::allow(Reason::GrantMatch));
    for (const char* d : {"10.1.2.3:22/tcp", "10.1.2.3:443/tcp", "10.200.0.1:443/tcp", "10.200.0.1:22/udp"}) {
        CHECK(decide_local(svc, false, D(d), pol) == oracle::most_specific_decide(svc, false, D(d), pol));
    }
}

TEST_CASE("reachable sets") {
    PolicyInstance p = two_app_policy();
    const IpAddress peer = IpAddress::parse("10.8.0.2");
    p.gateway_grants[PeerApp{peer, 1}] = {Grant::parse("10.0.0.0/24 tcp 443")};
    p = normalize_policy(p);
    CHECK(reachable_set(nullptr, p, LocalSide{}).empty());
    CHECK(reachable_set(p.find("web"), p, LocalSide{}).size() == 1);
    CHECK(reachable_set(p.find("web"), p, SplitSide{peer}).size() == 1);
    CHECK(reachable_set(p.find("db"), p, SplitSide{peer}).empty());
    const Principal stranger{"stranger", 9, {}};
    CHECK_THROWS_AS(reachable_set(&stranger, p, LocalSide{}), UnknownPrincipal);
}
