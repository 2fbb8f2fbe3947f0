#include <random>
#include <set>

#include "doctest.h"
#include "procroute/dataplane.hpp"
#include "procroute/gateway.hpp"
#include "procroute/grant_table.hpp"
#include "procroute/lpm_trie.hpp"
#include "procroute/update.hpp"
#include "support/oracles.hpp"

using namespace procroute;

namespace {

const std::vector<std::uint8_t> kNoFixed;

Cidr random_prefix(std::mt19937_64& rng, unsigned min_len = 0) {
    const unsigned len = min_len + static_cast<unsigned>(rng() % (33 - min_len));
    return Cidr(oracle::random_v4(rng).masked(len), len);
}

} // namespace

TEST_CASE("trie basics") {
    LpmTrie<int> t;
    CHECK_FALSE(t.lookup(LpmKey::full(kNoFixed, IpAddress::parse("10.0.0.1"))));
    t.insert(LpmKey::full(kNoFixed, IpAddress::parse("10.0.0.1")), 1);
    CHECK(*t.lookup(LpmKey::full(kNoFixed, IpAddress::parse("10.0.0.1"))).value == 1);
    t.insert(LpmKey::prefix(kNoFixed, Cidr::parse("10.0.0.0/8")), 8);
    t.insert(LpmKey::prefix(kNoFixed, Cidr::parse("10.1.1.0/24")), 24);
    const auto hit = t.lookup(LpmKey::full(kNoFixed, IpAddress::parse("10.1.1.9")));
    REQUIRE(hit);
    CHECK(*hit.value == 24);
    CHECK(hit.match_len == 24);
    CHECK(*t.lookup(LpmKey::full(kNoFixed, IpAddress::parse("10.2.0.0"))).value == 8);
    t.insert(LpmKey::prefix(kNoFixed, Cidr::parse("10.1.1.0/24")), 25);
    CHECK(t.size() == 3);
    CHECK(t.erase(LpmKey::prefix(kNoFixed, Cidr::parse("10.1.1.0/24"))));
    CHECK_FALSE(t.erase(LpmKey::prefix(kNoFixed, Cidr::parse("10.1.1.0/24"))));
    CHECK(*t.lookup(LpmKey::full(kNoFixed, IpAddress::parse("10.1.1.9"))).value == 8);
    CHECK_THROWS_AS(t.insert(LpmKey::prefix(kNoFixed, Cidr::parse("fd00::/8")), 1), GeometryMismatch);

    std::size_t seen = 0;
    t.for_each([&](const LpmKey&, int) { ++seen; });
    CHECK(seen == t.size());
}

TEST_CASE("trie lookup equals a linear scan") {
    std::mt19937_64 rng(3);
    for (const std::size_t n : {std::size_t{1}, std::size_t{50}, std::size_t{10000}}) {
        LpmTrie<std::size_t> t;
        std::vector<Cidr> prefixes;
        std::set<Cidr> uniq;
        while (uniq.size() < n) uniq.insert(random_prefix(rng, 4));
        for (const auto& c : uniq) {
            t.insert(LpmKey::prefix(kNoFixed, c), prefixes.size());
            prefixes.push_back(c);
        }
        for (int i = 0; i < 10000; ++i) {
            const IpAddress ip =
                i % 2 == 0 ? oracle::random_v4(rng) : oracle::random_in(rng, prefixes[rng() % prefixes.size()]);
            const auto got = t.lookup(LpmKey::full(kNoFixed, ip));
            const auto want = oracle::linear_lpm(prefixes, ip);
            REQUIRE(static_cast<bool>(got) == want.has_value());
            if (want) REQUIRE(prefixes[*got.value] == *want);
            REQUIRE(got.visits <= t.max_visits());
        }
    }
}

TEST_CASE("visit bound depends only on key geometry") {
    std::mt19937_64 rng(5);
    const auto fixed = app_key(9);
    std::set<unsigned> observed;
    for (const std::size_t n : {std::size_t{4}, std::size_t{64}, std::size_t{4096}}) {
        GrantTable table;
        std::set<Cidr> prefixes{Cidr::parse("10.9.9.9/32")};
        while (prefixes.size() < n) prefixes.insert(random_prefix(rng, 8));
        for (const auto& c : prefixes) table.put(fixed, c, AllowRule{});
        CHECK(table.trie(Family::V4).max_visits() == 8 * 4 + 32 + 1);
        unsigned worst = 0;
        for (int i = 0; i < 10000; ++i) {
            worst = std::max(worst, table.match(fixed, {oracle::random_v4(rng), Transport::Tcp, 1}).visits);
        }
        worst = std::max(worst, table.match(fixed, Destination::parse("10.9.9.9:1/tcp")).visits);
        observed.insert(worst);
    }
    CHECK(observed == std::set<unsigned>{65});
}

TEST_CASE("composite keys isolate fixed fields") {
    GrantTable gw(20);
    const auto peer_a = IpAddress::parse("10.8.0.2");
    const auto peer_b = IpAddress::parse("10.8.0.3");
    gw.put(gateway_key(peer_a, 3), Cidr::parse("10.0.0.0/16"), AllowRule{ProtoSel::Tcp, PortRange::single(443)});
    const auto d = Destination::parse("10.0.4.4:443/tcp");
    CHECK(gw.match(gateway_key(peer_a, 3), d).outcome == GrantLookup::Outcome::Covered);
    CHECK(gw.match(gateway_key(peer_b, 3), d).outcome == GrantLookup::Outcome::NoPrefix);
    CHECK(gw.match(gateway_key(peer_a, 4), d).outcome == GrantLookup::Outcome::NoPrefix);
    CHECK_THROWS(gw.put(app_key(3), Cidr::parse("10.0.0.0/16"), AllowRule{}));

    std::mt19937_64 rng(9);
    GrantTable t;
    std::vector<std::pair<std::uint32_t, Cidr>> entries;
    for (int i = 0; i < 500; ++i) {
        const std::uint32_t app = 1 + static_cast<std::uint32_t>(rng() % 8);
        const Cidr c = random_prefix(rng, 8);
        t.put(app_key(app), c, AllowRule{});
        entries.push_back({app, c});
    }
    for (int i = 0; i < 5000; ++i) {
        const std::uint32_t app = 1 + static_cast<std::uint32_t>(rng() % 8);
        const IpAddress ip = oracle::random_v4(rng);
        std::vector<Cidr> mine;
        for (const auto& [a, c] : entries) {
            if (a == app) mine.push_back(c);
        }
        const auto m = t.match(app_key(app), {ip, Transport::Tcp, 1});
        REQUIRE(m.prefix == oracle::linear_lpm(mine, ip));
    }
}

TEST_CASE("cascade table lookups") {
    PolicyInstance p;
    p.internal = {Cidr::parse("10.0.0.0/8")};
    p.principals = {{"svc", 1, {}}};
    p.grants["svc"] = {Grant::parse("10.0.0.0/8 tcp 443"), Grant::parse("10.1.0.0/16 tcp 22")};
    p.mode = NormalizationMode::Cascaded;
    const auto pol = normalize_policy(p);
    GrantTable t;
    t.load(app_key(1), pol.grants.at("svc"), true);
    CHECK(t.cascaded_lookup(app_key(1), Destination::parse("10.1.2.3:22/tcp")) == PortRange::single(22));
    CHECK(t.cascaded_lookup(app_key(1), Destination::parse("10.1.2.3:443/tcp")) == PortRange::single(22));
    CHECK(t.cascaded_lookup(app_key(1), Destination::parse("10.200.0.1:443/tcp")) == PortRange::single(443));
    CHECK_FALSE(t.cascaded_lookup(app_key(1), Destination::parse("10.1.2.3:22/udp")));
    CHECK(t.match(app_key(1), Destination::parse("10.1.2.3:443/tcp")).outcome ==
          GrantLookup::Outcome::PredicateFailed);
    CHECK(t.match(app_key(1), Destination::parse("10.1.2.3:22/tcp")).table_accesses == 2);
}

TEST_CASE("cascaded and strict tables agree on destination-disjoint policies") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Grant> gs;
        for (unsigned i = 0; i < 1 + rng() % 6; ++i) {
            Grant g;
            g.prefix = Cidr(IpAddress::v4(10, 0, static_cast<std::uint8_t>(i * 4), 0), 22 + rng() % 3);
            g.proto = static_cast<ProtoSel>(rng() % 3);
            if (rng() % 2 == 0) g.ports = PortRange(100, static_cast<std::uint16_t>(100 + rng() % 5));
            gs.push_back(g);
        }
        const auto strict = normalize(gs, NormalizationMode::Strict);
        const auto casc = normalize(gs, NormalizationMode::Cascaded);
        GrantTable a, b;
        a.load(app_key(1), strict.grants, false);
        b.load(app_key(1), casc.grants, true);
        for (int i = 0; i < 400; ++i) {
            const Destination d{IpAddress::v4(0x0a000000U | static_cast<std::uint32_t>(rng() % 8192)),
                                rng() % 2 == 0 ? Transport::Tcp : Transport::Udp,
                                static_cast<std::uint16_t>(98 + rng() % 10)};
            REQUIRE(a.match(app_key(1), d).outcome == b.match(app_key(1), d).outcome);
        }
    }
}

TEST_CASE("dataplane pipeline equals the formula") {
    std::mt19937_64 rng(17);
    for (const auto mode : {NormalizationMode::Strict, NormalizationMode::Cascaded}) {
        PolicyInstance p;
        p.mode = mode;
        p.internal = {Cidr::parse("10.0.0.0/12"), Cidr::parse("fd00::/16")};
        p.principals = {{"a", 1, {}}, {"b", 2, sha256("b-bin")}};
        p.grants["a"] = {Grant::parse("10.0.0.0/20 tcp 22"), Grant::parse("10.0.32.0/20 * 0-0"),
                         Grant::parse("fd00:1::/32 udp 53")};
        p.grants["b"] = {Grant::parse("10.0.16.0/20 udp 1000-1010")};
        if (mode == NormalizationMode::Cascaded) p.grants["a"].push_back(Grant::parse("10.0.1.0/24 tcp 443"));
        p.bindings = {{50, "a"}, {51, "b"}};
        const auto pol = normalize_policy(p);
        DataPlaneState s = build_dataplane(pol);
        s.set_task_verified(7, 2);
        for (int i = 0; i < 50000; ++i) {
            const std::uint64_t cg = 49 + rng() % 3;
            const Pid tgid = rng() % 2 == 0 ? 7 : 8;
            Destination d{IpAddress::v4(0x0a000000U | static_cast<std::uint32_t>(rng() % (1U << 17))),
                          rng() % 2 == 0 ? Transport::Tcp : Transport::Udp,
                          static_cast<std::uint16_t>(rng() % 2 == 0 ? 22 : 995 + rng() % 20)};
            if (i % 50 == 0) d.ip = IpAddress::parse("fd00:1::9");
            if (i % 77 == 0) d.ip = IpAddress::parse("192.168.1.1");
            const Principal* prin = pol.bound_principal(cg);
            const bool verified = prin != nullptr && s.verified_app(tgid) == prin->app_index;
            const Verdict want = mode == NormalizationMode::Strict
                                     ? oracle::union_decide(prin, verified, d, pol)
                                     : oracle::most_specific_decide(prin, verified, d, pol);
            REQUIRE(s.evaluate(cg, tgid, d) == want);
        }
    }
}
