#include <random>

#include "doctest.h"
#include "procroute/gateway.hpp"
#include "support/oracles.hpp"

using namespace procroute;
using std::chrono::milliseconds;
using std::chrono::seconds;

namespace {

const IpAddress kPeerA = IpAddress::parse("10.8.0.2");
const IpAddress kPeerB = IpAddress::parse("10.8.0.3");

PolicyInstance gw_policy() {
    PolicyInstance p;
    p.internal = {Cidr::parse("10.0.0.0/8"), Cidr::parse("fd00::/8")};
    p.principals = {{"web", 3, {}}, {"dns", 4, {}}};
    p.grants["web"] = {Grant::parse("10.0.0.0/16 tcp 443"), Grant::parse("fd00:1::/64 tcp 443")};
    p.grants["dns"] = {Grant::parse("10.0.0.2/32 udp 53")};
    p.gateway_grants[PeerApp{kPeerA, 3}] = {Grant::parse("10.0.0.0/16 tcp 443"), Grant::parse("fd00:1::/64 tcp 443")};
    p.gateway_grants[PeerApp{kPeerB, 3}] = {Grant::parse("10.0.9.0/24 tcp 443")};
    p.gateway_grants[PeerApp{kPeerA, 4}] = {Grant::parse("10.0.0.2/32 udp 53")};
    return normalize_policy(p);
}

SimPacket pkt(const IpAddress& peer, const char* dst, std::uint32_t mark, std::uint64_t epoch,
              std::uint16_t src_port = 40000) {
    return encode_tag(SimPacket{peer, src_port, Destination::parse(dst)}, mark, epoch);
}

} // namespace

TEST_CASE("tag carriers") {
    CHECK(tag_socket(nullptr) == 0);
    const Principal p{"x", 7, {}};
    CHECK(tag_socket(&p) == 7);

    const auto untagged = pkt(kPeerA, "10.0.0.1:443/tcp", 0, 0);
    CHECK(untagged.v4_id == 0);
    CHECK_THROWS_AS(pkt(kPeerA, "[fd00::1]:443/tcp", kV6MarkLimit, 0), TagOverflow);
    CHECK_THROWS_AS(pkt(kPeerA, "10.0.0.1:443/tcp", kV4MarkLimit, 0), TagOverflow);
    CHECK_NOTHROW(pkt(kPeerA, "[fd00::1]:443/tcp", kV6MarkLimit - 1, 0));

    std::mt19937_64 rng(1);
    for (int i = 0; i < 20000; ++i) {
        const bool v6 = i % 2 == 0;
        const std::uint32_t mark = static_cast<std::uint32_t>(rng() % (v6 ? kV6MarkLimit : kV4MarkLimit));
        const std::uint64_t epoch = rng() % 100000;
        const auto p2 = pkt(kPeerA, v6 ? "[fd00::1]:443/tcp" : "10.0.0.1:443/tcp", mark, epoch);
        REQUIRE(decode_tag(p2) == Tag{mark, static_cast<std::uint8_t>(epoch % 256)});
    }
}

TEST_CASE("ingress pipeline") {
    EventBuffer audit;
    Gateway gw({}, &audit);
    gw.install(gw_policy());

    SUBCASE("untagged internal traffic drops") {
        auto p = pkt(kPeerA, "10.0.0.1:443/tcp", 0, 0);
        CHECK(gw.ingress(p, {}) == GatewayVerdict{GatewayAction::Drop, Reason::Untagged, false});
    }
    SUBCASE("granted flow passes with tags cleared") {
        auto p = pkt(kPeerA, "10.0.3.1:443/tcp", 3, 0);
        const auto v = gw.ingress(p, {});
        CHECK(v.passed());
        CHECK(v.reason == Reason::GrantMatch);
        CHECK(p.v4_id == 0);
        CHECK(p.v4_tos == 0);
        auto p6 = pkt(kPeerA, "[fd00:1::9]:443/tcp", 3, 0);
        CHECK(gw.ingress(p6, {}).passed());
        CHECK(p6.v6_flow_label == 0);
    }
    SUBCASE("same app index on another peer is judged by that peer's grants") {
        auto p = pkt(kPeerB, "10.0.3.1:443/tcp", 3, 0);
        CHECK(gw.ingress(p, {}) == GatewayVerdict{GatewayAction::Drop, Reason::NoGrant, false});
        auto q = pkt(kPeerB, "10.0.9.1:443/tcp", 3, 0);
        CHECK(gw.ingress(q, {}).passed());
    }
    SUBCASE("port outside the grant") {
        auto p = pkt(kPeerA, "10.0.3.1:22/tcp", 3, 0);
        CHECK(gw.ingress(p, {}).reason == Reason::PortMismatch);
    }
    SUBCASE("external tagged traffic passes") {
        auto p = pkt(kPeerA, "93.184.216.34:443/tcp", 3, 0);
        CHECK(gw.ingress(p, {}) == GatewayVerdict{GatewayAction::Pass, Reason::External, false});
    }
    SUBCASE("stale header epoch drops") {
        gw.epoch_bump();
        auto p = pkt(kPeerA, "10.0.3.1:443/tcp", 3, 0);
        CHECK(gw.ingress(p, {}).reason == Reason::StaleEpoch);
        auto q = pkt(kPeerA, "10.0.3.1:443/tcp", 3, 1);
        CHECK(gw.ingress(q, {}).passed());
    }
    CHECK(audit.emitted_count() == gw.counters().drops);
    for (const auto& e : audit.take()) {
        CHECK(e.kind == AuditKind::GatewayDrop);
        CHECK(e.pid == 0);
    }
}

TEST_CASE("flow cache") {
    Gateway gw;
    gw.install(gw_policy());
    auto first = pkt(kPeerA, "10.0.3.1:443/tcp", 3, 0);
    CHECK_FALSE(gw.ingress(first, {}).cache_hit);
    auto second = pkt(kPeerA, "10.0.3.1:443/tcp", 3, 0);
    CHECK(gw.ingress(second, seconds(1)).cache_hit);

    SUBCASE("entries expire after the TTL") {
        auto late = pkt(kPeerA, "10.0.3.1:443/tcp", 3, 0);
        CHECK_FALSE(gw.ingress(late, seconds(5)).cache_hit);
    }
    SUBCASE("a bump forces a fresh lookup") {
        gw.epoch_bump();
        auto again = pkt(kPeerA, "10.0.3.1:443/tcp", 3, 1);
        const auto v = gw.ingress(again, seconds(2));
        CHECK_FALSE(v.cache_hit);
        CHECK(v.passed());
        CHECK(gw.counters().lpm_lookups == 2);
    }
    SUBCASE("a different app on the same 5-tuple misses") {
        auto other = pkt(kPeerA, "10.0.3.1:443/tcp", 4, 0);
        CHECK(gw.ingress(other, seconds(1)).reason == Reason::NoGrant);
    }

    FlowCache small(2, seconds(5));
    const FlowKey k1{kPeerA, IpAddress::parse("10.0.0.1"), 1, 443, Transport::Tcp};
    const FlowKey k2{kPeerA, IpAddress::parse("10.0.0.2"), 1, 443, Transport::Tcp};
    const FlowKey k3{kPeerA, IpAddress::parse("10.0.0.3"), 1, 443, Transport::Tcp};
    small.insert(k1, 3, {}, 0);
    small.insert(k2, 3, {}, 0);
    CHECK(small.lookup(k1, 3, {}, 0));
    small.insert(k3, 3, {}, 0);
    CHECK(small.evictions() == 1);
    CHECK_FALSE(small.lookup(k2, 3, {}, 0));
    CHECK(small.lookup(k1, 3, {}, 0));
    CHECK(small.size() == 2);
}

TEST_CASE("hit rate for short and long flows") {
    for (const auto& [flows, pkts] : {std::pair<std::size_t, std::size_t>{1000, 4}, {4, 5000}}) {
        Gateway gw;
        gw.install(gw_policy());
        SimTime t{0};
        for (std::size_t k = 0; k < pkts; ++k) {
            for (std::size_t f = 0; f < flows; ++f) {
                auto p = encode_tag(SimPacket{kPeerA, static_cast<std::uint16_t>(20000 + f),
                                              {IpAddress::v4(10, 0, 0, 1), Transport::Tcp, 443}},
                                    3, 0);
                gw.ingress(p, t);
                t += std::chrono::microseconds(200);
            }
        }
        CHECK(gw.counters().cache_misses == flows);
        CHECK(gw.counters().cache_hits == flows * (pkts - 1));
    }
}

TEST_CASE("cache transparency and gateway oracle on random traces") {
    const auto policy = gw_policy();
    std::mt19937_64 rng(99);
    Gateway on, off({false});
    on.install(policy);
    off.install(policy);
    const char* dsts[] = {"10.0.3.1:443/tcp", "10.0.9.1:443/tcp", "10.0.0.2:53/udp", "10.0.3.1:22/tcp",
                          "93.184.216.34:443/tcp", "[fd00:1::5]:443/tcp", "10.200.0.1:443/tcp"};
    SimTime t{0};
    for (int i = 0; i < 20000; ++i) {
        const IpAddress& peer = rng() % 2 == 0 ? kPeerA : kPeerB;
        const auto mark = static_cast<std::uint32_t>(rng() % 6);
        const Destination d = Destination::parse(dsts[rng() % 7]);
        auto a = encode_tag(SimPacket{peer, static_cast<std::uint16_t>(30000 + rng() % 8), d}, mark, on.epoch());
        auto b = a;
        const auto va = on.ingress(a, t);
        const auto vb = off.ingress(b, t);
        REQUIRE(va.action == vb.action);
        REQUIRE(a == b);
        bool want;
        if (mark == 0) want = false;
        else if (!oracle::internal(policy.internal, d.ip)) want = true;
        else want = oracle::gateway_admits(policy, peer, mark, d);
        REQUIRE(va.passed() == want);
        t += milliseconds(1);
    }
}

TEST_CASE("exempt ports bypass the pipeline") {
    GatewayConfig cfg;
    cfg.exempt_ports = {51820};
    Gateway gw(cfg);
    gw.install(gw_policy());
    auto p = pkt(kPeerA, "10.0.0.1:51820/udp", 0, 0);
    CHECK(gw.ingress(p, {}).reason == Reason::Exempt);
}

TEST_CASE("trace records round-trip") {
    auto p = pkt(kPeerA, "10.0.3.1:443/tcp", 3, 7);
    TraceRecord rec{milliseconds(3), p, GatewayVerdict{GatewayAction::Pass, Reason::CacheHit, true}};
    const auto back = parse_trace(format_trace(rec));
    CHECK(back.time == rec.time);
    CHECK(back.packet == rec.packet);
    CHECK(back.verdict == rec.verdict);
    auto p6 = pkt(kPeerA, "[fd00:1::9]:443/tcp", 70000, 300);
    CHECK(parse_trace(format_trace({SimTime{1}, p6, std::nullopt})).packet == p6);
    CHECK_THROWS_AS(parse_trace("{\"time\": 1}"), ParseError);
    CHECK_THROWS_AS(parse_trace("not json"), ParseError);
}
