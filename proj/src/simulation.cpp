// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/scenario.hpp"

#include <fstream>
#include <sstream>

namespace procroute {

SimulationConfig SimulationConfig::from(const PolicyOptions& opts) {
    SimulationConfig cfg;
    cfg.host.mode = opts.enforcement;
    cfg.host.verify_delay = opts.verify_delay;
    cfg.gateway.cache_enabled = opts.cache;
    cfg.gateway.cache_ttl = opts.cache_ttl;
    cfg.gateway.exempt_ports = opts.exempt_ports;
    cfg.revocation.sweep_interval = opts.sweep_interval;
    return cfg;
}

Simulation::Simulation(PolicyInstance policy, SimulationConfig cfg)
    : policy_(std::move(policy)),
      cfg_(std::move(cfg)),
      audit_(cfg_.audit_capacity),
      exec_events_(cfg_.audit_capacity),
      state_(build_dataplane(policy_)),
      host_(state_, cfg_.host, &audit_, &exec_events_),
      gateway_(cfg_.gateway, &audit_),
      sweeper_(cfg_.revocation) {
    gateway_.install(policy_);
}

UpdatePlan Simulation::update(PolicyInstance next, UpdateModel model) {
    UpdatePlan plan = plan_update(policy_, next, model);
    apply_plan(state_, plan);
    gateway_.install(next);
    if (plan.bumps_epoch) {
        gateway_.epoch_bump();
        last_bump_ = now();
    }
    policy_ = std::move(next);
    return plan;
}

void Simulation::epoch_bump() {
    state_.apply(MapOp{MapOp::Kind::Bump, EpochBump{}});
    gateway_.epoch_bump();
    last_bump_ = now();
}

std::vector<SocketId> Simulation::advance_to(SimTime t) { return sweeper_.run_until(host_, t); }

SimPacket Simulation::packet_for(SocketId sock, std::uint16_t src_port) const {
    const SimSocket& s = host_.socket(sock);
    SimPacket pkt;
    pkt.inner_src = cfg_.peer;
    pkt.src_port = src_port;
    pkt.inner_dst = s.dst;
    return encode_tag(pkt, s.mark, s.epoch.value_or(state_.epoch()));
}

GatewayVerdict Simulation::send_packet(SocketId sock, std::uint16_t src_port) {
    SimPacket pkt = packet_for(sock, src_port);
    return gateway_.ingress(pkt, now());
}

std::uint64_t Simulation::deny_verdicts() const { return host_.counters().denies + gateway_.counters().drops; }

std::uint64_t Simulation::audit_events() const { return audit_.emitted_count() + audit_.dropped_count(); }

bool Report::check(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
    return ok;
}

std::optional<std::string> Report::get(const std::string& key) const {
    for (const auto& [k, v] : fields_) {
        if (k == key) return v;
    }
    return std::nullopt;
}

std::string Report::render() const {
    std::ostringstream os;
    os << "scenario: " << scenario_ << "\n";
    for (const auto& [k, v] : fields_) os << k << ": " << v << "\n";
    for (const auto& f : failures_) os << "failed: " << f << "\n";
    os << "result: " << (ok() ? "PASS" : "FAIL") << "\n";
    return os.str();
}

Digest exe_digest(std::string_view spec) {
    if (spec.rfind("sha256:", 0) == 0) return digest_from_hex(spec);
    return sha256(spec);
}

std::size_t write_audit(EventBuffer& buffer, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw SinkError("cannot open audit sink " + path.string());
    const auto n = buffer.drain(out);
    out.flush();
    if (!out) throw SinkError("audit sink " + path.string() + " failed");
    return n;
}

std::vector<std::string> scenario_names() {
    return {"pivot", "update-safety", "revocation", "flowcache", "monotonicity", "split", "cascaded", "scaling",
            "script"};
}

Report run_scenario(const std::string& name, const ScenarioOptions& opts) {
    if (name == "pivot") return run_pivot(opts);
    if (name == "update-safety") return run_update_safety(opts);
    if (name == "revocation") return run_revocation(opts);
    if (name == "flowcache") return run_flowcache(opts);
    if (name == "monotonicity") return run_monotonicity(opts);
    if (name == "split") return run_split(opts);
    if (name == "cascaded") return run_cascaded(opts);
    if (name == "scaling") return run_scaling(opts);
    if (name == "script") {
        if (!opts.script) throw std::invalid_argument("the script scenario needs --script");
        return run_script(*opts.script, opts);
    }
    throw std::invalid_argument("unknown scenario '" + name + "'");
}

} // namespace procroute
