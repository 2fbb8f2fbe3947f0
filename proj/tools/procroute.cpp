// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
//
// procroute: validate policy files, answer one-off decisions and run the
// simulation scenarios.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "procroute/policy.hpp"
#include "procroute/policy_file.hpp"
#include "procroute/scenario.hpp"

namespace {

using namespace procroute;

constexpr int kExitFail = 1;
constexpr int kExitUsage = 2;

std::optional<NormalizationMode> parse_mode(const std::string& text) {
    if (text.empty()) return std::nullopt;
    if (text == "strict") return NormalizationMode::Strict;
    if (text == "cascaded") return NormalizationMode::Cascaded;
    throw CLI::ValidationError("--mode", "must be strict or cascaded");
}

int cmd_validate(const std::string& path, const std::string& mode) {
    PolicyFile file = load_policy_file(path);
    if (auto m = parse_mode(mode)) file.policy.mode = *m;
    std::cout << "policy: " << path << "\n";
    std::cout << "mode: " << to_string(file.policy.mode) << "\n";
    PolicyInstance norm;
    try {
        norm = normalize_policy(file.policy);
    } catch (const AmbiguousOverlap& e) {
        std::cout << "result: rejected\n";
        std::cout << "ambiguous_overlap: " << e.prefix_a << " " << e.prefix_b << " (" << e.owner << ")\n";
        std::cerr << "error: " << e.what() << "\n";
        return kExitFail;
    } catch (const PolicyError& e) {
        std::cout << "result: rejected\n";
        std::cerr << "error: " << e.what() << "\n";
        return kExitFail;
    }
    std::cout << "result: accepted\n";
    std::cout << "internal_prefixes: " << norm.internal.size() << "\n";
    std::cout << "principals: " << norm.principals.size() << "\n";
    for (const auto& p : norm.principals) {
        std::cout << "grants." << p.name << ": " << norm.grants_of(p).size() << "\n";
    }
    std::size_t gw = 0;
    for (const auto& [key, grants] : norm.gateway_grants) gw += grants.size();
    std::cout << "gateway_grants: " << gw << "\n";
    std::cout << "bindings: " << norm.bindings.size() << "\n";
    return 0;
}

int cmd_decide(const std::string& path, const std::string& who, const std::string& dst_text, bool unverified) {
    const PolicyInstance policy = normalize_policy(load_policy_file(path).policy);
    const Principal* prin = nullptr;
    if (who != "-") {
        prin = policy.find(who);
        if (prin == nullptr) throw UnknownPrincipal(who);
    }
    const Destination dst = Destination::parse(dst_text);
    std::cout << decide_local(prin, !unverified, dst, policy).to_string() << "\n";
    return 0;
}

std::uint64_t env_seed() {
    if (const char* s = std::getenv("PROCROUTE_SEED"); s != nullptr && *s != '\0') {
        try {
            return std::stoull(s);
        } catch (const std::exception&) {
            throw CLI::ValidationError("PROCROUTE_SEED", std::string("not a number: ") + s);
        }
    }
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Process-scoped route authorization simulator"};
    app.require_subcommand(1);

    auto* validate = app.add_subcommand("validate", "Parse and normalize a policy file");
    std::string v_policy, v_mode;
    validate->add_option("--policy,policy", v_policy, "Policy file")->required()->check(CLI::ExistingFile);
    validate->add_option("--mode", v_mode, "Override the normalization mode (strict|cascaded)");

    auto* decide = app.add_subcommand("decide", "Evaluate the local decision for one destination");
    std::string d_policy, d_principal, d_dst;
    bool d_unverified = false;
    decide->add_option("--policy", d_policy, "Policy file")->required()->check(CLI::ExistingFile);
    decide->add_option("principal", d_principal, "Principal name, or - for an unbound process")->required();
    decide->add_option("destination", d_dst, "IP:PORT/PROTO")->required();
    decide->add_flag("--unverified", d_unverified, "Treat the process as lacking exec-hash verification");

    auto* scenario = app.add_subcommand("scenario", "Run a built-in scenario or a script");
    std::string s_name, s_model = "fail-closed", s_mode, s_cache = "on", s_policy, s_script, s_audit;
    std::optional<std::uint64_t> s_seed;
    ScenarioOptions so;
    scenario->add_option("name", s_name, "Scenario name")->required();
    scenario->add_option("--seed", s_seed, "RNG seed (default: $PROCROUTE_SEED or 1)");
    scenario->add_option("--probes", so.probes, "Probe evaluations for update-safety");
    scenario->add_option("--model", s_model, "Update model: fail-closed|flush-reload|reversed");
    scenario->add_option("--mode", s_mode, "Normalization mode: strict|cascaded");
    scenario->add_option("--cache", s_cache, "Gateway flow cache: on|off");
    scenario->add_option("--flows", so.flows, "Short flows for flowcache")->check(CLI::PositiveNumber);
    scenario->add_option("--pkts", so.pkts, "Packets per short flow")->check(CLI::PositiveNumber);
    scenario->add_option("--long-pkts", so.long_pkts, "Packets per long flow")->check(CLI::PositiveNumber);
    scenario->add_option("--stacks", so.stacks, "Program stacks for monotonicity")->check(CLI::PositiveNumber);
    scenario->add_option("--policy", s_policy, "Initial policy for scripts")->check(CLI::ExistingFile);
    scenario->add_option("--script", s_script, "Scenario script")->check(CLI::ExistingFile);
    scenario->add_option("--audit-out", s_audit, "Append audit events to this file");

    CLI11_PARSE(app, argc, argv);

    try {
        if (validate->parsed()) return cmd_validate(v_policy, v_mode);
        if (decide->parsed()) return cmd_decide(d_policy, d_principal, d_dst, d_unverified);

        so.seed = s_seed ? *s_seed : env_seed();
        so.model = parse_update_model(s_model);
        so.mode = parse_mode(s_mode);
        if (s_cache == "on") so.cache = true;
        else if (s_cache == "off") so.cache = false;
        else throw CLI::ValidationError("--cache", "must be on or off");
        if (!s_policy.empty()) so.policy = s_policy;
        if (!s_script.empty()) so.script = s_script;
        if (!s_audit.empty()) so.audit_out = s_audit;
        if (!s_script.empty() && s_name != "script") {
            throw CLI::ValidationError("--script", "only applies to the script scenario");
        }
        const Report report = run_scenario(s_name, so);
        std::cout << report.render();
        return report.ok() ? 0 : kExitFail;
    } catch (const CLI::Error& e) {
        return app.exit(e);
    } catch (const ScriptError& e) {
        std::cerr << "script error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}
