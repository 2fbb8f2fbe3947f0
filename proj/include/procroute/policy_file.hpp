// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Text policy files:
//
//   [options]      key = value (mode, cache, cache_ttl, sweep_interval,
//                  verify_delay, enforcement, exempt_ports)
//   [internal]     one CIDR per line
//   [principals]   name app_index [sha256:<hex>]
//   [grants]       principal CIDR [proto] [ports]
//   [gateway]      peer_ip principal CIDR [proto] [ports]
//   [bindings]     cgroup_id principal
//
// '#' starts a comment. proto is tcp, udp or '*'; ports is N, lo-hi or '*'
// with 0-0 meaning every port.

#include <cstddef>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>

#include "procroute/common.hpp"
#include "procroute/host.hpp"
#include "procroute/ip.hpp"
#include "procroute/policy.hpp"

namespace procroute {

struct PolicyFileError : ParseError {
    PolicyFileError(std::string source, std::size_t line, std::size_t column, const std::string& message);
    std::string source;
    std::size_t line;
    std::size_t column;
};

struct PolicyOptions {
    bool cache = true;
    SimTime cache_ttl = std::chrono::seconds(5);
    SimTime sweep_interval = std::chrono::seconds(1);
    SimTime verify_delay{0};
    EnforcementMode enforcement = EnforcementMode::Local;
    std::set<std::uint16_t> exempt_ports;
};

struct PolicyFile {
    PolicyInstance policy; // as written; not yet normalized
    PolicyOptions options;
};

// Throws PolicyFileError with the position of the offending token.
PolicyFile parse_policy_file(std::string_view text, const std::string& source = "<policy>");
PolicyFile load_policy_file(const std::filesystem::path& path);

// Renders a policy back into the file format.
std::string format_policy_file(const PolicyFile& file);

} // namespace procroute
