// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <string>
#include <string_view>

namespace procroute {

// Simulated time since the start of a run. All timing in the simulator is
// expressed in this unit; nothing reads the wall clock.
using SimTime = std::chrono::nanoseconds;

using Digest = std::array<std::uint8_t, 32>;

// SHA-256 of arbitrary bytes (stands in for hashing an executable image).
Digest sha256(std::string_view data);

std::string to_hex(const Digest& d);
// Accepts 64 hex digits, optionally prefixed with "sha256:". Throws ParseError.
Digest digest_from_hex(std::string_view text);

// "250ms", "1s", "5us", "100ns", "2m". Throws ParseError.
SimTime parse_duration(std::string_view text);
std::string format_duration(SimTime t);

} // namespace procroute
