// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "procroute/common.hpp"
#include "procroute/ip.hpp"
#include "procroute/policy.hpp"

namespace procroute {

enum class AuditKind : std::uint8_t { Deny, ExecEvent, GatewayDrop };

std::string_view to_string(AuditKind k);

// Field order is the serialized order.
struct AuditEvent {
    AuditKind kind = AuditKind::Deny;
    std::uint32_t pid = 0;
    std::string comm;
    std::uint64_t cgroup_id = 0;
    std::uint32_t app_index = 0; // 0 when unbound
    IpAddress dst_ip;
    std::uint16_t dst_port = 0;
    Transport proto = Transport::Tcp;
    SimTime timestamp{};
    Reason reason = Reason::NoBinding;

    bool operator==(const AuditEvent&) const = default;
};

// One JSON object per line with keys kind, pid, comm, cgroup_id, app_index,
// dst_ip, dst_port, proto, timestamp, reason (timestamp in nanoseconds).
std::string serialize(const AuditEvent& e);
// Throws ParseError on malformed lines or missing fields.
AuditEvent parse_audit_line(std::string_view line);

struct SinkError : std::runtime_error {
    explicit SinkError(const std::string& what) : std::runtime_error(what) {}
};

// Bounded multi-producer / single-consumer ring. emit() never blocks: when
// the ring is full the newest event is dropped and counted.
class EventBuffer {
  public:
    explicit EventBuffer(std::size_t capacity = 1 << 16);
    ~EventBuffer();
    EventBuffer(const EventBuffer&) = delete;
    EventBuffer& operator=(const EventBuffer&) = delete;

    // Safe to call from any number of threads concurrently.
    void emit(AuditEvent event);

    // Single consumer. Writes queued events to `sink` in order, one line
    // each. On a write failure throws SinkError and keeps every unwritten
    // event for the next drain.
    std::size_t drain(std::ostream& sink);
    // Single consumer. Moves queued events out without serializing.
    std::vector<AuditEvent> take();

    [[nodiscard]] std::size_t capacity() const { return capacity_; }
    [[nodiscard]] std::uint64_t dropped_count() const { return dropped_.load(std::memory_order_relaxed); }
    [[nodiscard]] std::uint64_t emitted_count() const { return emitted_.load(std::memory_order_relaxed); }
    // Approximate when producers are active.
    [[nodiscard]] std::size_t pending() const;

  private:
    struct Cell {
        std::atomic<std::size_t> sequence;
        AuditEvent event;
    };

    bool try_pop(AuditEvent& out);

    std::size_t capacity_;
    std::unique_ptr<Cell[]> cells_;
    alignas(64) std::atomic<std::size_t> enqueue_pos_{0};
    alignas(64) std::atomic<std::size_t> dequeue_pos_{0};
    std::atomic<std::uint64_t> dropped_{0};
    std::atomic<std::uint64_t> emitted_{0};
    std::vector<AuditEvent> staged_; // popped but not yet written
};

} // namespace procroute
