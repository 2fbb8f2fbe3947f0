// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/audit.hpp"

#include <algorithm>

#include "json.hpp"

namespace procroute {

using ordered_json = nlohmann::ordered_json;

std::string_view to_string(AuditKind k) {
    switch (k) {
    case AuditKind::Deny: return "deny";
    case AuditKind::ExecEvent: return "exec";
    case AuditKind::GatewayDrop: return "gateway_drop";
    }
    return "?";
}

namespace {

AuditKind parse_kind(std::string_view s) {
    for (const auto k : {AuditKind::Deny, AuditKind::ExecEvent, AuditKind::GatewayDrop}) {
        if (to_string(k) == s) return k;
    }
    throw ParseError("unknown audit kind '" + std::string(s) + "'");
}

} // namespace

std::string serialize(const AuditEvent& e) {
    ordered_json j;
    j["kind"] = to_string(e.kind);
    j["pid"] = e.pid;
    j["comm"] = e.comm;
    j["cgroup_id"] = e.cgroup_id;
    j["app_index"] = e.app_index;
    j["dst_ip"] = e.dst_ip.to_string();
    j["dst_port"] = e.dst_port;
    j["proto"] = to_string(e.proto);
    j["timestamp"] = e.timestamp.count();
    j["reason"] = to_string(e.reason);
    return j.dump();
}

AuditEvent parse_audit_line(std::string_view line) {
    ordered_json j;
    try {
        j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("audit line is not JSON: ") + ex.what());
    }
    static constexpr std::string_view fields[] = {"kind",     "pid",   "comm",      "cgroup_id", "app_index",
                                                  "dst_ip",   "dst_port", "proto", "timestamp", "reason"};
    for (const auto f : fields) {
        if (!j.contains(std::string(f))) throw ParseError("audit line missing field '" + std::string(f) + "'");
    }
    try {
        AuditEvent e;
        e.kind = parse_kind(j["kind"].get<std::string>());
        e.pid = j["pid"].get<std::uint32_t>();
        e.comm = j["comm"].get<std::string>();
        e.cgroup_id = j["cgroup_id"].get<std::uint64_t>();
        e.app_index = j["app_index"].get<std::uint32_t>();
        e.dst_ip = IpAddress::parse(j["dst_ip"].get<std::string>());
        e.dst_port = j["dst_port"].get<std::uint16_t>();
        e.proto = parse_transport(j["proto"].get<std::string>());
        e.timestamp = SimTime(j["timestamp"].get<std::int64_t>());
        e.reason = parse_reason(j["reason"].get<std::string>());
        return e;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("audit line has a mistyped field: ") + ex.what());
    }
}

EventBuffer::EventBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("event buffer capacity must be positive");
    // Sequence numbers need at least two cells to tell "full" from "free".
    const std::size_t cells = std::max<std::size_t>(capacity, 2);
    cells_ = std::make_unique<Cell[]>(cells);
    for (std::size_t i = 0; i < cells; ++i) {
        cells_[i].sequence.store(i, std::memory_order_relaxed);
    }
}

EventBuffer::~EventBuffer() = default;

void EventBuffer::emit(AuditEvent event) {
    const std::size_t cells = std::max<std::size_t>(capacity_, 2);
    std::size_t pos = enqueue_pos_.load(std::memory_order_relaxed);
    Cell* cell = nullptr;
    while (true) {
        // Logical capacity check; the ring itself may have one spare cell.
        if (pos - dequeue_pos_.load(std::memory_order_acquire) >= capacity_) {
            dropped_.fetch_add(1, std::memory_order_relaxed);
            return;
        }
        cell = &cells_[pos % cells];
        const std::size_t seq = cell->sequence.load(std::memory_order_acquire);
        const auto diff = static_cast<std::intptr_t>(seq) - static_cast<std::intptr_t>(pos);
        if (diff == 0) {
            if (enqueue_pos_.compare_exchange_weak(pos, pos + 1, std::memory_order_relaxed)) break;
        } else if (diff < 0) {
            dropped_.fetch_add(1, std::memory_order_relaxed);
            return;
        } else {
            pos = enqueue_pos_.load(std::memory_order_relaxed);
        }
    }
    cell->event = std::move(event);
    cell->sequence.store(pos + 1, std::memory_order_release);
    emitted_.fetch_add(1, std::memory_order_relaxed);
}

bool EventBuffer::try_pop(AuditEvent& out) {
    const std::size_t cells = std::max<std::size_t>(capacity_, 2);
    const std::size_t pos = dequeue_pos_.load(std::memory_order_relaxed);
    Cell& cell = cells_[pos % cells];
    const std::size_t seq = cell.sequence.load(std::memory_order_acquire);
    if (seq != pos + 1) return false; // empty, or a producer is mid-write
    out = std::move(cell.event);
    cell.sequence.store(pos + cells, std::memory_order_release);
    dequeue_pos_.store(pos + 1, std::memory_order_release);
    return true;
}

std::size_t EventBuffer::pending() const {
    return staged_.size() + (enqueue_pos_.load(std::memory_order_acquire) - dequeue_pos_.load(std::memory_order_acquire));
}

std::vector<AuditEvent> EventBuffer::take() {
    std::vector<AuditEvent> out = std::move(staged_);
    staged_.clear();
    AuditEvent e;
    while (try_pop(e)) out.push_back(std::move(e));
    return out;
}

std::size_t EventBuffer::drain(std::ostream& sink) {
    AuditEvent e;
    while (try_pop(e)) staged_.push_back(std::move(e));
    std::size_t written = 0;
    for (; written < staged_.size(); ++written) {
        if (!sink) break;
        sink << serialize(staged_[written]) << '\n';
        if (!sink) break;
    }
    if (written < staged_.size()) {
        // A line that failed mid-write is retained and rewritten next time.
        staged_.erase(staged_.begin(), staged_.begin() + static_cast<std::ptrdiff_t>(written));
        throw SinkError("audit sink rejected a write; " + std::to_string(staged_.size()) + " events retained");
    }
    staged_.clear();
    return written;
}

} // namespace procroute
