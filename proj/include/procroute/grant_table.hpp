// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "procroute/lpm_trie.hpp"
#include "procroute/policy.hpp"

namespace procroute {

// Value of a strict app_allow entry: the matched rule's own predicate.
struct AllowRule {
    ProtoSel proto = ProtoSel::Any;
    PortRange ports;
    bool operator==(const AllowRule&) const = default;
};

// Value of a cascaded app_allow entry: the predicate lives in the cascade
// table under <fixed, prefix, transport>.
struct CascadeMarker {
    bool operator==(const CascadeMarker&) const = default;
};

using AllowEntry = std::variant<AllowRule, CascadeMarker>;

struct CascadeKey {
    std::vector<std::uint8_t> fixed;
    Cidr prefix;
    Transport proto = Transport::Tcp;
    auto operator<=>(const CascadeKey&) const = default;
};

using CascadeTable = std::map<CascadeKey, PortRange>;

struct GrantLookup {
    enum class Outcome : std::uint8_t { NoPrefix, Covered, PredicateFailed };
    Outcome outcome = Outcome::NoPrefix;
    std::optional<Cidr> prefix;
    bool cascaded = false;
    unsigned visits = 0;        // LPM node visits
    unsigned table_accesses = 0; // 1 for a plain LPM lookup, 2 when the cascade table is consulted
};

// A pair of LPM tries (v4, v6) keyed by <fixed fields, destination prefix>,
// plus the cascade table for overlapping grant sets. Used both for the
// endpoint's app_allow map (fixed = app_index) and the gateway's per-peer map
// (fixed = peer, app_index).
class GrantTable {
  public:
    explicit GrantTable(std::size_t fixed_bytes = 4);

    [[nodiscard]] std::size_t fixed_bytes() const { return fixed_bytes_; }

    void put(std::span<const std::uint8_t> fixed, const Cidr& prefix, AllowEntry entry);
    bool erase(std::span<const std::uint8_t> fixed, const Cidr& prefix);
    [[nodiscard]] const AllowEntry* find(std::span<const std::uint8_t> fixed, const Cidr& prefix) const;

    void put_cascade(std::span<const std::uint8_t> fixed, const Cidr& prefix, Transport proto, PortRange ports);
    bool erase_cascade(std::span<const std::uint8_t> fixed, const Cidr& prefix, Transport proto);
    [[nodiscard]] const PortRange* find_cascade(std::span<const std::uint8_t> fixed, const Cidr& prefix,
                                                Transport proto) const;

    // Loads a normalized grant set under `fixed`.
    void load(std::span<const std::uint8_t> fixed, std::span<const Grant> grants, bool cascaded);

    // LPM lookup followed by the matched entry's proto/port predicate.
    [[nodiscard]] GrantLookup match(std::span<const std::uint8_t> fixed, const Destination& dst) const;

    // For cascaded entries: the port range stored under <matched prefix,
    // dst.proto>, or nullopt when the LPM misses or the slot is empty.
    [[nodiscard]] std::optional<PortRange> cascaded_lookup(std::span<const std::uint8_t> fixed,
                                                           const Destination& dst) const;

    [[nodiscard]] const LpmTrie<AllowEntry>& trie(Family f) const { return f == Family::V4 ? v4_ : v6_; }
    [[nodiscard]] const CascadeTable& cascade() const { return cascade_; }
    [[nodiscard]] std::size_t size() const { return v4_.size() + v6_.size(); }

  private:
    LpmTrie<AllowEntry>& trie_for(Family f) { return f == Family::V4 ? v4_ : v6_; }
    void check_fixed(std::span<const std::uint8_t> fixed) const;

    std::size_t fixed_bytes_;
    LpmTrie<AllowEntry> v4_;
    LpmTrie<AllowEntry> v6_;
    CascadeTable cascade_;
};

} // namespace procroute
