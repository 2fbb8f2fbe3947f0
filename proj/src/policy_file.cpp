// Copyright (c) ProcRoute contributors.
// SPDX-License-Identifier: Apache-2.0
#include "procroute/policy_file.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <vector>

namespace procroute {

PolicyFileError::PolicyFileError(std::string src, std::size_t ln, std::size_t col, const std::string& message)
    : ParseError(src + ":" + std::to_string(ln) + ":" + std::to_string(col) + ": " + message),
      source(std::move(src)),
      line(ln),
      column(col) {}

namespace {

enum class Section { None, Options, Internal, Principals, Grants, Gateway, Bindings };

struct Token {
    std::string_view text;
    std::size_t column; // 1-based
};

std::vector<Token> tokenize(std::string_view line) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        if (i >= line.size()) break;
        const std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
        out.push_back({line.substr(start, i - start), start + 1});
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

template <class T>
T parse_number(std::string_view text) {
    T value{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw ParseError("expected a number, got '" + std::string(text) + "'");
    }
    return value;
}

bool parse_bool(std::string_view v) {
    if (v == "on" || v == "true" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "no") return false;
    throw ParseError("expected on/off, got '" + std::string(v) + "'");
}

class Parser {
  public:
    explicit Parser(std::string source) : source_(std::move(source)) {}

    PolicyFile parse(std::string_view text) {
        std::size_t line_no = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            const auto end = std::min(text.find('\n', pos), text.size());
            ++line_no;
            line(text.substr(pos, end - pos), line_no);
            pos = end + 1;
        }
        resolve_gateway();
        return std::move(out_);
    }

  private:
    [[noreturn]] void fail(std::size_t line, std::size_t col, const std::string& msg) const {
        throw PolicyFileError(source_, line, col, msg);
    }

    // Runs f, converting any library error into a positional one.
    template <class F>
    auto at(std::size_t line, const Token& tok, F&& f) const {
        try {
            return f();
        } catch (const PolicyFileError&) {
            throw;
        } catch (const std::exception& e) {
            fail(line, tok.column, e.what());
        }
    }

    void line(std::string_view raw, std::size_t n) {
        const auto hash = raw.find('#');
        const std::string_view body = raw.substr(0, hash);
        auto toks = tokenize(body);
        if (toks.empty()) return;

        if (toks[0].text.front() == '[') {
            const auto t = trim(body);
            if (t.back() != ']' || toks.size() != 1) fail(n, toks[0].column, "malformed section header");
            const auto name = t.substr(1, t.size() - 2);
            if (name == "options") section_ = Section::Options;
            else if (name == "internal") section_ = Section::Internal;
            else if (name == "principals") section_ = Section::Principals;
            else if (name == "grants") section_ = Section::Grants;
            else if (name == "gateway") section_ = Section::Gateway;
            else if (name == "bindings") section_ = Section::Bindings;
            else fail(n, toks[0].column + 1, "unknown section '" + std::string(name) + "'");
            return;
        }

        switch (section_) {
        case Section::None: fail(n, toks[0].column, "entry outside of any section");
        case Section::Options: option(body, toks, n); break;
        case Section::Internal:
            expect_count(toks, 1, 1, n, "expected one CIDR");
            out_.policy.internal.push_back(at(n, toks[0], [&] { return Cidr::parse(toks[0].text); }));
            break;
        case Section::Principals: principal(toks, n); break;
        case Section::Grants: {
            expect_count(toks, 2, 4, n, "expected: principal CIDR [proto] [ports]");
            const std::string name(toks[0].text);
            out_.policy.grants[name].push_back(grant(toks, 1, n));
            break;
        }
        case Section::Gateway: {
            expect_count(toks, 3, 5, n, "expected: peer principal CIDR [proto] [ports]");
            const auto peer = at(n, toks[0], [&] { return IpAddress::parse(toks[0].text); });
            gateway_.push_back({peer, std::string(toks[1].text), grant(toks, 2, n), n, toks[1].column});
            break;
        }
        case Section::Bindings: {
            expect_count(toks, 2, 2, n, "expected: cgroup_id principal");
            const auto id = at(n, toks[0], [&] { return parse_number<std::uint64_t>(toks[0].text); });
            if (!out_.policy.bindings.emplace(id, std::string(toks[1].text)).second) {
                fail(n, toks[0].column, "cgroup " + std::to_string(id) + " bound twice");
            }
            break;
        }
        }
    }

    void expect_count(const std::vector<Token>& toks, std::size_t lo, std::size_t hi, std::size_t n,
                      const std::string& msg) const {
        if (toks.size() < lo) fail(n, toks.back().column + toks.back().text.size(), msg);
        if (toks.size() > hi) fail(n, toks[hi].column, msg);
    }

    Grant grant(const std::vector<Token>& toks, std::size_t first, std::size_t n) const {
        Grant g;
        g.prefix = at(n, toks[first], [&] { return Cidr::parse(toks[first].text); });
        if (toks.size() > first + 1) {
            g.proto = at(n, toks[first + 1], [&] { return parse_proto_sel(toks[first + 1].text); });
        }
        if (toks.size() > first + 2) {
            g.ports = at(n, toks[first + 2], [&] { return PortRange::parse(toks[first + 2].text); });
        }
        return g;
    }

    void principal(const std::vector<Token>& toks, std::size_t n) {
        expect_count(toks, 2, 3, n, "expected: name app_index [sha256:<hex>]");
        Principal p;
        p.name = std::string(toks[0].text);
        p.app_index = at(n, toks[1], [&] { return parse_number<std::uint32_t>(toks[1].text); });
        if (toks.size() == 3) p.exec_hash = at(n, toks[2], [&] { return digest_from_hex(toks[2].text); });
        if (out_.policy.find(p.name) != nullptr) fail(n, toks[0].column, "principal '" + p.name + "' declared twice");
        out_.policy.principals.push_back(std::move(p));
    }

    void option(std::string_view body, const std::vector<Token>& toks, std::size_t n) {
        const auto eq = body.find('=');
        if (eq == std::string_view::npos) fail(n, toks[0].column, "expected key = value");
        const auto key = trim(body.substr(0, eq));
        const auto value = trim(body.substr(eq + 1));
        const Token vt{value, value.empty() ? eq + 2 : static_cast<std::size_t>(value.data() - body.data()) + 1};
        if (value.empty()) fail(n, vt.column, "missing value for '" + std::string(key) + "'");

        auto& o = out_.options;
        if (key == "mode") {
            if (value == "strict") out_.policy.mode = NormalizationMode::Strict;
            else if (value == "cascaded") out_.policy.mode = NormalizationMode::Cascaded;
            else fail(n, vt.column, "mode must be strict or cascaded");
        } else if (key == "cache") {
            o.cache = at(n, vt, [&] { return parse_bool(value); });
        } else if (key == "cache_ttl") {
            o.cache_ttl = at(n, vt, [&] { return parse_duration(value); });
            if (o.cache_ttl <= SimTime{0}) fail(n, vt.column, "cache_ttl must be positive");
        } else if (key == "sweep_interval") {
            o.sweep_interval = at(n, vt, [&] { return parse_duration(value); });
            if (o.sweep_interval <= SimTime{0}) fail(n, vt.column, "sweep_interval must be positive");
        } else if (key == "verify_delay") {
            o.verify_delay = at(n, vt, [&] { return parse_duration(value); });
            if (o.verify_delay < SimTime{0}) fail(n, vt.column, "verify_delay must not be negative");
        } else if (key == "enforcement") {
            o.enforcement = at(n, vt, [&] { return parse_enforcement_mode(value); });
        } else if (key == "exempt_ports") {
            std::string list(value);
            for (char& c : list) {
                if (c == ',') c = ' ';
            }
            std::istringstream is(list);
            std::string port;
            while (is >> port) o.exempt_ports.insert(at(n, vt, [&] { return parse_number<std::uint16_t>(port); }));
        } else {
            fail(n, toks[0].column, "unknown option '" + std::string(key) + "'");
        }
    }

    struct PendingGateway {
        IpAddress peer;
        std::string principal;
        Grant grant;
        std::size_t line;
        std::size_t column;
    };

    // Gateway entries name principals, which may be declared later in the file.
    void resolve_gateway() {
        for (const auto& g : gateway_) {
            const Principal* p = out_.policy.find(g.principal);
            if (p == nullptr) fail(g.line, g.column, "unknown principal '" + g.principal + "'");
            out_.policy.gateway_grants[PeerApp{g.peer, p->app_index}].push_back(g.grant);
        }
    }

  private:
    std::string source_;
    Section section_ = Section::None;
    PolicyFile out_;
    std::vector<PendingGateway> gateway_;
};

} // namespace

PolicyFile parse_policy_file(std::string_view text, const std::string& source) { return Parser(source).parse(text); }

PolicyFile load_policy_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open policy file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_policy_file(ss.str(), path.string());
}

std::string format_policy_file(const PolicyFile& file) {
    const auto& p = file.policy;
    const auto& o = file.options;
    std::ostringstream os;
    os << "[options]\n";
    os << "mode = " << to_string(p.mode) << "\n";
    os << "cache = " << (o.cache ? "on" : "off") << "\n";
    os << "cache_ttl = " << format_duration(o.cache_ttl) << "\n";
    os << "sweep_interval = " << format_duration(o.sweep_interval) << "\n";
    os << "verify_delay = " << format_duration(o.verify_delay) << "\n";
    os << "enforcement = " << to_string(o.enforcement) << "\n";
    if (!o.exempt_ports.empty()) {
        os << "exempt_ports =";
        for (const auto port : o.exempt_ports) os << " " << port;
        os << "\n";
    }
    os << "\n[internal]\n";
    for (const auto& c : p.internal) os << c << "\n";
    os << "\n[principals]\n";
    for (const auto& pr : p.principals) {
        os << pr.name << " " << pr.app_index;
        if (pr.exec_hash) os << " sha256:" << to_hex(*pr.exec_hash);
        os << "\n";
    }
    os << "\n[grants]\n";
    for (const auto& [name, grants] : p.grants) {
        for (const auto& g : grants) os << name << " " << g.to_string() << "\n";
    }
    if (!p.gateway_grants.empty()) {
        os << "\n[gateway]\n";
        for (const auto& [key, grants] : p.gateway_grants) {
            const Principal* pr = p.find_index(key.app_index);
            for (const auto& g : grants) {
                os << key.peer << " " << (pr != nullptr ? pr->name : std::to_string(key.app_index)) << " "
                   << g.to_string() << "\n";
            }
        }
    }
    if (!p.bindings.empty()) {
        os << "\n[bindings]\n";
        for (const auto& [cg, name] : p.bindings) os << cg << " " << name << "\n";
    }
    return os.str();
}

} // namespace procroute
