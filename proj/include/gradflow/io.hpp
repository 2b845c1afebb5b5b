#pragma once

// Trace files (JSON lines), CSV helpers and the run manifest.

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "gradflow/error.hpp"
#include "gradflow/trace.hpp"

namespace gradflow {

inline constexpr char const* code_version = "0.3.0";

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline ordered_json to_json_array(Eigen::VectorXd const& v) {
    ordered_json a = ordered_json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Eigen::VectorXd from_json_array(nlohmann::json const& a) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        v[static_cast<Eigen::Index>(i)] = a[i].is_null() ? std::numeric_limits<double>::quiet_NaN() : a[i].get<double>();
    return v;
}

} // namespace detail

/// Shortest round-trip decimal form of a double, for CSV cells.
[[nodiscard]] inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    auto const res = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, res.ptr};
}

/// One header record, one record per sample and event, one terminal record.
inline void write_trace_jsonl(std::ostream& os, FlowTrace const& trace, ordered_json const& header) {
    ordered_json h = ordered_json::object();
    h["type"] = "header";
    h["code_version"] = code_version;
    for (auto const& [k, v] : header.items()) h[k] = v;
    os << h.dump() << '\n';
    for (auto const& s : trace.samples) {
        ordered_json r = ordered_json::object();
        r["type"] = "sample";
        r["t"] = s.t;
        r["loss"] = s.loss;
        r["grad_norm"] = s.grad_norm;
        r["mu"] = s.mu ? ordered_json(*s.mu) : ordered_json(nullptr);
        if (s.model_error) r["model_error"] = *s.model_error;
        if (s.params) r["params"] = detail::to_json_array(*s.params);
        os << r.dump() << '\n';
    }
    for (auto const& e : trace.events) {
        ordered_json r = ordered_json::object();
        r["type"] = "event";
        r["t"] = e.t;
        r["kind"] = to_string(e.kind);
        r["detail"] = e.detail;
        os << r.dump() << '\n';
    }
    ordered_json term = ordered_json::object();
    term["type"] = "terminal";
    term["reason"] = to_string(trace.terminal_reason);
    term["stochastic"] = trace.stochastic;
    if (trace.terminal_params) {
        term["level"] = trace.terminal_params->level;
        term["params"] = detail::to_json_array(trace.terminal_params->values);
    }
    if (trace.terminal_field) term["field"] = detail::to_json_array(trace.terminal_field->coeffs());
    os << term.dump() << '\n';
}

/// What a trace file holds beyond the FlowTrace itself.
struct TraceFile {
    FlowTrace trace;
    nlohmann::json header;
    std::optional<Eigen::VectorXd> terminal_field;
};

[[nodiscard]] inline TraceFile read_trace_jsonl(std::istream& is) {
    TraceFile out;
    std::string line;
    std::size_t lineno = 0;
    bool saw_terminal = false;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json r;
        try {
            r = nlohmann::json::parse(line);
        } catch (nlohmann::json::exception const& e) {
            throw ConfigError("trace line " + std::to_string(lineno) + ": " + e.what());
        }
        std::string const type = r.value("type", "");
        if (type == "header") {
            out.header = r;
        } else if (type == "sample") {
            Sample s;
            s.t = r.at("t").get<double>();
            s.loss = r.at("loss").get<double>();
            s.grad_norm = r.at("grad_norm").get<double>();
            if (r.contains("mu") && !r["mu"].is_null()) s.mu = r["mu"].get<double>();
            if (r.contains("model_error")) s.model_error = r["model_error"].get<double>();
            if (r.contains("params")) s.params = detail::from_json_array(r["params"]);
            out.trace.samples.push_back(std::move(s));
        } else if (type == "event") {
            Event e;
            e.t = r.at("t").get<double>();
            std::string const k = r.at("kind").get<std::string>();
            bool found = false;
            for (auto kind : {EventKind::stall, EventKind::clamp, EventKind::expand, EventKind::prune, EventKind::stop})
                if (to_string(kind) == k) {
                    e.kind = kind;
                    found = true;
                }
            if (!found) throw ConfigError("trace line " + std::to_string(lineno) + ": unknown event kind '" + k + "'");
            e.detail = r.value("detail", "");
            out.trace.events.push_back(std::move(e));
        } else if (type == "terminal") {
            saw_terminal = true;
            std::string const reason = r.at("reason").get<std::string>();
            bool found = false;
            for (auto tr : {TerminalReason::grad_stop, TerminalReason::stall, TerminalReason::t_end,
                            TerminalReason::divergence})
                if (to_string(tr) == reason) {
                    out.trace.terminal_reason = tr;
                    found = true;
                }
            if (!found) throw ConfigError("trace line " + std::to_string(lineno) + ": unknown reason '" + reason + "'");
            out.trace.stochastic = r.value("stochastic", false);
            if (r.contains("params"))
                out.trace.terminal_params = ParamVector{detail::from_json_array(r["params"]), r.value("level", 1)};
            if (r.contains("field")) out.terminal_field = detail::from_json_array(r["field"]);
        } else {
            throw ConfigError("trace line " + std::to_string(lineno) + ": unknown record type '" + type + "'");
        }
    }
    if (!saw_terminal) throw ConfigError("trace has no terminal record");
    return out;
}

/// 64-bit FNV-1a.
[[nodiscard]] inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

[[nodiscard]] inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

[[nodiscard]] inline std::string utc_timestamp(std::chrono::system_clock::time_point tp) {
    std::time_t const t = std::chrono::system_clock::to_time_t(tp);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// Tracks emitted files so that the manifest lists every output.
class OutputDir {
  public:
    explicit OutputDir(std::filesystem::path root) : root_(std::move(root)) {
        std::error_code ec;
        std::filesystem::create_directories(root_, ec);
        if (ec) throw ConfigError("cannot create output directory '" + root_.string() + "': " + ec.message());
    }

    [[nodiscard]] std::filesystem::path const& root() const noexcept { return root_; }

    /// Opens `name` for writing and records it.
    [[nodiscard]] std::ofstream open(std::string const& name) {
        std::ofstream f(root_ / name, std::ios::binary | std::ios::trunc);
        if (!f) throw ConfigError("cannot write '" + (root_ / name).string() + "'");
        files_.push_back(name);
        return f;
    }

    [[nodiscard]] std::vector<std::string> const& files() const noexcept { return files_; }

    void write_manifest(std::string const& config_hash, std::chrono::system_clock::time_point start,
                        std::chrono::system_clock::time_point end, ordered_json const& extra = ordered_json::object()) {
        ordered_json m = ordered_json::object();
        m["config_hash"] = config_hash;
        m["code_version"] = code_version;
        m["start"] = utc_timestamp(start);
        m["end"] = utc_timestamp(end);
        std::vector<std::string> listed = files_;
        listed.push_back("manifest.json");
        m["files"] = listed;
        for (auto const& [k, v] : extra.items()) m[k] = v;
        std::ofstream f(root_ / "manifest.json", std::ios::binary | std::ios::trunc);
        if (!f) throw ConfigError("cannot write manifest in '" + root_.string() + "'");
        f << m.dump(2) << '\n';
    }

  private:
    std::filesystem::path root_;
    std::vector<std::string> files_;
};

} // namespace gradflow
