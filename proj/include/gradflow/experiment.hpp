#pragma once

// Experiment runner behind the command-line tool: builds problems,
// architectures and flow settings from a Config, runs them and writes
// traces, CSV reports and a manifest.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gradflow/analysis.hpp"
#include "gradflow/architecture.hpp"
#include "gradflow/config.hpp"
#include "gradflow/eci.hpp"
#include "gradflow/flows.hpp"
#include "gradflow/hilbert.hpp"
#include "gradflow/io.hpp"
#include "gradflow/problem.hpp"

namespace gradflow {

enum ExitCode : int { exit_ok = 0, exit_config = 1, exit_divergence = 2, exit_rejected = 3 };

struct RunOptions {
    std::optional<std::string> out;   ///< --out, highest precedence
    std::optional<std::uint64_t> seed;
    std::ostream* log = &std::cerr;
};

inline constexpr char const* output_env_var = "GRADFLOW_OUT";

namespace detail {

// ---------------------------------------------------------------------------
// Building blocks from config sections

inline BasisPtr build_space(Config& c) {
    std::string const kind = c.get_string("space.basis", "sine");
    if (kind == "euclidean") {
        long long const size = c.get_int("space.size", 2);
        if (size < 1) throw ConfigError(c.location("space.size") + ": space.size must be >= 1");
        return make_euclidean(static_cast<int>(size));
    }
    if (kind != "sine") throw ConfigError(c.location("space.basis") + ": space.basis must be 'sine' or 'euclidean'");
    Domain d;
    d.dimension = static_cast<int>(c.get_int("space.dimension", 1));
    long long const n = c.get_int("space.resolution", d.dimension == 3 ? 17 : 256);
    try {
        return make_space(d, static_cast<int>(n));
    } catch (ConfigError const& e) {
        throw ConfigError(c.location("space.resolution") + ": " + e.what());
    }
}

/// Field from "f:amp, f:amp, ..." (sine basis; f = 0 is the constant, 3-D
/// terms read "fx/fy/fz:amp") or a plain value list (euclidean basis).
inline Field parse_field(Config& c, std::string const& key, BasisPtr const& basis, std::string const& text) {
    Eigen::Index const n = basis->size();
    Eigen::VectorXd coeffs = Eigen::VectorXd::Zero(n);
    if (basis->kind() == BasisKind::euclidean) {
        auto const items = Config::split(text, ',');
        if (static_cast<Eigen::Index>(items.size()) != n)
            throw ConfigError(c.location(key) + ": " + key + " needs " + std::to_string(n) + " values");
        for (std::size_t i = 0; i < items.size(); ++i) coeffs[static_cast<Eigen::Index>(i)] = c.to_double(key, items[i]);
        return {basis, coeffs};
    }
    int const modes = basis->resolution();
    int const dim = basis->dimension();
    for (auto const& term : Config::split(text, ',')) {
        auto const colon = term.find(':');
        if (colon == std::string::npos)
            throw ConfigError(c.location(key) + ": " + key + ": term '" + term + "' is not 'frequency:amplitude'");
        double const amp = c.to_double(key, Config::trim(term.substr(colon + 1)));
        auto const freqs = Config::split(term.substr(0, colon), '/');
        if (static_cast<int>(freqs.size()) != dim)
            throw ConfigError(c.location(key) + ": " + key + ": term '" + term + "' needs " + std::to_string(dim) +
                              " frequencies");
        std::vector<Eigen::VectorXd> axis;
        for (auto const& fs : freqs) {
            double const f = c.to_double(key, fs);
            Eigen::VectorXd v(modes);
            if (f == 0.0)
                v = constant_projection(modes);
            else
                sine_projection(f, modes, v.data(), nullptr);
            axis.push_back(std::move(v));
        }
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Index rest = i;
            double prod = amp;
            for (int d = dim - 1; d >= 0; --d) {
                prod *= axis[static_cast<std::size_t>(d)][rest % modes];
                rest /= modes;
            }
            coeffs[i] += prod;
        }
    }
    return {basis, coeffs};
}

inline Field read_field_file(Config& c, std::string const& key, BasisPtr const& basis) {
    std::string const path = c.require_string(key);
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError(c.location(key) + ": cannot open field file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    Field g = decode_field(ss.str());
    if (!g.basis().same_as(*basis)) throw ConfigError(c.location(key) + ": field file basis does not match [space]");
    return {basis, g.coeffs()};
}

inline SobolevOrder get_metric(Config& c, std::string const& key, SobolevOrder fallback) {
    auto v = c.raw(key);
    if (!v) return fallback;
    try {
        return parse_sobolev(*v);
    } catch (ConfigError const& e) {
        throw ConfigError(c.location(key) + ": " + key + ": " + e.what());
    }
}

inline Problem build_problem(Config& c, BasisPtr const& basis) {
    std::string const kind = c.get_string("problem.kind", "quadratic");
    std::string const name = c.get_string("problem.name", kind);
    auto target = [&]() -> Field {
        if (c.has("problem.phi_file")) return read_field_file(c, "problem.phi_file", basis);
        return parse_field(c, "problem.phi", basis, c.require_string("problem.phi"));
    };
    if (kind == "quadratic") {
        return make_quadratic(target(), get_metric(c, "problem.metric", SobolevOrder::L2), name);
    }
    if (kind == "npbe") {
        if (basis->kind() != BasisKind::sine_spectral)
            throw ConfigError(c.location("problem.kind") + ": npbe needs a sine basis");
        SobolevOrder const m = get_metric(c, "problem.metric", SobolevOrder::W22);
        double const clamp = c.get_double("problem.clamp", 50.0);
        if (!(clamp > 0.0)) throw ConfigError(c.location("problem.clamp") + ": problem.clamp must be > 0");
        return make_npbe(target(), m, clamp, name);
    }
    if (kind == "potential") {
        std::vector<double> const coeffs = c.get_doubles("problem.potential");
        if (coeffs.empty()) throw ConfigError(c.source() + ": potential problem needs problem.potential");
        std::optional<Field> known;
        if (auto s = c.get_optional_double("problem.solution")) {
            Eigen::VectorXd v = Eigen::VectorXd::Zero(basis->size());
            v[0] = *s;
            known = Field(basis, v);
        }
        Problem p = make_potential(basis, coeffs, known, name);
        p.gradient_metric = get_metric(c, "problem.metric", SobolevOrder::L2);
        if (p.gradient_metric != SobolevOrder::L2 && basis->kind() != BasisKind::sine_spectral)
            throw ConfigError(c.location("problem.metric") + ": Sobolev metrics need a sine basis");
        return p;
    }
    throw ConfigError(c.location("problem.kind") + ": problem.kind must be quadratic, npbe or potential");
}

struct ArchBlock {
    std::optional<ArchitectureSpec> arch; ///< empty: nominal flow
    ParamVector w0;
    std::optional<Field> g0;
};

inline ParamVector get_params(Config& c, std::string const& key, Eigen::Index size, bool required) {
    std::vector<double> const v = c.get_doubles(key);
    if (v.empty()) {
        if (required) throw ConfigError(c.source() + ": missing required key '" + key + "'");
        return {Eigen::VectorXd::Zero(size), 1};
    }
    if (static_cast<Eigen::Index>(v.size()) != size)
        throw ConfigError(c.location(key) + ": " + key + " has " + std::to_string(v.size()) + " values, architecture has " +
                          std::to_string(size) + " parameters");
    return {Eigen::Map<Eigen::VectorXd const>(v.data(), size), 1};
}

inline ArchBlock build_architecture(Config& c, BasisPtr const& basis, std::uint64_t seed, bool need_w0 = true) {
    ArchBlock b;
    std::string const kind = c.get_string("architecture.kind", "nominal");
    if (kind == "nominal") {
        Field g0 = c.has("architecture.g0") ? parse_field(c, "architecture.g0", basis, c.require_string("architecture.g0"))
                                            : Field::zero(basis);
        double const scale = c.get_double("architecture.g0_scale", 1.0);
        b.g0 = scale * g0;
        return b;
    }
    if (kind == "sinusoid") {
        long long const pairs = c.get_int("architecture.pairs", 1);
        try {
            b.arch = make_sinusoid(basis, static_cast<int>(pairs));
        } catch (ConfigError const& e) {
            throw ConfigError(c.location("architecture.kind") + ": " + e.what());
        }
    } else if (kind == "affine") {
        std::vector<double> const modes = c.get_doubles("architecture.modes");
        if (modes.empty()) throw ConfigError(c.source() + ": affine architecture needs architecture.modes");
        double const scale = c.get_double("architecture.scale", 1.0);
        std::vector<Field> fields;
        for (double m : modes) {
            auto const k = static_cast<Eigen::Index>(m);
            if (static_cast<double>(k) != m || k < 1 || k > basis->size())
                throw ConfigError(c.location("architecture.modes") + ": mode index out of range 1.." +
                                  std::to_string(basis->size()));
            fields.push_back(scale * basis_mode(basis, k - 1));
        }
        std::optional<Field> offset;
        if (c.has("architecture.offset"))
            offset = parse_field(c, "architecture.offset", basis, c.require_string("architecture.offset"));
        b.arch = make_affine(std::move(fields), std::move(offset));
    } else if (kind == "spiral") {
        b.arch = make_spiral();
    } else if (kind == "power") {
        Field dir = parse_field(c, "architecture.direction", basis, c.require_string("architecture.direction"));
        b.arch = make_power(std::move(dir), static_cast<int>(c.get_int("architecture.exponent", 2)));
    } else {
        throw ConfigError(c.location("architecture.kind") +
                          ": architecture.kind must be nominal, sinusoid, affine, spiral or power");
    }
    Eigen::Index const m = b.arch->parameter_count();
    std::string const dist = c.get_string("architecture.w0_distribution", "");
    double const scale = c.get_double("architecture.w0_scale", 1.0);
    if (!dist.empty()) {
        if (c.has("architecture.w0"))
            throw ConfigError(c.location("architecture.w0") + ": give either w0 or w0_distribution, not both");
        std::mt19937_64 rng(seed);
        b.w0 = {Eigen::VectorXd(m), 1};
        if (dist == "uniform") {
            std::uniform_real_distribution<double> u(-scale, scale);
            for (Eigen::Index k = 0; k < m; ++k) b.w0.values[k] = u(rng);
        } else if (dist == "normal") {
            std::normal_distribution<double> g(0.0, scale);
            for (Eigen::Index k = 0; k < m; ++k) b.w0.values[k] = g(rng);
        } else {
            throw ConfigError(c.location("architecture.w0_distribution") +
                              ": architecture.w0_distribution must be uniform or normal");
        }
    } else {
        b.w0 = get_params(c, "architecture.w0", m, need_w0 && (kind == "spiral" || kind == "power"));
    }
    b.w0.level = static_cast<int>(c.get_int("architecture.level", 1));
    return b;
}

struct FlowBlock {
    FlowConfig cfg;
    bool annealed = false;
};

inline FlowBlock build_flow(Config& c, std::uint64_t seed) {
    FlowBlock f;
    FlowConfig& g = f.cfg;
    std::string const method = c.get_string("flow.method", "rk45");
    if (method == "annealed")
        f.annealed = true;
    else if (method != "rk45")
        throw ConfigError(c.location("flow.method") + ": flow.method must be rk45 or annealed");
    g.t_end = c.get_double("flow.t_end", g.t_end);
    g.rel_tol = c.get_double("flow.rel_tol", g.rel_tol);
    g.abs_tol = c.get_double("flow.abs_tol", g.abs_tol);
    g.grad_stop = c.get_double("flow.grad_stop", g.grad_stop);
    g.stall_window = static_cast<int>(c.get_int("flow.stall_window", g.stall_window));
    g.stall_rel_change = c.get_double("flow.stall_rel_change", g.stall_rel_change);
    g.stall_grad = c.get_double("flow.stall_grad", g.stall_grad);
    g.solution_loss = c.get_double("flow.solution_loss", g.solution_loss);
    g.record_every = c.get_double("flow.record_every", g.record_every);
    g.record_growth = c.get_double("flow.record_growth", g.record_growth);
    g.initial_step = c.get_double("flow.initial_step", g.initial_step);
    g.min_step = c.get_double("flow.min_step", g.min_step);
    g.max_steps = c.get_u64("flow.max_steps", g.max_steps);
    g.anneal_c = c.get_double("flow.anneal_c", g.anneal_c);
    g.noise_beta = c.get_double("flow.noise_beta", g.noise_beta);
    g.sde_step = c.get_double("flow.sde_step", g.sde_step);
    g.prune = c.get_bool("flow.prune", g.prune);
    g.prune_amplitude = c.get_double("flow.prune_amplitude", g.prune_amplitude);
    g.prune_grad_floor = c.get_double("flow.prune_grad_floor", g.prune_grad_floor);
    g.seed = seed;
    g.validate();
    return f;
}

struct AnalysisBlock {
    bool li = true;
    bool rate = true;
    bool critical = true;
    bool mu_fit = false;
    std::optional<double> l_star;
    std::optional<double> rate_target;
    double mu_alpha = 0.5;
};

inline AnalysisBlock build_analysis(Config& c) {
    AnalysisBlock a;
    a.li = c.get_bool("analysis.li", a.li);
    a.rate = c.get_bool("analysis.rate", a.rate);
    a.critical = c.get_bool("analysis.critical", a.critical);
    a.mu_fit = c.get_bool("analysis.mu_fit", a.mu_fit);
    a.l_star = c.get_optional_double("analysis.l_star");
    a.rate_target = c.get_optional_double("analysis.rate_target");
    a.mu_alpha = c.get_double("analysis.mu_alpha", a.mu_alpha);
    return a;
}

inline EciSchedule build_eci(Config& c, std::uint64_t seed) {
    EciSchedule s;
    s.max_levels = static_cast<int>(c.get_int("eci.max_levels", s.max_levels));
    s.params_per_expansion = static_cast<int>(c.get_int("eci.params_per_expansion", s.params_per_expansion));
    s.solution_tol = c.get_double("eci.solution_tol", s.solution_tol);
    s.min_separation = c.get_double("eci.min_separation", s.min_separation);
    s.forced_frequency = c.get_optional_double("eci.forced_frequency");
    s.metric = get_metric(c, "eci.metric", SobolevOrder::L2);
    s.seed = seed;
    s.validate();
    return s;
}

/// Output directory: --out, then the environment, then the config, then a default.
inline std::filesystem::path resolve_out(Config& c, RunOptions const& opt) {
    std::string const from_config = c.get_string("out", "gradflow_out");
    if (opt.out) return *opt.out;
    if (char const* env = std::getenv(output_env_var); env && *env) return env;
    return from_config;
}

inline std::uint64_t resolve_seed(Config& c, RunOptions const& opt) {
    std::uint64_t const s = c.get_u64("seed", 0);
    return opt.seed ? *opt.seed : s;
}

inline std::string na() { return "NA"; }

inline std::string fmt(std::optional<double> v) { return v ? format_double(*v) : na(); }

inline ordered_json header_for(Config const& c, std::uint64_t seed, std::string const& run_id) {
    ordered_json h = ordered_json::object();
    h["run_id"] = run_id;
    h["seed"] = seed;
    h["config_hash"] = c.hash();
    h["config"] = c.to_json();
    return h;
}

struct AnalysisRow {
    std::string run_id;
    std::string terminal_reason;
    double final_loss = 0.0;
    LIEstimate li;
    bool li_run = false;
    RateClass rate;
    bool rate_run = false;
    std::optional<CriticalPointReport> critical;
    std::optional<MuDistanceFit> mu;
};

inline std::string const analysis_header =
    "run_id,terminal_reason,final_loss,alpha_hat,C_hat,li_quality,li_points,li_conclusive,rate_class,rate,"
    "exponent,predicted_alpha,critical_case,kernel_residual,r_hat,alpha_star";

inline std::string analysis_csv_row(AnalysisRow const& r) {
    std::ostringstream os;
    os << r.run_id << ',' << r.terminal_reason << ',' << format_double(r.final_loss) << ',';
    if (r.li_run && r.li.conclusive)
        os << format_double(r.li.alpha_hat) << ',' << format_double(r.li.C_hat) << ',' << format_double(r.li.fit_quality);
    else
        os << na() << ',' << na() << ',' << (r.li_run ? format_double(r.li.fit_quality) : na());
    os << ',' << (r.li_run ? std::to_string(r.li.n_points) : na()) << ','
       << (r.li_run ? (r.li.conclusive ? "true" : "false") : na()) << ',';
    if (r.rate_run) {
        os << to_string(r.rate.kind) << ','
           << (r.rate.kind == RateKind::exponential ? format_double(r.rate.rate) : na()) << ','
           << (r.rate.kind == RateKind::polynomial ? format_double(r.rate.exponent) : na()) << ','
           << (r.rate.kind != RateKind::inconclusive ? format_double(r.rate.predicted_alpha) : na()) << ',';
    } else {
        os << na() << ',' << na() << ',' << na() << ',' << na() << ',';
    }
    if (r.critical)
        os << to_string(r.critical->kind) << ',' << fmt(r.critical->kernel_residual) << ',';
    else
        os << na() << ',' << na() << ',';
    if (r.mu)
        os << format_double(r.mu->r_hat) << ',' << format_double(r.mu->predicted_alpha_star);
    else
        os << na() << ',' << na();
    return os.str();
}

/// Trace-only analyses (LI fit and rate class).
inline void analyse_trace(AnalysisRow& row, FlowTrace const& trace, AnalysisBlock const& a, double l_star,
                          std::optional<LIWindow> window = std::nullopt) {
    row.terminal_reason = std::string(to_string(trace.terminal_reason));
    row.final_loss = trace.samples.empty() ? std::numeric_limits<double>::quiet_NaN() : trace.last().loss;
    if (trace.stochastic || trace.terminal_reason == TerminalReason::divergence || trace.samples.empty()) return;
    if (a.li) {
        row.li = estimate_li(trace, l_star, window.value_or(LIWindow{}));
        row.li_run = true;
    }
    if (a.rate) {
        row.rate = classify_rate(trace, a.rate_target.value_or(l_star));
        row.rate_run = true;
    }
}

inline std::string compact(Eigen::VectorXd const& v) {
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? " " : "") + format_double(v[i]);
    return s;
}

template <class F> int guarded(RunOptions const& opt, F&& body) {
    try {
        return body();
    } catch (ConfigError const& e) {
        *opt.log << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (ShapeError const& e) {
        *opt.log << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (UnsupportedError const& e) {
        *opt.log << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (DivergenceError const& e) {
        *opt.log << "divergence: " << e.what() << '\n';
        return exit_divergence;
    }
}

} // namespace detail

// ---------------------------------------------------------------------------

/// Runs the configured flow; writes trace.jsonl, analysis.csv, manifest.json.
inline int cmd_run(Config c, RunOptions const& opt = {}) {
    return detail::guarded(opt, [&]() -> int {
        auto const start = std::chrono::system_clock::now();
        std::uint64_t const seed = detail::resolve_seed(c, opt);
        std::filesystem::path const out_path = detail::resolve_out(c, opt);
        std::string const run_id = c.get_string("name", "run");
        BasisPtr const basis = detail::build_space(c);
        Problem const p = detail::build_problem(c, basis);
        detail::ArchBlock const ab = detail::build_architecture(c, basis, seed);
        detail::FlowBlock const fb = detail::build_flow(c, seed);
        detail::AnalysisBlock const an = detail::build_analysis(c);
        c.require_all_used();
        if (ab.arch) require_compatible(p, *ab.arch);
        if (fb.annealed && !ab.arch) throw ConfigError(c.source() + ": annealed flow needs a parametric architecture");

        FlowTrace trace = !ab.arch ? integrate_nominal(p, *ab.g0, fb.cfg)
                          : fb.annealed ? integrate_annealed(p, *ab.arch, ab.w0, fb.cfg)
                                        : integrate_parametric(p, *ab.arch, ab.w0, fb.cfg);

        double const l_star = an.l_star ? *an.l_star : reference_loss(p, trace, fb.cfg).l_star;
        OutputDir out(out_path);
        ordered_json header = detail::header_for(c, seed, run_id);
        header["l_star"] = l_star;
        header["abs_tol"] = fb.cfg.abs_tol;
        {
            auto f = out.open("trace.jsonl");
            write_trace_jsonl(f, trace, header);
        }

        detail::AnalysisRow row;
        row.run_id = run_id;
        detail::analyse_trace(row, trace, an, l_star);
        bool const usable = !trace.stochastic && trace.terminal_reason != TerminalReason::divergence;
        if (ab.arch && usable && trace.terminal_params && trace.terminal_architecture) {
            if (an.critical)
                row.critical = classify_critical_point(p, *trace.terminal_architecture, *trace.terminal_params);
            if (an.mu_fit) {
                double const alpha = row.li_run && row.li.conclusive ? row.li.alpha_hat : an.mu_alpha;
                row.mu = fit_mu_distance(trace, *trace.terminal_params, alpha);
            }
        }
        {
            auto f = out.open("analysis.csv");
            f << detail::analysis_header << '\n' << detail::analysis_csv_row(row) << '\n';
        }
        out.write_manifest(c.hash(), start, std::chrono::system_clock::now());

        *opt.log << run_id << ": " << to_string(trace.terminal_reason) << " after " << trace.samples.size()
                 << " samples, final loss " << row.final_loss << '\n';
        return trace.terminal_reason == TerminalReason::divergence ? exit_divergence : exit_ok;
    });
}

/// Error-correcting inclusion: one trace per level plus eci_summary.csv.
inline int cmd_eci(Config c, RunOptions const& opt = {}) {
    return detail::guarded(opt, [&]() -> int {
        auto const start = std::chrono::system_clock::now();
        std::uint64_t const seed = detail::resolve_seed(c, opt);
        std::filesystem::path const out_path = detail::resolve_out(c, opt);
        std::string const run_id = c.get_string("name", "eci");
        BasisPtr const basis = detail::build_space(c);
        Problem const p = detail::build_problem(c, basis);
        detail::ArchBlock const ab = detail::build_architecture(c, basis, seed);
        detail::FlowBlock const fb = detail::build_flow(c, seed);
        EciSchedule const sched = detail::build_eci(c, seed);
        c.require_all_used();
        if (!ab.arch) throw ConfigError(c.source() + ": eci needs a parametric architecture");
        if (fb.annealed) throw ConfigError(c.source() + ": eci runs the deterministic flow; use flow.method = rk45");
        require_compatible(p, *ab.arch);

        EciTrace et;
        std::optional<std::string> rejection;
        try {
            et = run_eci(p, *ab.arch, ab.w0, sched, fb.cfg);
        } catch (EciExpansionRejected const& e) {
            et = e.trace();
            rejection = e.what();
        }

        OutputDir out(out_path);
        ordered_json header = detail::header_for(c, seed, run_id);
        for (std::size_t i = 0; i < et.segments.size(); ++i) {
            ordered_json h = header;
            h["level"] = static_cast<int>(i) + 1;
            h["t_offset"] = et.segment_offsets[i];
            auto f = out.open("trace_level" + std::to_string(i + 1) + ".jsonl");
            write_trace_jsonl(f, et.segments[i], h);
        }
        {
            auto f = out.open("eci_summary.csv");
            f << "level,M,t_start,t_end,start_loss,end_loss,verdict,mu_after,model_error\n";
            for (std::size_t i = 0; i < et.segments.size(); ++i) {
                FlowTrace const& s = et.segments[i];
                std::string verdict;
                std::string mu_after = detail::na();
                if (i < et.expansions.size()) {
                    verdict = "expanded";
                    mu_after = format_double(et.expansions[i].mu_after);
                } else if (rejection) {
                    verdict = "rejected";
                } else if (et.solved) {
                    verdict = "solved";
                } else {
                    verdict = std::string(to_string(s.terminal_reason));
                }
                Eigen::Index const m = s.terminal_params ? s.terminal_params->size() : 0;
                std::optional<double> err;
                if (s.terminal_params && s.terminal_architecture)
                    err = model_error(p, evaluate(*s.terminal_architecture, *s.terminal_params, false).value);
                double const t0 = et.segment_offsets[i];
                f << (i + 1) << ',' << m << ',' << format_double(t0) << ','
                  << format_double(t0 + (s.samples.empty() ? 0.0 : s.last().t)) << ','
                  << format_double(s.samples.empty() ? 0.0 : s.samples.front().loss) << ','
                  << format_double(s.samples.empty() ? 0.0 : s.last().loss) << ',' << verdict << ',' << mu_after << ','
                  << detail::fmt(err) << '\n';
            }
        }
        ordered_json extra = ordered_json::object();
        extra["expansions"] = et.expansions.size();
        if (rejection) extra["rejection"] = *rejection;
        out.write_manifest(c.hash(), start, std::chrono::system_clock::now(), extra);

        if (rejection) {
            *opt.log << run_id << ": expansion rejected: " << *rejection << '\n';
            return exit_rejected;
        }
        *opt.log << run_id << ": " << et.expansions.size() << " expansions, final loss " << et.final_loss
                 << (et.solved ? " (solved)" : "") << '\n';
        bool const diverged = !et.segments.empty() && et.segments.back().terminal_reason == TerminalReason::divergence;
        return diverged ? exit_divergence : exit_ok;
    });
}

/// Kernel spectra at sampled or swept parameters: spectrum.csv.
inline int cmd_spectrum(Config c, RunOptions const& opt = {}) {
    return detail::guarded(opt, [&]() -> int {
        auto const start = std::chrono::system_clock::now();
        std::uint64_t const seed = detail::resolve_seed(c, opt);
        std::filesystem::path const out_path = detail::resolve_out(c, opt);
        std::string const run_id = c.get_string("name", "spectrum");
        BasisPtr const basis = detail::build_space(c);
        detail::ArchBlock const ab = detail::build_architecture(c, basis, seed, false);
        SobolevOrder const metric = detail::get_metric(c, "spectrum.metric", SobolevOrder::L2);
        long long const samples = c.get_int("spectrum.samples", 5);
        double const low = c.get_double("spectrum.low", -2.0);
        double const high = c.get_double("spectrum.high", 2.0);
        std::optional<double> const sweep_from = c.get_optional_double("spectrum.sweep_from");
        std::optional<double> const sweep_to = c.get_optional_double("spectrum.sweep_to");
        long long const sweep_count = c.get_int("spectrum.sweep_count", 11);
        std::string const points = c.get_string("spectrum.points", "");
        double const tolerance = c.get_double("spectrum.tolerance", 1e-8);
        c.require_all_used();
        if (!ab.arch) throw ConfigError(c.source() + ": spectrum needs a parametric architecture");
        Eigen::Index const m = ab.arch->parameter_count();

        std::vector<Eigen::VectorXd> ws;
        if (!points.empty()) {
            for (auto const& pt : Config::split(points, ';')) {
                auto const items = Config::split(pt, ',');
                if (static_cast<Eigen::Index>(items.size()) != m)
                    throw ConfigError(c.location("spectrum.points") + ": each point needs " + std::to_string(m) +
                                      " values");
                Eigen::VectorXd w(m);
                for (Eigen::Index k = 0; k < m; ++k)
                    w[k] = c.to_double("spectrum.points", items[static_cast<std::size_t>(k)]);
                ws.push_back(w);
            }
        } else if (sweep_from || sweep_to) {
            if (!sweep_from || !sweep_to || sweep_count < 2)
                throw ConfigError(c.source() + ": a sweep needs spectrum.sweep_from, sweep_to and sweep_count >= 2");
            if (m != 1) throw ConfigError(c.source() + ": sweeps need a one-parameter architecture");
            for (long long i = 0; i < sweep_count; ++i)
                ws.push_back(Eigen::VectorXd::Constant(
                    1, *sweep_from + (*sweep_to - *sweep_from) * static_cast<double>(i) / double(sweep_count - 1)));
        } else {
            if (samples < 1) throw ConfigError(c.location("spectrum.samples") + ": spectrum.samples must be >= 1");
            if (!(high > low)) throw ConfigError(c.source() + ": spectrum.high must exceed spectrum.low");
            std::mt19937_64 rng(seed);
            std::uniform_real_distribution<double> u(low, high);
            for (long long i = 0; i < samples; ++i) {
                Eigen::VectorXd w(m);
                for (Eigen::Index k = 0; k < m; ++k) w[k] = u(rng);
                ws.push_back(w);
            }
        }

        OutputDir out(out_path);
        int failures = 0;
        {
            auto f = out.open("spectrum.csv");
            f << "w_id";
            for (Eigen::Index k = 0; k < m; ++k) f << ",w_" << k;
            for (Eigen::Index k = 0; k < m; ++k) f << ",eig_" << (k + 1);
            f << ",mu,rank,consistency,max_relative_mismatch\n";
            for (std::size_t i = 0; i < ws.size(); ++i) {
                ParamVector const w{ws[i], ab.w0.level};
                KernelDiagnostics const k = theta(*ab.arch, w, metric);
                f << i;
                for (Eigen::Index j = 0; j < m; ++j) f << ',' << format_double(ws[i][j]);
                for (Eigen::Index j = 0; j < m; ++j) f << ',' << format_double(k.eigenvalues[j]);
                f << ',' << format_double(k.mu) << ',' << k.numerical_rank << ',';
                try {
                    SpectralConsistencyReport const r = spectral_consistency(*ab.arch, w, metric);
                    bool const pass = r.max_relative_mismatch <= tolerance;
                    if (!pass) ++failures;
                    f << (pass ? "pass" : "fail") << ',' << format_double(r.max_relative_mismatch) << '\n';
                } catch (UnsupportedError const&) {
                    f << "unsupported," << detail::na() << '\n';
                }
            }
        }
        out.write_manifest(c.hash(), start, std::chrono::system_clock::now());
        *opt.log << run_id << ": " << ws.size() << " rows, " << failures << " consistency failures\n";
        return exit_ok;
    });
}

struct CoverageResult {
    std::vector<Eigen::Vector2d> targets;
    std::vector<double> line_distance;
    std::vector<double> spiral_distance;
    std::vector<double> line_w;
    std::vector<double> spiral_w;
    double median_line = 0.0;
    double median_spiral = 0.0;
};

[[nodiscard]] inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    std::size_t const h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Brute-force distances from targets to the line {w d} and the spiral
/// {(w sin w, w cos w)} over the grid |w| <= w_max with spacing w_step.
[[nodiscard]] inline CoverageResult coverage_distances(std::vector<Eigen::Vector2d> const& targets,
                                                       Eigen::Vector2d direction, double w_max, double w_step) {
    if (!(w_max > 0.0) || !(w_step > 0.0)) throw ConfigError("coverage grid needs w_max > 0 and w_step > 0");
    if (direction.norm() == 0.0) throw ConfigError("coverage line direction must be nonzero");
    direction.normalize();
    auto const count = static_cast<std::size_t>(std::floor(2.0 * w_max / w_step + 1e-9)) + 1;
    std::vector<double> ws(count), sx(count), sy(count);
    for (std::size_t i = 0; i < count; ++i) {
        double const w = -w_max + static_cast<double>(i) * w_step;
        ws[i] = w;
        sx[i] = w * std::sin(w);
        sy[i] = w * std::cos(w);
    }
    CoverageResult r;
    r.targets = targets;
    for (auto const& phi : targets) {
        double best_l = std::numeric_limits<double>::infinity(), best_s = best_l;
        double wl = 0.0, wsp = 0.0;
        for (std::size_t i = 0; i < count; ++i) {
            double const lx = ws[i] * direction.x() - phi.x(), ly = ws[i] * direction.y() - phi.y();
            double const dl = lx * lx + ly * ly;
            if (dl < best_l) {
                best_l = dl;
                wl = ws[i];
            }
            double const ex = sx[i] - phi.x(), ey = sy[i] - phi.y();
            double const ds = ex * ex + ey * ey;
            if (ds < best_s) {
                best_s = ds;
                wsp = ws[i];
            }
        }
        r.line_distance.push_back(std::sqrt(best_l));
        r.spiral_distance.push_back(std::sqrt(best_s));
        r.line_w.push_back(wl);
        r.spiral_w.push_back(wsp);
    }
    r.median_line = median(r.line_distance);
    r.median_spiral = median(r.spiral_distance);
    return r;
}

/// Line versus spiral coverage of a box of targets: coverage.csv and coverage_summary.csv.
inline int cmd_coverage_demo(Config c, RunOptions const& opt = {}) {
    return detail::guarded(opt, [&]() -> int {
        auto const start = std::chrono::system_clock::now();
        std::uint64_t const seed = detail::resolve_seed(c, opt);
        std::filesystem::path const out_path = detail::resolve_out(c, opt);
        std::string const run_id = c.get_string("name", "coverage");
        long long const samples = c.get_int("coverage.samples", 100);
        double const box = c.get_double("coverage.box", 100.0);
        double const w_max = c.get_double("coverage.w_max", 150.0);
        double const w_step = c.get_double("coverage.w_step", 1e-3);
        std::vector<double> dir = c.get_doubles("coverage.direction");
        std::string const points = c.get_string("coverage.points", "");
        c.require_all_used();
        if (dir.empty()) dir = {1.0, 1.0};
        if (dir.size() != 2) throw ConfigError(c.location("coverage.direction") + ": direction needs 2 values");
        if (samples < 1) throw ConfigError(c.location("coverage.samples") + ": coverage.samples must be >= 1");
        if (!(box > 0.0)) throw ConfigError(c.location("coverage.box") + ": coverage.box must be > 0");

        std::vector<Eigen::Vector2d> targets;
        if (!points.empty()) {
            for (auto const& pt : Config::split(points, ';')) {
                auto const xy = Config::split(pt, ',');
                if (xy.size() != 2) throw ConfigError(c.location("coverage.points") + ": points are 'x,y'");
                targets.emplace_back(c.to_double("coverage.points", xy[0]), c.to_double("coverage.points", xy[1]));
            }
        } else {
            std::mt19937_64 rng(seed);
            std::uniform_real_distribution<double> u(-box, box);
            for (long long i = 0; i < samples; ++i) {
                double const x = u(rng);
                double const y = u(rng);
                targets.emplace_back(x, y);
            }
        }
        CoverageResult const r = coverage_distances(targets, {dir[0], dir[1]}, w_max, w_step);

        OutputDir out(out_path);
        {
            auto f = out.open("coverage.csv");
            f << "id,phi_x,phi_y,line_distance,spiral_distance,line_w,spiral_w\n";
            for (std::size_t i = 0; i < targets.size(); ++i)
                f << i << ',' << format_double(targets[i].x()) << ',' << format_double(targets[i].y()) << ','
                  << format_double(r.line_distance[i]) << ',' << format_double(r.spiral_distance[i]) << ','
                  << format_double(r.line_w[i]) << ',' << format_double(r.spiral_w[i]) << '\n';
        }
        {
            auto f = out.open("coverage_summary.csv");
            f << "samples,median_line,median_spiral,spiral_better\n"
              << targets.size() << ',' << format_double(r.median_line) << ',' << format_double(r.median_spiral) << ','
              << (r.median_spiral < r.median_line ? "true" : "false") << '\n';
        }
        out.write_manifest(c.hash(), start, std::chrono::system_clock::now());
        *opt.log << run_id << ": median line " << r.median_line << ", median spiral " << r.median_spiral << '\n';
        return exit_ok;
    });
}

/// Re-runs the trace analyses on an existing trace file.
inline int cmd_analyze(std::string const& trace_path, std::optional<Config> c, RunOptions const& opt = {}) {
    return detail::guarded(opt, [&]() -> int {
        auto const start = std::chrono::system_clock::now();
        Config cfg = c ? *c : Config::from_string("", "<none>");
        std::filesystem::path const out_path = detail::resolve_out(cfg, opt);
        detail::AnalysisBlock const an = detail::build_analysis(cfg);
        cfg.require_all_used();

        std::ifstream f(trace_path);
        if (!f) throw ConfigError("cannot open trace '" + trace_path + "'");
        TraceFile const tf = read_trace_jsonl(f);
        FlowTrace const& trace = tf.trace;
        if (trace.samples.empty()) throw ConfigError("trace '" + trace_path + "' has no samples");

        double l_star = 0.0;
        std::optional<LIWindow> window;
        if (an.l_star) {
            l_star = *an.l_star;
        } else if (tf.header.contains("l_star") && tf.header["l_star"].is_number()) {
            l_star = tf.header["l_star"].get<double>();
        } else {
            double const abs_tol = tf.header.value("abs_tol", 1e-12);
            l_star = trace.last().loss - abs_tol;
            double smallest = std::numeric_limits<double>::infinity();
            for (auto const& s : trace.samples)
                if (s.loss - l_star > 0.0) smallest = std::min(smallest, s.loss - l_star);
            LIWindow w;
            if (std::isfinite(smallest)) w.gap_min = std::max(w.gap_min, 10.0 * smallest);
            window = w;
        }

        detail::AnalysisRow row;
        row.run_id = tf.header.value("run_id", std::string("trace"));
        detail::analyse_trace(row, trace, an, l_star, window);
        if (an.mu_fit && trace.terminal_params && !trace.stochastic) {
            double const alpha = row.li_run && row.li.conclusive ? row.li.alpha_hat : an.mu_alpha;
            row.mu = fit_mu_distance(trace, *trace.terminal_params, alpha);
        }
        OutputDir out(out_path);
        {
            auto o = out.open("analysis.csv");
            o << detail::analysis_header << '\n' << detail::analysis_csv_row(row) << '\n';
        }
        out.write_manifest(cfg.hash(), start, std::chrono::system_clock::now());
        *opt.log << row.run_id << ": " << (row.li.conclusive ? "alpha_hat " + format_double(row.li.alpha_hat) : "LI inconclusive")
                 << ", rate " << to_string(row.rate.kind) << '\n';
        return exit_ok;
    });
}

} // namespace gradflow
