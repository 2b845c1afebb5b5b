#pragma once

// Inclusive architecture expansion and the error-correcting inclusion loop:
// run the parametric flow, grow the architecture at a stall without moving
// the model, restart.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gradflow/analysis.hpp"
#include "gradflow/architecture.hpp"
#include "gradflow/error.hpp"
#include "gradflow/flows.hpp"
#include "gradflow/parametric.hpp"
#include "gradflow/problem.hpp"
#include "gradflow/trace.hpp"

namespace gradflow {

struct EciSchedule {
    int max_levels = 5;
    int params_per_expansion = 2;
    double solution_tol = 1e-4;
    std::uint64_t seed = 0;
    double min_separation = 0.1;  ///< new frequencies keep this distance from active ones
    int fallback_attempts = 20;
    double drift_tolerance = 1e-12;
    std::optional<double> forced_frequency; ///< bypasses the freshness rule (test fixtures)
    SobolevOrder metric = SobolevOrder::L2; ///< metric of theta used for the rank test
    CriticalTolerances critical;

    void validate() const {
        if (max_levels < 1) throw ConfigError("eci.max_levels must be >= 1");
        if (params_per_expansion < 2 || params_per_expansion % 2 != 0)
            throw ConfigError("eci.params_per_expansion must be an even integer >= 2");
        if (!(solution_tol >= 0.0)) throw ConfigError("eci.solution_tol must be >= 0");
        if (!(min_separation > 0.0)) throw ConfigError("eci.min_separation must be > 0");
    }
};

struct ExpansionEvent {
    int level_from = 1;
    int level_to = 2;
    double t = 0.0;
    ParamVector w_before;
    ParamVector w_after;
    double model_drift = 0.0;
    double mu_after = 0.0;
    double rank_tolerance = 0.0;
    int rank_before = 0;
    int rank_after = 0;
    std::optional<CriticalPointReport> stall_case;
};

struct ExpansionResult {
    ArchitectureSpec architecture;
    ParamVector params;
    ExpansionEvent event;
};

namespace detail {

inline bool far_from_all(double f, std::vector<double> const& active, double sep) {
    return std::all_of(active.begin(), active.end(), [&](double a) { return std::abs(f - a) > sep; });
}

/// Smallest positive integer frequency away from every active one, else a
/// seeded draw on [0.5, a + 2] under the same separation test.
inline double fresh_frequency(std::vector<double> const& active, int pairs, int modes, EciSchedule const& sched,
                              std::mt19937_64& rng) {
    // integer frequencies beyond half the mode count are not resolved by the basis
    int const max_int = std::max(1, modes / 2);
    for (int f = 1; f <= max_int; ++f)
        if (far_from_all(f, active, sched.min_separation)) return f;
    std::uniform_real_distribution<double> u(0.5, pairs + 2.0);
    for (int i = 0; i < sched.fallback_attempts; ++i) {
        double const f = u(rng);
        if (far_from_all(f, active, sched.min_separation)) return f;
    }
    return std::numeric_limits<double>::quiet_NaN();
}

/// Orthonormal (coefficient dot product) fields spanning new directions.
inline std::vector<Field> fresh_orthonormal_fields(std::vector<Field> const& existing, int count) {
    BasisPtr const& basis = existing.front().basis_ptr();
    Eigen::Index const n = basis->size();
    // orthonormal basis of span(existing); the fields themselves need not be orthogonal
    std::vector<Eigen::VectorXd> q;
    auto reduce = [&q](Eigen::VectorXd& v) {
        for (int pass = 0; pass < 2; ++pass)
            for (auto const& e : q) v -= e.dot(v) * e;
    };
    for (auto const& f : existing) {
        Eigen::VectorXd v = f.coeffs();
        double const scale = v.norm();
        reduce(v);
        if (scale > 0.0 && v.norm() > 1e-10 * scale) q.push_back(v.normalized());
    }
    std::vector<Field> out;
    for (Eigen::Index k = 0; k < n && static_cast<int>(out.size()) < count; ++k) {
        Eigen::VectorXd v = Eigen::VectorXd::Unit(n, k);
        reduce(v);
        double const nv = v.norm();
        if (nv < 1e-8) continue;
        v /= nv;
        q.push_back(v);
        out.emplace_back(basis, v);
    }
    return out;
}

inline bool prefix_identical(Eigen::VectorXd const& longer, Eigen::VectorXd const& prefix) {
    return longer.size() >= prefix.size() &&
           std::memcmp(longer.data(), prefix.data(), static_cast<std::size_t>(prefix.size()) * sizeof(double)) == 0;
}

} // namespace detail

/// Canonical extension: pads w with zeros up to `size` parameters.
[[nodiscard]] inline ParamVector extend_params(ParamVector const& w, Eigen::Index size, int level) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(size);
    v.head(w.size()) = w.values;
    return {std::move(v), level};
}

/// First `size` coordinates of w.
[[nodiscard]] inline ParamVector project_params(ParamVector const& w, Eigen::Index size, int level) {
    return {w.values.head(size), level};
}

/// Grows the architecture by params_per_expansion parameters at w_star
/// without changing the model. Throws ExpansionRejected when the new
/// Jacobian columns do not raise the numerical rank of theta.
[[nodiscard]] inline ExpansionResult expand(ArchitectureSpec const& a, ParamVector const& w_star,
                                            EciSchedule const& sched) {
    sched.validate();
    detail::require_params(a, w_star);
    ArchitectureSpec next = a;
    Eigen::VectorXd ext;
    switch (a.kind) {
    case ArchKind::sinusoid: {
        int const add = sched.params_per_expansion / 2;
        next.pairs = a.pairs + add;
        ext = Eigen::VectorXd::Zero(next.parameter_count());
        ext.head(w_star.size()) = w_star.values;
        std::vector<double> active;
        for (int i = 1; i <= a.pairs; ++i) active.push_back(std::abs(w_star.values[2 * i - 1]));
        std::mt19937_64 rng(sched.seed + static_cast<std::uint64_t>(w_star.level));
        for (int j = 0; j < add; ++j) {
            int const pair = a.pairs + 1 + j;
            double const f = sched.forced_frequency
                                 ? *sched.forced_frequency
                                 : detail::fresh_frequency(active, pair, static_cast<int>(a.basis->size()), sched, rng);
            if (!std::isfinite(f))
                throw ExpansionRejected("no fresh frequency found for pair " + std::to_string(pair),
                                        static_cast<std::size_t>(2 * pair - 1));
            ext[2 * pair - 1] = f;
            ext[2 * pair] = 0.0;
            active.push_back(std::abs(f));
        }
        break;
    }
    case ArchKind::affine: {
        std::vector<Field> added = detail::fresh_orthonormal_fields(a.fields, sched.params_per_expansion);
        if (static_cast<int>(added.size()) < sched.params_per_expansion)
            throw ExpansionRejected("field space exhausted", static_cast<std::size_t>(a.parameter_count()));
        for (auto& f : added) next.fields.push_back(std::move(f));
        ext = Eigen::VectorXd::Zero(next.parameter_count());
        ext.head(w_star.size()) = w_star.values;
        break;
    }
    default:
        throw UnsupportedError(std::string(to_string(a.kind)) + " architecture does not support expansion");
    }

    ExpansionEvent ev;
    ev.level_from = w_star.level;
    ev.level_to = w_star.level + 1;
    ev.w_before = w_star;
    ev.w_after = ParamVector{std::move(ext), ev.level_to};

    ModelEval const before = evaluate(a, w_star, true);
    ModelEval const after = evaluate(next, ev.w_after, true);
    ev.model_drift = (after.value - before.value).norm() / std::max(1.0, before.value.norm());
    KernelDiagnostics const kb = diagnose_gram(gram(before.jacobian, *a.basis, sched.metric));
    KernelDiagnostics const ka = diagnose_gram(gram(after.jacobian, *a.basis, sched.metric));
    ev.rank_before = kb.numerical_rank;
    ev.rank_after = ka.numerical_rank;
    ev.mu_after = ka.mu;
    ev.rank_tolerance = ka.rank_tolerance;

    if (!detail::prefix_identical(ev.w_after.values, w_star.values))
        throw ExpansionRejected("extension does not project back onto w*", 0);
    if (ev.model_drift > sched.drift_tolerance)
        throw ExpansionRejected("expansion moved the model by " + std::to_string(ev.model_drift),
                                static_cast<std::size_t>(a.parameter_count()));
    if (ev.rank_after <= ev.rank_before || !(ev.mu_after > ev.rank_tolerance)) {
        // name the first new parameter whose column adds nothing
        std::size_t offending = static_cast<std::size_t>(a.parameter_count());
        for (Eigen::Index k = a.parameter_count(); k < next.parameter_count(); ++k) {
            if (after.jacobian.col(k).norm() > 0.0) {
                offending = static_cast<std::size_t>(k);
                break;
            }
        }
        throw ExpansionRejected("expansion does not raise the rank of theta (rank " + std::to_string(ev.rank_before) +
                                    " -> " + std::to_string(ev.rank_after) + "); offending parameter w_" +
                                    std::to_string(offending),
                                offending);
    }
    return {std::move(next), ev.w_after, std::move(ev)};
}

// ---------------------------------------------------------------------------

struct IaePairResult {
    std::size_t lower = 0; ///< 0-based level indices
    std::size_t upper = 0;
    double max_error = 0.0;
    bool passed = true;
};

struct IaeReport {
    std::vector<IaePairResult> pairs;
    [[nodiscard]] bool passed() const noexcept {
        return std::all_of(pairs.begin(), pairs.end(), [](auto const& p) { return p.passed; });
    }
    [[nodiscard]] std::optional<IaePairResult> first_failure() const {
        for (auto const& p : pairs)
            if (!p.passed) return p;
        return std::nullopt;
    }
};

/// Restriction consistency: A_j(canonical extension of w) = A_i(w) at
/// sampled w, for every pair of levels i < j.
[[nodiscard]] inline IaeReport validate_iae(std::vector<ArchitectureSpec> const& levels, int sample_count,
                                            std::uint64_t seed) {
    IaeReport report;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (std::size_t i = 0; i < levels.size(); ++i) {
        for (std::size_t j = i + 1; j < levels.size(); ++j) {
            IaePairResult r{i, j, 0.0, true};
            Eigen::Index const mi = levels[i].parameter_count();
            Eigen::Index const mj = levels[j].parameter_count();
            if (mj < mi || !levels[i].basis->same_as(*levels[j].basis)) {
                r.passed = false;
                r.max_error = std::numeric_limits<double>::infinity();
                report.pairs.push_back(r);
                continue;
            }
            for (int s = 0; s < sample_count; ++s) {
                ParamVector w{Eigen::VectorXd(mi), static_cast<int>(i) + 1};
                for (Eigen::Index k = 0; k < mi; ++k) w.values[k] = u(rng);
                Eigen::VectorXd const ai = evaluate(levels[i], w, false).value;
                Eigen::VectorXd const aj =
                    evaluate(levels[j], extend_params(w, mj, static_cast<int>(j) + 1), false).value;
                double const err = (aj - ai).norm();
                r.max_error = std::max(r.max_error, err / (1.0 + ai.norm()));
                if (err > 1e-12 * (1.0 + ai.norm())) r.passed = false;
            }
            report.pairs.push_back(r);
        }
    }
    return report;
}

// ---------------------------------------------------------------------------

struct EciTrace {
    std::vector<FlowTrace> segments;
    std::vector<double> segment_offsets; ///< cumulative start time of each segment
    std::vector<ExpansionEvent> expansions;
    std::optional<double> final_error;
    double final_loss = 0.0;
    int final_level = 1;
    bool solved = false;
    std::optional<ArchitectureSpec> final_architecture;
    std::optional<ParamVector> final_params;
};

/// An expansion was rejected mid-loop; carries everything recorded so far.
class EciExpansionRejected : public ExpansionRejected {
  public:
    EciExpansionRejected(ExpansionRejected const& e, EciTrace trace)
        : ExpansionRejected(e), trace_(std::move(trace)) {}

    [[nodiscard]] EciTrace const& trace() const noexcept { return trace_; }

  private:
    EciTrace trace_;
};

[[nodiscard]] inline EciTrace run_eci(Problem const& p, ArchitectureSpec const& a1, ParamVector const& w0,
                                     EciSchedule const& sched, FlowConfig const& cfg) {
    sched.validate();
    cfg.validate();
    if (a1.kind != ArchKind::sinusoid && a1.kind != ArchKind::affine)
        throw UnsupportedError(std::string(to_string(a1.kind)) + " architecture does not support expansion");
    EciTrace out;
    ArchitectureSpec a = a1;
    ParamVector w = w0;
    double offset = 0.0;
    for (;;) {
        FlowTrace seg = integrate_parametric(p, a, w, cfg);
        out.segment_offsets.push_back(offset);
        double const seg_end = seg.samples.empty() ? 0.0 : seg.last().t;
        TerminalReason const reason = seg.terminal_reason;
        double const loss = seg.samples.empty() ? std::numeric_limits<double>::infinity() : seg.last().loss;
        ParamVector const w_end = seg.terminal_params ? *seg.terminal_params : w;
        ArchitectureSpec const a_end = seg.terminal_architecture ? *seg.terminal_architecture : a;
        out.segments.push_back(std::move(seg));
        out.final_loss = loss;
        out.final_level = w_end.level;
        out.final_architecture = a_end;
        out.final_params = w_end;
        out.final_error = model_error(p, evaluate(a_end, w_end, false).value);

        if (loss <= sched.solution_tol) {
            out.solved = true;
            break;
        }
        bool const stalled = reason == TerminalReason::stall || reason == TerminalReason::grad_stop;
        if (!stalled || w_end.level >= sched.max_levels) break;

        CriticalPointReport const cp = classify_critical_point(p, a_end, w_end, sched.critical);
        try {
            ExpansionResult r = expand(a_end, w_end, sched);
            r.event.t = offset + seg_end;
            r.event.stall_case = cp;
            out.segments.back().events.push_back({seg_end, EventKind::expand,
                                                  "level " + std::to_string(r.event.level_from) + " -> " +
                                                      std::to_string(r.event.level_to)});
            out.expansions.push_back(r.event);
            a = std::move(r.architecture);
            w = std::move(r.params);
        } catch (ExpansionRejected const& e) {
            throw EciExpansionRejected(e, std::move(out));
        }
        offset += seg_end;
    }
    return out;
}

} // namespace gradflow
