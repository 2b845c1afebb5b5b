#pragma once

// Gradient-flow integrators: the nominal flow on G, the parametric flow on
// R^M (adaptive Dormand-Prince 5(4)), and the annealed stochastic flow
// (fixed-step Euler-Maruyama). All runs record a FlowTrace.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gradflow/architecture.hpp"
#include "gradflow/parametric.hpp"
#include "gradflow/problem.hpp"
#include "gradflow/pruning.hpp"
#include "gradflow/trace.hpp"

namespace gradflow {

namespace detail {

/// Dormand-Prince 5(4) tableau.
struct Dopri5 {
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                            a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                            e6 = 22.0 / 525, e7 = -1.0 / 40;
};

/// What the driver needs from a deterministic gradient system.
template <class S>
concept GradientSystem = requires(S& s, Eigen::VectorXd const& y, double t) {
    { s.rhs(y) } -> std::convertible_to<Eigen::VectorXd>;
    { s.observe(t, y) } -> std::convertible_to<Sample>;
};

struct StopCheck {
    bool stop = false;
    TerminalReason reason = TerminalReason::t_end;
    std::string detail;
};

inline StopCheck check_stop(FlowConfig const& cfg, std::vector<Sample> const& samples) {
    Sample const& s = samples.back();
    if (s.grad_norm < cfg.grad_stop) return {true, TerminalReason::grad_stop, "gradient norm below grad_stop"};
    if (cfg.stall_grad > 0.0 && s.grad_norm < cfg.stall_grad && s.loss > cfg.solution_loss)
        return {true, TerminalReason::stall, "gradient vanished above solution loss"};
    auto const window = static_cast<std::size_t>(cfg.stall_window);
    if (samples.size() > window) {
        double const old = samples[samples.size() - 1 - window].loss;
        if (std::abs(old - s.loss) <= cfg.stall_rel_change * std::abs(s.loss))
            return {true, TerminalReason::stall, "relative loss change below threshold over window"};
    }
    return {};
}

inline double next_record_time(FlowConfig const& cfg, double t) {
    return t + std::max(cfg.record_every, (cfg.record_growth - 1.0) * t);
}

/// Adaptive integration with recording at scheduled instants. `on_record`
/// may replace the state (pruning changes the dimension) and returns true
/// when it did so.
template <GradientSystem S, class OnRecord>
FlowTrace drive(S& sys, Eigen::VectorXd y, FlowConfig const& cfg, OnRecord&& on_record) {
    cfg.validate();
    using D = Dopri5;
    FlowTrace trace;
    double t = 0.0;
    Eigen::VectorXd last_finite = y;

    auto finish = [&](TerminalReason reason, std::string const& detail) {
        trace.terminal_reason = reason;
        sys.take_events(t, trace.events);
        trace.events.push_back({t, EventKind::stop, std::string(to_string(reason)) + ": " + detail});
        sys.finalize(trace, last_finite);
        return trace;
    };

    auto record = [&]() -> StopCheck {
        Sample s = sys.observe(t, y);
        if (!std::isfinite(s.loss)) return {true, TerminalReason::divergence, "non-finite loss"};
        trace.samples.push_back(std::move(s));
        sys.take_events(t, trace.events);
        return check_stop(cfg, trace.samples);
    };

    try {
        if (auto c = record(); c.stop) return finish(c.reason, c.detail);
        if (on_record(t, y, sys, trace)) last_finite = y;

        double h = cfg.initial_step;
        Eigen::VectorXd k1 = sys.rhs(y);
        std::uint64_t steps = 0;
        while (t < cfg.t_end) {
            double const target = std::min(next_record_time(cfg, t), cfg.t_end);
            while (t < target) {
                if (++steps > cfg.max_steps) return finish(TerminalReason::divergence, "step budget exhausted");
                bool const clipped = t + h >= target;
                double const step = clipped ? target - t : h;
                if (step < cfg.min_step * std::max(1.0, t) && !clipped)
                    return finish(TerminalReason::divergence, "step size collapsed");
                Eigen::VectorXd ynew;
                Eigen::VectorXd k7;
                double en = std::numeric_limits<double>::infinity();
                try {
                    Eigen::VectorXd const k2 = sys.rhs(y + step * (D::a21 * k1));
                    Eigen::VectorXd const k3 = sys.rhs(y + step * (D::a31 * k1 + D::a32 * k2));
                    Eigen::VectorXd const k4 = sys.rhs(y + step * (D::a41 * k1 + D::a42 * k2 + D::a43 * k3));
                    Eigen::VectorXd const k5 =
                        sys.rhs(y + step * (D::a51 * k1 + D::a52 * k2 + D::a53 * k3 + D::a54 * k4));
                    Eigen::VectorXd const k6 = sys.rhs(
                        y + step * (D::a61 * k1 + D::a62 * k2 + D::a63 * k3 + D::a64 * k4 + D::a65 * k5));
                    ynew = y + step * (D::b1 * k1 + D::b3 * k3 + D::b4 * k4 + D::b5 * k5 + D::b6 * k6);
                    k7 = sys.rhs(ynew);
                    Eigen::VectorXd const err =
                        step * (D::e1 * k1 + D::e3 * k3 + D::e4 * k4 + D::e5 * k5 + D::e6 * k6 + D::e7 * k7);
                    Eigen::ArrayXd const scale =
                        cfg.abs_tol + cfg.rel_tol * y.array().abs().max(ynew.array().abs());
                    en = std::sqrt((err.array() / scale).square().mean());
                } catch (DivergenceError const&) {
                    // a non-finite trial stage is treated as a rejected step
                }
                if (!std::isfinite(en)) {
                    h = 0.25 * step;
                    continue;
                }
                double const factor = en == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
                if (en <= 1.0) {
                    t = clipped ? target : t + step;
                    y = std::move(ynew);
                    k1 = std::move(k7);
                    last_finite = y;
                    // a clipped step says nothing about the controller's preferred size
                    if (!clipped || factor < 1.0) h = step * factor;
                } else {
                    h = step * std::max(factor, 0.2);
                }
            }
            if (auto c = record(); c.stop) return finish(c.reason, c.detail);
            if (on_record(t, y, sys, trace)) {
                last_finite = y;
                k1 = sys.rhs(y);
            }
        }
        return finish(TerminalReason::t_end, "reached t_end");
    } catch (DivergenceError const& e) {
        return finish(TerminalReason::divergence, e.what());
    }
}

struct NoRecordHook {
    template <class S> bool operator()(double, Eigen::VectorXd&, S&, FlowTrace&) const { return false; }
};

class NominalSystem {
  public:
    explicit NominalSystem(Problem const& p) : p_(p) {}

    Eigen::VectorXd rhs(Eigen::VectorXd const& y) {
        LossEval const e = nominal_loss(p_, Field(p_.basis, y));
        clamped_ = clamped_ || e.clamped;
        return -e.gradient.coeffs();
    }

    Sample observe(double t, Eigen::VectorXd const& y) {
        Field const g(p_.basis, y);
        LossEval const e = nominal_loss(p_, g);
        clamped_ = clamped_ || e.clamped;
        Sample s;
        s.t = t;
        s.loss = e.value;
        s.grad_norm = norm(e.gradient, p_.gradient_metric);
        if (p_.known_solution) s.model_error = (y - p_.known_solution->coeffs()).norm();
        return s;
    }

    void take_events(double t, std::vector<Event>& events) {
        if (clamped_ && !clamp_reported_) {
            events.push_back({t, EventKind::clamp, "field values clamped before sinh/cosh"});
            clamp_reported_ = true;
        }
    }

    void finalize(FlowTrace& trace, Eigen::VectorXd const& y) const { trace.terminal_field = Field(p_.basis, y); }

  private:
    Problem const& p_;
    bool clamped_ = false;
    bool clamp_reported_ = false;
};

class ParametricSystem {
  public:
    ParametricSystem(Problem const& p, ArchitectureSpec a, int level) : p_(p), a_(std::move(a)), level_(level) {
        require_compatible(p_, a_);
    }

    Eigen::VectorXd rhs(Eigen::VectorXd const& y) {
        ParametricEval e = parametric_loss(p_, a_, ParamVector{y, level_});
        clamped_ = clamped_ || e.nominal.clamped;
        return -e.gradient;
    }

    Sample observe(double t, Eigen::VectorXd const& y) {
        ParametricEval const e = parametric_loss(p_, a_, ParamVector{y, level_});
        clamped_ = clamped_ || e.nominal.clamped;
        Sample s;
        s.t = t;
        s.loss = e.loss;
        s.grad_norm = e.gradient.norm();
        s.mu = diagnose_gram(gram(e.model.jacobian, *a_.basis, p_.gradient_metric)).mu;
        s.params = y;
        s.model_error = model_error(p_, e.model.value);
        return s;
    }

    void take_events(double t, std::vector<Event>& events) {
        if (clamped_ && !clamp_reported_) {
            events.push_back({t, EventKind::clamp, "field values clamped before sinh/cosh"});
            clamp_reported_ = true;
        }
    }

    void finalize(FlowTrace& trace, Eigen::VectorXd const& y) const {
        trace.terminal_params = ParamVector{y, level_};
        trace.terminal_architecture = a_;
    }

    [[nodiscard]] ArchitectureSpec const& architecture() const noexcept { return a_; }
    void replace_architecture(ArchitectureSpec a) { a_ = std::move(a); }
    [[nodiscard]] Problem const& problem() const noexcept { return p_; }
    [[nodiscard]] int level() const noexcept { return level_; }

  private:
    Problem const& p_;
    ArchitectureSpec a_;
    int level_;
    bool clamped_ = false;
    bool clamp_reported_ = false;
};

/// Prunes vanished sinusoid pairs at record instants.
struct PruneHook {
    PruneTolerances tol;

    bool operator()(double t, Eigen::VectorXd& y, ParametricSystem& sys, FlowTrace& trace) const {
        if (sys.architecture().kind != ArchKind::sinusoid) return false;
        PruneResult r = prune_in_situ(sys.problem(), sys.architecture(), ParamVector{y, sys.level()}, tol);
        if (!r.report.pruned) return false;
        std::string detail = "removed pairs";
        for (int i : r.report.removed_pairs) detail += " " + std::to_string(i);
        detail += "; drift " + std::to_string(r.report.model_drift);
        trace.events.push_back({t, EventKind::prune, std::move(detail)});
        y = std::move(r.params.values);
        sys.replace_architecture(std::move(r.architecture));
        // keep the recorded snapshot consistent with the new parameter layout
        trace.samples.back().params = y;
        return true;
    }
};

} // namespace detail

/// Nominal gradient flow dg/dt = -grad L[g] on G.
[[nodiscard]] inline FlowTrace integrate_nominal(Problem const& p, Field const& g0, FlowConfig const& cfg) {
    detail::require_on_basis(p, g0);
    detail::NominalSystem sys(p);
    return detail::drive(sys, g0.coeffs(), cfg, detail::NoRecordHook{});
}

/// Parametric gradient flow dw/dt = -N_w^dagger grad L[A(w)].
[[nodiscard]] inline FlowTrace integrate_parametric(Problem const& p, ArchitectureSpec const& a, ParamVector const& w0,
                                                    FlowConfig const& cfg) {
    detail::require_params(a, w0);
    detail::ParametricSystem sys(p, a, w0.level);
    if (cfg.prune)
        return detail::drive(sys, w0.values, cfg,
                             detail::PruneHook{PruneTolerances{cfg.prune_amplitude, cfg.prune_grad_floor}});
    return detail::drive(sys, w0.values, cfg, detail::NoRecordHook{});
}

/// Annealing schedule alpha(t) = sqrt(c / log(2 + t)).
[[nodiscard]] inline double annealing_schedule(double c, double t) { return std::sqrt(c / std::log(2.0 + t)); }

/// Annealed flow dw = -grad L dt + alpha(t) beta dB, Euler-Maruyama with fixed step.
[[nodiscard]] inline FlowTrace integrate_annealed(Problem const& p, ArchitectureSpec const& a, ParamVector const& w0,
                                                  FlowConfig const& cfg) {
    cfg.validate();
    detail::require_params(a, w0);
    detail::ParametricSystem sys(p, a, w0.level);
    FlowTrace trace;
    trace.stochastic = true;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    double const h = cfg.sde_step;
    double const sqrt_h = std::sqrt(h);
    auto const total = static_cast<std::uint64_t>(std::llround(cfg.t_end / h));
    Eigen::VectorXd w = w0.values;
    Eigen::VectorXd last_finite = w;
    double next_record = 0.0;
    double t = 0.0;
    Eigen::VectorXd xi(w.size());

    auto finish = [&](TerminalReason reason, std::string const& detail) {
        trace.terminal_reason = reason;
        sys.take_events(t, trace.events);
        trace.events.push_back({t, EventKind::stop, std::string(to_string(reason)) + ": " + detail});
        sys.finalize(trace, last_finite);
        return trace;
    };

    try {
        for (std::uint64_t step = 0;; ++step) {
            t = static_cast<double>(step) * h;
            if (t >= next_record - 0.5 * h || step == total) {
                Sample s = sys.observe(t, w);
                if (!std::isfinite(s.loss)) return finish(TerminalReason::divergence, "non-finite loss");
                trace.samples.push_back(std::move(s));
                sys.take_events(t, trace.events);
                next_record = detail::next_record_time(cfg, next_record);
            }
            if (step == total) break;
            Eigen::VectorXd const drift = sys.rhs(w);
            double const sigma = annealing_schedule(cfg.anneal_c, t) * cfg.noise_beta * sqrt_h;
            for (Eigen::Index i = 0; i < xi.size(); ++i) xi[i] = normal(rng);
            w += h * drift + sigma * xi;
            if (!w.allFinite()) {
                t = static_cast<double>(step + 1) * h;
                return finish(TerminalReason::divergence, "non-finite state");
            }
            last_finite = w;
        }
    } catch (DivergenceError const& e) {
        return finish(TerminalReason::divergence, e.what());
    }
    return finish(TerminalReason::t_end, "reached t_end");
}

struct LyapunovResult {
    bool skipped = false; ///< stochastic traces are exempt
    std::vector<std::size_t> violations;

    [[nodiscard]] bool passed() const noexcept { return skipped || violations.empty(); }
};

/// Indices i where loss[i] exceeds loss[i-1] by more than `tolerance`.
[[nodiscard]] inline LyapunovResult lyapunov_check(FlowTrace const& trace, double tolerance) {
    LyapunovResult r;
    if (trace.stochastic) {
        r.skipped = true;
        return r;
    }
    for (std::size_t i = 1; i < trace.samples.size(); ++i)
        if (trace.samples[i].loss - trace.samples[i - 1].loss > tolerance) r.violations.push_back(i);
    return r;
}

} // namespace gradflow
