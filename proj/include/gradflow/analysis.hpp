#pragma once

// Post-hoc diagnostics on flow traces: Lojasiewicz exponent fits, rate
// classification, critical-point taxonomy and the mu distance fit.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gradflow/architecture.hpp"
#include "gradflow/parametric.hpp"
#include "gradflow/problem.hpp"
#include "gradflow/trace.hpp"

namespace gradflow {

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0; ///< NaN when y has no variance
    std::size_t n = 0;
};

/// Ordinary least squares y = slope * x + intercept.
[[nodiscard]] inline LinearFit fit_line(std::vector<double> const& x, std::vector<double> const& y) {
    LinearFit f;
    f.n = x.size();
    if (f.n < 2) {
        f.r2 = std::numeric_limits<double>::quiet_NaN();
        return f;
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < f.n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(f.n);
    my /= static_cast<double>(f.n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < f.n; ++i) {
        double const dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (sxx == 0.0) {
        f.r2 = std::numeric_limits<double>::quiet_NaN();
        f.intercept = my;
        return f;
    }
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double sse = 0.0;
    for (std::size_t i = 0; i < f.n; ++i) {
        double const e = y[i] - (f.slope * x[i] + f.intercept);
        sse += e * e;
    }
    // relative to the data scale, a residual at roundoff level is a perfect fit
    f.r2 = syy > 1e-24 * std::max(1.0, my * my) * static_cast<double>(f.n) ? 1.0 - sse / syy
                                                                          : std::numeric_limits<double>::quiet_NaN();
    return f;
}

// ---------------------------------------------------------------------------
// Lojasiewicz inequality fit

struct LIEstimate {
    bool conclusive = false;
    double alpha_hat = 0.0;
    double C_hat = 0.0;
    double t_start = 0.0;
    double t_end = 0.0;
    double fit_quality = 0.0;
    std::size_t n_points = 0;
    std::string note;
};

struct LIWindow {
    double gap_min = 1e-12;
    double gap_max = 1e-2;
    std::size_t min_points = 20;
    double min_quality = 0.9;
};

/// Fits log|grad| = alpha log(L - l_star) - log C over samples whose gap lies
/// in the window.
[[nodiscard]] inline LIEstimate estimate_li(FlowTrace const& trace, double l_star, LIWindow const& win = {}) {
    LIEstimate est;
    std::vector<double> x, y;
    for (auto const& s : trace.samples) {
        double const gap = s.loss - l_star;
        if (!(gap >= win.gap_min && gap <= win.gap_max) || !(s.grad_norm > 0.0)) continue;
        if (x.empty()) est.t_start = s.t;
        est.t_end = s.t;
        x.push_back(std::log(gap));
        y.push_back(std::log(s.grad_norm));
    }
    est.n_points = x.size();
    if (est.n_points < win.min_points) {
        est.note = "inconclusive: " + std::to_string(est.n_points) + " usable points";
        return est;
    }
    LinearFit const f = fit_line(x, y);
    est.alpha_hat = f.slope;
    est.C_hat = std::exp(-f.intercept);
    est.fit_quality = std::isnan(f.r2) ? 0.0 : f.r2;
    if (est.fit_quality < win.min_quality) {
        est.note = "inconclusive: fit quality " + std::to_string(est.fit_quality);
        return est;
    }
    if (!(est.alpha_hat > 0.0 && est.alpha_hat <= 1.0 + 1e-9)) {
        est.note = "inconclusive: exponent out of (0, 1]";
        return est;
    }
    est.conclusive = true;
    return est;
}

struct ReferenceLoss {
    double l_star = 0.0;
    bool self_referential = false;
};

/// L[phi] when phi is known, else the terminal loss less the integrator's
/// absolute tolerance.
[[nodiscard]] inline ReferenceLoss reference_loss(Problem const& p, FlowTrace const& trace, FlowConfig const& cfg) {
    if (p.known_solution) return {loss_value(p, *p.known_solution), false};
    return {trace.last().loss - cfg.abs_tol, true};
}

/// LI fit with the reference loss chosen from the problem. A self-referential
/// reference also drops the last decade of the gap.
[[nodiscard]] inline LIEstimate estimate_li(FlowTrace const& trace, Problem const& p, FlowConfig const& cfg) {
    ReferenceLoss const ref = reference_loss(p, trace, cfg);
    LIWindow win;
    if (ref.self_referential) {
        double smallest = std::numeric_limits<double>::infinity();
        for (auto const& s : trace.samples)
            if (s.loss - ref.l_star > 0.0) smallest = std::min(smallest, s.loss - ref.l_star);
        if (std::isfinite(smallest)) win.gap_min = std::max(win.gap_min, 10.0 * smallest);
    }
    LIEstimate est = estimate_li(trace, ref.l_star, win);
    if (ref.self_referential) est.note += est.note.empty() ? "self-referential l_star" : "; self-referential l_star";
    return est;
}

// ---------------------------------------------------------------------------
// Rate classification

enum class RateKind : std::uint8_t { exponential, polynomial, inconclusive };

[[nodiscard]] inline std::string_view to_string(RateKind k) noexcept {
    switch (k) {
    case RateKind::exponential: return "exponential";
    case RateKind::polynomial: return "polynomial";
    case RateKind::inconclusive: return "inconclusive";
    }
    return "?";
}

struct RateClass {
    RateKind kind = RateKind::inconclusive;
    double rate = 0.0;            ///< exponential: distance decays like e^{-rate t}
    double exponent = 0.0;        ///< polynomial: distance decays like t^{-exponent}
    double predicted_alpha = 0.0; ///< LI exponent implied by the rate law
    double exp_quality = 0.0;
    double poly_quality = 0.0;
    bool used_model_error = false;
    std::size_t n_points = 0;
    std::string note;
};

/// alpha implied by a polynomial distance exponent p.
[[nodiscard]] inline double alpha_from_distance_exponent(double p) { return (1.0 + p) / (1.0 + 2.0 * p); }

/// alpha implied by a polynomial loss-gap exponent q (gap ~ t^{-q}).
[[nodiscard]] inline double alpha_from_loss_exponent(double q) { return (1.0 + q) / (2.0 * q); }

struct RateOptions {
    double tail_fraction = 0.1; ///< tail = samples with t >= tail_fraction * t_last
    std::size_t min_points = 50;
    double margin = 0.02;
    double floor = 1e-13; ///< distances below floor * (tail start distance) are roundoff
};

/// Classifies the convergence law of a trace towards `target` (a loss value);
/// uses the model error instead whenever every sample carries one.
[[nodiscard]] inline RateClass classify_rate(FlowTrace const& trace, double target, RateOptions const& opt = {}) {
    RateClass rc;
    if (trace.samples.empty()) {
        rc.note = "empty trace";
        return rc;
    }
    rc.used_model_error = std::all_of(trace.samples.begin(), trace.samples.end(),
                                      [](Sample const& s) { return s.model_error.has_value(); });
    auto dist = [&](Sample const& s) { return rc.used_model_error ? *s.model_error : s.loss - target; };

    double const t_last = trace.last().t;
    double const t_from = opt.tail_fraction * t_last;
    double scale = 0.0;
    for (auto const& s : trace.samples)
        if (s.t >= t_from) {
            scale = std::abs(dist(s));
            break;
        }
    std::vector<double> t, lt, ld;
    for (auto const& s : trace.samples) {
        double const d = dist(s);
        if (s.t < t_from || !(s.t > 0.0) || !(d > opt.floor * scale) || !(d > 0.0)) continue;
        t.push_back(s.t);
        lt.push_back(std::log(s.t));
        ld.push_back(std::log(d));
    }
    rc.n_points = t.size();
    if (rc.n_points < opt.min_points) {
        rc.note = "inconclusive: " + std::to_string(rc.n_points) + " tail points";
        return rc;
    }
    LinearFit const fe = fit_line(t, ld);
    LinearFit const fp = fit_line(lt, ld);
    if (std::isnan(fe.r2) || std::isnan(fp.r2)) {
        rc.note = "inconclusive: distance does not vary over the tail";
        return rc;
    }
    rc.exp_quality = fe.r2;
    rc.poly_quality = fp.r2;
    // both laws describe decay; a growing distance is not a convergence rate
    if (fe.slope >= 0.0 || fp.slope >= 0.0) {
        rc.note = "inconclusive: distance not decaying";
        return rc;
    }
    if (fe.r2 >= fp.r2 + opt.margin) {
        rc.kind = RateKind::exponential;
        rc.rate = rc.used_model_error ? -fe.slope : -0.5 * fe.slope;
        rc.predicted_alpha = 0.5;
    } else if (fp.r2 >= fe.r2 + opt.margin) {
        rc.kind = RateKind::polynomial;
        if (rc.used_model_error) {
            rc.exponent = -fp.slope;
            rc.predicted_alpha = alpha_from_distance_exponent(rc.exponent);
        } else {
            double const q = -fp.slope;
            rc.exponent = 0.5 * (q - 1.0);
            rc.predicted_alpha = alpha_from_loss_exponent(q);
        }
    } else {
        rc.note = "inconclusive: fit qualities within margin";
    }
    return rc;
}

// ---------------------------------------------------------------------------
// Critical points

enum class CriticalCase : std::uint8_t { at_solution, degenerate_theta, orthogonal_kernel, mixed, none };

[[nodiscard]] inline std::string_view to_string(CriticalCase c) noexcept {
    switch (c) {
    case CriticalCase::at_solution: return "at_solution";
    case CriticalCase::degenerate_theta: return "degenerate_theta";
    case CriticalCase::orthogonal_kernel: return "orthogonal_kernel";
    case CriticalCase::mixed: return "mixed";
    case CriticalCase::none: return "none";
    }
    return "?";
}

struct CriticalTolerances {
    double critical = 1e-6; ///< parametric gradient norm below which w is treated as critical
    double tol_i = 1e-8;
    double tol_ii = 1e-10;
    double tol_iii = 1e-4;
};

struct CriticalPointReport {
    CriticalCase kind = CriticalCase::none;
    double param_grad_norm = 0.0;
    double field_grad_norm = 0.0;  ///< |grad L[A(w)]| in the problem metric
    double theta_max_entry = 0.0;
    double theta_norm = 0.0;       ///< largest eigenvalue of theta
    std::optional<double> kernel_residual;
    bool solution = false;
    bool degenerate = false;
    bool orthogonal = false;
};

[[nodiscard]] inline CriticalPointReport classify_critical_point(Problem const& p, ArchitectureSpec const& a,
                                                                 ParamVector const& w,
                                                                 CriticalTolerances const& tol = {}) {
    CriticalPointReport r;
    ParametricEval const e = parametric_loss(p, a, w);
    r.param_grad_norm = e.gradient.norm();
    r.field_grad_norm = norm(e.nominal.gradient, p.gradient_metric);
    KernelDiagnostics const k = diagnose_gram(gram(e.model.jacobian, *a.basis, p.gradient_metric));
    r.theta_max_entry = k.theta.size() ? k.theta.cwiseAbs().maxCoeff() : 0.0;
    r.theta_norm = k.eigenvalues.size() ? std::max(k.eigenvalues[k.eigenvalues.size() - 1], 0.0) : 0.0;

    if (r.theta_norm > tol.tol_ii && r.field_grad_norm > tol.tol_i) {
        // Theta grad L = J (J^T W grad L) = J grad_w
        Field const tg(a.basis, e.model.jacobian * e.gradient);
        r.kernel_residual = norm(tg, p.gradient_metric) / (r.theta_norm * r.field_grad_norm);
    }
    if (r.param_grad_norm >= tol.critical) return r;

    r.solution = r.field_grad_norm < tol.tol_i;
    r.degenerate = r.theta_max_entry < tol.tol_ii;
    r.orthogonal = !r.solution && !r.degenerate && r.kernel_residual && *r.kernel_residual < tol.tol_iii;
    int const fired = int(r.solution) + int(r.degenerate) + int(r.orthogonal);
    if (fired > 1)
        r.kind = CriticalCase::mixed;
    else if (r.solution)
        r.kind = CriticalCase::at_solution;
    else if (r.degenerate)
        r.kind = CriticalCase::degenerate_theta;
    else if (r.orthogonal)
        r.kind = CriticalCase::orthogonal_kernel;
    return r;
}

// ---------------------------------------------------------------------------
// Distance LI for mu

struct MuDistanceFit {
    double r_hat = 0.0;
    double predicted_alpha_star = 0.0;
    double log_constant = 0.0; ///< intercept of log mu against log |w - w*|
    double fit_quality = 0.0;
    double verified_fraction = 1.0;
    bool bounded_away = false; ///< mu stayed above the floor; r_hat = 0
    std::size_t n_points = 0;
    std::string note;
};

struct MuFitOptions {
    double tail_fraction = 0.1;
    double mu_floor = 1e-6;
    double envelope_slack = 0.5; ///< a point verifies when mu >= slack * exp(b) d^r
    double required_fraction = 0.95;
};

[[nodiscard]] inline MuDistanceFit fit_mu_distance(FlowTrace const& trace, ParamVector const& w_star, double alpha,
                                                   MuFitOptions const& opt = {}) {
    MuDistanceFit fit;
    fit.predicted_alpha_star = alpha;
    if (trace.samples.empty()) {
        fit.bounded_away = true;
        fit.note = "empty trace";
        return fit;
    }
    double const t_from = opt.tail_fraction * trace.last().t;
    std::vector<double> ld, lm;
    double min_mu = std::numeric_limits<double>::infinity();
    for (auto const& s : trace.samples) {
        if (s.t < t_from || !s.mu || !s.params || s.params->size() != w_star.size()) continue;
        min_mu = std::min(min_mu, *s.mu);
        double const d = (*s.params - w_star.values).norm();
        if (d > 0.0 && *s.mu > 0.0) {
            ld.push_back(std::log(d));
            lm.push_back(std::log(*s.mu));
        }
    }
    if (min_mu > opt.mu_floor) {
        fit.bounded_away = true;
        fit.note = "mu bounded away from zero";
        return fit;
    }
    fit.n_points = ld.size();
    LinearFit const f = fit_line(ld, lm);
    if (fit.n_points < 2 || std::isnan(f.r2)) {
        fit.note = "inconclusive: too few distinct points";
        return fit;
    }
    fit.r_hat = std::max(0.0, f.slope);
    fit.log_constant = f.intercept;
    fit.fit_quality = f.r2;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < ld.size(); ++i)
        if (lm[i] >= std::log(opt.envelope_slack) + f.intercept + fit.r_hat * ld[i]) ++ok;
    fit.verified_fraction = static_cast<double>(ok) / static_cast<double>(ld.size());
    if (fit.verified_fraction < opt.required_fraction) fit.note = "envelope verification below required fraction";
    fit.predicted_alpha_star = (alpha + fit.r_hat) / (1.0 + fit.r_hat);
    return fit;
}

} // namespace gradflow
