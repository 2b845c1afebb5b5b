#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gradflow/error.hpp"
#include "gradflow/hilbert.hpp"

namespace gradflow {

enum class ProblemKind : std::uint8_t {
    npbe,      ///< F[g] = -Delta g + sinh(g) + h, loss = 1/2 |F|^2_{L2}
    quadratic, ///< loss = 1/2 |g - phi|^2 in the gradient metric
    potential  ///< synthetic: V(c_1) + 1/2 sum_{k>1} c_k^2, V a polynomial
};

[[nodiscard]] inline std::string_view to_string(ProblemKind k) noexcept {
    switch (k) {
    case ProblemKind::npbe: return "npbe";
    case ProblemKind::quadratic: return "quadratic";
    case ProblemKind::potential: return "potential";
    }
    return "?";
}

/// A well-behaved problem F: G -> H with its nominal loss.
struct Problem {
    std::string name;
    ProblemKind kind = ProblemKind::quadratic;
    BasisPtr basis;
    SobolevOrder gradient_metric = SobolevOrder::L2;
    std::optional<Field> known_solution;
    std::optional<Field> data_field;
    /// Polynomial coefficients a_0, a_1, ... of V (potential kind only).
    std::vector<double> potential;
    double clamp = 50.0;
};

struct ResidualEval {
    Field residual;
    bool clamped = false;
};

struct LossEval {
    double value = 0.0;
    Field gradient;
    double residual_norm = 0.0;
    bool clamped = false;
};

namespace detail {

inline void require_on_basis(Problem const& p, Field const& g) {
    if (!p.basis || !g.basis().same_as(*p.basis)) throw ShapeError("field is not on the problem's basis");
}

/// Clamped nodal values of g on the de-aliased grid.
inline Eigen::VectorXd clamped_nodal(Problem const& p, Field const& g, bool& clamped) {
    Eigen::VectorXd v = p.basis->to_padded_nodal(g.coeffs());
    double const c = p.clamp;
    if (v.cwiseAbs().maxCoeff() > c) {
        clamped = true;
        v = v.cwiseMax(-c).cwiseMin(c);
    }
    return v;
}

inline double poly(std::vector<double> const& a, double x) {
    double r = 0.0;
    for (auto it = a.rbegin(); it != a.rend(); ++it) r = r * x + *it;
    return r;
}

inline double poly_derivative(std::vector<double> const& a, double x) {
    double r = 0.0;
    for (std::size_t i = a.size(); i-- > 1;) r = r * x + static_cast<double>(i) * a[i];
    return r;
}

} // namespace detail

/// Quadratic-distance problem around phi.
[[nodiscard]] inline Problem make_quadratic(Field phi, SobolevOrder metric = SobolevOrder::L2,
                                            std::string name = "quadratic") {
    Problem p;
    p.name = std::move(name);
    p.kind = ProblemKind::quadratic;
    p.basis = phi.basis_ptr();
    p.gradient_metric = metric;
    if (metric != SobolevOrder::L2 && p.basis->kind() != BasisKind::sine_spectral)
        throw ConfigError("Sobolev gradient metric needs a sine-spectral basis");
    p.known_solution = std::move(phi);
    return p;
}

/// Pseudo-spectral sinh(g) with clamping, projected back onto the basis.
[[nodiscard]] inline Field pseudo_spectral_sinh(Field const& g, double clamp, bool* clamped = nullptr) {
    Eigen::VectorXd v = g.basis().to_padded_nodal(g.coeffs());
    if (v.cwiseAbs().maxCoeff() > clamp) {
        if (clamped) *clamped = true;
        v = v.cwiseMax(-clamp).cwiseMin(clamp);
    }
    return g.with_coeffs(g.basis().from_padded_nodal(v.array().sinh().matrix()));
}

/// nPBE with data h manufactured from phi as h = Delta phi - sinh(phi).
[[nodiscard]] inline Problem make_npbe(Field phi, SobolevOrder metric = SobolevOrder::W22, double clamp = 50.0,
                                       std::string name = "npbe") {
    if (phi.basis().kind() != BasisKind::sine_spectral) throw ConfigError("nPBE needs a sine-spectral basis");
    if (!(clamp > 0.0)) throw ConfigError("clamp threshold must be positive");
    Problem p;
    p.name = std::move(name);
    p.kind = ProblemKind::npbe;
    p.basis = phi.basis_ptr();
    p.gradient_metric = metric;
    p.clamp = clamp;
    p.data_field = laplacian(phi) - pseudo_spectral_sinh(phi, clamp);
    p.known_solution = std::move(phi);
    return p;
}

/// nPBE for an explicit data field h (solution unknown).
[[nodiscard]] inline Problem make_npbe_with_data(Field h, SobolevOrder metric = SobolevOrder::W22,
                                                 double clamp = 50.0, std::string name = "npbe") {
    if (h.basis().kind() != BasisKind::sine_spectral) throw ConfigError("nPBE needs a sine-spectral basis");
    Problem p;
    p.name = std::move(name);
    p.kind = ProblemKind::npbe;
    p.basis = h.basis_ptr();
    p.gradient_metric = metric;
    p.clamp = clamp;
    p.data_field = std::move(h);
    return p;
}

/// Synthetic problem: polynomial potential along the first mode, quadratic elsewhere.
[[nodiscard]] inline Problem make_potential(BasisPtr basis, std::vector<double> coefficients,
                                            std::optional<Field> known_solution = std::nullopt,
                                            std::string name = "potential") {
    if (coefficients.empty()) throw ConfigError("potential needs at least one coefficient");
    Problem p;
    p.name = std::move(name);
    p.kind = ProblemKind::potential;
    p.basis = std::move(basis);
    p.potential = std::move(coefficients);
    p.known_solution = std::move(known_solution);
    return p;
}

[[nodiscard]] inline ResidualEval residual(Problem const& p, Field const& g) {
    detail::require_on_basis(p, g);
    switch (p.kind) {
    case ProblemKind::quadratic: return {g - *p.known_solution, false};
    case ProblemKind::npbe: {
        if (!p.data_field) throw ConfigError("nPBE problem '" + p.name + "' has no data field h");
        bool clamped = false;
        Field const s = pseudo_spectral_sinh(g, p.clamp, &clamped);
        Eigen::VectorXd f = -g.coeffs().cwiseProduct(p.basis->eigenvalues()) + s.coeffs() + p.data_field->coeffs();
        if (!f.allFinite()) throw DivergenceError("non-finite nPBE residual", g.coeffs());
        return {g.with_coeffs(std::move(f)), clamped};
    }
    case ProblemKind::potential: throw UnsupportedError("potential problems have no residual map");
    }
    throw UnsupportedError("unknown problem kind");
}

/// Nominal loss and its gradient in the problem's metric.
[[nodiscard]] inline LossEval nominal_loss(Problem const& p, Field const& g) {
    detail::require_on_basis(p, g);
    switch (p.kind) {
    case ProblemKind::quadratic: {
        Field const d = g - *p.known_solution;
        double const n2 = inner_product(d, d, p.gradient_metric);
        Field grad(d.basis_ptr(), d.coeffs(), p.gradient_metric);
        return {0.5 * n2, std::move(grad), std::sqrt(n2), false};
    }
    case ProblemKind::npbe: {
        if (!p.data_field) throw ConfigError("nPBE problem '" + p.name + "' has no data field h");
        bool clamped = false;
        Basis const& b = *p.basis;
        Eigen::VectorXd const gn = detail::clamped_nodal(p, g, clamped);
        Eigen::VectorXd f =
            -g.coeffs().cwiseProduct(b.eigenvalues()) + b.from_padded_nodal(gn.array().sinh().matrix()) +
            p.data_field->coeffs();
        // L2 representative: (-Delta + cosh g) F, with cosh applied pointwise
        Eigen::VectorXd const fn = b.to_padded_nodal(f);
        Eigen::VectorXd rep =
            -f.cwiseProduct(b.eigenvalues()) + b.from_padded_nodal((gn.array().cosh() * fn.array()).matrix());
        double const value = 0.5 * f.squaredNorm();
        if (!std::isfinite(value) || !rep.allFinite()) throw DivergenceError("non-finite nPBE loss", g.coeffs());
        Field grad = metric_sharp(Field(p.basis, std::move(rep)), p.gradient_metric);
        return {value, std::move(grad), std::sqrt(2.0 * value), clamped};
    }
    case ProblemKind::potential: {
        Eigen::VectorXd const& c = g.coeffs();
        double const x = c[0];
        double const value = detail::poly(p.potential, x) + 0.5 * c.tail(c.size() - 1).squaredNorm();
        Eigen::VectorXd rep = c;
        rep[0] = detail::poly_derivative(p.potential, x);
        if (!std::isfinite(value) || !rep.allFinite()) throw DivergenceError("non-finite potential loss", c);
        Field grad = metric_sharp(Field(p.basis, std::move(rep)), p.gradient_metric);
        return {value, std::move(grad), std::sqrt(2.0 * std::max(value, 0.0)), false};
    }
    }
    throw UnsupportedError("unknown problem kind");
}

[[nodiscard]] inline double loss_value(Problem const& p, Field const& g) { return nominal_loss(p, g).value; }

struct CoercivityReport {
    std::vector<double> exit_radii; ///< largest radius per ray with loss < epsilon
    bool bounded = true;
    bool inconclusive = false;
};

/// Marches random rays out of phi (or 0) and locates where the loss leaves
/// the sublevel set {L < epsilon}.
[[nodiscard]] inline CoercivityReport coercivity_probe(Problem const& p, double epsilon, int n_rays, double radius_max,
                                                       std::uint64_t seed = 0) {
    if (!(epsilon >= 0.0)) throw ConfigError("coercivity_probe: epsilon must be >= 0");
    if (n_rays < 1 || !(radius_max > 0.0)) throw ConfigError("coercivity_probe: need n_rays >= 1 and radius_max > 0");
    Field const center = p.known_solution ? *p.known_solution : Field::zero(p.basis);
    CoercivityReport report;
    if (!(loss_value(p, center) < epsilon)) {
        report.exit_radii.assign(static_cast<std::size_t>(n_rays), 0.0);
        return report;
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    for (int r = 0; r < n_rays; ++r) {
        Eigen::VectorXd dir(p.basis->size());
        for (Eigen::Index i = 0; i < dir.size(); ++i) dir[i] = normal(rng);
        Field d = center.with_coeffs(dir);
        d = (1.0 / norm(d, p.gradient_metric)) * d;
        auto inside = [&](double radius) {
            try {
                return loss_value(p, center + radius * d) < epsilon;
            } catch (DivergenceError const&) {
                return false;
            }
        };
        double lo = 0.0;
        double hi = std::min(1e-3, radius_max);
        while (inside(hi)) {
            lo = hi;
            if (hi >= radius_max) break;
            hi = std::min(2.0 * hi, radius_max);
        }
        if (lo >= radius_max) {
            report.bounded = false;
            report.exit_radii.push_back(radius_max);
            continue;
        }
        for (int it = 0; it < 200 && hi - lo > 1e-14 * std::max(1.0, hi); ++it) {
            double const mid = 0.5 * (lo + hi);
            (inside(mid) ? lo : hi) = mid;
        }
        report.exit_radii.push_back(lo);
    }
    return report;
}

} // namespace gradflow
