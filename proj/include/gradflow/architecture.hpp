#pragma once

// Parametrized model families A: R^M -> G with analytic Jacobians, the Gram
// kernel theta(w) = (<dA/dw_i, dA/dw_j>), its operator counterpart Theta(w)
// on G, and mu(w), the smallest nonzero eigenvalue of theta.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "gradflow/error.hpp"
#include "gradflow/hilbert.hpp"

namespace gradflow {

enum class ArchKind : std::uint8_t {
    affine,   ///< offset + sum_k w_k b_k
    sinusoid, ///< w_0 + sum_i w_{2i} sin(w_{2i-1} x), M = 2a+1
    spiral,   ///< (w sin w, w cos w) in the plane, M = 1
    power     ///< w^p b for a fixed field b, M = 1 (degenerate-kernel fixture)
};

[[nodiscard]] inline std::string_view to_string(ArchKind k) noexcept {
    switch (k) {
    case ArchKind::affine: return "affine";
    case ArchKind::sinusoid: return "sinusoid";
    case ArchKind::spiral: return "spiral";
    case ArchKind::power: return "power";
    }
    return "?";
}

/// Parameter vector w; `level` is the expansion index it belongs to.
struct ParamVector {
    Eigen::VectorXd values;
    int level = 1;

    [[nodiscard]] Eigen::Index size() const noexcept { return values.size(); }
};

struct ArchitectureSpec {
    ArchKind kind = ArchKind::affine;
    BasisPtr basis;
    int pairs = 0;                ///< sinusoid: number of (frequency, amplitude) pairs
    std::vector<Field> fields;    ///< affine basis fields; power: the single direction b
    std::optional<Field> offset;  ///< constant model shift (affine offset)
    int exponent = 2;             ///< power kind only

    [[nodiscard]] Eigen::Index parameter_count() const noexcept {
        switch (kind) {
        case ArchKind::affine: return static_cast<Eigen::Index>(fields.size());
        case ArchKind::sinusoid: return 2 * pairs + 1;
        case ArchKind::spiral:
        case ArchKind::power: return 1;
        }
        return 0;
    }
};

[[nodiscard]] inline ArchitectureSpec make_sinusoid(BasisPtr basis, int pairs) {
    if (basis->kind() != BasisKind::sine_spectral || basis->dimension() != 1)
        throw ConfigError("sinusoid architecture needs a 1-D sine-spectral basis");
    if (pairs < 0) throw ConfigError("sinusoid pair count must be >= 0");
    ArchitectureSpec a;
    a.kind = ArchKind::sinusoid;
    a.basis = std::move(basis);
    a.pairs = pairs;
    return a;
}

[[nodiscard]] inline ArchitectureSpec make_affine(std::vector<Field> fields, std::optional<Field> offset = std::nullopt) {
    if (fields.empty()) throw ConfigError("affine architecture needs at least one basis field");
    for (auto const& f : fields) fields.front().require_same(f);
    if (offset) fields.front().require_same(*offset);
    ArchitectureSpec a;
    a.kind = ArchKind::affine;
    a.basis = fields.front().basis_ptr();
    a.fields = std::move(fields);
    a.offset = std::move(offset);
    return a;
}

[[nodiscard]] inline ArchitectureSpec make_spiral() {
    ArchitectureSpec a;
    a.kind = ArchKind::spiral;
    a.basis = make_euclidean(2);
    return a;
}

[[nodiscard]] inline ArchitectureSpec make_power(Field direction, int exponent) {
    if (exponent < 1) throw ConfigError("power architecture exponent must be >= 1");
    ArchitectureSpec a;
    a.kind = ArchKind::power;
    a.basis = direction.basis_ptr();
    a.fields.push_back(std::move(direction));
    a.exponent = exponent;
    return a;
}

namespace detail {

inline double sinc(double z) {
    if (std::abs(z) < 1e-4) return 1.0 - z * z / 6.0;
    return std::sin(z) / z;
}

/// d/dz sinc(z); Taylor series near the origin to avoid cancellation.
inline double sinc_prime(double z) {
    if (std::abs(z) < 0.1) {
        double const z2 = z * z;
        return z * (-1.0 / 3.0 + z2 * (1.0 / 30.0 + z2 * (-1.0 / 840.0 + z2 * (1.0 / 45360.0 - z2 / 3991680.0))));
    }
    return (std::cos(z) - std::sin(z) / z) / z;
}

/// cos(k pi / 2) for integer k.
inline double cos_half_pi(int k) {
    switch (k % 4) {
    case 0: return 1.0;
    case 2: return -1.0;
    default: return 0.0;
    }
}

/// Exact orthonormal sine coefficients of sin(f x) and of d/df sin(f x) = x cos(f x)
/// on [-pi, pi]: <sin(f x), sin(k (x + pi)/2)/sqrt(pi)>.
inline void sine_projection(double f, int modes, double* sin_out, double* dsin_out) {
    double const sqrt_pi = std::sqrt(std::numbers::pi);
    constexpr double pi = std::numbers::pi;
    for (int k = 1; k <= modes; ++k) {
        double const c = cos_half_pi(k);
        if (c == 0.0) {
            sin_out[k - 1] = 0.0;
            if (dsin_out) dsin_out[k - 1] = 0.0;
            continue;
        }
        double const kappa = 0.5 * k;
        double const zm = (f - kappa) * pi;
        double const zp = (f + kappa) * pi;
        sin_out[k - 1] = sqrt_pi * c * (sinc(zm) - sinc(zp));
        if (dsin_out) dsin_out[k - 1] = sqrt_pi * c * pi * (sinc_prime(zm) - sinc_prime(zp));
    }
}

/// Orthonormal sine coefficients of the constant function 1.
inline Eigen::VectorXd constant_projection(int modes) {
    Eigen::VectorXd c(modes);
    double const inv_sqrt_pi = 1.0 / std::sqrt(std::numbers::pi);
    for (int k = 1; k <= modes; ++k) c[k - 1] = (k % 2 == 1) ? 4.0 / k * inv_sqrt_pi : 0.0;
    return c;
}

inline void require_params(ArchitectureSpec const& a, ParamVector const& w) {
    if (w.size() != a.parameter_count())
        throw ShapeError(std::string(to_string(a.kind)) + " architecture expects " +
                         std::to_string(a.parameter_count()) + " parameters, got " + std::to_string(w.size()));
    if (!w.values.allFinite()) throw DivergenceError("non-finite parameters", w.values);
}

} // namespace detail

/// Model value and (optionally) the Jacobian, columns = partial derivatives.
struct ModelEval {
    Eigen::VectorXd value;
    Eigen::MatrixXd jacobian;
};

[[nodiscard]] inline ModelEval evaluate(ArchitectureSpec const& a, ParamVector const& w, bool with_jacobian) {
    detail::require_params(a, w);
    Eigen::Index const n = a.basis->size();
    Eigen::Index const m = a.parameter_count();
    ModelEval out;
    out.value = a.offset ? a.offset->coeffs() : Eigen::VectorXd::Zero(n);
    if (with_jacobian) out.jacobian.resize(n, m);
    Eigen::VectorXd const& p = w.values;
    switch (a.kind) {
    case ArchKind::affine:
        for (Eigen::Index k = 0; k < m; ++k) {
            out.value += p[k] * a.fields[static_cast<std::size_t>(k)].coeffs();
            if (with_jacobian) out.jacobian.col(k) = a.fields[static_cast<std::size_t>(k)].coeffs();
        }
        break;
    case ArchKind::sinusoid: {
        int const modes = static_cast<int>(n);
        Eigen::VectorXd const one = detail::constant_projection(modes);
        out.value += p[0] * one;
        if (with_jacobian) out.jacobian.col(0) = one;
        Eigen::VectorXd s(n);
        Eigen::VectorXd ds(n);
        for (int i = 1; i <= a.pairs; ++i) {
            double const freq = p[2 * i - 1];
            double const amp = p[2 * i];
            detail::sine_projection(freq, modes, s.data(), with_jacobian ? ds.data() : nullptr);
            out.value += amp * s;
            if (with_jacobian) {
                out.jacobian.col(2 * i - 1) = amp * ds;
                out.jacobian.col(2 * i) = s;
            }
        }
        break;
    }
    case ArchKind::spiral: {
        double const t = p[0];
        out.value[0] += t * std::sin(t);
        out.value[1] += t * std::cos(t);
        if (with_jacobian) {
            out.jacobian(0, 0) = std::sin(t) + t * std::cos(t);
            out.jacobian(1, 0) = std::cos(t) - t * std::sin(t);
        }
        break;
    }
    case ArchKind::power: {
        double const t = p[0];
        Eigen::VectorXd const& b = a.fields.front().coeffs();
        out.value += std::pow(t, a.exponent) * b;
        if (with_jacobian) out.jacobian.col(0) = a.exponent * std::pow(t, a.exponent - 1) * b;
        break;
    }
    }
    return out;
}

[[nodiscard]] inline Field eval(ArchitectureSpec const& a, ParamVector const& w) {
    return {a.basis, evaluate(a, w, false).value};
}

[[nodiscard]] inline std::vector<Field> jacobian(ArchitectureSpec const& a, ParamVector const& w) {
    Eigen::MatrixXd const j = evaluate(a, w, true).jacobian;
    std::vector<Field> rows;
    rows.reserve(static_cast<std::size_t>(j.cols()));
    for (Eigen::Index k = 0; k < j.cols(); ++k) rows.emplace_back(a.basis, j.col(k));
    return rows;
}

struct KernelDiagnostics {
    Eigen::MatrixXd theta;
    Eigen::VectorXd eigenvalues; ///< ascending
    double mu = 0.0;
    int numerical_rank = 0;
    double rank_tolerance = 0.0;
    bool degenerate = false; ///< theta is exactly zero
};

/// Spectral summary of a symmetric PSD Gram matrix.
[[nodiscard]] inline KernelDiagnostics diagnose_gram(Eigen::MatrixXd theta) {
    KernelDiagnostics d;
    Eigen::Index const m = theta.rows();
    d.theta = std::move(theta);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(d.theta, Eigen::EigenvaluesOnly);
    d.eigenvalues = es.eigenvalues();
    double const lmax = m > 0 ? d.eigenvalues[m - 1] : 0.0;
    d.rank_tolerance = static_cast<double>(m) * std::numeric_limits<double>::epsilon() * std::max(lmax, 0.0);
    d.degenerate = d.theta.cwiseAbs().maxCoeff() == 0.0;
    if (d.degenerate) return d;
    for (Eigen::Index i = 0; i < m; ++i) {
        if (d.eigenvalues[i] > d.rank_tolerance) {
            if (d.numerical_rank == 0) d.mu = d.eigenvalues[i];
            ++d.numerical_rank;
        }
    }
    return d;
}

/// Gram matrix of Jacobian columns under `metric`.
[[nodiscard]] inline Eigen::MatrixXd gram(Eigen::MatrixXd const& jac, Basis const& basis, SobolevOrder metric) {
    Eigen::MatrixXd g;
    if (metric == SobolevOrder::L2 && basis.kind() != BasisKind::nodal_grid)
        g = jac.transpose() * jac;
    else
        g = jac.transpose() * metric_weights(basis, metric).asDiagonal() * jac;
    return 0.5 * (g + g.transpose());
}

[[nodiscard]] inline KernelDiagnostics theta(ArchitectureSpec const& a, ParamVector const& w, SobolevOrder metric) {
    Eigen::MatrixXd const j = evaluate(a, w, true).jacobian;
    return diagnose_gram(gram(j, *a.basis, metric));
}

/// Theta(w) g = sum_k <dA/dw_k, g> dA/dw_k.
[[nodiscard]] inline Field big_theta_apply(ArchitectureSpec const& a, ParamVector const& w, Field const& g,
                                           SobolevOrder metric) {
    if (!g.basis().same_as(*a.basis)) throw ShapeError("field is not on the architecture's target basis");
    Eigen::MatrixXd const j = evaluate(a, w, true).jacobian;
    Eigen::VectorXd const wg = metric_weights(*a.basis, metric).cwiseProduct(g.coeffs());
    return g.with_coeffs(j * (j.transpose() * wg));
}

struct SpectralConsistencyReport {
    Eigen::VectorXd theta_nonzero; ///< descending
    Eigen::VectorXd big_theta_nonzero;
    int theta_rank = 0;
    int big_theta_rank = 0;
    double max_relative_mismatch = 0.0;
};

inline constexpr Eigen::Index max_dense_operator_size = 4096;

/// Compares the nonzero spectrum of theta with that of the dense operator
/// Theta assembled on the whole field space.
[[nodiscard]] inline SpectralConsistencyReport spectral_consistency(ArchitectureSpec const& a, ParamVector const& w,
                                                                    SobolevOrder metric) {
    Eigen::Index const n = a.basis->size();
    if (n > max_dense_operator_size)
        throw UnsupportedError("dense Theta assembly unsupported at " + std::to_string(n) + " coefficients");
    Eigen::MatrixXd const j = evaluate(a, w, true).jacobian;
    KernelDiagnostics const small = diagnose_gram(gram(j, *a.basis, metric));

    // Both spectra are computed in extended precision: in double the small
    // eigenvalues of either side carry absolute errors of order eps * lmax.
    using MatrixXl = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    using VectorXl = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
    // Theta = J J^T W is similar to W^{1/2} J J^T W^{1/2}
    VectorXl const sw = metric_weights(*a.basis, metric).cast<long double>().cwiseSqrt();
    MatrixXl const b = sw.asDiagonal() * j.cast<long double>();
    MatrixXl const gram_l = b.transpose() * b;
    MatrixXl const big = b * b.transpose();
    Eigen::SelfAdjointEigenSolver<MatrixXl> es_small(gram_l, Eigen::EigenvaluesOnly);
    Eigen::SelfAdjointEigenSolver<MatrixXl> es(big, Eigen::EigenvaluesOnly);
    VectorXl const ev_small = es_small.eigenvalues();
    VectorXl const ev = es.eigenvalues();
    // numerical rank is judged at working (double) precision
    double const lmax = std::max(static_cast<double>(ev[n - 1]), 0.0);
    double const tol = static_cast<double>(std::max<Eigen::Index>(n, j.cols())) *
                       std::numeric_limits<double>::epsilon() * lmax;

    SpectralConsistencyReport r;
    r.theta_rank = small.numerical_rank;
    for (Eigen::Index i = 0; i < n; ++i)
        if (static_cast<double>(ev[i]) > tol) ++r.big_theta_rank;
    r.theta_nonzero = ev_small.tail(r.theta_rank).reverse().cast<double>();
    r.big_theta_nonzero = ev.tail(r.big_theta_rank).reverse().cast<double>();
    Eigen::Index const common = std::min(r.theta_nonzero.size(), r.big_theta_nonzero.size());
    for (Eigen::Index i = 0; i < common; ++i) {
        long double const ts = ev_small[ev_small.size() - 1 - i];
        long double const tb = ev[n - 1 - i];
        double const rel = static_cast<double>(std::abs(ts - tb) / ts);
        r.max_relative_mismatch = std::max(r.max_relative_mismatch, rel);
    }
    if (r.theta_rank != r.big_theta_rank) r.max_relative_mismatch = std::numeric_limits<double>::infinity();
    return r;
}

} // namespace gradflow
