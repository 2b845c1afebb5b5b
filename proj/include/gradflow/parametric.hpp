#pragma once

#include <Eigen/Core>

#include "gradflow/architecture.hpp"
#include "gradflow/problem.hpp"

namespace gradflow {

/// The parametric loss L(A(w)) and its Euclidean gradient N_w^dagger grad L.
struct ParametricEval {
    double loss = 0.0;
    Eigen::VectorXd gradient;
    ModelEval model;
    LossEval nominal;
};

inline void require_compatible(Problem const& p, ArchitectureSpec const& a) {
    if (!p.basis || !a.basis || !p.basis->same_as(*a.basis))
        throw ShapeError("architecture target basis does not match the problem's basis");
}

[[nodiscard]] inline ParametricEval parametric_loss(Problem const& p, ArchitectureSpec const& a, ParamVector const& w) {
    require_compatible(p, a);
    ModelEval model = evaluate(a, w, true);
    LossEval nominal = nominal_loss(p, Field(a.basis, model.value));
    // <dA/dw_k, grad L>_metric
    Eigen::VectorXd const weighted =
        p.gradient_metric == SobolevOrder::L2
            ? nominal.gradient.coeffs()
            : Eigen::VectorXd(metric_weights(*p.basis, p.gradient_metric).cwiseProduct(nominal.gradient.coeffs()));
    Eigen::VectorXd grad = model.jacobian.transpose() * weighted;
    double const loss = nominal.value;
    return {loss, std::move(grad), std::move(model), std::move(nominal)};
}

/// Model error |A(w) - phi|_{L2}, when phi is known.
[[nodiscard]] inline std::optional<double> model_error(Problem const& p, Eigen::VectorXd const& model) {
    if (!p.known_solution) return std::nullopt;
    return (model - p.known_solution->coeffs()).norm();
}

} // namespace gradflow
