#pragma once

// In-situ pruning: drop (frequency, amplitude) pairs whose amplitude has
// vanished, while the flow is running and away from critical points.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gradflow/architecture.hpp"
#include "gradflow/parametric.hpp"
#include "gradflow/problem.hpp"

namespace gradflow {

struct PruneTolerances {
    double amplitude = 1e-10;  ///< tau_prune
    double grad_floor = 1e-8;  ///< both w and the pruned w_j must stay above this
};

struct PruneReport {
    bool pruned = false;
    std::string reason;
    std::vector<int> removed_pairs; ///< 1-based pair indices
    double model_drift = 0.0;       ///< |A_j(w_j) - A(w)| / max(1, |A(w)|)
    double drift_bound = 0.0;
    double grad_norm_before = 0.0;
    double grad_norm_after = 0.0;
};

struct PruneResult {
    ArchitectureSpec architecture;
    ParamVector params;
    PruneReport report;
};

[[nodiscard]] inline PruneResult prune_in_situ(Problem const& p, ArchitectureSpec const& a, ParamVector const& w,
                                               PruneTolerances const& tol = {}) {
    PruneResult out{a, w, {}};
    if (a.kind != ArchKind::sinusoid) {
        out.report.reason = "pruning only defined for sinusoid architectures";
        return out;
    }
    detail::require_params(a, w);

    std::vector<int> removed;
    for (int i = 1; i <= a.pairs; ++i)
        if (std::abs(w.values[2 * i]) < tol.amplitude) removed.push_back(i);
    if (removed.empty()) {
        out.report.reason = "no amplitude below threshold";
        return out;
    }

    ParametricEval const before = parametric_loss(p, a, w);
    out.report.grad_norm_before = before.gradient.norm();
    if (out.report.grad_norm_before < tol.grad_floor) {
        out.report.reason = "at critical point";
        return out;
    }

    ArchitectureSpec pruned = a;
    pruned.pairs = a.pairs - static_cast<int>(removed.size());
    Eigen::VectorXd kept(pruned.parameter_count());
    kept[0] = w.values[0];
    Eigen::Index pos = 1;
    double bound = 0.0;
    std::size_t r = 0;
    Eigen::VectorXd s(a.basis->size());
    for (int i = 1; i <= a.pairs; ++i) {
        if (r < removed.size() && removed[r] == i) {
            ++r;
            detail::sine_projection(w.values[2 * i - 1], static_cast<int>(a.basis->size()), s.data(), nullptr);
            bound += tol.amplitude * s.norm();
            continue;
        }
        kept[pos++] = w.values[2 * i - 1];
        kept[pos++] = w.values[2 * i];
    }
    ParamVector wj{std::move(kept), w.level};

    ParametricEval const after = parametric_loss(p, pruned, wj);
    out.report.grad_norm_after = after.gradient.norm();
    double const scale = std::max(1.0, before.model.value.norm());
    out.report.model_drift = (after.model.value - before.model.value).norm() / scale;
    out.report.drift_bound = bound / scale;
    if (out.report.grad_norm_after < tol.grad_floor) {
        out.report.reason = "would create critical point";
        return out;
    }
    if (out.report.model_drift > out.report.drift_bound + 1e-15) {
        out.report.reason = "model drift exceeds bound";
        return out;
    }
    out.report.pruned = true;
    out.report.removed_pairs = std::move(removed);
    out.report.reason = "pruned";
    out.architecture = std::move(pruned);
    out.params = std::move(wj);
    return out;
}

} // namespace gradflow
