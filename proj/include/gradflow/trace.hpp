#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gradflow/architecture.hpp"
#include "gradflow/error.hpp"
#include "gradflow/hilbert.hpp"

namespace gradflow {

struct FlowConfig {
    double t_end = 100.0;
    double rel_tol = 1e-9;
    double abs_tol = 1e-12;
    double grad_stop = 1e-10;
    int stall_window = 50;
    double stall_rel_change = 1e-10;
    /// Second stall signature: gradient below this while loss > solution_loss. 0 disables.
    double stall_grad = 1e-8;
    double solution_loss = 1e-12;
    double record_every = 0.1;
    /// > 1 spaces record instants geometrically once t * (growth - 1) exceeds record_every.
    double record_growth = 1.0;
    double initial_step = 1e-4;
    /// Step sizes below min_step * max(1, t) count as a collapsed (divergent) flow.
    double min_step = 1e-14;
    std::uint64_t max_steps = 100'000'000;
    std::uint64_t seed = 0;
    double anneal_c = 1.0;
    double noise_beta = 0.0;
    double sde_step = 1e-3;
    bool prune = false;
    double prune_amplitude = 1e-10;
    double prune_grad_floor = 1e-8;

    void validate() const {
        auto positive = [](double v, char const* name) {
            if (!(v > 0.0)) throw ConfigError(std::string("flow.") + name + " must be > 0");
        };
        positive(t_end, "t_end");
        positive(rel_tol, "rel_tol");
        positive(abs_tol, "abs_tol");
        positive(record_every, "record_every");
        positive(initial_step, "initial_step");
        positive(anneal_c, "anneal_c");
        positive(sde_step, "sde_step");
        if (!(grad_stop >= 0.0)) throw ConfigError("flow.grad_stop must be >= 0");
        if (stall_window < 1) throw ConfigError("flow.stall_window must be >= 1");
        if (!(stall_rel_change >= 0.0)) throw ConfigError("flow.stall_rel_change must be >= 0");
        if (!(stall_grad >= 0.0)) throw ConfigError("flow.stall_grad must be >= 0");
        if (!(noise_beta >= 0.0)) throw ConfigError("flow.noise_beta must be >= 0");
        if (!(record_growth >= 1.0)) throw ConfigError("flow.record_growth must be >= 1");
        if (!(min_step > 0.0)) throw ConfigError("flow.min_step must be > 0");
    }
};

enum class EventKind : std::uint8_t { stall, clamp, expand, prune, stop };
enum class TerminalReason : std::uint8_t { grad_stop, stall, t_end, divergence };

[[nodiscard]] inline std::string_view to_string(EventKind k) noexcept {
    switch (k) {
    case EventKind::stall: return "stall";
    case EventKind::clamp: return "clamp";
    case EventKind::expand: return "expand";
    case EventKind::prune: return "prune";
    case EventKind::stop: return "stop";
    }
    return "?";
}

[[nodiscard]] inline std::string_view to_string(TerminalReason r) noexcept {
    switch (r) {
    case TerminalReason::grad_stop: return "grad_stop";
    case TerminalReason::stall: return "stall";
    case TerminalReason::t_end: return "t_end";
    case TerminalReason::divergence: return "divergence";
    }
    return "?";
}

struct Sample {
    double t = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
    std::optional<double> mu;
    std::optional<Eigen::VectorXd> params;
    std::optional<double> model_error;
};

struct Event {
    double t = 0.0;
    EventKind kind = EventKind::stop;
    std::string detail;
};

struct FlowTrace {
    std::vector<Sample> samples;
    std::vector<Event> events;
    TerminalReason terminal_reason = TerminalReason::t_end;
    bool stochastic = false;
    std::optional<Field> terminal_field;
    std::optional<ParamVector> terminal_params;
    std::optional<ArchitectureSpec> terminal_architecture;

    [[nodiscard]] Sample const& last() const { return samples.back(); }
};

} // namespace gradflow
