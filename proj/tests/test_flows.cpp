#include <gtest/gtest.h>

#include <random>

#include <Eigen/Dense>

#include "gradflow/flows.hpp"
#include "oracles.hpp"

using namespace gradflow;

namespace {

Field sines(BasisPtr const& b, std::vector<std::pair<double, double>> const& terms) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(b->size());
    Eigen::VectorXd s(b->size());
    for (auto [f, a] : terms) {
        detail::sine_projection(f, static_cast<int>(b->size()), s.data(), nullptr);
        c += a * s;
    }
    return {b, c};
}

ParamVector pv(std::initializer_list<double> v) {
    Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double d : v) x[i++] = d;
    return {x, 1};
}

double l2_loss_at(Problem const& p, ArchitectureSpec const& a, Eigen::VectorXd const& w) {
    return parametric_loss(p, a, ParamVector{w, 1}).loss;
}

Problem double_well() {
    // V = w^4 - 2 w^2 + 0.3 w + 1.4: shallow well near +0.96, deep well near -1.04
    return make_potential(make_euclidean(1), {1.4, 0.3, -2.0, 0.0, 1.0}, std::nullopt, "double-well");
}

ArchitectureSpec identity_1d() { return make_affine({Field(make_euclidean(1), Eigen::VectorXd::Ones(1))}); }

} // namespace

TEST(NominalFlow, QuadraticClosedForm) {
    auto b = make_space(Domain{}, 32);
    std::mt19937_64 rng(31);
    Field const phi(b, oracle::random_smooth(rng, 32));
    Field const g0(b, oracle::random_smooth(rng, 32));
    FlowConfig cfg;
    cfg.t_end = 5.0;
    FlowTrace const tr = integrate_nominal(make_quadratic(phi), g0, cfg);
    ASSERT_EQ(tr.terminal_reason, TerminalReason::t_end);
    EXPECT_DOUBLE_EQ(tr.samples.back().t, 5.0);
    double const ratio = (tr.terminal_field->coeffs() - phi.coeffs()).norm() / (g0 - phi).coeffs().norm();
    EXPECT_LE(std::abs(ratio - std::exp(-5.0)) / std::exp(-5.0), 1e-6);
    // whole path against the closed form
    for (auto const& s : tr.samples)
        EXPECT_NEAR(s.loss, std::exp(-2 * s.t) * tr.samples.front().loss, 1e-6 * tr.samples.front().loss * std::exp(-2 * s.t));
}

TEST(NominalFlow, StationaryStartStopsImmediately) {
    auto b = make_space(Domain{}, 16);
    Field const phi = sines(b, {{1.0, 0.3}});
    FlowTrace const tr = integrate_nominal(make_quadratic(phi), phi, FlowConfig{});
    EXPECT_EQ(tr.terminal_reason, TerminalReason::grad_stop);
    ASSERT_EQ(tr.samples.size(), 1u);
    EXPECT_EQ(tr.samples.front().t, 0.0);
}

TEST(NominalFlow, NpbeLossNonIncreasing) {
    auto b = make_space(Domain{}, 16);
    Field const phi = sines(b, {{1.0, 0.5}, {2.0, 0.2}});
    FlowConfig cfg;
    // slowest decay rate is about 1 in W22, so t = 5 leaves a factor e^{-10}
    cfg.t_end = 5.0;
    cfg.record_every = 0.01;
    FlowTrace const tr = integrate_nominal(make_npbe(phi), Field::zero(b), cfg);
    EXPECT_NE(tr.terminal_reason, TerminalReason::divergence);
    EXPECT_TRUE(lyapunov_check(tr, 1e-9).passed());
    for (std::size_t i = 1; i < tr.samples.size(); ++i) EXPECT_LE(tr.samples[i].loss, tr.samples[i - 1].loss);
    EXPECT_LT(tr.samples.back().loss, 1e-3 * tr.samples.front().loss);
}

TEST(NominalFlow, RecordsStrictlyIncreasingFiniteSamples) {
    auto b = make_space(Domain{}, 16);
    FlowConfig cfg;
    cfg.t_end = 3.0;
    cfg.record_every = 0.07;
    FlowTrace const tr = integrate_nominal(make_npbe(sines(b, {{1.0, 0.5}})), Field::zero(b), cfg);
    for (std::size_t i = 1; i < tr.samples.size(); ++i) {
        EXPECT_GT(tr.samples[i].t, tr.samples[i - 1].t);
        EXPECT_TRUE(std::isfinite(tr.samples[i].loss));
    }
    EXPECT_EQ(tr.events.back().kind, EventKind::stop);
}

TEST(NominalFlow, AbsurdInitialFieldDiverges) {
    auto b = make_space(Domain{}, 16);
    Field const g0(b, Eigen::VectorXd::Constant(16, 1e6));
    FlowConfig cfg;
    cfg.t_end = 1.0;
    FlowTrace const tr = integrate_nominal(make_npbe(sines(b, {{1.0, 0.5}})), g0, cfg);
    EXPECT_EQ(tr.terminal_reason, TerminalReason::divergence);
    ASSERT_TRUE(tr.terminal_field.has_value());
    EXPECT_TRUE(tr.terminal_field->coeffs().allFinite());
}

TEST(NominalFlow, BadConfigRejected) {
    auto b = make_space(Domain{}, 8);
    FlowConfig cfg;
    cfg.rel_tol = -1.0;
    EXPECT_THROW((void)integrate_nominal(make_quadratic(Field::zero(b)), Field::zero(b), cfg), ConfigError);
}

TEST(ParametricFlow, AffineQuadraticRateBoundedByMu) {
    auto b = make_space(Domain{}, 32);
    std::mt19937_64 rng(32);
    std::vector<Field> fields;
    for (int k = 0; k < 3; ++k) fields.emplace_back(b, oracle::random_smooth(rng, 32));
    ArchitectureSpec const a = make_affine(fields);
    Field const phi = eval(a, pv({0.5, -1.0, 2.0}));
    Problem const p = make_quadratic(phi);
    FlowConfig cfg;
    cfg.t_end = 40.0;
    FlowTrace const tr = integrate_parametric(p, a, pv({0.0, 0.0, 0.0}), cfg);
    double const mu_min = theta(a, pv({0.0, 0.0, 0.0}), SobolevOrder::L2).mu;
    std::vector<double> ts, ls;
    for (auto const& s : tr.samples)
        if (s.loss > 1e-20) {
            ts.push_back(s.t);
            ls.push_back(std::log(s.loss));
        }
    ASSERT_GE(ts.size(), 10u);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(ts.size()), 2);
    Eigen::VectorXd y(static_cast<Eigen::Index>(ts.size()));
    for (std::size_t i = 0; i < ts.size(); ++i) {
        x(static_cast<Eigen::Index>(i), 0) = 1.0;
        x(static_cast<Eigen::Index>(i), 1) = ts[i];
        y[static_cast<Eigen::Index>(i)] = ls[i];
    }
    double const slope = x.colPivHouseholderQr().solve(y)[1];
    EXPECT_LE(slope, -2.0 * mu_min * (1 - 0.05));
    for (auto const& s : tr.samples) EXPECT_NEAR(*s.mu, mu_min, 1e-10 * mu_min);
}

TEST(ParametricFlow, CriticalStartStopsImmediately) {
    auto b = make_space(Domain{}, 32);
    Problem const p = make_quadratic(sines(b, {{1.0, 0.5}}));
    // zero amplitude and a frequency whose sine is orthogonal to phi: every partial vanishes
    ArchitectureSpec const a = make_sinusoid(b, 1);
    FlowTrace const tr = integrate_parametric(p, a, pv({0.0, 2.0, 0.0}), FlowConfig{});
    EXPECT_LE(tr.samples.front().grad_norm, 1e-12);
    EXPECT_EQ(tr.samples.size(), 1u);
    EXPECT_NE(tr.terminal_reason, TerminalReason::t_end);
}

TEST(ParametricFlow, SinusoidFitsSingleMode) {
    auto b = make_space(Domain{}, 64);
    Problem const p = make_quadratic(sines(b, {{1.0, 0.5}}));
    ArchitectureSpec const a = make_sinusoid(b, 1);
    FlowConfig cfg;
    cfg.t_end = 200.0;
    FlowTrace const tr = integrate_parametric(p, a, pv({0.0, 1.0, 0.1}), cfg);
    EXPECT_LE(tr.samples.back().loss, 1e-10);
    Eigen::VectorXd const w = tr.terminal_params->values;

    // brute-force grid over (frequency, amplitude) with the constant at 0
    double best = std::numeric_limits<double>::infinity();
    Eigen::VectorXd arg(3);
    for (double f = -3.0; f <= 3.0; f += 0.05)
        for (double am = -1.0; am <= 1.0; am += 0.05) {
            Eigen::VectorXd q(3);
            q << 0.0, f, am;
            double const l = l2_loss_at(p, a, q);
            if (l < best) {
                best = l;
                arg = q;
            }
        }
    EXPECT_NEAR(std::abs(w[1]), std::abs(arg[1]), 0.05);
    EXPECT_NEAR(std::abs(w[2]), std::abs(arg[2]), 0.05);
    EXPECT_NEAR(w[0], 0.0, 1e-5);
    EXPECT_NEAR(std::abs(w[1]), 1.0, 1e-5);
    EXPECT_NEAR(std::abs(w[2]), 0.5, 1e-5);
    EXPECT_GT(w[1] * w[2], 0.0); // sin(-x) = -sin(x): signs must agree
}

TEST(ParametricFlow, LossNonIncreasingAndEnergyIdentity) {
    auto b = make_space(Domain{}, 64);
    Problem const p = make_quadratic(sines(b, {{1.0, 0.5}, {2.0, -0.3}}));
    ArchitectureSpec const a = make_sinusoid(b, 2);
    FlowConfig cfg;
    cfg.t_end = 20.0;
    cfg.record_every = 0.01;
    FlowTrace const tr = integrate_parametric(p, a, pv({0.1, 0.9, 0.2, 2.2, -0.1}), cfg);
    EXPECT_TRUE(lyapunov_check(tr, 1e-9).passed());
    int checked = 0;
    for (std::size_t i = 1; i + 1 < tr.samples.size(); ++i) {
        auto const& s = tr.samples[i];
        double const g2 = s.grad_norm * s.grad_norm;
        if (g2 <= 1e-8) continue;
        double const slope = (tr.samples[i + 1].loss - tr.samples[i - 1].loss) / (tr.samples[i + 1].t - tr.samples[i - 1].t);
        EXPECT_LE(std::abs(slope + g2) / g2, 0.05) << "t = " << s.t;
        ++checked;
    }
    EXPECT_GT(checked, 50);
}

TEST(ParametricFlow, ModelFlowIdentity) {
    auto b = make_space(Domain{}, 64);
    Problem const p = make_quadratic(sines(b, {{1.0, 0.5}, {2.5, 0.2}}));
    ArchitectureSpec const a = make_sinusoid(b, 2);
    FlowConfig cfg;
    cfg.t_end = 3.0;
    cfg.record_every = 1e-3;
    FlowTrace const tr = integrate_parametric(p, a, pv({0.1, 0.9, 0.2, 2.2, -0.1}), cfg);
    ASSERT_GT(tr.samples.size(), 100u);
    std::size_t const stride = tr.samples.size() / 11;
    for (int j = 1; j <= 10; ++j) {
        std::size_t const i = static_cast<std::size_t>(j) * stride;
        auto const& lo = tr.samples[i - 1];
        auto const& hi = tr.samples[i + 1];
        Eigen::VectorXd const dn =
            (eval(a, ParamVector{*hi.params, 1}).coeffs() - eval(a, ParamVector{*lo.params, 1}).coeffs()) / (hi.t - lo.t);
        ParamVector const w{*tr.samples[i].params, 1};
        Field const grad = nominal_loss(p, eval(a, w)).gradient;
        Field const expect = -1.0 * big_theta_apply(a, w, grad, p.gradient_metric);
        EXPECT_LE((dn - expect.coeffs()).norm() / expect.coeffs().norm(), 1e-3) << "t = " << tr.samples[i].t;
    }
}

TEST(ParametricFlow, DeterministicAcrossRuns) {
    auto b = make_space(Domain{}, 32);
    Problem const p = make_npbe(sines(b, {{1.0, 0.5}}));
    ArchitectureSpec const a = make_sinusoid(b, 1);
    FlowConfig cfg;
    cfg.t_end = 2.0;
    FlowTrace const t1 = integrate_parametric(p, a, pv({0.0, 1.1, 0.3}), cfg);
    FlowTrace const t2 = integrate_parametric(p, a, pv({0.0, 1.1, 0.3}), cfg);
    ASSERT_EQ(t1.samples.size(), t2.samples.size());
    for (std::size_t i = 0; i < t1.samples.size(); ++i) {
        EXPECT_EQ(t1.samples[i].loss, t2.samples[i].loss);
        EXPECT_EQ(*t1.samples[i].params, *t2.samples[i].params);
    }
}

TEST(ParametricFlow, StallDetectedAtSpuriousCriticalPoint) {
    auto b = make_space(Domain{}, 32);
    // amplitude starts at zero on a frequency orthogonal to the target: A stays constant
    Problem const p = make_quadratic(sines(b, {{1.0, 0.5}}));
    ArchitectureSpec const a = make_sinusoid(b, 1);
    FlowConfig cfg;
    cfg.grad_stop = 0.0;
    FlowTrace const tr = integrate_parametric(p, a, pv({0.0, 2.0, 0.0}), cfg);
    EXPECT_EQ(tr.terminal_reason, TerminalReason::stall);
    EXPECT_GT(tr.samples.back().loss, 1e-3);
}

TEST(ParametricFlow, PruneHookRemovesDeadPair) {
    auto b = make_space(Domain{}, 64);
    Problem const p = make_quadratic(sines(b, {{1.0, 0.5}}));
    ArchitectureSpec const a = make_sinusoid(b, 2);
    FlowConfig cfg;
    cfg.t_end = 5.0;
    cfg.prune = true;
    FlowTrace const tr = integrate_parametric(p, a, pv({0.2, 1.0, 0.8, 2.0, 0.0}), cfg);
    ASSERT_TRUE(tr.terminal_architecture.has_value());
    EXPECT_EQ(tr.terminal_architecture->pairs, 1);
    EXPECT_EQ(tr.terminal_params->size(), 3);
    bool saw = false;
    for (auto const& e : tr.events) saw = saw || e.kind == EventKind::prune;
    EXPECT_TRUE(saw);
    EXPECT_EQ(tr.samples.front().params->size(), 3);
    EXPECT_TRUE(lyapunov_check(tr, 1e-9).passed());
}

TEST(AnnealedFlow, ScheduleFormula) {
    EXPECT_DOUBLE_EQ(annealing_schedule(2.0, 0.0), std::sqrt(2.0 / std::log(2.0)));
    EXPECT_DOUBLE_EQ(annealing_schedule(1.0, 10.0), std::sqrt(1.0 / std::log(12.0)));
}

TEST(AnnealedFlow, ZeroNoiseMatchesDeterministicFlow) {
    auto b = make_space(Domain{}, 32);
    Problem const p = make_quadratic(sines(b, {{1.0, 0.5}}));
    ArchitectureSpec const a = make_sinusoid(b, 1);
    FlowConfig cfg;
    cfg.t_end = 10.0;
    cfg.noise_beta = 0.0;
    FlowTrace const s = integrate_annealed(p, a, pv({0.0, 1.2, 0.2}), cfg);
    FlowTrace const d = integrate_parametric(p, a, pv({0.0, 1.2, 0.2}), cfg);
    EXPECT_TRUE(s.stochastic);
    EXPECT_NEAR(s.samples.back().loss, d.samples.back().loss, 1e-4);
    EXPECT_TRUE(lyapunov_check(s, 0.0).skipped);
}

TEST(AnnealedFlow, SameSeedIsBitIdentical) {
    Problem const p = double_well();
    FlowConfig cfg;
    cfg.t_end = 5.0;
    cfg.noise_beta = 1.0;
    cfg.anneal_c = 2.0;
    cfg.seed = 99;
    FlowTrace const t1 = integrate_annealed(p, identity_1d(), pv({1.0}), cfg);
    FlowTrace const t2 = integrate_annealed(p, identity_1d(), pv({1.0}), cfg);
    ASSERT_EQ(t1.samples.size(), t2.samples.size());
    for (std::size_t i = 0; i < t1.samples.size(); ++i) {
        EXPECT_EQ(t1.samples[i].t, t2.samples[i].t);
        EXPECT_EQ(t1.samples[i].loss, t2.samples[i].loss);
        EXPECT_EQ(*t1.samples[i].params, *t2.samples[i].params);
    }
    cfg.seed = 100;
    FlowTrace const t3 = integrate_annealed(p, identity_1d(), pv({1.0}), cfg);
    EXPECT_NE(t3.samples.back().loss, t1.samples.back().loss);
}

TEST(AnnealedFlow, DoubleWellEscapesShallowBasin) {
    Problem const p = double_well();
    // basin map: the barrier is the interior local maximum of V on a fine grid
    auto v = [&](double x) { return loss_value(p, Field(p.basis, Eigen::VectorXd::Constant(1, x))); };
    double barrier = 0.0;
    for (double x = -0.5; x <= 0.5; x += 1e-5)
        if (v(x) > v(x - 1e-5) && v(x) > v(x + 1e-5)) barrier = x;
    ASSERT_GT(barrier, 0.0);
    ASSERT_LT(barrier, 0.2);
    ASSERT_LT(v(-1.04), v(0.96));

    FlowConfig cfg;
    cfg.t_end = 200.0;
    cfg.noise_beta = 1.0;
    cfg.anneal_c = 2.0;
    cfg.record_every = 10.0;
    int deep = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        cfg.seed = seed;
        FlowTrace const tr = integrate_annealed(p, identity_1d(), pv({1.0}), cfg);
        if (tr.terminal_params->values[0] < barrier) ++deep;
    }
    EXPECT_GE(deep, 40);
}

TEST(Lyapunov, IncreasingTraceFlagsEveryStep) {
    FlowTrace tr;
    for (int i = 0; i < 6; ++i) tr.samples.push_back(Sample{0.1 * i, static_cast<double>(i), 1.0, {}, {}, {}});
    LyapunovResult const r = lyapunov_check(tr, 1e-9);
    EXPECT_FALSE(r.passed());
    EXPECT_EQ(r.violations, (std::vector<std::size_t>{1, 2, 3, 4, 5}));
}

TEST(Lyapunov, ToleranceIsAbsolute) {
    FlowTrace tr;
    tr.samples.push_back(Sample{0.0, 1.0, 1.0, {}, {}, {}});
    tr.samples.push_back(Sample{0.1, 1.0 + 5e-10, 1.0, {}, {}, {}});
    EXPECT_TRUE(lyapunov_check(tr, 1e-9).passed());
    EXPECT_FALSE(lyapunov_check(tr, 1e-10).passed());
}
