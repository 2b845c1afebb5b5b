#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sys/wait.h>
#include <sstream>
#include <string>

#include "gradflow/config.hpp"
#include "gradflow/io.hpp"

namespace fs = std::filesystem;
using namespace gradflow;

namespace {

std::string const exe = GRADFLOW_EXE;
fs::path const configs = GRADFLOW_CONFIGS;

fs::path scratch(std::string const& name) {
    fs::path const p = fs::temp_directory_path() / ("gradflow_cli_" + name);
    fs::remove_all(p);
    return p;
}

struct Result {
    int code = -1;
    std::string err;
};

/// Runs the binary; stderr is captured, stdout discarded.
Result run(std::string const& args, std::string const& env = "") {
    fs::path const err = fs::temp_directory_path() / "gradflow_cli_stderr.txt";
    std::string const cmd = env + (env.empty() ? "" : " ") + "'" + exe + "' " + args + " >/dev/null 2>'" + err.string() + "'";
    int const status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream f(err);
    std::stringstream ss;
    ss << f.rdbuf();
    r.err = ss.str();
    return r;
}

std::string cfg(std::string const& name) { return "--config '" + (configs / name).string() + "'"; }

std::string slurp(fs::path const& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(fs::path const& p) {
    std::vector<std::vector<std::string>> rows;
    std::ifstream f(p);
    std::string line;
    while (std::getline(f, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream is(line);
        while (std::getline(is, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

TraceFile read_trace(fs::path const& p) {
    std::ifstream f(p);
    return read_trace_jsonl(f);
}

/// Every file in the directory is listed in the manifest and vice versa.
void expect_manifest_complete(fs::path const& dir) {
    ordered_json const m = ordered_json::parse(slurp(dir / "manifest.json"));
    std::set<std::string> listed;
    for (auto const& f : m["files"]) listed.insert(f.get<std::string>());
    std::set<std::string> present;
    for (auto const& e : fs::directory_iterator(dir)) present.insert(e.path().filename().string());
    EXPECT_EQ(listed, present) << dir;
    EXPECT_TRUE(m.contains("config_hash"));
    EXPECT_EQ(m["code_version"], code_version);
    EXPECT_TRUE(m.contains("start"));
    EXPECT_TRUE(m.contains("end"));
}

} // namespace

TEST(CliRun, QuadraticDemo) {
    fs::path const out = scratch("quad");
    Result const r = run("run " + cfg("quadratic_demo.ini") + " --out '" + out.string() + "'");
    ASSERT_EQ(r.code, 0) << r.err;
    TraceFile const t = read_trace(out / "trace.jsonl");
    EXPECT_GE(t.trace.samples.size(), 50u);
    EXPECT_EQ(t.header["seed"], 1);
    auto const rows = read_csv(out / "analysis.csv");
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0][0], "run_id");
    EXPECT_EQ(rows[1][0], "quadratic_demo");
    expect_manifest_complete(out);
}

TEST(CliRun, NegativeToleranceIsConfigError) {
    Result const r = run("run " + cfg("negative_tolerance.ini") + " --out '" + scratch("neg").string() + "'");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("rel_tol"), std::string::npos) << r.err;
}

TEST(CliRun, UnknownKeyIsLocated) {
    fs::path const dir = scratch("unknown");
    fs::create_directories(dir);
    std::ofstream(dir / "bad.ini") << "[space]\nresolution = 16\n\n[problem]\nkind = quadratic\nphi = 1:0.5\nphii = 2:1\n";
    Result const r = run("run --config '" + (dir / "bad.ini").string() + "' --out '" + (dir / "out").string() + "'");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("bad.ini:7"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("phii"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "out" / "trace.jsonl"));
}

TEST(CliRun, MissingConfigFile) {
    EXPECT_EQ(run("run --config /nonexistent/x.ini").code, 1);
}

TEST(CliRun, NpbeAbsurdInitialFieldDiverges) {
    fs::path const out = scratch("absurd");
    Result const r = run("run " + cfg("npbe_absurd.ini") + " --out '" + out.string() + "'");
    ASSERT_EQ(r.code, 2) << r.err;
    TraceFile const t = read_trace(out / "trace.jsonl");
    EXPECT_EQ(t.trace.terminal_reason, TerminalReason::divergence);
    bool stop = false, clamp = false;
    for (auto const& e : t.trace.events) {
        stop = stop || (e.kind == EventKind::stop && e.detail.find("divergence") != std::string::npos);
        clamp = clamp || e.kind == EventKind::clamp;
    }
    EXPECT_TRUE(stop);
    EXPECT_TRUE(clamp);
    expect_manifest_complete(out);
}

TEST(CliRun, SeedFlagOverridesConfig) {
    fs::path const out = scratch("seed");
    ASSERT_EQ(run("run " + cfg("quadratic_demo.ini") + " --seed 77 --out '" + out.string() + "'").code, 0);
    EXPECT_EQ(read_trace(out / "trace.jsonl").header["seed"], 77);
}

TEST(CliRun, EnvironmentSelectsOutputDirectory) {
    fs::path const out = scratch("env");
    Result const r = run("run " + cfg("quadratic_demo.ini"), "GRADFLOW_OUT='" + out.string() + "'");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(out / "trace.jsonl"));
    // --out wins over the environment
    fs::path const flag = scratch("env_flag");
    ASSERT_EQ(run("run " + cfg("quadratic_demo.ini") + " --out '" + flag.string() + "'", "GRADFLOW_OUT=/nonexistent/dir").code, 0);
    EXPECT_TRUE(fs::exists(flag / "trace.jsonl"));
}

TEST(CliRun, SuiteWritesOneDirectoryPerConfig) {
    fs::path const out = scratch("suite");
    Result const r = run("run " + cfg("quadratic_demo.ini") + " " + cfg("npbe_sinusoid.ini") + " --jobs 2 --out '" +
                         out.string() + "'");
    ASSERT_EQ(r.code, 0) << r.err;
    expect_manifest_complete(out / "quadratic_demo");
    expect_manifest_complete(out / "npbe_sinusoid");
    // the worst exit code wins
    EXPECT_EQ(run("run " + cfg("quadratic_demo.ini") + " " + cfg("npbe_absurd.ini") + " --out '" + scratch("suite2").string() + "'").code, 2);
}

TEST(CliRun, ByteIdenticalAcrossInvocations) {
    for (std::string const name : {"quadratic_demo.ini", "npbe_sinusoid.ini"}) {
        fs::path const a = scratch("det_a"), b = scratch("det_b");
        ASSERT_EQ(run("run " + cfg(name) + " --out '" + a.string() + "'").code, 0);
        ASSERT_EQ(run("run " + cfg(name) + " --out '" + b.string() + "'").code, 0);
        EXPECT_EQ(slurp(a / "trace.jsonl"), slurp(b / "trace.jsonl")) << name;
        EXPECT_EQ(slurp(a / "analysis.csv"), slurp(b / "analysis.csv")) << name;
    }
}

TEST(CliRun, ConfigHashIgnoresKeyOrder) {
    Config const a = Config::from_string("seed = 1\n[flow]\nt_end = 3\nrel_tol = 1e-9\n", "a");
    Config const b = Config::from_string("seed = 1\n[flow]\nrel_tol = 1e-9\nt_end = 3\n", "b");
    Config const c = Config::from_string("seed = 2\n[flow]\nt_end = 3\nrel_tol = 1e-9\n", "c");
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_NE(a.hash(), c.hash());
}

TEST(CliAnalyze, ReanalysesExistingTrace) {
    fs::path const out = scratch("analyze_src");
    ASSERT_EQ(run("run " + cfg("npbe_sinusoid.ini") + " --out '" + out.string() + "'").code, 0);
    fs::path const re = scratch("analyze_out");
    Result const r = run("analyze --trace '" + (out / "trace.jsonl").string() + "' --out '" + re.string() + "'");
    ASSERT_EQ(r.code, 0) << r.err;
    auto const first = read_csv(out / "analysis.csv");
    auto const second = read_csv(re / "analysis.csv");
    ASSERT_EQ(second.size(), 2u);
    // same alpha_hat as the in-run analysis
    EXPECT_EQ(first[1][3], second[1][3]);
    expect_manifest_complete(re);
    EXPECT_EQ(run("analyze --trace /nonexistent.jsonl --out '" + scratch("analyze_bad").string() + "'").code, 1);
}

TEST(CliEci, ThreeModeDemo) {
    fs::path const out = scratch("eci3");
    Result const r = run("eci " + cfg("eci_three_mode.ini") + " --out '" + out.string() + "'");
    ASSERT_EQ(r.code, 0) << r.err;
    auto const rows = read_csv(out / "eci_summary.csv");
    ASSERT_GE(rows.size(), 2u);
    int expanded = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) expanded += rows[i][6] == "expanded";
    EXPECT_LE(expanded, 4);
    EXPECT_EQ(rows.back()[6], "solved");
    EXPECT_LE(std::stod(rows.back()[5]), 1e-4);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_TRUE(fs::exists(out / ("trace_level" + std::to_string(i) + ".jsonl")));
    expect_manifest_complete(out);
}

TEST(CliEci, RepresentableTargetHasNoExpansions) {
    fs::path const out = scratch("eci_rep");
    ASSERT_EQ(run("eci " + cfg("eci_representable.ini") + " --out '" + out.string() + "'").code, 0);
    auto const rows = read_csv(out / "eci_summary.csv");
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1][6], "solved");
}

TEST(CliEci, DuplicateFrequencyExitsThree) {
    fs::path const out = scratch("eci_dup");
    Result const r = run("eci " + cfg("eci_duplicate_frequency.ini") + " --out '" + out.string() + "'");
    EXPECT_EQ(r.code, 3) << r.err;
    auto const rows = read_csv(out / "eci_summary.csv");
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1][6], "rejected");
    ordered_json const m = ordered_json::parse(slurp(out / "manifest.json"));
    EXPECT_NE(m["rejection"].get<std::string>().find("w_4"), std::string::npos);
    expect_manifest_complete(out);
}

TEST(CliEci, ByteIdenticalAcrossInvocations) {
    fs::path const a = scratch("eci_det_a"), b = scratch("eci_det_b");
    ASSERT_EQ(run("eci " + cfg("eci_three_mode.ini") + " --out '" + a.string() + "'").code, 0);
    ASSERT_EQ(run("eci " + cfg("eci_three_mode.ini") + " --out '" + b.string() + "'").code, 0);
    for (auto const& e : fs::directory_iterator(a)) {
        if (e.path().filename() == "manifest.json") continue;
        EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
    }
}

TEST(CliSpectrum, SinusoidRandomParameters) {
    fs::path const out = scratch("spec_sin");
    ASSERT_EQ(run("spectrum " + cfg("spectrum_sinusoid.ini") + " --out '" + out.string() + "'").code, 0);
    auto const rows = read_csv(out / "spectrum.csv");
    ASSERT_EQ(rows.size(), 6u);
    auto const& h = rows[0];
    auto const col = std::find(h.begin(), h.end(), "consistency") - h.begin();
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][static_cast<std::size_t>(col)], "pass");
    expect_manifest_complete(out);
}

TEST(CliSpectrum, SpiralSweepMuIsOnePlusWSquared) {
    fs::path const out = scratch("spec_spiral");
    ASSERT_EQ(run("spectrum " + cfg("spectrum_spiral.ini") + " --out '" + out.string() + "'").code, 0);
    auto const rows = read_csv(out / "spectrum.csv");
    ASSERT_EQ(rows.size(), 102u);
    // columns: w_id, w_0, eig_1, mu, ...
    for (std::size_t i = 1; i < rows.size(); ++i) {
        double const w = std::stod(rows[i][1]);
        double const mu = std::stod(rows[i][3]);
        EXPECT_NEAR(mu, 1 + w * w, 1e-10 * (1 + w * w));
        EXPECT_EQ(rows[i][5], "pass");
    }
    EXPECT_EQ(std::stod(rows.back()[1]), 10.0);
}

TEST(CliSpectrum, AffineSpectraIdenticalAcrossRows) {
    fs::path const out = scratch("spec_aff");
    ASSERT_EQ(run("spectrum " + cfg("spectrum_affine.ini") + " --out '" + out.string() + "'").code, 0);
    auto const rows = read_csv(out / "spectrum.csv");
    ASSERT_EQ(rows.size(), 5u);
    // w_id, w_0..w_2, eig_1..eig_3, mu, rank
    for (std::size_t i = 2; i < rows.size(); ++i)
        for (std::size_t k = 4; k <= 8; ++k) EXPECT_EQ(rows[i][k], rows[1][k]);
    EXPECT_NEAR(std::stod(rows[1][7]), 0.25, 1e-14);
}

TEST(CliCoverage, SpiralCoversBetterThanLine) {
    fs::path const out = scratch("cov");
    ASSERT_EQ(run("coverage-demo " + cfg("coverage.ini") + " --out '" + out.string() + "'").code, 0);
    auto const rows = read_csv(out / "coverage.csv");
    EXPECT_EQ(rows.size(), 101u);
    auto const sum = read_csv(out / "coverage_summary.csv");
    ASSERT_EQ(sum.size(), 2u);
    EXPECT_EQ(sum[1][0], "100");
    EXPECT_LT(std::stod(sum[1][2]), std::stod(sum[1][1]));
    EXPECT_EQ(sum[1][3], "true");
    expect_manifest_complete(out);
}

TEST(CliCoverage, HandPlacedTargets) {
    fs::path const out = scratch("cov_pts");
    ASSERT_EQ(run("coverage-demo " + cfg("coverage_points.ini") + " --out '" + out.string() + "'").code, 0);
    auto const rows = read_csv(out / "coverage.csv");
    ASSERT_EQ(rows.size(), 4u);
    // origin: both model sets pass through it
    EXPECT_LE(std::stod(rows[1][3]), 1e-9);
    EXPECT_LE(std::stod(rows[1][4]), 1e-9);
    // points on the diagonal line: line distance at grid resolution
    EXPECT_LE(std::stod(rows[2][3]), 1e-3);
    EXPECT_LE(std::stod(rows[3][3]), 1e-3);
}
