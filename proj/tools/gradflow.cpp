// gradflow: run gradient-flow experiments from config files.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "gradflow/experiment.hpp"

namespace {

using Command = int (*)(gradflow::Config, gradflow::RunOptions const&);

/// Runs each config; with several configs every run writes to out/<config stem>.
int run_suite(Command cmd, std::vector<std::string> const& configs, gradflow::RunOptions const& base, int jobs) {
    if (configs.size() == 1) {
        try {
            return cmd(gradflow::Config::from_file(configs.front()), base);
        } catch (gradflow::ConfigError const& e) {
            std::cerr << "config error: " << e.what() << '\n';
            return gradflow::exit_config;
        }
    }
    std::vector<int> codes(configs.size(), 0);
    std::vector<std::string> logs(configs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < configs.size(); i = next++) {
            std::ostringstream log;
            gradflow::RunOptions opt = base;
            opt.log = &log;
            std::string const stem = std::filesystem::path(configs[i]).stem().string();
            if (opt.out) opt.out = (std::filesystem::path(*opt.out) / stem).string();
            try {
                gradflow::Config c = gradflow::Config::from_file(configs[i]);
                if (!opt.out) {
                    std::string root = c.get_string("out", "gradflow_out");
                    if (char const* env = std::getenv(gradflow::output_env_var); env && *env) root = env;
                    opt.out = (std::filesystem::path(root) / stem).string();
                }
                codes[i] = cmd(std::move(c), opt);
            } catch (gradflow::ConfigError const& e) {
                log << "config error: " << e.what() << '\n';
                codes[i] = gradflow::exit_config;
            }
            logs[i] = log.str();
        }
    };
    std::vector<std::jthread> pool;
    int const n = std::clamp(jobs, 1, static_cast<int>(configs.size()));
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    pool.clear();
    int worst = 0;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        std::cerr << "[" << configs[i] << "] " << logs[i];
        worst = std::max(worst, codes[i]);
    }
    return worst;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gradient-flow experiments: nominal, parametric and annealed flows, kernel spectra, "
                 "architecture expansion."};
    app.require_subcommand(1);

    std::vector<std::string> configs;
    std::string out;
    std::uint64_t seed = 0;
    int jobs = 1;
    std::string trace_path;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("--config", configs, "config file (repeat for a suite)");
        if (config_required) opt->required();
        sub->add_option("--out", out, "output directory (overrides " + std::string(gradflow::output_env_var) +
                                          " and the config)");
        sub->add_option("--seed", seed, "seed override");
        sub->add_option("--jobs", jobs, "concurrent runs in suite mode")->check(CLI::PositiveNumber);
    };

    CLI::App* run = app.add_subcommand("run", "integrate the configured flow");
    add_common(run, true);
    CLI::App* eci = app.add_subcommand("eci", "error-correcting inclusion loop");
    add_common(eci, true);
    CLI::App* spectrum = app.add_subcommand("spectrum", "kernel spectra and consistency checks");
    add_common(spectrum, true);
    CLI::App* coverage = app.add_subcommand("coverage-demo", "line versus spiral coverage of a box");
    add_common(coverage, false);
    CLI::App* analyze = app.add_subcommand("analyze", "re-run trace analyses on a trace file");
    add_common(analyze, false);
    analyze->add_option("--trace", trace_path, "trace file (JSON lines)")->required();

    try {
        app.parse(argc, argv);
    } catch (CLI::ParseError const& e) {
        int const code = app.exit(e);
        return code == 0 ? 0 : gradflow::exit_config;
    }

    gradflow::RunOptions opt;
    if (!out.empty()) opt.out = out;
    for (CLI::App* sub : {run, eci, spectrum, coverage, analyze})
        if (sub->parsed() && sub->count("--seed")) opt.seed = seed;

    if (run->parsed()) return run_suite(&gradflow::cmd_run, configs, opt, jobs);
    if (eci->parsed()) return run_suite(&gradflow::cmd_eci, configs, opt, jobs);
    if (spectrum->parsed()) return run_suite(&gradflow::cmd_spectrum, configs, opt, jobs);
    if (coverage->parsed()) {
        if (configs.empty()) return gradflow::cmd_coverage_demo(gradflow::Config::from_string("", "<defaults>"), opt);
        return run_suite(&gradflow::cmd_coverage_demo, configs, opt, jobs);
    }
    if (configs.size() > 1) {
        std::cerr << "config error: analyze takes at most one --config\n";
        return gradflow::exit_config;
    }
    std::optional<gradflow::Config> c;
    try {
        if (!configs.empty()) c = gradflow::Config::from_file(configs.front());
    } catch (gradflow::ConfigError const& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return gradflow::exit_config;
    }
    return gradflow::cmd_analyze(trace_path, c, opt);
}
