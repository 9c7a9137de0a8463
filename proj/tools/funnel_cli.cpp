#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "funnel/experiments.hpp"
#include "funnel/generator.hpp"
#include "funnel/mdp_io.hpp"
#include "funnel/planner.hpp"
#include "funnel/verification.hpp"

namespace fs = std::filesystem;
using namespace funnel;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRun = 3;

json read_json_file(const std::string& path)
{
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read " + path);
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

FunnelMdp mdp_from_flags(const std::string& preset, const std::string& file)
{
    if (!file.empty()) {
        try {
            return load_mdp(file);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    }
    if (preset == "bandit") return bandit_example();
    try {
        return synthetic_funnel(preset_params(preset)).mdp;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

int cmd_generate(const std::string& preset, const std::string& config, std::optional<std::uint64_t> seed,
                 const std::string& out)
{
    FunnelGenParams p;
    if (!config.empty())
        p = gen_params_from_json(read_json_file(config), config);
    else if (preset == "bandit") {
        save_mdp(bandit_example(), out);
        std::cout << "wrote " << out << " (bandit, 1 state)\n";
        return 0;
    } else {
        try {
            p = preset_params(preset);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    if (seed) p.seed = *seed;
    const auto f = synthetic_funnel(p);
    save_mdp(f.mdp, out);
    std::cout << "wrote " << out << " (" << f.mdp.num_states() << " states, " << f.mdp.num_actions() << " actions, "
              << f.mdp.num_outcomes() << " transitions)\n";
    return 0;
}

int cmd_solve(const std::string& preset, const std::string& file, const std::string& out)
{
    const auto mdp = mdp_from_flags(preset, file);
    const auto plan = solve_q_star(mdp);
    const double v_star = optimal_conversion_rate(mdp, plan.v);
    fs::create_directories(out);
    {
        std::ofstream os(fs::path(out) / "q_star.csv");
        write_q_csv(os, plan.q);
    }
    {
        std::ofstream os(fs::path(out) / "policy.csv");
        write_policy_csv(os, plan.policy);
    }
    {
        std::ofstream os(fs::path(out) / "value.csv");
        os << "state,value\n";
        os.precision(17);
        for (StateId s = 0; s < mdp.num_states(); ++s) os << s << ',' << plan.v[s] << '\n';
    }
    const json info{{"states", mdp.num_states()},
                    {"actions", mdp.num_actions()},
                    {"v_star", v_star},
                    {"iterations", plan.iterations}};
    std::ofstream(fs::path(out) / "solution.json") << info.dump(2) << '\n';
    std::cout << "v* = " << format_double(v_star) << " after " << plan.iterations << " sweeps; wrote " << out << '\n';
    return 0;
}

int cmd_run(const std::string& config, std::optional<std::uint64_t> seed, int parallelism, const std::string& out)
{
    auto cfg = parse_config(config);
    if (seed) cfg.base_seed = *seed;
    std::string dir = out.empty() ? cfg.out.value_or("") : out;
    if (dir.empty()) throw ConfigError("no output directory: pass --out or set \"out\" in the config");
    const auto rep = run_and_write(cfg, parallelism, dir);
    write_summary_text(std::cout, rep);
    return 0;
}

int cmd_report(const std::string& dir)
{
    const auto rep = report_from_dir(dir);
    write_summary_text(std::cout, rep);
    return 0;
}

int cmd_verify(std::uint64_t seed, const std::string& out)
{
    const auto checks = run_verification_suite(seed);
    json j{{"seed", seed}, {"checks", json::array()}};
    bool all = true;
    for (const auto& c : checks) {
        j["checks"].push_back(
            {{"name", c.name}, {"value", c.value}, {"comparison", c.comparison}, {"threshold", c.threshold}, {"pass", c.pass}});
        all = all && c.pass;
    }
    j["pass"] = all;
    const auto text = j.dump(2);
    std::cout << text << '\n';
    if (!out.empty()) std::ofstream(out) << text << '\n';
    return all ? 0 : kExitRun;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Conversion-funnel optimization: MDP generation, planning, learning experiments"};
    app.require_subcommand(1);

    std::string preset = "funnel-small", mdp_file, config, out;
    std::optional<std::uint64_t> seed;
    int parallelism = 1;

    auto* gen = app.add_subcommand("generate", "Write a synthetic funnel MDP as JSON");
    gen->add_option("--preset", preset, "bandit, funnel-small or funnel-large")->capture_default_str();
    gen->add_option("--config", config, "Generator parameters JSON (fields override \"base\" preset)");
    gen->add_option("--seed", seed, "Override the generator seed");
    gen->add_option("--out", out, "Output MDP file")->required();

    auto* solve = app.add_subcommand("solve", "Compute Q*, the greedy policy and v*");
    solve->add_option("--preset", preset, "Preset to solve")->capture_default_str();
    solve->add_option("--mdp", mdp_file, "MDP JSON file (overrides --preset)");
    solve->add_option("--out", out, "Output directory")->required();

    auto* run = app.add_subcommand("run", "Run an experiment config");
    run->add_option("--config", config, "Experiment config JSON")->required();
    run->add_option("--seed", seed, "Override base_seed");
    run->add_option("--parallelism", parallelism, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    run->add_option("--out", out, "Output directory (overrides \"out\" in the config)");

    auto* report = app.add_subcommand("report", "Re-aggregate a finished run directory");
    report->add_option("--out", out, "Run directory")->required();

    auto* verify = app.add_subcommand("verify", "Run the oracle suite and print pass/fail JSON");
    verify->add_option("--seed", seed, "Seed for the randomized checks");
    verify->add_option("--out", out, "Also write the JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*gen) return cmd_generate(preset, config, seed, out);
        if (*solve) return cmd_solve(preset, mdp_file, out);
        if (*run) return cmd_run(config, seed, parallelism, out);
        if (*report) return cmd_report(out);
        if (*verify) return cmd_verify(seed.value_or(0), out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << '\n';
        return kExitRun;
    }
    return 0;
}
