// Acceptance driver: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include "funnel/experiments.hpp"
#include "funnel/verification.hpp"

using namespace funnel;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

int workers()
{
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

std::string fmt(double x, int digits = 4)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

std::string sci(double x)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

ExperimentConfig make_config(const char* text)
{
    return config_from_json(json::parse(text));
}

double mean_of(const std::vector<double>& xs)
{
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

/// Mean PR per agent label over a batch.
std::map<std::string, double> mean_pr_by_agent(const std::vector<BatchRun>& runs, double v_star)
{
    std::map<std::string, std::vector<double>> prs;
    for (const auto& r : runs) prs[r.result.agent].push_back(performance_ratio(r.result, v_star));
    std::map<std::string, double> out;
    for (const auto& [k, v] : prs) out[k] = mean_of(v);
    return out;
}

/// Smallest 1/(alpha+beta+1) - Var over a belief CSV (state,action,alpha,beta,n).
double variance_slack_from_csv(const std::string& csv)
{
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    double worst = std::numeric_limits<double>::infinity();
    while (std::getline(is, line)) {
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
        if (cols.size() != 5) continue;
        const BetaCounts c{std::stod(cols[2]), std::stod(cols[3]), 0.0, 0.0};
        worst = std::min(worst, 1.0 / (c.alpha + c.beta + 1.0) - c.variance());
    }
    return worst;
}

/// Records every action the inner agent takes.
class ActionRecorder final : public Agent {
public:
    explicit ActionRecorder(std::unique_ptr<Agent> inner) : inner_(std::move(inner)) {}
    ActionId act(StateId s) override
    {
        const ActionId a = inner_->act(s);
        actions.push_back(a);
        return a;
    }
    void observe(StateId s, ActionId a, StateId n) override { inner_->observe(s, a, n); }
    void end_episode(bool c) override { inner_->end_episode(c); }
    std::string name() const override { return inner_->name(); }
    const BetaTable* beta_table() const override { return inner_->beta_table(); }

    std::vector<ActionId> actions;

private:
    std::unique_ptr<Agent> inner_;
};

// ---------------------------------------------------------------------------
// Experiment configurations
// ---------------------------------------------------------------------------

const char* kBanditConfig = R"({
    "schema_version": 1,
    "mdp": {"preset": "bandit"},
    "agents": [{"kind": "ts"}, {"kind": "mfabl", "epsilon": 0.01}, {"kind": "pmfabl", "epsilon": 0.01}],
    "N": 5000, "R": 20, "base_seed": 0
})";

const char* kOrderingConfig = R"({
    "schema_version": 1,
    "mdp": {"preset": "funnel-small"},
    "agents": [{"kind": "ts"}, {"kind": "mfabl"}, {"kind": "pmfabl"}, {"kind": "optimal"}],
    "N": 100000, "R": 20, "base_seed": 0
})";

const char* kShiftConfig = R"({
    "schema_version": 1,
    "mdp": {"preset": "funnel-small"},
    "agents": [{"kind": "mfabl"}],
    "N": 200000, "R": 10, "base_seed": 0,
    "schedule": {"mode": "two_phase"}
})";

const char* kGradualConfig = R"({
    "schema_version": 1,
    "mdp": {"preset": "funnel-small"},
    "agents": [{"kind": "mfabl"}],
    "N": 200000, "R": 2, "base_seed": 0,
    "schedule": {"mode": "gradual", "n1": 1, "n2": 200000}
})";

const char* kScaleConfig = R"({
    "schema_version": 1,
    "mdp": {"preset": "funnel-large"},
    "agents": [{"kind": "ts"}, {"kind": "mfabl"}, {"kind": "psrl", "reopt_every": 1000}],
    "N": 20000, "R": 3, "base_seed": 0
})";

const char* kMisspecConfig = R"({
    "schema_version": 1,
    "mdp": {"preset": "funnel-small"},
    "agents": [{"kind": "pmfabl"}, {"kind": "psrl", "reopt_every": 1000, "projection": "temporal"}],
    "N": 100000, "R": 10, "base_seed": 0
})";

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

Verdict expected_update_identity()
{
    const double worst = check_expected_update_sweep(10'000, 2024);
    return {worst < 1e-12, "max residual " + sci(worst) + " over 10^4 cases (need < 1e-12)"};
}

Verdict planner_oracle()
{
    Rng rng(derive_key(2024, 2));
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const auto S = static_cast<StateId>(1 + uniform_index(rng, 5));
        const auto mdp = random_absorbing_mdp(S, 2, rng);
        worst = std::max(worst, max_abs_diff(solve_q_star(mdp).q, brute_force_q_star(mdp)));
    }
    return {worst <= 1e-8, "max |Q_vi - Q_brute| " + sci(worst) + " over 50 MDPs (need <= 1e-8)"};
}

Verdict bandit_reproduction()
{
    const auto cfg = make_config(kBanditConfig);
    const auto env = build_environment(cfg.mdp);
    std::map<std::string, std::vector<double>> freq;
    std::vector<double> belief;
    for (const auto& spec : cfg.agents) {
        const auto plan = plan_agent(spec, env);
        for (std::uint64_t r = 0; r < cfg.R; ++r) {
            const std::uint64_t seed = cfg.base_seed + r;
            ActionRecorder rec(build_agent(plan, env, seed));
            run_experiment(env.mdp, ShiftSchedule::none(), rec, cfg.N, seed, {env.max_steps, env.name});
            const auto tail = std::vector<ActionId>(rec.actions.end() - 1000, rec.actions.end());
            freq[plan.name].push_back(static_cast<double>(std::count(tail.begin(), tail.end(), 1)) / 1000.0);
            if (spec.kind == AgentKind::mfabl) belief.push_back(rec.beta_table()->get(0, 1).mean());
        }
    }
    bool ok = true;
    std::string detail = "action-1 share in last 1000:";
    for (const auto& [name, f] : freq) {
        const double m = mean_of(f);
        ok = ok && m >= 0.9;
        detail += " " + name + "=" + fmt(m, 3);
    }
    const double b = mean_of(belief);
    ok = ok && std::abs(b - 0.3) <= 0.05;
    detail += " (need >= 0.9); MFABL mean belief a1 = " + fmt(b) + " (need 0.3 +- 0.05)";
    return {ok, detail};
}

Verdict reduction_identities()
{
    const auto f = synthetic_funnel(funnel_small_params());
    bool ok = true;
    int compared = 0;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        MfablConfig lin, poly, disc;
        poly.variant = MfablVariant::polynomial;
        poly.omega = 1.0;
        disc.variant = MfablVariant::discounted;
        disc.gamma = 1.0;
        MfablAgent a(f.mdp.num_actions(), lin, 0, agent_seed(seed));
        MfablAgent b(f.mdp.num_actions(), poly, 0, agent_seed(seed));
        MfablAgent c(f.mdp.num_actions(), disc, 0, agent_seed(seed));
        const auto ra = run_experiment(f.mdp, ShiftSchedule::none(), a, 10'000, seed);
        const auto rb = run_experiment(f.mdp, ShiftSchedule::none(), b, 10'000, seed);
        const auto rc = run_experiment(f.mdp, ShiftSchedule::none(), c, 10'000, seed);
        ok = ok && a.beliefs() == b.beliefs() && a.beliefs() == c.beliefs();
        ok = ok && ra.converted == rb.converted && ra.converted == rc.converted;
        compared += static_cast<int>(a.beliefs().num_entries());
    }
    return {ok, std::to_string(compared) + " belief cells bit-identical across linear / omega=1 / gamma=1, 3 seeds x 10^4"};
}

struct OrderingOutcome {
    Verdict ordering, variance;
};

OrderingOutcome ordering_and_variance()
{
    const auto cfg = make_config(kOrderingConfig);
    const auto env = build_environment(cfg.mdp);
    const auto runs = run_batch_detailed(cfg, env, workers(), true);
    const auto pr = mean_pr_by_agent(runs, env.v_star);
    const double ts = pr.at("ts"), mf = pr.at("mfabl"), pm = pr.at("pmfabl"), opt = pr.at("optimal");
    const bool ok = pm >= mf && mf >= ts + 0.05 && std::abs(opt - 1.0) <= 0.02;
    OrderingOutcome out;
    out.ordering = {ok, "PR pmfabl=" + fmt(pm) + " mfabl=" + fmt(mf) + " ts=" + fmt(ts) + " optimal=" + fmt(opt) +
                            " (need pmfabl >= mfabl >= ts+0.05, optimal 1 +- 0.02)"};
    double worst = std::numeric_limits<double>::infinity();
    std::size_t tables = 0;
    for (const auto& r : runs) {
        if (r.result.agent == "optimal") continue;
        worst = std::min(worst, variance_slack_from_csv(r.beliefs_csv));
        ++tables;
    }
    out.variance = {worst >= 0.0, "min slack 1/(a+b+1) - Var = " + sci(worst) + " over " + std::to_string(tables) +
                                      " post-run tables (need >= 0)"};
    return out;
}

Verdict concept_shift()
{
    const auto cfg = make_config(kShiftConfig);
    const auto env = build_environment(cfg.mdp);
    const auto runs = run_batch_detailed(cfg, env, workers());
    const std::uint64_t N = cfg.N, half = N / 2, w = half / 5;
    std::vector<double> p1, p2;
    for (const auto& r : runs) {
        p1.push_back(windowed_pr(r.result, env.v_star, half - w + 1, half));
        p2.push_back(windowed_pr(r.result, env.v_star, N - w + 1, N));
    }
    const double ratio = mean_of(p2) / mean_of(p1);

    const auto gcfg = make_config(kGradualConfig);
    const auto sched = gcfg.schedule.resolve(gcfg.N);
    const auto gruns = run_batch_detailed(gcfg, env, workers());
    double worst = 0.0;
    for (const auto& r : gruns) {
        const std::uint64_t d = gcfg.N / 10;
        for (std::uint64_t k = 0; k < 10; ++k) {
            double hits = 0.0, expected = 0.0;
            for (std::uint64_t n = k * d + 1; n <= (k + 1) * d; ++n) {
                hits += r.result.phase[n - 1] == 2;
                expected += sched.phase2_probability(n);
            }
            worst = std::max(worst, std::abs(hits - expected) / static_cast<double>(d));
        }
    }
    const bool ok = ratio >= 0.8 && worst <= 0.02;
    return {ok, "late phase-2 / late phase-1 PR = " + fmt(mean_of(p2)) + "/" + fmt(mean_of(p1)) + " = " + fmt(ratio) +
                    " (need >= 0.8); gradual decile deviation " + fmt(worst) + " (need <= 0.02)"};
}

Verdict scalability()
{
    const auto cfg = make_config(kScaleConfig);
    const auto env = build_environment(cfg.mdp);
    const auto runs = run_batch_detailed(cfg, env, 1);
    std::map<std::string, std::vector<double>> secs;
    for (const auto& r : runs) secs[r.result.agent].push_back(r.result.learner_seconds);
    const double ts = mean_of(secs.at("ts")), mf = mean_of(secs.at("mfabl")), ps = mean_of(secs.at("psrl"));
    const bool ok = ps >= 10.0 * mf && mf <= 3.0 * ts;
    return {ok, "learner seconds ts=" + fmt(ts, 3) + " mfabl=" + fmt(mf, 3) + " psrl=" + fmt(ps, 3) +
                    "; psrl/mfabl=" + fmt(ps / mf, 2) + " (need >= 10), mfabl/ts=" + fmt(mf / ts, 2) + " (need <= 3)"};
}

Verdict misspecification()
{
    const auto cfg = make_config(kMisspecConfig);
    const auto env = build_environment(cfg.mdp);
    const auto pr = mean_pr_by_agent(run_batch_detailed(cfg, env, workers()), env.v_star);
    const double pm = pr.at("pmfabl"), ps = pr.at("psrl@temporal");
    return {pm - ps >= 0.05, "PR pmfabl=" + fmt(pm) + " psrl@temporal=" + fmt(ps) + ", gap " + fmt(pm - ps) +
                                  " (need >= 0.05)"};
}

std::map<std::string, std::string> result_csvs(const fs::path& dir)
{
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".csv" || e.path().filename() == "timings.csv") continue;
        std::ifstream is(e.path(), std::ios::binary);
        std::ostringstream os;
        os << is.rdbuf();
        out[fs::relative(e.path(), dir).string()] = os.str();
    }
    return out;
}

Verdict determinism()
{
    const auto root = fs::temp_directory_path() / ("funnel_acceptance_" + std::to_string(::getpid()));
    std::size_t files = 0;
    std::vector<std::string> mismatched;
    int idx = 0;
    for (const char* text : {kBanditConfig, kOrderingConfig, kShiftConfig, kGradualConfig, kMisspecConfig}) {
        auto cfg = make_config(text);
        cfg.R = std::min<std::uint64_t>(cfg.R, 2);
        cfg.save_beliefs = true;
        const auto a = root / (std::to_string(idx) + "a"), b = root / (std::to_string(idx) + "b");
        run_and_write(cfg, 1, a);
        run_and_write(cfg, workers() + 1, b);
        const auto ca = result_csvs(a), cb = result_csvs(b);
        if (ca.size() != cb.size()) mismatched.push_back("config " + std::to_string(idx) + " file set");
        for (const auto& [name, bytes] : ca) {
            auto it = cb.find(name);
            if (it == cb.end() || it->second != bytes) mismatched.push_back(std::to_string(idx) + ":" + name);
        }
        files += ca.size();
        ++idx;
    }
    fs::remove_all(root);
    std::string detail = std::to_string(files) + " result CSVs compared across reruns";
    if (!mismatched.empty()) detail += "; mismatched: " + mismatched.front();
    return {mismatched.empty() && files > 0, detail};
}

}  // namespace

int main()
{
    using Clock = std::chrono::steady_clock;
    int failures = 0;
    auto report = [&](int id, const std::string& title, const Verdict& v, double seconds, double limit) {
        const bool in_time = seconds <= limit;
        const bool pass = v.pass && in_time;
        failures += pass ? 0 : 1;
        std::printf("[%s] criterion %d: %s: %s; %.1f s (limit %.0f s)%s\n", pass ? "PASS" : "FAIL", id, title.c_str(),
                    v.detail.c_str(), seconds, limit, in_time ? "" : " OVER TIME LIMIT");
        std::fflush(stdout);
    };
    auto timed = [&](auto&& f) {
        const auto t0 = Clock::now();
        auto v = f();
        return std::pair{v, std::chrono::duration<double>(Clock::now() - t0).count()};
    };

    try {
        auto [v1, t1] = timed(expected_update_identity);
        report(1, "expected-update identity", v1, t1, 1);
        auto [v2, t2] = timed(planner_oracle);
        report(2, "planner vs brute force", v2, t2, 10);
        auto [v3, t3] = timed(bandit_reproduction);
        report(3, "bandit reproduction", v3, t3, 30);
        auto [v4, t4] = timed(reduction_identities);
        report(4, "reduction identities", v4, t4, 5);
        auto [v5, t5] = timed(ordering_and_variance);
        report(5, "ordering on funnel-small", v5.ordering, t5, 600);
        report(6, "variance bound", v5.variance, 0.0, 600);
        auto [v7, t7] = timed(concept_shift);
        report(7, "concept shift", v7, t7, 900);
        auto [v8, t8] = timed(scalability);
        report(8, "scalability on funnel-large", v8, t8, 1800);
        auto [v9, t9] = timed(misspecification);
        report(9, "misspecification", v9, t9, 900);
        auto [v10, t10] = timed(determinism);
        report(10, "determinism", v10, t10, 3600);
    } catch (const std::exception& e) {
        std::printf("[FAIL] acceptance aborted: %s\n", e.what());
        return 2;
    }
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
