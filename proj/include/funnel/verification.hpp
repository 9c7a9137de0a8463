#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <random>
#include <vector>

#include "funnel/agents.hpp"
#include "funnel/beliefs.hpp"
#include "funnel/generator.hpp"
#include "funnel/mdp.hpp"
#include "funnel/planner.hpp"
#include "funnel/rng.hpp"
#include "funnel/simulator.hpp"

namespace funnel {

struct LemmaCheckCase {
    double alpha = 1.0;
    double beta = 1.0;
    bool feedback = false;
};

/**
 * Applies one linear update and returns
 *   |mean_after - (n/(n+1) mean_before + f/(n+1))|,  n = alpha + beta.
 */
inline double check_expected_update(const LemmaCheckCase& c)
{
    BetaCounts cell{c.alpha, c.beta, 0.0, c.alpha + c.beta};
    const double n = c.alpha + c.beta;
    const double before = cell.mean();
    MfablConfig cfg;
    cfg.variant = MfablVariant::linear;
    mfabl_update(cell, c.feedback, cfg);
    const double expected = n / (n + 1.0) * before + (c.feedback ? 1.0 : 0.0) / (n + 1.0);
    return std::abs(cell.mean() - expected);
}

/// Largest residual over `cases` random cases with alpha, beta uniform in (0, max_count].
inline double check_expected_update_sweep(std::size_t cases, std::uint64_t seed, double max_count = 100.0)
{
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < cases; ++i) {
        LemmaCheckCase c;
        c.alpha = (1.0 - unit(rng)) * max_count;
        c.beta = (1.0 - unit(rng)) * max_count;
        c.feedback = unit(rng) < 0.5;
        worst = std::max(worst, check_expected_update(c));
    }
    return worst;
}

/// min over entries of 1/(alpha+beta+1) - Var(Beta(alpha, beta)); +inf for an empty table.
inline double check_variance_bound(const BetaTable& belief)
{
    double worst = std::numeric_limits<double>::infinity();
    belief.for_each([&](StateId, ActionId, const BetaCounts& c) {
        worst = std::min(worst, 1.0 / (c.alpha + c.beta + 1.0) - c.variance());
    });
    return worst;
}

/**
 * Random small instance for planner cross-checks: every (s, a) gets 1..4
 * successors drawn from the active states and the two terminals, with
 * exponential weights. Draws are repeated until the model is absorbing; the
 * initial distribution covers every state so nothing is unreachable.
 */
template <class URBG>
FunnelMdp random_absorbing_mdp(StateId num_states, ActionId num_actions, URBG& rng)
{
    std::exponential_distribution<double> weight(1.0);
    for (;;) {
        std::vector<std::vector<Outcome>> rows;
        for (StateId s = 0; s < num_states; ++s)
            for (ActionId a = 0; a < num_actions; ++a) {
                const auto k = 1 + uniform_index(rng, 4);
                std::vector<StateId> pool;
                for (StateId t = 0; t < num_states; ++t) pool.push_back(t);
                pool.push_back(kConvert);
                pool.push_back(kQuit);
                std::vector<Outcome> row;
                double total = 0.0;
                for (std::size_t i = 0; i < k && !pool.empty(); ++i) {
                    const auto j = uniform_index(rng, pool.size());
                    const double w = weight(rng) + 1e-3;
                    row.push_back({pool[j], w});
                    total += w;
                    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
                }
                for (auto& o : row) o.prob /= total;
                rows.push_back(std::move(row));
            }
        std::vector<double> init(static_cast<std::size_t>(num_states));
        double total = 0.0;
        for (auto& w : init) total += (w = weight(rng) + 1e-3);
        for (auto& w : init) w /= total;
        FunnelMdp mdp(num_states, num_actions, std::move(rows), std::move(init));
        if (validate(mdp).ok() && check_absorption(mdp).is_absorbing) return mdp;
    }
}

struct ConvergenceReport {
    std::vector<std::uint64_t> checkpoints;
    /// Mean over seeds of the belief error at each checkpoint.
    std::vector<double> error;
    /// Mean over seeds of the error at checkpoint k+1, measured on the pairs
    /// that qualified at checkpoint k (same pairs as error[k]).
    std::vector<double> error_next_same_pairs;
    /// Error at the last checkpoint.
    double max_q_error = 0.0;
    /// Pairs counted at the last checkpoint, summed over seeds.
    std::size_t pairs_counted = 0;

    /// Later error within `slack` of the earlier one, on a fixed set of pairs.
    bool non_increasing(double slack) const
    {
        for (std::size_t k = 0; k < error_next_same_pairs.size(); ++k)
            if (error_next_same_pairs[k] > error[k] + slack) return false;
        return true;
    }
};

/**
 * Runs MFABL on `mdp` for each seed and measures
 *   max over (s, a) with at least `min_visits` updates of |alpha/(alpha+beta) - Q*(s, a)|
 * at every checkpoint, averaged over seeds. Environment draws use the same
 * substreams as run_experiment.
 */
inline ConvergenceReport check_convergence(const FunnelMdp& mdp, const MfablConfig& cfg,
                                           const std::vector<std::uint64_t>& checkpoints,
                                           const std::vector<std::uint64_t>& seeds, double min_visits = 1000.0,
                                           int max_steps = kDefaultMaxSteps)
{
    const auto q_star = solve_q_star(mdp).q;
    const std::size_t K = checkpoints.size();
    ConvergenceReport rep;
    rep.checkpoints = checkpoints;
    rep.error.assign(K, 0.0);
    rep.error_next_same_pairs.assign(K > 0 ? K - 1 : 0, 0.0);
    for (const auto seed : seeds) {
        MfablAgent agent(mdp.num_actions(), cfg, 0, agent_seed(seed));
        const std::uint64_t env_key = substream_key(seed, Substream::environment);
        std::uint64_t n = 0;
        std::vector<std::pair<StateId, ActionId>> prev_pairs;
        for (std::size_t k = 0; k < K; ++k) {
            for (; n < checkpoints[k]; ++n) {
                CounterStream env(derive_key(env_key, n + 1));
                run_consumer(mdp, agent, max_steps, env, n + 1);
            }
            const auto& b = agent.beliefs();
            auto err_of = [&](StateId s, ActionId a) { return std::abs(b.get(s, a).mean() - q_star(s, a)); };
            if (k > 0) {
                double e = 0.0;
                for (const auto& [s, a] : prev_pairs) e = std::max(e, err_of(s, a));
                rep.error_next_same_pairs[k - 1] += e;
            }
            prev_pairs.clear();
            double err = 0.0;
            b.for_each([&](StateId s, ActionId a, const BetaCounts& c) {
                if (c.visits < min_visits) return;
                prev_pairs.emplace_back(s, a);
                err = std::max(err, err_of(s, a));
            });
            rep.error[k] += err;
            if (k + 1 == K) rep.pairs_counted += prev_pairs.size();
        }
    }
    const auto R = static_cast<double>(seeds.size());
    for (auto& e : rep.error) e /= R;
    for (auto& e : rep.error_next_same_pairs) e /= R;
    rep.max_q_error = rep.error.empty() ? 0.0 : rep.error.back();
    return rep;
}

struct CheckResult {
    std::string name;
    double value = 0.0;
    double threshold = 0.0;
    /// "<", "<=" or ">=": how value is compared with threshold.
    std::string comparison;
    bool pass = false;
};

inline CheckResult make_check(std::string name, double value, std::string cmp, double threshold)
{
    bool ok = false;
    if (cmp == "<") ok = value < threshold;
    else if (cmp == "<=") ok = value <= threshold;
    else if (cmp == ">=") ok = value >= threshold;
    return {std::move(name), value, threshold, std::move(cmp), ok};
}

/// The oracle suite behind the `verify` command.
inline std::vector<CheckResult> run_verification_suite(std::uint64_t seed = 0)
{
    std::vector<CheckResult> out;
    out.push_back(make_check("expected_update_residual", check_expected_update_sweep(10'000, seed), "<", 1e-12));

    {
        Rng rng(derive_key(seed, 0x504c414eull));
        double worst = 0.0;
        for (int i = 0; i < 50; ++i) {
            const auto S = static_cast<StateId>(1 + uniform_index(rng, 5));
            const auto A = static_cast<ActionId>(2 + uniform_index(rng, 2));
            const auto mdp = random_absorbing_mdp(S, A, rng);
            worst = std::max(worst, max_abs_diff(solve_q_star(mdp).q, brute_force_q_star(mdp)));
        }
        out.push_back(make_check("planner_vs_brute_force", worst, "<=", 1e-8));
    }

    const auto small = synthetic_funnel(funnel_small_params());
    const int small_steps = 10 * small.params.horizon;
    {
        double worst = std::numeric_limits<double>::infinity();
        const MfablConfig cfg;
        std::vector<std::unique_ptr<Agent>> agents;
        agents.push_back(std::make_unique<ThompsonAgent>(small.mdp.num_actions(), 1.0, 1.0, agent_seed(seed)));
        agents.push_back(make_mfabl(small.mdp.num_actions(), cfg, agent_seed(seed)));
        agents.push_back(make_pmfabl(small.mdp.num_actions(), cfg, agent_seed(seed)));
        for (auto& a : agents) {
            run_experiment(small.mdp, ShiftSchedule::none(), *a, 20'000, seed, {small_steps, "funnel-small"});
            worst = std::min(worst, check_variance_bound(*a->beta_table()));
        }
        out.push_back(make_check("variance_bound_slack", worst, ">=", 0.0));
    }

    {
        const MfablConfig cfg;
        const auto rep = check_convergence(bandit_example(), cfg, {5'000}, {seed, seed + 1, seed + 2, seed + 3, seed + 4});
        out.push_back(make_check("bandit_belief_error", rep.max_q_error, "<", 0.05));
    }
    {
        MfablConfig cfg;
        cfg.epsilon = 0.05;
        const auto rep = check_convergence(small.mdp, cfg, {12'500, 25'000, 50'000, 100'000, 200'000},
                                           {seed, seed + 1, seed + 2}, 1000.0, small_steps);
        out.push_back(make_check("funnel_small_belief_error", rep.max_q_error, "<", 0.05));
        double worst_rise = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < rep.error_next_same_pairs.size(); ++k)
            worst_rise = std::max(worst_rise, rep.error_next_same_pairs[k] - rep.error[k]);
        out.push_back(make_check("funnel_small_error_trend", worst_rise, "<=", 0.01));
    }
    return out;
}

}  // namespace funnel
