#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "funnel/beliefs.hpp"
#include "funnel/mdp.hpp"
#include "funnel/planner.hpp"
#include "funnel/rng.hpp"

namespace funnel {

/**
 * Episodic learner driven by the simulator.
 *
 * Per consumer: act() on every active state, observe() on every transition
 * in order, then end_episode() exactly once.
 */
class Agent {
public:
    virtual ~Agent() = default;

    virtual ActionId act(StateId s) = 0;
    virtual void observe(StateId s, ActionId a, StateId next) = 0;
    virtual void end_episode(bool converted) = 0;
    virtual std::string name() const = 0;

    virtual const BetaTable* beta_table() const { return nullptr; }
    virtual const DirichletTable* dirichlet_table() const { return nullptr; }
};

// ---------------------------------------------------------------------------
// Beta-belief primitives shared by TS and the MFABL family
// ---------------------------------------------------------------------------

namespace detail {

/// Argmax of per-action samples; ties broken uniformly (reservoir style).
template <class URBG>
ActionId argmax_uniform_ties(std::span<const double> values, URBG& rng)
{
    ActionId best = 0;
    double best_v = values[0];
    std::size_t ties = 1;
    for (std::size_t a = 1; a < values.size(); ++a) {
        if (values[a] > best_v) {
            best_v = values[a];
            best = static_cast<ActionId>(a);
            ties = 1;
        } else if (values[a] == best_v) {
            ++ties;
            if (uniform_index(rng, ties) == 0) best = static_cast<ActionId>(a);
        }
    }
    return best;
}

}  // namespace detail

/// Samples q_a ~ Beta(alpha_sa, beta_sa) for every action and plays the argmax.
template <class URBG>
ActionId ts_act(const BetaTable& belief, StateId s, URBG& rng)
{
    const ActionId n = belief.num_actions();
    if (n == 1) return 0;
    double samples[16]{};
    std::vector<double> spill;
    double* q = samples;
    if (n > 16) {
        spill.resize(static_cast<std::size_t>(n));
        q = spill.data();
    }
    for (ActionId a = 0; a < n; ++a) {
        const auto c = belief.get(s, a);
        q[a] = sample_beta(rng, c.alpha, c.beta);
    }
    return detail::argmax_uniform_ties(std::span<const double>(q, static_cast<std::size_t>(n)), rng);
}

/// One-step credit: conversion on this transition adds to alpha, anything else to beta.
inline void ts_observe(BetaTable& belief, StateId s, ActionId a, StateId next)
{
    auto& c = belief.at(s, a);
    if (next == kConvert)
        c.alpha += 1.0;
    else
        c.beta += 1.0;
    c.visits += 1.0;
}

enum class MfablVariant { linear, polynomial, discounted };

struct MfablConfig {
    double epsilon = 0.01;
    double alpha0 = 1.0;
    double beta0 = 1.0;
    MfablVariant variant = MfablVariant::linear;
    double omega = 1.0;  // polynomial schedule exponent, (1/2, 1]
    double gamma = 1.0;  // discount, [0, 1]

    void check() const
    {
        if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("MfablConfig: epsilon must be in [0,1]");
        if (!(alpha0 > 0.0 && beta0 > 0.0)) throw std::invalid_argument("MfablConfig: prior counts must be positive");
        if (!(omega > 0.5 && omega <= 1.0)) throw std::invalid_argument("MfablConfig: omega must be in (1/2, 1]");
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("MfablConfig: gamma must be in [0,1]");
    }
};

/// Thompson selection with epsilon-greedy; epsilon == 0 consumes no extra draw.
template <class URBG>
ActionId mfabl_act(const BetaTable& belief, StateId s, double epsilon, URBG& rng)
{
    if (epsilon > 0.0 && unit(rng) < epsilon) return static_cast<ActionId>(uniform_index(rng, belief.num_actions()));
    return ts_act(belief, s, rng);
}

template <class URBG>
ActionId mfabl_act(const BetaTable& belief, StateId s, const MfablConfig& cfg, URBG& rng)
{
    return mfabl_act(belief, s, cfg.epsilon, rng);
}

/// Feedback from the successor given an explicit uniform draw u in [0,1).
inline bool mfabl_feedback_given(const BetaTable& belief, StateId next, double u)
{
    if (next == kConvert) return true;
    if (next == kQuit) return false;
    return u < belief.best_mean(next);
}

/// f ~ Bernoulli(max_a' mean(s', a')); deterministic 1 / 0 at the convert / quit states.
template <class URBG>
bool mfabl_feedback(const BetaTable& belief, StateId next, URBG& rng)
{
    if (is_terminal(next)) return next == kConvert;
    return mfabl_feedback_given(belief, next, unit(rng));
}

/**
 * Applies one feedback bit to a cell.
 *
 * With n the schedule count (prior mass plus visits), the mean moves by
 *   linear:      n/(n+1) mean + f/(n+1)
 *   polynomial:  (1 - (n+1)^-omega) mean + (n+1)^-omega f
 *   discounted:  n/(n+1) mean + gamma f/(n+1)
 * and omega = 1 or gamma = 1 reproduce the linear increments exactly.
 */
inline void mfabl_update(BetaCounts& c, bool f, const MfablConfig& cfg)
{
    const double n = c.schedule_count();
    const double total = c.alpha + c.beta;
    switch (cfg.variant) {
    case MfablVariant::linear:
        (f ? c.alpha : c.beta) += 1.0;
        break;
    case MfablVariant::polynomial: {
        const double inc = total / (std::pow(n + 1.0, cfg.omega) - 1.0);
        (f ? c.alpha : c.beta) += inc;
        break;
    }
    case MfablVariant::discounted:
        if (f)
            c.alpha += total * (cfg.gamma * total - c.alpha) / (n * c.beta + (1.0 - cfg.gamma) * total);
        else
            c.beta += total / n;
        break;
    }
    c.visits += 1.0;
}

template <class URBG>
bool mfabl_observe(BetaTable& belief, StateId s, ActionId a, StateId next, const MfablConfig& cfg, URBG& rng)
{
    const bool f = mfabl_feedback(belief, next, rng);
    mfabl_update(belief.at(s, a), f, cfg);
    return f;
}

/// Uniform attribution of the real outcome to every (s, a) occurrence on the path.
inline void pmfabl_end_episode(BetaTable& belief, std::span<const std::pair<StateId, ActionId>> path, bool converted)
{
    for (const auto& [s, a] : path) {
        auto& c = belief.at(s, a);
        (converted ? c.alpha : c.beta) += 1.0;
        c.visits += 1.0;
    }
}

// ---------------------------------------------------------------------------
// Agents
// ---------------------------------------------------------------------------

/// Myopic Thompson sampling over one-step conversion.
class ThompsonAgent final : public Agent {
public:
    ThompsonAgent(ActionId num_actions, double alpha0, double beta0, std::uint64_t seed)
        : belief_(num_actions, alpha0, beta0), rng_(seed)
    {
    }

    ActionId act(StateId s) override
    {
        belief_.touch(s);
        return ts_act(belief_, s, rng_);
    }
    void observe(StateId s, ActionId a, StateId next) override { ts_observe(belief_, s, a, next); }
    void end_episode(bool) override {}
    std::string name() const override { return "ts"; }
    const BetaTable* beta_table() const override { return &belief_; }
    const BetaTable& beliefs() const { return belief_; }

private:
    BetaTable belief_;
    Rng rng_;
};

enum class Attribution : std::uint8_t { stepwise, pathwise };

/**
 * MFABL, pMFABL and the hybrid in one class, sharing a single Beta table.
 *
 * Consumers with index < switch_at use pathwise attribution (real outcome
 * rolled back over the path); later consumers use stepwise attribution with
 * sampled feedback. switch_at = 0 is plain MFABL, switch_at = max is pMFABL.
 */
class MfablAgent final : public Agent {
public:
    static constexpr std::uint64_t kNever = std::numeric_limits<std::uint64_t>::max();

    MfablAgent(ActionId num_actions, MfablConfig cfg, std::uint64_t switch_at, std::uint64_t seed)
        : cfg_(cfg), belief_(num_actions, cfg.alpha0, cfg.beta0), switch_at_(switch_at), rng_(seed)
    {
        cfg_.check();
    }

    ActionId act(StateId s) override
    {
        belief_.touch(s);
        return mfabl_act(belief_, s, cfg_.epsilon, rng_);
    }

    void observe(StateId s, ActionId a, StateId next) override
    {
        if (mode() == Attribution::pathwise)
            path_.emplace_back(s, a);
        else
            mfabl_observe(belief_, s, a, next, cfg_, rng_);
    }

    void end_episode(bool converted) override
    {
        const Attribution m = mode();
        if (m == Attribution::pathwise) pmfabl_end_episode(belief_, path_, converted);
        if (record_log_) log_.push_back(m);
        path_.clear();
        ++consumer_;
    }

    std::string name() const override
    {
        if (switch_at_ == 0) return "mfabl";
        if (switch_at_ == kNever) return "pmfabl";
        return "hybrid";
    }

    Attribution mode() const noexcept { return consumer_ < switch_at_ ? Attribution::pathwise : Attribution::stepwise; }
    std::uint64_t consumers_seen() const noexcept { return consumer_; }
    const MfablConfig& config() const noexcept { return cfg_; }

    void record_attribution_log(bool on) { record_log_ = on; }
    /// Attribution rule applied to each finished consumer, when recording is on.
    const std::vector<Attribution>& attribution_log() const noexcept { return log_; }

    const BetaTable* beta_table() const override { return &belief_; }
    const BetaTable& beliefs() const { return belief_; }

private:
    MfablConfig cfg_;
    BetaTable belief_;
    std::uint64_t switch_at_;
    std::uint64_t consumer_ = 0;
    std::vector<std::pair<StateId, ActionId>> path_;
    bool record_log_ = false;
    std::vector<Attribution> log_;
    Rng rng_;
};

inline std::unique_ptr<MfablAgent> make_mfabl(ActionId num_actions, const MfablConfig& cfg, std::uint64_t seed)
{
    return std::make_unique<MfablAgent>(num_actions, cfg, 0, seed);
}
inline std::unique_ptr<MfablAgent> make_pmfabl(ActionId num_actions, const MfablConfig& cfg, std::uint64_t seed)
{
    return std::make_unique<MfablAgent>(num_actions, cfg, MfablAgent::kNever, seed);
}
inline std::unique_ptr<MfablAgent> make_hybrid(ActionId num_actions, const MfablConfig& cfg, std::uint64_t switch_at,
                                               std::uint64_t seed)
{
    return std::make_unique<MfablAgent>(num_actions, cfg, switch_at, seed);
}

/**
 * Posterior sampling over the transition model with Dirichlet beliefs on the
 * given sparsity pattern. Every `reopt_every` consumers it samples a model,
 * checks absorption, solves it by value iteration, and caches the greedy
 * policy until the next re-optimization.
 */
class PsrlAgent final : public Agent {
public:
    static constexpr int kMaxResample = 10;

    PsrlAgent(const TransitionSupport& support, std::uint64_t reopt_every, std::uint64_t seed)
        : counts_(support, 1.0), reopt_every_(reopt_every), rng_(seed),
          policy_(static_cast<std::size_t>(support.num_states), 0)
    {
        if (reopt_every == 0) throw std::invalid_argument("PsrlAgent: reopt_every must be positive");
        for (const auto& r : support.next)
            if (r.empty()) throw std::invalid_argument("PsrlAgent: every (s, a) needs at least one feasible successor");
    }

    ActionId act(StateId s) override
    {
        if (stale_) reoptimize();
        return policy_.at(static_cast<std::size_t>(s));
    }

    void observe(StateId s, ActionId a, StateId next) override
    {
        if (!counts_.observe(s, a, next)) ++off_support_;
    }

    void end_episode(bool) override
    {
        if (++consumer_ % reopt_every_ == 0) stale_ = true;
    }

    std::string name() const override { return "psrl"; }
    const DirichletTable* dirichlet_table() const override { return &counts_; }
    const DirichletTable& counts() const { return counts_; }
    std::span<const ActionId> policy() const { return policy_; }
    int reoptimizations() const noexcept { return reopts_; }
    /// Samples rejected because the sampled model was not absorbing.
    int rejected_samples() const noexcept { return rejected_; }
    /// Observations that fell outside the declared support (ignored).
    std::uint64_t off_support() const noexcept { return off_support_; }

    /// Draws one transition model from the current posterior.
    FunnelMdp sample_model()
    {
        const auto& sup = counts_.support();
        std::vector<std::vector<Outcome>> rows;
        rows.reserve(sup.next.size());
        for (StateId s = 0; s < sup.num_states; ++s)
            for (ActionId a = 0; a < sup.num_actions; ++a) {
                const auto succ = counts_.successors(s, a);
                const auto c = counts_.counts(s, a);
                std::vector<Outcome> row(succ.size());
                double total = 0.0;
                for (std::size_t i = 0; i < succ.size(); ++i) {
                    const double g = std::gamma_distribution<double>(c[i], 1.0)(rng_);
                    row[i] = {succ[i], g};
                    total += g;
                }
                if (total > 0.0) {
                    for (auto& o : row) o.prob /= total;
                } else {
                    for (auto& o : row) o.prob = 1.0 / static_cast<double>(row.size());
                }
                rows.push_back(std::move(row));
            }
        return FunnelMdp(sup.num_states, sup.num_actions, std::move(rows), sup.initial);
    }

private:
    void reoptimize()
    {
        stale_ = false;
        ++reopts_;
        for (int attempt = 0; attempt < kMaxResample; ++attempt) {
            const FunnelMdp model = sample_model();
            if (!check_absorption(model).is_absorbing) {
                ++rejected_;
                continue;
            }
            policy_ = solve_q_star(model).greedy;
            return;
        }
        // Every sample kept a surviving cycle: keep playing the cached policy.
    }

    DirichletTable counts_;
    std::uint64_t reopt_every_;
    Rng rng_;
    std::vector<ActionId> policy_;
    std::uint64_t consumer_ = 0;
    bool stale_ = true;
    int reopts_ = 0;
    int rejected_ = 0;
    std::uint64_t off_support_ = 0;
};

struct QlUcbParams {
    double epsilon = 0.01;
    double gamma = 0.99;
    double delta = 0.01;
    /// Effective horizon H; <= 0 derives it from (epsilon, gamma).
    double horizon = 0.0;
    /// Leading constant of the Hoeffding bonus.
    double bonus_scale = 1.0;

    double effective_horizon() const
    {
        if (horizon > 0.0) return horizon;
        return std::log(1.0 / ((1.0 - gamma) * epsilon)) / std::log(1.0 / gamma);
    }
};

/**
 * Optimistic Q-learning with a Hoeffding exploration bonus (infinite-horizon
 * discounted form). Q and its running minimum start at 1/(1-gamma); the
 * learning rate at the k-th visit is (H+1)/(H+k) and the bonus is
 * c/(1-gamma) * sqrt(H * ln(S A (k+1)(k+2) / delta) / k).
 */
class QlUcbAgent final : public Agent {
public:
    QlUcbAgent(StateId num_states, ActionId num_actions, QlUcbParams params, std::uint64_t seed)
        : num_states_(num_states), num_actions_(num_actions), params_(params), horizon_(params.effective_horizon()),
          init_(1.0 / (1.0 - params.gamma)), rng_(seed)
    {
        if (!(params.gamma > 0.0 && params.gamma < 1.0)) throw std::invalid_argument("QL-UCB: gamma must be in (0,1)");
        if (!(params.delta > 0.0 && params.delta < 1.0)) throw std::invalid_argument("QL-UCB: delta must be in (0,1)");
        if (!(params.epsilon > 0.0)) throw std::invalid_argument("QL-UCB: epsilon must be positive");
    }

    double bonus(double k) const
    {
        const double iota =
            std::log(static_cast<double>(num_states_) * num_actions_ * (k + 1.0) * (k + 2.0) / params_.delta);
        return params_.bonus_scale / (1.0 - params_.gamma) * std::sqrt(horizon_ * iota / k);
    }
    double learning_rate(double k) const { return (horizon_ + 1.0) / (horizon_ + k); }
    double horizon() const noexcept { return horizon_; }

    ActionId act(StateId s) override
    {
        const auto& row = cells(s);
        double v[16]{};
        std::vector<double> spill;
        double* q = v;
        if (num_actions_ > 16) {
            spill.resize(static_cast<std::size_t>(num_actions_));
            q = spill.data();
        }
        for (ActionId a = 0; a < num_actions_; ++a) q[a] = row[a].q_hat;
        return detail::argmax_uniform_ties(std::span<const double>(q, static_cast<std::size_t>(num_actions_)), rng_);
    }

    void observe(StateId s, ActionId a, StateId next) override
    {
        double target;
        if (next == kConvert)
            target = 1.0;
        else if (next == kQuit)
            target = 0.0;
        else
            target = params_.gamma * value_hat(next);
        auto& c = cells(s)[a];
        c.visits += 1.0;
        const double k = c.visits;
        const double lr = learning_rate(k);
        c.q = (1.0 - lr) * c.q + lr * (target + bonus(k));
        c.q_hat = std::min(c.q_hat, c.q);
    }

    void end_episode(bool) override {}
    std::string name() const override { return "qlucb"; }

    /// Optimistic value at (s, a); initial value for unvisited states.
    double q_hat(StateId s, ActionId a) const
    {
        auto it = table_.find(s);
        return it == table_.end() ? init_ : it->second[a].q_hat;
    }
    double visits(StateId s, ActionId a) const
    {
        auto it = table_.find(s);
        return it == table_.end() ? 0.0 : it->second[a].visits;
    }
    static double terminal_value(StateId s) { return s == kConvert ? 1.0 : 0.0; }

private:
    struct Cell {
        double q, q_hat, visits;
    };

    std::vector<Cell>& cells(StateId s)
    {
        auto [it, fresh] = table_.try_emplace(s);
        if (fresh) it->second.assign(static_cast<std::size_t>(num_actions_), Cell{init_, init_, 0.0});
        return it->second;
    }

    double value_hat(StateId s) const
    {
        auto it = table_.find(s);
        if (it == table_.end()) return init_;
        double best = it->second[0].q_hat;
        for (const auto& c : it->second) best = std::max(best, c.q_hat);
        return best;
    }

    StateId num_states_;
    ActionId num_actions_;
    QlUcbParams params_;
    double horizon_;
    double init_;
    Rng rng_;
    std::unordered_map<StateId, std::vector<Cell>> table_;
};

/// Plays a fixed deterministic policy and learns nothing.
class FixedPolicyAgent final : public Agent {
public:
    FixedPolicyAgent(std::vector<ActionId> choice, std::string label = "fixed")
        : choice_(std::move(choice)), label_(std::move(label))
    {
    }

    ActionId act(StateId s) override { return choice_.at(static_cast<std::size_t>(s)); }
    void observe(StateId, ActionId, StateId) override {}
    void end_episode(bool) override {}
    std::string name() const override { return label_; }

private:
    std::vector<ActionId> choice_;
    std::string label_;
};

/// Greedy replay of Q* on the ground truth.
inline std::unique_ptr<FixedPolicyAgent> make_optimal_agent(const FunnelMdp& mdp)
{
    return std::make_unique<FixedPolicyAgent>(solve_q_star(mdp).greedy, "optimal");
}

/// Passes every state through a projection before the inner agent sees it.
class ProjectedAgent final : public Agent {
public:
    ProjectedAgent(std::unique_ptr<Agent> inner, StateProjection projection)
        : inner_(std::move(inner)), projection_(std::move(projection))
    {
        if (!inner_) throw std::invalid_argument("ProjectedAgent: null inner agent");
    }

    ActionId act(StateId s) override { return inner_->act(projection_(s)); }
    void observe(StateId s, ActionId a, StateId next) override { inner_->observe(projection_(s), a, projection_(next)); }
    void end_episode(bool converted) override { inner_->end_episode(converted); }
    std::string name() const override { return inner_->name() + "@projected"; }
    const BetaTable* beta_table() const override { return inner_->beta_table(); }
    const DirichletTable* dirichlet_table() const override { return inner_->dirichlet_table(); }

    const Agent& inner() const { return *inner_; }
    const StateProjection& projection() const { return projection_; }

private:
    std::unique_ptr<Agent> inner_;
    StateProjection projection_;
};

inline std::unique_ptr<Agent> wrap_misspecified(std::unique_ptr<Agent> agent, StateProjection projection)
{
    return std::make_unique<ProjectedAgent>(std::move(agent), std::move(projection));
}

}  // namespace funnel
