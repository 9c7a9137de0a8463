#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "funnel/mdp.hpp"

namespace funnel {

/// Action values per (s, a), row-major by state. Terminal values are implied: Q(c,.) = 1, Q(q,.) = 0.
class QTable {
public:
    QTable() = default;
    QTable(StateId num_states, ActionId num_actions, double fill = 0.0)
        : num_states_(num_states), num_actions_(num_actions),
          values_(static_cast<std::size_t>(num_states) * static_cast<std::size_t>(num_actions), fill)
    {
    }

    StateId num_states() const noexcept { return num_states_; }
    ActionId num_actions() const noexcept { return num_actions_; }

    double& operator()(StateId s, ActionId a) { return values_[static_cast<std::size_t>(s) * num_actions_ + a]; }
    double operator()(StateId s, ActionId a) const
    {
        if (s == kConvert) return 1.0;
        if (s == kQuit) return 0.0;
        return values_[static_cast<std::size_t>(s) * num_actions_ + a];
    }

    /// max_a Q(s, a), with the terminal conventions.
    double max_value(StateId s) const
    {
        if (s == kConvert) return 1.0;
        if (s == kQuit) return 0.0;
        const auto* row = values_.data() + static_cast<std::size_t>(s) * num_actions_;
        return *std::max_element(row, row + num_actions_);
    }

    /// Lowest-index maximizer.
    ActionId greedy(StateId s) const
    {
        const auto* row = values_.data() + static_cast<std::size_t>(s) * num_actions_;
        return static_cast<ActionId>(std::max_element(row, row + num_actions_) - row);
    }

    std::span<const double> values() const noexcept { return values_; }
    std::span<double> values() noexcept { return values_; }

    friend bool operator==(const QTable&, const QTable&) = default;

private:
    StateId num_states_ = 0;
    ActionId num_actions_ = 0;
    std::vector<double> values_;
};

using ValueTable = std::vector<double>;

/// Stochastic policy pi(a | s).
class Policy {
public:
    Policy() = default;
    Policy(StateId num_states, ActionId num_actions)
        : num_states_(num_states), num_actions_(num_actions),
          probs_(static_cast<std::size_t>(num_states) * static_cast<std::size_t>(num_actions), 0.0)
    {
    }

    static Policy deterministic(ActionId num_actions, std::span<const ActionId> choice)
    {
        Policy p(static_cast<StateId>(choice.size()), num_actions);
        for (std::size_t s = 0; s < choice.size(); ++s) p(static_cast<StateId>(s), choice[s]) = 1.0;
        return p;
    }

    static Policy uniform(StateId num_states, ActionId num_actions)
    {
        Policy p(num_states, num_actions);
        std::fill(p.probs_.begin(), p.probs_.end(), 1.0 / num_actions);
        return p;
    }

    StateId num_states() const noexcept { return num_states_; }
    ActionId num_actions() const noexcept { return num_actions_; }
    double& operator()(StateId s, ActionId a) { return probs_[static_cast<std::size_t>(s) * num_actions_ + a]; }
    double operator()(StateId s, ActionId a) const { return probs_[static_cast<std::size_t>(s) * num_actions_ + a]; }

    bool is_valid(double tol = 1e-12) const
    {
        for (StateId s = 0; s < num_states_; ++s) {
            double sum = 0.0;
            for (ActionId a = 0; a < num_actions_; ++a) {
                const double p = (*this)(s, a);
                if (!(p >= 0.0)) return false;
                sum += p;
            }
            if (std::abs(sum - 1.0) > tol) return false;
        }
        return true;
    }

private:
    StateId num_states_ = 0;
    ActionId num_actions_ = 0;
    std::vector<double> probs_;
};

/// One application of F: out(s,a) = sum_{s'} p(s,a,s') max_{a'} q(s',a').
inline QTable bellman_backup(const FunnelMdp& mdp, const QTable& q)
{
    ValueTable v(static_cast<std::size_t>(mdp.num_states()));
    for (StateId s = 0; s < mdp.num_states(); ++s) v[s] = q.max_value(s);
    QTable out(mdp.num_states(), mdp.num_actions());
    for (StateId s = 0; s < mdp.num_states(); ++s)
        for (ActionId a = 0; a < mdp.num_actions(); ++a) {
            double acc = 0.0;
            for (const auto& o : mdp.row(s, a)) {
                if (o.next == kConvert)
                    acc += o.prob;
                else if (o.next != kQuit)
                    acc += o.prob * v[o.next];
            }
            out(s, a) = acc;
        }
    return out;
}

struct PlanResult {
    QTable q;
    ValueTable v;
    std::vector<ActionId> greedy;  // lowest-index tie-break
    Policy policy;
    int iterations = 0;
};

inline constexpr double kPlannerTol = 1e-10;
inline constexpr int kPlannerMaxIter = 100'000;

/**
 * Value iteration from Q = 0 until the sup-norm change drops below `tol`.
 * Iterates are monotone non-decreasing and bounded by 1 under absorption.
 */
inline PlanResult solve_q_star(const FunnelMdp& mdp, double tol = kPlannerTol, int max_iter = kPlannerMaxIter)
{
    const auto S = static_cast<std::size_t>(mdp.num_states());
    QTable q(mdp.num_states(), mdp.num_actions());
    ValueTable v(S, 0.0);
    int it = 0;
    for (;;) {
        if (++it > max_iter)
            throw std::runtime_error("solve_q_star: no convergence within " + std::to_string(max_iter) +
                                     " iterations (model may be close to non-absorbing)");
        double change = 0.0;
        for (StateId s = 0; s < mdp.num_states(); ++s)
            for (ActionId a = 0; a < mdp.num_actions(); ++a) {
                double acc = 0.0;
                for (const auto& o : mdp.row(s, a)) {
                    if (o.next == kConvert)
                        acc += o.prob;
                    else if (o.next != kQuit)
                        acc += o.prob * v[o.next];
                }
                change = std::max(change, std::abs(acc - q(s, a)));
                q(s, a) = acc;
            }
        // Synchronous sweep: values are refreshed only after every row has been backed up.
        for (StateId s = 0; s < mdp.num_states(); ++s) v[s] = q.max_value(s);
        if (change < tol) break;
    }
    PlanResult out;
    out.iterations = it;
    out.greedy.resize(S);
    for (StateId s = 0; s < mdp.num_states(); ++s) out.greedy[s] = q.greedy(s);
    out.policy = Policy::deterministic(mdp.num_actions(), out.greedy);
    out.q = std::move(q);
    out.v = std::move(v);
    return out;
}

struct PolicyEvaluation {
    ValueTable v;
    QTable q;
};

inline constexpr StateId kDirectSolveLimit = 2000;

/**
 * V^pi and Q^pi. Q^pi(s,a) splits into the long-run value sum_{s' active}
 * p V^pi(s') plus the one-step value p(s,a,c). Direct LU solve up to
 * kDirectSolveLimit states, fixed-point evaluation above.
 */
inline PolicyEvaluation policy_value(const FunnelMdp& mdp, const Policy& pi)
{
    if (pi.num_states() != mdp.num_states() || pi.num_actions() != mdp.num_actions())
        throw std::invalid_argument("policy_value: policy shape does not match the MDP");
    if (!pi.is_valid(1e-9)) throw std::invalid_argument("policy_value: policy rows must be distributions");

    const StateId S = mdp.num_states();
    ValueTable v(static_cast<std::size_t>(S), 0.0);

    if (S <= kDirectSolveLimit) {
        Eigen::MatrixXd m = Eigen::MatrixXd::Identity(S, S);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(S);
        for (StateId s = 0; s < S; ++s)
            for (ActionId a = 0; a < mdp.num_actions(); ++a) {
                const double w = pi(s, a);
                if (w == 0.0) continue;
                for (const auto& o : mdp.row(s, a)) {
                    if (o.next == kConvert)
                        rhs(s) += w * o.prob;
                    else if (o.next != kQuit)
                        m(s, o.next) -= w * o.prob;
                }
            }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
        if (!lu.isInvertible()) throw std::runtime_error("policy_value: singular system (policy never absorbs)");
        const Eigen::VectorXd x = lu.solve(rhs);
        const double residual = (m * x - rhs).cwiseAbs().maxCoeff();
        if (!(residual < 1e-9)) throw std::runtime_error("policy_value: ill-conditioned system, residual " + std::to_string(residual));
        for (StateId s = 0; s < S; ++s) v[s] = std::clamp(x(s), 0.0, 1.0);
    } else {
        ValueTable next(v.size());
        for (int it = 0;; ++it) {
            if (it > kPlannerMaxIter) throw std::runtime_error("policy_value: iterative evaluation did not converge");
            double change = 0.0;
            for (StateId s = 0; s < S; ++s) {
                double acc = 0.0;
                for (ActionId a = 0; a < mdp.num_actions(); ++a) {
                    const double w = pi(s, a);
                    if (w == 0.0) continue;
                    for (const auto& o : mdp.row(s, a)) {
                        if (o.next == kConvert)
                            acc += w * o.prob;
                        else if (o.next != kQuit)
                            acc += w * o.prob * v[o.next];
                    }
                }
                next[s] = acc;
                change = std::max(change, std::abs(acc - v[s]));
            }
            v.swap(next);
            if (change < 1e-13) break;
        }
    }

    QTable q(S, mdp.num_actions());
    for (StateId s = 0; s < S; ++s)
        for (ActionId a = 0; a < mdp.num_actions(); ++a) {
            double long_run = 0.0, one_step = 0.0;
            for (const auto& o : mdp.row(s, a)) {
                if (o.next == kConvert)
                    one_step += o.prob;
                else if (o.next != kQuit)
                    long_run += o.prob * v[o.next];
            }
            q(s, a) = long_run + one_step;
        }
    return {std::move(v), std::move(q)};
}

/// v* = sum_s lambda_s V*_s.
inline double optimal_conversion_rate(const FunnelMdp& mdp, std::span<const double> v_star)
{
    if (v_star.size() != static_cast<std::size_t>(mdp.num_states()))
        throw std::invalid_argument("optimal_conversion_rate: value table size mismatch");
    double acc = 0.0;
    for (StateId s = 0; s < mdp.num_states(); ++s) acc += mdp.initial()[s] * v_star[s];
    return acc;
}

/// Value of a fixed policy under the initial distribution.
inline double conversion_rate(const FunnelMdp& mdp, const Policy& pi)
{
    const auto ev = policy_value(mdp, pi);
    return optimal_conversion_rate(mdp, ev.v);
}

inline constexpr StateId kBruteForceMaxStates = 8;
inline constexpr ActionId kBruteForceMaxActions = 3;

/**
 * Enumerates every deterministic policy and takes the pointwise maximum of
 * Q^pi. Independent of value iteration; only meant for tiny instances.
 */
inline QTable brute_force_q_star(const FunnelMdp& mdp)
{
    const StateId S = mdp.num_states();
    const ActionId A = mdp.num_actions();
    if (S > kBruteForceMaxStates || A > kBruteForceMaxActions)
        throw std::invalid_argument("brute_force_q_star: instance too large (S <= 8 and A+1 <= 3 required)");

    QTable best(S, A, -std::numeric_limits<double>::infinity());
    std::vector<ActionId> choice(static_cast<std::size_t>(S), 0);
    for (;;) {
        const auto ev = policy_value(mdp, Policy::deterministic(A, choice));
        for (StateId s = 0; s < S; ++s)
            for (ActionId a = 0; a < A; ++a) best(s, a) = std::max(best(s, a), ev.q(s, a));
        // Odometer increment over A^S choices.
        std::size_t k = 0;
        while (k < choice.size() && ++choice[k] == A) choice[k++] = 0;
        if (k == choice.size()) break;
    }
    return best;
}

inline double max_abs_diff(const QTable& x, const QTable& y)
{
    if (x.num_states() != y.num_states() || x.num_actions() != y.num_actions())
        throw std::invalid_argument("max_abs_diff: shape mismatch");
    double d = 0.0;
    for (std::size_t i = 0; i < x.values().size(); ++i) d = std::max(d, std::abs(x.values()[i] - y.values()[i]));
    return d;
}

// CSV export: state,action,value / state,action,prob, row-major by state.

inline void write_q_csv(std::ostream& os, const QTable& q)
{
    os << "state,action,value\n";
    os.precision(17);
    for (StateId s = 0; s < q.num_states(); ++s)
        for (ActionId a = 0; a < q.num_actions(); ++a) os << s << ',' << a << ',' << q(s, a) << '\n';
}

inline void write_policy_csv(std::ostream& os, const Policy& pi)
{
    os << "state,action,prob\n";
    os.precision(17);
    for (StateId s = 0; s < pi.num_states(); ++s)
        for (ActionId a = 0; a < pi.num_actions(); ++a) os << s << ',' << a << ',' << pi(s, a) << '\n';
}

}  // namespace funnel
