#pragma once

#include <algorithm>
#include <ostream>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "funnel/mdp.hpp"

namespace funnel {

struct BetaCounts {
    double alpha = 1.0;
    double beta = 1.0;
    /// Visits since allocation (every applied update counts once).
    double visits = 0.0;
    /// alpha + beta at allocation; the step-size schedule counts from here.
    double base = 2.0;

    double mean() const noexcept { return alpha / (alpha + beta); }
    double variance() const noexcept
    {
        const double n = alpha + beta;
        return alpha * beta / (n * n * (n + 1.0));
    }
    /// Effective sample size used by the polynomial and discounted schedules.
    double schedule_count() const noexcept { return base + visits; }
};

/**
 * Beta(alpha, beta) belief per (state, action), allocated lazily: a state's
 * row exists only once the state has been visited. Reads of unvisited
 * states return the prior without allocating.
 */
class BetaTable {
public:
    BetaTable() = default;
    BetaTable(ActionId num_actions, double alpha0, double beta0) : num_actions_(num_actions), alpha0_(alpha0), beta0_(beta0)
    {
        if (num_actions <= 0) throw std::invalid_argument("BetaTable: need at least one action");
        if (!(alpha0 > 0.0) || !(beta0 > 0.0)) throw std::invalid_argument("BetaTable: prior counts must be positive");
    }

    ActionId num_actions() const noexcept { return num_actions_; }
    double alpha0() const noexcept { return alpha0_; }
    double beta0() const noexcept { return beta0_; }

    /// Row for `s`, allocating it from the prior on first touch.
    std::span<BetaCounts> touch(StateId s)
    {
        auto [it, fresh] = row_of_.try_emplace(s, states_.size());
        if (fresh) {
            states_.push_back(s);
            const BetaCounts prior{alpha0_, beta0_, 0.0, alpha0_ + beta0_};
            cells_.insert(cells_.end(), static_cast<std::size_t>(num_actions_), prior);
        }
        return {cells_.data() + it->second * num_actions_, static_cast<std::size_t>(num_actions_)};
    }

    BetaCounts& at(StateId s, ActionId a) { return touch(s)[static_cast<std::size_t>(a)]; }

    /// Read-only view; prior for unvisited states.
    BetaCounts get(StateId s, ActionId a) const
    {
        auto it = row_of_.find(s);
        if (it == row_of_.end()) return {alpha0_, beta0_, 0.0, alpha0_ + beta0_};
        return cells_[it->second * num_actions_ + a];
    }

    bool visited(StateId s) const { return row_of_.contains(s); }
    std::size_t num_allocated_states() const noexcept { return states_.size(); }
    std::size_t num_entries() const noexcept { return cells_.size(); }

    /// max_a alpha/(alpha+beta) at s.
    double best_mean(StateId s) const
    {
        auto it = row_of_.find(s);
        if (it == row_of_.end()) return alpha0_ / (alpha0_ + beta0_);
        const auto* row = cells_.data() + it->second * num_actions_;
        double best = row[0].mean();
        for (ActionId a = 1; a < num_actions_; ++a) best = std::max(best, row[a].mean());
        return best;
    }

    /// Visits every allocated (state, action, counts) in allocation order.
    template <class F>
    void for_each(F&& f) const
    {
        for (std::size_t i = 0; i < states_.size(); ++i)
            for (ActionId a = 0; a < num_actions_; ++a) f(states_[i], a, cells_[i * num_actions_ + a]);
    }

    friend bool operator==(const BetaTable& x, const BetaTable& y)
    {
        if (x.num_actions_ != y.num_actions_ || x.states_ != y.states_) return false;
        for (std::size_t i = 0; i < x.cells_.size(); ++i)
            if (x.cells_[i].alpha != y.cells_[i].alpha || x.cells_[i].beta != y.cells_[i].beta ||
                x.cells_[i].visits != y.cells_[i].visits)
                return false;
        return true;
    }

private:
    ActionId num_actions_ = 0;
    double alpha0_ = 1.0;
    double beta0_ = 1.0;
    std::unordered_map<StateId, std::size_t> row_of_;
    std::vector<StateId> states_;
    std::vector<BetaCounts> cells_;
};

/// CSV snapshot: state,action,alpha,beta,n. Rows sorted by (state, action).
inline void write_beta_csv(std::ostream& os, const BetaTable& table)
{
    struct Row {
        StateId s;
        ActionId a;
        BetaCounts c;
    };
    std::vector<Row> rows;
    table.for_each([&](StateId s, ActionId a, const BetaCounts& c) { rows.push_back({s, a, c}); });
    std::sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) { return x.s != y.s ? x.s < y.s : x.a < y.a; });
    os << "state,action,alpha,beta,n\n";
    os.precision(17);
    for (const auto& r : rows) os << r.s << ',' << r.a << ',' << r.c.alpha << ',' << r.c.beta << ',' << r.c.visits << '\n';
}

/**
 * Dirichlet counts over the feasible successors of each (s, a). The support
 * is fixed at construction; infeasible triples have no entry at all.
 */
class DirichletTable {
public:
    DirichletTable() = default;
    explicit DirichletTable(const TransitionSupport& support, double initial_count = 1.0) : support_(support)
    {
        offsets_.reserve(support.next.size() + 1);
        offsets_.push_back(0);
        for (const auto& r : support.next) {
            counts_.insert(counts_.end(), r.size(), initial_count);
            offsets_.push_back(counts_.size());
        }
    }

    const TransitionSupport& support() const noexcept { return support_; }
    StateId num_states() const noexcept { return support_.num_states; }
    ActionId num_actions() const noexcept { return support_.num_actions; }

    std::span<const StateId> successors(StateId s, ActionId a) const { return support_.row(s, a); }
    std::span<const double> counts(StateId s, ActionId a) const
    {
        const auto k = key(s, a);
        return {counts_.data() + offsets_[k], offsets_[k + 1] - offsets_[k]};
    }

    /// Count of (s, a, next); throws if the triple is outside the support.
    double count(StateId s, ActionId a, StateId next) const
    {
        const auto succ = successors(s, a);
        auto it = std::find(succ.begin(), succ.end(), next);
        if (it == succ.end()) throw std::out_of_range("DirichletTable: infeasible transition");
        return counts(s, a)[static_cast<std::size_t>(it - succ.begin())];
    }

    /// Adds one observation. Returns false (and changes nothing) for a triple outside the support.
    bool observe(StateId s, ActionId a, StateId next)
    {
        const auto k = key(s, a);
        const auto succ = support_.row(s, a);
        for (std::size_t i = 0; i < succ.size(); ++i)
            if (succ[i] == next) {
                counts_[offsets_[k] + i] += 1.0;
                return true;
            }
        return false;
    }

    std::size_t num_entries() const noexcept { return counts_.size(); }

    /// CSV snapshot: state,action,next,count.
    void write_csv(std::ostream& os) const
    {
        os << "state,action,next,count\n";
        os.precision(17);
        for (StateId s = 0; s < num_states(); ++s)
            for (ActionId a = 0; a < num_actions(); ++a) {
                const auto succ = successors(s, a);
                const auto c = counts(s, a);
                for (std::size_t i = 0; i < succ.size(); ++i) os << s << ',' << a << ',' << state_label(succ[i]) << ',' << c[i] << '\n';
            }
    }

private:
    std::size_t key(StateId s, ActionId a) const
    {
        if (s < 0 || s >= support_.num_states || a < 0 || a >= support_.num_actions)
            throw std::out_of_range("DirichletTable: (state, action) out of range");
        return static_cast<std::size_t>(s) * support_.num_actions + a;
    }

    TransitionSupport support_;
    std::vector<std::size_t> offsets_;
    std::vector<double> counts_;
};

}  // namespace funnel
