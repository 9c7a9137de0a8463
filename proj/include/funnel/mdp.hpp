#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "funnel/rng.hpp"

namespace funnel {

/// Active states are 0..S-1; the two absorbing states live outside that range.
using StateId = std::int32_t;
/// Actions are 0..A, with 0 meaning "no intervention" in funnel instances.
using ActionId = std::int32_t;

inline constexpr StateId kConvert = -1;
inline constexpr StateId kQuit = -2;

constexpr bool is_terminal(StateId s) noexcept { return s == kConvert || s == kQuit; }

inline std::string state_label(StateId s)
{
    if (s == kConvert) return "c";
    if (s == kQuit) return "q";
    return std::to_string(s);
}

struct Outcome {
    StateId next;
    double prob;

    friend bool operator==(const Outcome&, const Outcome&) = default;
};

/**
 * Conversion-funnel MDP with terminal reward 1 on entering kConvert.
 *
 * Rows are stored compactly per (state, action); the self-loops of the two
 * absorbing states are implied and never materialized. The object is
 * immutable once built, so one instance can be shared by any number of
 * simulation workers.
 *
 * The constructor checks shape only (sizes and index ranges). Probability
 * semantics are checked by validate() and check_absorption().
 */
class FunnelMdp {
public:
    FunnelMdp() = default;

    /// `rows[s * num_actions + a]` lists the successors of (s, a).
    FunnelMdp(StateId num_states, ActionId num_actions, std::vector<std::vector<Outcome>> rows,
              std::vector<double> initial)
        : num_states_(num_states), num_actions_(num_actions), initial_(std::move(initial))
    {
        if (num_states <= 0) throw std::invalid_argument("FunnelMdp: need at least one state");
        if (num_actions <= 0) throw std::invalid_argument("FunnelMdp: need at least one action");
        const auto expected = static_cast<std::size_t>(num_states) * static_cast<std::size_t>(num_actions);
        if (rows.size() != expected) throw std::invalid_argument("FunnelMdp: row count != S * (A+1)");
        if (initial_.size() != static_cast<std::size_t>(num_states))
            throw std::invalid_argument("FunnelMdp: initial distribution size != S");

        offsets_.reserve(expected + 1);
        for (const auto& row : rows) {
            for (const auto& o : row) {
                if (!is_terminal(o.next) && (o.next < 0 || o.next >= num_states))
                    throw std::invalid_argument("FunnelMdp: successor " + std::to_string(o.next) + " out of range");
                outcomes_.push_back(o);
            }
            offsets_.push_back(outcomes_.size());
        }
    }

    StateId num_states() const noexcept { return num_states_; }
    ActionId num_actions() const noexcept { return num_actions_; }

    std::span<const Outcome> row(StateId s, ActionId a) const
    {
        const auto k = index(s, a);
        return {outcomes_.data() + offsets_[k], offsets_[k + 1] - offsets_[k]};
    }

    std::span<const double> initial() const noexcept { return initial_; }

    /// Number of stored (s, a, s') triples.
    std::size_t num_outcomes() const noexcept { return outcomes_.size(); }

    bool contains(StateId s) const noexcept { return s >= 0 && s < num_states_; }
    bool contains_action(ActionId a) const noexcept { return a >= 0 && a < num_actions_; }

    friend bool operator==(const FunnelMdp& x, const FunnelMdp& y)
    {
        return x.num_states_ == y.num_states_ && x.num_actions_ == y.num_actions_ && x.initial_ == y.initial_ &&
               x.offsets_ == y.offsets_ && x.outcomes_ == y.outcomes_;
    }

private:
    std::size_t index(StateId s, ActionId a) const
    {
        if (!contains(s)) throw std::out_of_range("state " + std::to_string(s) + " is not an active state");
        if (!contains_action(a)) throw std::out_of_range("action " + std::to_string(a) + " out of range");
        return static_cast<std::size_t>(s) * static_cast<std::size_t>(num_actions_) + static_cast<std::size_t>(a);
    }

    StateId num_states_ = 0;
    ActionId num_actions_ = 0;
    std::vector<double> initial_;
    std::vector<std::size_t> offsets_{0};
    std::vector<Outcome> outcomes_;
};

/// Copies the rows of an MDP back into the nested form the constructor takes.
inline std::vector<std::vector<Outcome>> rows_of(const FunnelMdp& mdp)
{
    std::vector<std::vector<Outcome>> rows;
    rows.reserve(static_cast<std::size_t>(mdp.num_states()) * mdp.num_actions());
    for (StateId s = 0; s < mdp.num_states(); ++s)
        for (ActionId a = 0; a < mdp.num_actions(); ++a) {
            auto r = mdp.row(s, a);
            rows.emplace_back(r.begin(), r.end());
        }
    return rows;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct Violation {
    enum class Kind { probability_range, row_sum, duplicate_successor, initial_sum, initial_negative, empty_initial, unreachable };
    Kind kind;
    StateId state = -1;
    ActionId action = -1;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;

    bool ok() const noexcept { return violations.empty(); }
    bool has(Violation::Kind k) const
    {
        return std::any_of(violations.begin(), violations.end(), [k](const Violation& v) { return v.kind == k; });
    }
};

inline constexpr double kRowTolerance = 1e-12;

/// Active states reachable from the support of the initial distribution under some policy.
inline std::vector<bool> reachable_states(const FunnelMdp& mdp)
{
    std::vector<bool> seen(static_cast<std::size_t>(mdp.num_states()), false);
    std::queue<StateId> frontier;
    for (StateId s = 0; s < mdp.num_states(); ++s)
        if (mdp.initial()[s] > 0.0) {
            seen[s] = true;
            frontier.push(s);
        }
    while (!frontier.empty()) {
        const StateId s = frontier.front();
        frontier.pop();
        for (ActionId a = 0; a < mdp.num_actions(); ++a)
            for (const auto& o : mdp.row(s, a))
                if (!is_terminal(o.next) && o.prob > 0.0 && !seen[o.next]) {
                    seen[o.next] = true;
                    frontier.push(o.next);
                }
    }
    return seen;
}

inline ValidationReport validate(const FunnelMdp& mdp)
{
    ValidationReport report;
    auto add = [&](Violation::Kind k, StateId s, ActionId a, std::string msg) {
        report.violations.push_back({k, s, a, std::move(msg)});
    };

    for (StateId s = 0; s < mdp.num_states(); ++s) {
        for (ActionId a = 0; a < mdp.num_actions(); ++a) {
            const auto row = mdp.row(s, a);
            double sum = 0.0;
            std::vector<StateId> nexts;
            nexts.reserve(row.size());
            for (const auto& o : row) {
                if (!(o.prob >= 0.0 && o.prob <= 1.0))
                    add(Violation::Kind::probability_range, s, a,
                        "p(" + std::to_string(s) + "," + std::to_string(a) + "," + state_label(o.next) + ") = " +
                            std::to_string(o.prob) + " outside [0,1]");
                sum += o.prob;
                nexts.push_back(o.next);
            }
            if (std::abs(sum - 1.0) > kRowTolerance)
                add(Violation::Kind::row_sum, s, a,
                    "row (" + std::to_string(s) + "," + std::to_string(a) + ") sums to " + std::to_string(sum));
            std::sort(nexts.begin(), nexts.end());
            if (std::adjacent_find(nexts.begin(), nexts.end()) != nexts.end())
                add(Violation::Kind::duplicate_successor, s, a,
                    "row (" + std::to_string(s) + "," + std::to_string(a) + ") lists a successor twice");
        }
    }

    double total = 0.0;
    bool any_positive = false;
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        const double w = mdp.initial()[s];
        if (!(w >= 0.0)) add(Violation::Kind::initial_negative, s, -1, "initial weight of state " + std::to_string(s) + " is negative");
        if (w > 0.0) any_positive = true;
        total += w;
    }
    if (!any_positive) add(Violation::Kind::empty_initial, -1, -1, "initial distribution has empty support");
    if (std::abs(total - 1.0) > kRowTolerance)
        add(Violation::Kind::initial_sum, -1, -1, "initial distribution sums to " + std::to_string(total));

    if (any_positive) {
        const auto seen = reachable_states(mdp);
        for (StateId s = 0; s < mdp.num_states(); ++s)
            if (!seen[s])
                add(Violation::Kind::unreachable, s, -1, "state " + std::to_string(s) + " is unreachable from the initial support");
    }
    return report;
}

/// Throws std::invalid_argument listing the first few violations.
inline void require_valid(const FunnelMdp& mdp)
{
    const auto report = validate(mdp);
    if (report.ok()) return;
    std::string msg = "invalid MDP:";
    for (std::size_t i = 0; i < std::min<std::size_t>(report.violations.size(), 5); ++i)
        msg += " " + report.violations[i].message + ";";
    if (report.violations.size() > 5) msg += " (" + std::to_string(report.violations.size() - 5) + " more)";
    throw std::invalid_argument(msg);
}

struct AbsorptionReport {
    bool is_absorbing = false;
    /// Upper bound on the probability of never absorbing, under any policy.
    double max_survival_prob = 1.0;
    bool converged = false;
    int iterations = 0;
    /// Last iterate of the survival vector.
    std::vector<double> survival;
};

/**
 * Iterates x_s <- max_a sum_{s' active} p(s,a,s') x_{s'} from x = 1.
 *
 * Stops once the max entry drops below `tol` (absorbing) or the iterate stops
 * moving (a surviving policy exists). Hitting `max_iter` first leaves
 * `converged == false`.
 */
inline AbsorptionReport check_absorption(const FunnelMdp& mdp, double tol = 1e-9, int max_iter = 10'000)
{
    AbsorptionReport out;
    std::vector<double> x(static_cast<std::size_t>(mdp.num_states()), 1.0);
    std::vector<double> next(x.size());
    for (int it = 1; it <= max_iter; ++it) {
        double max_entry = 0.0;
        double change = 0.0;
        for (StateId s = 0; s < mdp.num_states(); ++s) {
            double best = 0.0;
            for (ActionId a = 0; a < mdp.num_actions(); ++a) {
                double stay = 0.0;
                for (const auto& o : mdp.row(s, a))
                    if (!is_terminal(o.next)) stay += o.prob * x[o.next];
                best = std::max(best, stay);
            }
            // Rounding may push a sub-stochastic sum a hair above the previous value.
            best = std::min(best, x[s]);
            next[s] = best;
            max_entry = std::max(max_entry, best);
            change = std::max(change, x[s] - best);
        }
        x.swap(next);
        out.iterations = it;
        out.max_survival_prob = max_entry;
        if (max_entry < tol) {
            out.converged = true;
            break;
        }
        if (change < tol * 1e-3) {
            out.converged = true;
            break;
        }
    }
    out.is_absorbing = out.converged && out.max_survival_prob < tol;
    out.survival = std::move(x);
    return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Inverse-CDF pick from a sparse distribution given a uniform draw in [0,1).
inline StateId pick_successor(std::span<const Outcome> row, double u)
{
    double acc = 0.0;
    for (const auto& o : row) {
        acc += o.prob;
        if (u < acc) return o.next;
    }
    // u landed in the rounding slack at the top; return the last positive entry.
    for (auto it = row.rbegin(); it != row.rend(); ++it)
        if (it->prob > 0.0) return it->next;
    throw std::logic_error("pick_successor: empty row");
}

template <class URBG>
StateId sample_initial(const FunnelMdp& mdp, URBG& rng)
{
    const double u = unit(rng);
    double acc = 0.0;
    StateId last = -1;
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        const double w = mdp.initial()[s];
        if (w <= 0.0) continue;
        acc += w;
        last = s;
        if (u < acc) return s;
    }
    if (last < 0) throw std::logic_error("sample_initial: empty initial support");
    return last;
}

template <class URBG>
StateId step(const FunnelMdp& mdp, StateId s, ActionId a, URBG& rng)
{
    const auto row = mdp.row(s, a);  // throws on out-of-range s / a
    return pick_successor(row, unit(rng));
}

// ---------------------------------------------------------------------------
// Hand-built instances and transformations
// ---------------------------------------------------------------------------

/**
 * The single-state two-ad bandit: action 1 converts w.p. 0.3, action 2 never
 * converts. Slot 0 is the no-intervention action, which also never converts.
 */
inline FunnelMdp bandit_example()
{
    std::vector<std::vector<Outcome>> rows = {
        {{kQuit, 1.0}},
        {{kConvert, 0.3}, {kQuit, 0.7}},
        {{kQuit, 1.0}},
    };
    return FunnelMdp(1, 3, std::move(rows), {1.0});
}

/// Output row (s, a) is input row (s, perm[a]); perm must be a bijection on 0..A.
inline FunnelMdp permute_actions(const FunnelMdp& mdp, std::span<const ActionId> perm)
{
    const auto n = static_cast<std::size_t>(mdp.num_actions());
    if (perm.size() != n) throw std::invalid_argument("permute_actions: permutation has wrong length");
    std::vector<bool> hit(n, false);
    for (ActionId p : perm) {
        if (p < 0 || static_cast<std::size_t>(p) >= n || hit[p])
            throw std::invalid_argument("permute_actions: not a bijection on the action set");
        hit[p] = true;
    }
    std::vector<std::vector<Outcome>> rows;
    rows.reserve(static_cast<std::size_t>(mdp.num_states()) * n);
    for (StateId s = 0; s < mdp.num_states(); ++s)
        for (ActionId a = 0; a < mdp.num_actions(); ++a) {
            auto r = mdp.row(s, perm[a]);
            rows.emplace_back(r.begin(), r.end());
        }
    return FunnelMdp(mdp.num_states(), mdp.num_actions(), std::move(rows),
                     std::vector<double>(mdp.initial().begin(), mdp.initial().end()));
}

inline std::vector<ActionId> inverse_permutation(std::span<const ActionId> perm)
{
    std::vector<ActionId> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<ActionId>(i);
    return inv;
}

/// Uniformly random permutation of 0..n-1 (Fisher-Yates).
template <class URBG>
std::vector<ActionId> random_permutation(ActionId n, URBG& rng)
{
    std::vector<ActionId> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[uniform_index(rng, i)]);
    return p;
}

/// Drops states not reachable from the initial support and renumbers the rest in order.
inline FunnelMdp drop_unreachable(const FunnelMdp& mdp)
{
    const auto seen = reachable_states(mdp);
    std::vector<StateId> new_id(seen.size(), -1);
    StateId count = 0;
    for (std::size_t s = 0; s < seen.size(); ++s)
        if (seen[s]) new_id[s] = count++;
    if (count == mdp.num_states()) return mdp;

    std::vector<std::vector<Outcome>> rows;
    std::vector<double> initial;
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        if (!seen[s]) continue;
        initial.push_back(mdp.initial()[s]);
        for (ActionId a = 0; a < mdp.num_actions(); ++a) {
            std::vector<Outcome> row;
            for (const auto& o : mdp.row(s, a)) {
                if (!is_terminal(o.next) && !seen[o.next]) {
                    // Only zero-probability entries can point at unreachable states.
                    continue;
                }
                row.push_back({is_terminal(o.next) ? o.next : new_id[o.next], o.prob});
            }
            rows.push_back(std::move(row));
        }
    }
    return FunnelMdp(count, mdp.num_actions(), std::move(rows), std::move(initial));
}

// ---------------------------------------------------------------------------
// State projections (what a misspecified learner gets to see)
// ---------------------------------------------------------------------------

/**
 * Surjection from active states onto coarse ids 0..K-1. Terminal states map
 * to themselves. The environment always steps the full MDP; only the agent
 * observes through the projection.
 */
class StateProjection {
public:
    StateProjection() = default;

    /// `coarse_of[s]` is the coarse label of s; labels are relabelled densely
    /// in order of first appearance. A negative label marks a partial map.
    explicit StateProjection(std::vector<StateId> coarse_of)
    {
        std::unordered_map<StateId, StateId> dense;
        map_.reserve(coarse_of.size());
        for (std::size_t s = 0; s < coarse_of.size(); ++s) {
            const StateId label = coarse_of[s];
            if (label < 0) throw std::invalid_argument("projection is partial: state " + std::to_string(s) + " unmapped");
            auto [it, fresh] = dense.try_emplace(label, static_cast<StateId>(dense.size()));
            map_.push_back(it->second);
        }
        num_coarse_ = static_cast<StateId>(dense.size());
    }

    static StateProjection identity(StateId num_states)
    {
        std::vector<StateId> m(static_cast<std::size_t>(num_states));
        std::iota(m.begin(), m.end(), 0);
        return StateProjection(std::move(m));
    }

    StateId operator()(StateId s) const
    {
        if (is_terminal(s)) return s;
        if (s < 0 || static_cast<std::size_t>(s) >= map_.size()) throw std::out_of_range("projection: state out of range");
        return map_[s];
    }

    StateId num_fine() const noexcept { return static_cast<StateId>(map_.size()); }
    StateId num_coarse() const noexcept { return num_coarse_; }
    bool is_identity() const
    {
        for (std::size_t s = 0; s < map_.size(); ++s)
            if (map_[s] != static_cast<StateId>(s)) return false;
        return true;
    }

private:
    std::vector<StateId> map_;
    StateId num_coarse_ = 0;
};

/// Checks that `coarse_of` is total over the MDP's active states and builds the projection.
inline StateProjection project_state(const FunnelMdp& mdp, std::vector<StateId> coarse_of)
{
    if (coarse_of.size() != static_cast<std::size_t>(mdp.num_states()))
        throw std::invalid_argument("projection is partial: covers " + std::to_string(coarse_of.size()) + " of " +
                                    std::to_string(mdp.num_states()) + " states");
    return StateProjection(std::move(coarse_of));
}

// ---------------------------------------------------------------------------
// Feasibility structure
// ---------------------------------------------------------------------------

/// Per (s, a) list of feasible successors; the sparsity pattern a model-based learner is given.
struct TransitionSupport {
    StateId num_states = 0;
    ActionId num_actions = 0;
    std::vector<std::vector<StateId>> next;  // indexed s * num_actions + a
    std::vector<double> initial;

    std::span<const StateId> row(StateId s, ActionId a) const
    {
        return next[static_cast<std::size_t>(s) * num_actions + a];
    }
};

inline TransitionSupport support_of(const FunnelMdp& mdp)
{
    TransitionSupport sup{mdp.num_states(), mdp.num_actions(), {}, {mdp.initial().begin(), mdp.initial().end()}};
    sup.next.reserve(static_cast<std::size_t>(mdp.num_states()) * mdp.num_actions());
    for (StateId s = 0; s < mdp.num_states(); ++s)
        for (ActionId a = 0; a < mdp.num_actions(); ++a) {
            std::vector<StateId> r;
            for (const auto& o : mdp.row(s, a))
                if (o.prob > 0.0) r.push_back(o.next);
            sup.next.push_back(std::move(r));
        }
    return sup;
}

/// Image of the feasibility structure under a projection: coarse (c, a) -> union of projected successors.
inline TransitionSupport project_support(const FunnelMdp& mdp, const StateProjection& proj)
{
    const StateId k = proj.num_coarse();
    TransitionSupport sup{k, mdp.num_actions(), {}, std::vector<double>(static_cast<std::size_t>(k), 0.0)};
    sup.next.resize(static_cast<std::size_t>(k) * mdp.num_actions());
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        const StateId c = proj(s);
        sup.initial[c] += mdp.initial()[s];
        for (ActionId a = 0; a < mdp.num_actions(); ++a) {
            auto& dst = sup.next[static_cast<std::size_t>(c) * mdp.num_actions() + a];
            for (const auto& o : mdp.row(s, a)) {
                if (o.prob <= 0.0) continue;
                const StateId n = proj(o.next);
                if (std::find(dst.begin(), dst.end(), n) == dst.end()) dst.push_back(n);
            }
        }
    }
    for (auto& r : sup.next) std::sort(r.begin(), r.end());
    return sup;
}

}  // namespace funnel
