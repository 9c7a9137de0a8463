#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "funnel/mdp.hpp"
#include "funnel/rng.hpp"

namespace funnel {

/**
 * Parameters of the synthetic email funnel.
 *
 * A consumer's state on day t is (t, received, opened, clicked), each of the
 * last three a per-email-type bucketed counter. Action 0 sends nothing,
 * action k sends an email of type k. Each email yields one of {ignore, open,
 * click, convert} through a multinomial logit over the state features; the
 * no-email action yields {ignore, convert}. After day `horizon` the consumer
 * quits.
 *
 * Per-action vectors are indexed by action (size num_email_types + 1).
 */
struct FunnelGenParams {
    int num_email_types = 4;
    int horizon = 14;
    int received_cap = 2;    // buckets {0, 1, 2+}
    int engagement_cap = 1;  // buckets {0, 1+} for opened and clicked

    std::vector<double> convert_base{-4.2, -3.0, -3.4, -3.8, -3.6};
    std::vector<double> open_base{0.0, -0.8, 0.2, -0.2, 0.4};
    std::vector<double> click_base{0.0, -2.0, -0.6, -1.2, -0.9};
    /// Conversion uplift per opened / clicked email type, by action.
    std::vector<double> convert_per_open{0.2, 0.4, 0.2, 0.3, 0.2};
    std::vector<double> convert_per_click{0.5, 1.4, 0.5, 0.9, 0.6};

    double convert_per_received = -0.05;  // awareness: fatigue on conversion
    double convert_per_day = -0.04;
    double open_per_open = 0.5;           // engaged consumers keep engaging
    double click_per_click = 0.6;
    double fatigue_same_type = -0.35;     // repeated emails of one type get ignored

    /// Standard deviation of per-(state, action, outcome) logit noise.
    double jitter_sd = 0.25;
    std::uint64_t seed = 7;
};

/// Decoded feature vector of one synthetic state.
struct FunnelState {
    int t = 1;
    std::vector<std::uint8_t> received, opened, clicked;

    int total(const std::vector<std::uint8_t>& v) const
    {
        int n = 0;
        for (auto x : v) n += x;
        return n;
    }
    friend bool operator==(const FunnelState&, const FunnelState&) = default;
};

struct SyntheticFunnel {
    FunnelMdp mdp;
    std::vector<FunnelState> states;  // indexed by StateId
    FunnelGenParams params;
};

namespace detail {

inline std::uint64_t pack_state(const FunnelState& st)
{
    std::uint64_t key = static_cast<std::uint64_t>(st.t);
    for (std::size_t k = 0; k < st.received.size(); ++k) {
        key = key * 8 + st.received[k];
        key = key * 8 + st.opened[k];
        key = key * 8 + st.clicked[k];
    }
    return key;
}

/// Deterministic standard normal keyed by (seed, state, action, outcome).
inline double keyed_normal(std::uint64_t seed, std::uint64_t state_key, int action, int outcome)
{
    CounterStream g(derive_key(derive_key(seed, state_key), static_cast<std::uint64_t>(action * 8 + outcome)));
    double u1 = unit(g);
    const double u2 = unit(g);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline void check_params(const FunnelGenParams& p)
{
    auto fail = [](const std::string& m) { throw std::invalid_argument("FunnelGenParams: " + m); };
    if (p.num_email_types < 1 || p.num_email_types > 6) fail("num_email_types must be in 1..6");
    if (p.horizon < 1 || p.horizon > 60) fail("horizon must be in 1..60");
    if (p.received_cap < 1 || p.received_cap > 7) fail("received_cap must be in 1..7");
    if (p.engagement_cap < 1 || p.engagement_cap > 7) fail("engagement_cap must be in 1..7");
    const auto n = static_cast<std::size_t>(p.num_email_types + 1);
    for (const auto* v : {&p.convert_base, &p.open_base, &p.click_base, &p.convert_per_open, &p.convert_per_click})
        if (v->size() != n) fail("per-action vectors need num_email_types + 1 entries");
    if (!(p.jitter_sd >= 0.0)) fail("jitter_sd must be non-negative");
}

}  // namespace detail

/**
 * Builds the reachable closure of the synthetic funnel from (1, 0, 0, 0).
 *
 * State ids follow breadth-first discovery order, so the result is a pure
 * function of the parameters (seed included).
 */
inline SyntheticFunnel synthetic_funnel(const FunnelGenParams& params)
{
    detail::check_params(params);
    const int types = params.num_email_types;
    const int num_actions = types + 1;
    enum Outcome4 { ignore = 0, open = 1, click = 2, convert = 3 };

    std::vector<FunnelState> states;
    std::unordered_map<std::uint64_t, StateId> id_of;
    auto intern = [&](const FunnelState& st) {
        auto [it, fresh] = id_of.try_emplace(detail::pack_state(st), static_cast<StateId>(states.size()));
        if (fresh) states.push_back(st);
        return it->second;
    };

    FunnelState start;
    start.t = 1;
    start.received.assign(types, 0);
    start.opened.assign(types, 0);
    start.clicked.assign(types, 0);
    intern(start);

    std::vector<std::vector<Outcome>> rows;
    auto bump = [](std::uint8_t v, int cap) { return static_cast<std::uint8_t>(std::min<int>(v + 1, cap)); };

    for (std::size_t i = 0; i < states.size(); ++i) {
        const FunnelState st = states[i];  // copy: `states` grows below
        const std::uint64_t key = detail::pack_state(st);
        const int opened = st.total(st.opened);
        const int clicked = st.total(st.clicked);
        const int received = st.total(st.received);

        for (ActionId a = 0; a < num_actions; ++a) {
            auto jitter = [&](int outcome) {
                return params.jitter_sd > 0.0 ? params.jitter_sd * detail::keyed_normal(params.seed, key, a, outcome) : 0.0;
            };
            std::array<double, 4> w{1.0, 0.0, 0.0, 0.0};
            w[convert] = std::exp(params.convert_base[a] + params.convert_per_open[a] * opened +
                                  params.convert_per_click[a] * clicked + params.convert_per_received * received +
                                  params.convert_per_day * (st.t - 1) + jitter(convert));
            if (a > 0) {
                const int same = st.received[a - 1];
                w[open] = std::exp(params.open_base[a] + params.open_per_open * opened + params.fatigue_same_type * same +
                                   jitter(open));
                w[click] = std::exp(params.click_base[a] + params.click_per_click * clicked +
                                    params.fatigue_same_type * same + jitter(click));
            }
            const double total = w[0] + w[1] + w[2] + w[3];

            // Merge outcomes that land in the same successor (saturated buckets, last day).
            std::map<StateId, double> acc;
            std::vector<StateId> order;
            auto add = [&](StateId next, double p) {
                if (p <= 0.0) return;
                auto [it, fresh] = acc.try_emplace(next, 0.0);
                if (fresh) order.push_back(next);
                it->second += p;
            };
            add(kConvert, w[convert] / total);
            for (int o : {ignore, open, click}) {
                if (w[o] <= 0.0) continue;
                if (st.t >= params.horizon) {
                    add(kQuit, w[o] / total);
                    continue;
                }
                FunnelState nx = st;
                nx.t = st.t + 1;
                if (a > 0) {
                    const int k = a - 1;
                    nx.received[k] = bump(nx.received[k], params.received_cap);
                    if (o == open || o == click) nx.opened[k] = bump(nx.opened[k], params.engagement_cap);
                    if (o == click) nx.clicked[k] = bump(nx.clicked[k], params.engagement_cap);
                }
                add(intern(nx), w[o] / total);
            }
            std::vector<Outcome> row;
            row.reserve(order.size());
            for (StateId n : order) row.push_back({n, acc[n]});
            rows.push_back(std::move(row));
        }
    }

    std::vector<double> initial(states.size(), 0.0);
    initial[0] = 1.0;
    SyntheticFunnel out{FunnelMdp(static_cast<StateId>(states.size()), num_actions, std::move(rows), std::move(initial)),
                        std::move(states), params};
    require_valid(out.mdp);
    return out;
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Full-size funnel: four email types over a two-week lifetime.
inline FunnelGenParams funnel_large_params() { return FunnelGenParams{}; }

/**
 * Five-day, two-email funnel with a myopic trap: the call-to-action email
 * (action 1) has the best one-step conversion everywhere, but the newsletter
 * (action 2) creates clickers, and clickers convert far better on a later
 * call-to-action.
 */
inline FunnelGenParams funnel_small_params()
{
    FunnelGenParams p;
    p.num_email_types = 2;
    p.horizon = 5;
    p.received_cap = 1;
    p.convert_base = {-4.0, -2.2, -3.6};
    p.open_base = {0.0, -1.0, 0.8};
    p.click_base = {0.0, -3.0, 1.2};
    p.convert_per_open = {0.0, 0.2, 0.0};
    p.convert_per_click = {0.3, 2.6, 0.3};
    p.convert_per_received = 0.0;
    p.convert_per_day = 0.0;
    p.open_per_open = 0.3;
    p.click_per_click = 0.3;
    p.fatigue_same_type = -0.2;
    p.jitter_sd = 0.1;
    p.seed = 11;
    return p;
}

inline const std::vector<std::string>& preset_names()
{
    static const std::vector<std::string> names{"bandit", "funnel-small", "funnel-large"};
    return names;
}

/// Generator parameters for a named preset; throws for "bandit" (not generated) and unknown names.
inline FunnelGenParams preset_params(const std::string& name)
{
    if (name == "funnel-small") return funnel_small_params();
    if (name == "funnel-large") return funnel_large_params();
    throw std::invalid_argument("unknown generator preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Projections over the synthetic state features
// ---------------------------------------------------------------------------

enum class FeatureSet { full, temporal, temporal_awareness, temporal_engagement };

inline std::string to_string(FeatureSet f)
{
    switch (f) {
    case FeatureSet::full: return "full";
    case FeatureSet::temporal: return "temporal";
    case FeatureSet::temporal_awareness: return "temporal+awareness";
    case FeatureSet::temporal_engagement: return "temporal+engagement";
    }
    return "?";
}

inline FeatureSet feature_set_from_string(const std::string& s)
{
    if (s == "full") return FeatureSet::full;
    if (s == "temporal") return FeatureSet::temporal;
    if (s == "temporal+awareness") return FeatureSet::temporal_awareness;
    if (s == "temporal+engagement") return FeatureSet::temporal_engagement;
    throw std::invalid_argument("unknown feature set '" + s + "'");
}

/// Projection keeping only the chosen feature groups of each synthetic state.
inline StateProjection feature_projection(const SyntheticFunnel& f, FeatureSet keep)
{
    std::vector<StateId> labels;
    labels.reserve(f.states.size());
    std::unordered_map<std::uint64_t, StateId> dense;
    for (const auto& st : f.states) {
        FunnelState view = st;
        const bool drop_awareness = keep == FeatureSet::temporal || keep == FeatureSet::temporal_engagement;
        const bool drop_engagement = keep == FeatureSet::temporal || keep == FeatureSet::temporal_awareness;
        if (drop_awareness) std::fill(view.received.begin(), view.received.end(), 0);
        if (drop_engagement) {
            std::fill(view.opened.begin(), view.opened.end(), 0);
            std::fill(view.clicked.begin(), view.clicked.end(), 0);
        }
        auto [it, fresh] = dense.try_emplace(detail::pack_state(view), static_cast<StateId>(dense.size()));
        labels.push_back(it->second);
    }
    return project_state(f.mdp, std::move(labels));
}

}  // namespace funnel
