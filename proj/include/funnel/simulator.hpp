#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "funnel/agents.hpp"
#include "funnel/mdp.hpp"
#include "funnel/rng.hpp"

namespace funnel {

struct Transition {
    StateId s;
    ActionId a;
    StateId next;
};

struct EpisodeRecord {
    std::uint64_t consumer = 0;
    std::vector<Transition> path;
    bool converted = false;
    bool truncated = false;
    int steps() const noexcept { return static_cast<int>(path.size()); }
};

inline constexpr int kDefaultMaxSteps = 1000;

namespace detail {

using Clock = std::chrono::steady_clock;

}  // namespace detail

/**
 * One consumer: initial draw, then act / step / observe until absorption or
 * `max_steps`. end_episode() is called exactly once; a truncated episode
 * counts as not converted.
 *
 * `learner_seconds`, when given, accumulates time spent inside the agent.
 */
template <class URBG>
EpisodeRecord run_consumer(const FunnelMdp& mdp, Agent& agent, int max_steps, URBG& env, std::uint64_t consumer = 0,
                           double* learner_seconds = nullptr)
{
    if (max_steps < 1) throw std::invalid_argument("run_consumer: max_steps must be positive");
    EpisodeRecord rec;
    rec.consumer = consumer;
    detail::Clock::duration spent{};
    StateId s = sample_initial(mdp, env);
    while (true) {
        auto t0 = detail::Clock::now();
        const ActionId a = agent.act(s);
        spent += detail::Clock::now() - t0;

        const StateId next = step(mdp, s, a, env);
        rec.path.push_back({s, a, next});

        t0 = detail::Clock::now();
        agent.observe(s, a, next);
        spent += detail::Clock::now() - t0;

        if (is_terminal(next)) {
            rec.converted = next == kConvert;
            break;
        }
        if (rec.steps() >= max_steps) {
            rec.truncated = true;
            break;
        }
        s = next;
    }
    const auto t0 = detail::Clock::now();
    agent.end_episode(rec.converted);
    spent += detail::Clock::now() - t0;
    if (learner_seconds) *learner_seconds += std::chrono::duration<double>(spent).count();
    return rec;
}

/**
 * Which environment each consumer faces. Consumer n (1-based) is in phase 2
 * with probability (n - N1)/(N2 - N1) clamped to [0, 1]; with N1 = N2 the
 * switch is abrupt after consumer N1. The phase-2 environment is the
 * phase-1 MDP with its actions permuted.
 */
struct ShiftSchedule {
    enum class Mode { none, two_phase, gradual };

    Mode mode = Mode::none;
    std::uint64_t n1 = 0;
    std::uint64_t n2 = 0;
    /// Fixed action permutation for phase 2; drawn per run from the seed when empty.
    std::vector<ActionId> permutation;

    static ShiftSchedule none() { return {}; }
    static ShiftSchedule two_phase(std::uint64_t switch_after)
    {
        return {Mode::two_phase, switch_after, switch_after, {}};
    }
    static ShiftSchedule gradual(std::uint64_t first, std::uint64_t last)
    {
        if (first < 1 || last < first) throw std::invalid_argument("ShiftSchedule: need 1 <= N1 <= N2");
        return {Mode::gradual, first, last, {}};
    }

    bool shifts() const noexcept { return mode != Mode::none; }

    double phase2_probability(std::uint64_t n) const noexcept
    {
        if (mode == Mode::none || n <= n1) return 0.0;
        if (n >= n2) return 1.0;
        return static_cast<double>(n - n1) / static_cast<double>(n2 - n1);
    }

    void check(std::uint64_t num_consumers) const
    {
        if (mode == Mode::none) return;
        if (n1 < 1 || n1 > n2 || n2 > num_consumers)
            throw std::invalid_argument("ShiftSchedule: need 1 <= N1 <= N2 <= N");
    }
};

inline std::string to_string(ShiftSchedule::Mode m)
{
    switch (m) {
    case ShiftSchedule::Mode::none: return "none";
    case ShiftSchedule::Mode::two_phase: return "two_phase";
    case ShiftSchedule::Mode::gradual: return "gradual";
    }
    return "?";
}

/// Phase (1 or 2) of consumer n under `schedule`, drawn from the run's schedule stream.
inline int draw_phase(const ShiftSchedule& schedule, std::uint64_t schedule_key, std::uint64_t n)
{
    const double p = schedule.phase2_probability(n);
    if (p <= 0.0) return 1;
    if (p >= 1.0) return 2;
    CounterStream g(derive_key(schedule_key, n));
    return unit(g) < p ? 2 : 1;
}

struct RunResult {
    std::string agent;
    std::string mdp;
    std::uint64_t seed = 0;
    std::vector<std::uint8_t> converted;  // per consumer
    std::vector<std::uint8_t> phase;      // per consumer, 1 or 2
    std::vector<ActionId> permutation;    // phase-2 action permutation, empty without a shift
    double learner_seconds = 0.0;
    std::uint64_t truncations = 0;

    std::uint64_t num_consumers() const noexcept { return converted.size(); }
    std::uint64_t conversions() const noexcept
    {
        return std::accumulate(converted.begin(), converted.end(), std::uint64_t{0});
    }
};

struct RunOptions {
    int max_steps = kDefaultMaxSteps;
    std::string mdp_name = "mdp";
};

/**
 * Runs N sequential consumers. The environment, the schedule and the
 * phase-2 permutation each draw from their own substream of `seed`, so two
 * agents run with the same seed see identical per-(consumer, step) draws.
 * The agent is expected to have been seeded from the agent substream.
 */
inline RunResult run_experiment(const FunnelMdp& mdp, const ShiftSchedule& schedule, Agent& agent, std::uint64_t N,
                                std::uint64_t seed, const RunOptions& opts = {})
{
    if (N < 1) throw std::invalid_argument("run_experiment: N must be at least 1");
    schedule.check(N);

    RunResult out;
    out.agent = agent.name();
    out.mdp = opts.mdp_name;
    out.seed = seed;
    out.converted.resize(N);
    out.phase.resize(N);

    std::optional<FunnelMdp> shifted;
    if (schedule.shifts()) {
        out.permutation = schedule.permutation;
        if (out.permutation.empty()) {
            CounterStream g(substream_key(seed, Substream::permutation));
            out.permutation = random_permutation(mdp.num_actions(), g);
        }
        shifted.emplace(permute_actions(mdp, out.permutation));
    }

    const std::uint64_t env_key = substream_key(seed, Substream::environment);
    const std::uint64_t sched_key = substream_key(seed, Substream::schedule);
    for (std::uint64_t i = 0; i < N; ++i) {
        const std::uint64_t n = i + 1;
        const int ph = shifted ? draw_phase(schedule, sched_key, n) : 1;
        CounterStream env(derive_key(env_key, n));
        const auto rec = run_consumer(ph == 2 ? *shifted : mdp, agent, opts.max_steps, env, n, &out.learner_seconds);
        out.converted[i] = rec.converted ? 1 : 0;
        out.phase[i] = static_cast<std::uint8_t>(ph);
        out.truncations += rec.truncated ? 1 : 0;
    }
    return out;
}

/// Seed for an agent's private engine within run `seed`.
constexpr std::uint64_t agent_seed(std::uint64_t seed) noexcept { return substream_key(seed, Substream::agent); }

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean over runs of (conversions / (N v*)).
inline double performance_ratio(const std::vector<RunResult>& results, double v_star)
{
    if (!(v_star > 0.0)) throw std::invalid_argument("performance_ratio: v* must be positive");
    if (results.empty()) throw std::invalid_argument("performance_ratio: no runs");
    const auto N = results.front().num_consumers();
    double acc = 0.0;
    for (const auto& r : results) {
        if (r.num_consumers() != N) throw std::invalid_argument("performance_ratio: runs differ in N");
        acc += static_cast<double>(r.conversions()) / (static_cast<double>(N) * v_star);
    }
    return acc / static_cast<double>(results.size());
}

inline double performance_ratio(const RunResult& r, double v_star) { return performance_ratio(std::vector{r}, v_star); }

/// PR over consumers first..last (1-based, inclusive).
inline double windowed_pr(const RunResult& r, double v_star, std::uint64_t first, std::uint64_t last)
{
    if (!(v_star > 0.0)) throw std::invalid_argument("windowed_pr: v* must be positive");
    if (first < 1 || last < first || last > r.num_consumers()) throw std::invalid_argument("windowed_pr: empty or out-of-range window");
    const auto hits = std::accumulate(r.converted.begin() + static_cast<std::ptrdiff_t>(first - 1),
                                      r.converted.begin() + static_cast<std::ptrdiff_t>(last), std::uint64_t{0});
    return static_cast<double>(hits) / (static_cast<double>(last - first + 1) * v_star);
}

/// PR over each prefix 1..n for n in `checkpoints` (ascending, within 1..N).
inline std::vector<double> prefix_pr_curve(const RunResult& r, double v_star, const std::vector<std::uint64_t>& checkpoints)
{
    std::vector<double> out;
    out.reserve(checkpoints.size());
    std::uint64_t hits = 0, upto = 0;
    for (auto n : checkpoints) {
        if (n < 1 || n > r.num_consumers() || n < upto) throw std::invalid_argument("prefix_pr_curve: bad checkpoint grid");
        for (; upto < n; ++upto) hits += r.converted[upto];
        out.push_back(static_cast<double>(hits) / (static_cast<double>(n) * v_star));
    }
    return out;
}

/// PR over the consumers assigned to `phase`; 0 if there are none.
inline double phase_pr(const RunResult& r, double v_star, int phase)
{
    std::uint64_t hits = 0, count = 0;
    for (std::size_t i = 0; i < r.converted.size(); ++i)
        if (r.phase[i] == phase) {
            ++count;
            hits += r.converted[i];
        }
    if (count == 0) return 0.0;
    return static_cast<double>(hits) / (static_cast<double>(count) * v_star);
}

}  // namespace funnel
