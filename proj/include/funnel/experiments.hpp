#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "funnel/agents.hpp"
#include "funnel/generator.hpp"
#include "funnel/mdp.hpp"
#include "funnel/mdp_io.hpp"
#include "funnel/planner.hpp"
#include "funnel/simulator.hpp"

namespace funnel {

inline constexpr int kConfigSchemaVersion = 1;

/// Invalid experiment configuration; the message names the offending field.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A run that threw; the message carries the agent label and seed.
class RunFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Formatting helpers
// ---------------------------------------------------------------------------

/// Shortest decimal that round-trips.
inline std::string format_double(double x)
{
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return {buf, res.ptr};
}

inline std::size_t edit_distance(const std::string& a, const std::string& b)
{
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

namespace detail {

inline void reject_unknown_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& where)
{
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) != allowed.end()) continue;
        std::string best;
        std::size_t best_d = 3;  // suggest only close matches
        for (const auto& k : allowed) {
            const auto d = edit_distance(key, k);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        std::string msg = where + ": unknown key \"" + key + "\"";
        if (!best.empty()) msg += " (did you mean \"" + best + "\"?)";
        throw ConfigError(msg);
    }
}

template <class T>
T get_field(const json& obj, const std::string& key, const std::string& where)
{
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + ": missing or wrong type");
    }
}

template <class T>
std::optional<T> get_optional(const json& obj, const std::string& key, const std::string& where)
{
    if (!obj.contains(key)) return std::nullopt;
    return get_field<T>(obj, key, where);
}

inline void require_range(bool ok, const std::string& field, const std::string& range, double got)
{
    if (!ok) throw ConfigError(field + ": must be in " + range + ", got " + format_double(got));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generator parameters <-> JSON
// ---------------------------------------------------------------------------

inline json gen_params_to_json(const FunnelGenParams& p)
{
    return {{"num_email_types", p.num_email_types},
            {"horizon", p.horizon},
            {"received_cap", p.received_cap},
            {"engagement_cap", p.engagement_cap},
            {"convert_base", p.convert_base},
            {"open_base", p.open_base},
            {"click_base", p.click_base},
            {"convert_per_open", p.convert_per_open},
            {"convert_per_click", p.convert_per_click},
            {"convert_per_received", p.convert_per_received},
            {"convert_per_day", p.convert_per_day},
            {"open_per_open", p.open_per_open},
            {"click_per_click", p.click_per_click},
            {"fatigue_same_type", p.fatigue_same_type},
            {"jitter_sd", p.jitter_sd},
            {"seed", p.seed}};
}

/// Fields override those of the optional "base" preset (defaults otherwise).
inline FunnelGenParams gen_params_from_json(const json& j, const std::string& where = "generator")
{
    static const std::vector<std::string> keys{"base",
                                               "num_email_types",
                                               "horizon",
                                               "received_cap",
                                               "engagement_cap",
                                               "convert_base",
                                               "open_base",
                                               "click_base",
                                               "convert_per_open",
                                               "convert_per_click",
                                               "convert_per_received",
                                               "convert_per_day",
                                               "open_per_open",
                                               "click_per_click",
                                               "fatigue_same_type",
                                               "jitter_sd",
                                               "seed"};
    detail::reject_unknown_keys(j, keys, where);
    FunnelGenParams p;
    if (j.contains("base")) {
        const auto base = detail::get_field<std::string>(j, "base", where);
        try {
            p = preset_params(base);
        } catch (const std::invalid_argument&) {
            throw ConfigError(where + ".base: unknown generator preset \"" + base + "\"");
        }
    }
    auto set = [&](const char* key, auto& field) {
        if (j.contains(key)) field = detail::get_field<std::remove_reference_t<decltype(field)>>(j, key, where);
    };
    set("num_email_types", p.num_email_types);
    set("horizon", p.horizon);
    set("received_cap", p.received_cap);
    set("engagement_cap", p.engagement_cap);
    set("convert_base", p.convert_base);
    set("open_base", p.open_base);
    set("click_base", p.click_base);
    set("convert_per_open", p.convert_per_open);
    set("convert_per_click", p.convert_per_click);
    set("convert_per_received", p.convert_per_received);
    set("convert_per_day", p.convert_per_day);
    set("open_per_open", p.open_per_open);
    set("click_per_click", p.click_per_click);
    set("fatigue_same_type", p.fatigue_same_type);
    set("jitter_sd", p.jitter_sd);
    set("seed", p.seed);
    try {
        detail::check_params(p);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return p;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

enum class AgentKind { ts, mfabl, pmfabl, hybrid, psrl, qlucb, optimal };

inline std::string to_string(AgentKind k)
{
    switch (k) {
    case AgentKind::ts: return "ts";
    case AgentKind::mfabl: return "mfabl";
    case AgentKind::pmfabl: return "pmfabl";
    case AgentKind::hybrid: return "hybrid";
    case AgentKind::psrl: return "psrl";
    case AgentKind::qlucb: return "qlucb";
    case AgentKind::optimal: return "optimal";
    }
    return "?";
}

inline std::optional<AgentKind> agent_kind_from_string(const std::string& s)
{
    for (auto k : {AgentKind::ts, AgentKind::mfabl, AgentKind::pmfabl, AgentKind::hybrid, AgentKind::psrl,
                   AgentKind::qlucb, AgentKind::optimal})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

inline std::string to_string(MfablVariant v)
{
    switch (v) {
    case MfablVariant::linear: return "linear";
    case MfablVariant::polynomial: return "polynomial";
    case MfablVariant::discounted: return "discounted";
    }
    return "?";
}

/**
 * One agent entry. Unset optionals take the kind's defaults at build time,
 * and are left unset on serialization so configs round-trip unchanged.
 */
struct AgentSpec {
    AgentKind kind = AgentKind::mfabl;
    std::optional<std::string> label;
    std::optional<double> epsilon, alpha0, beta0, omega, gamma, delta, horizon;
    std::optional<MfablVariant> variant;
    std::optional<std::uint64_t> switch_at, reopt_every;
    std::optional<FeatureSet> projection;

    std::string display_name() const
    {
        if (label) return *label;
        std::string n = to_string(kind);
        if (projection && *projection != FeatureSet::full) n += "@" + to_string(*projection);
        return n;
    }

    friend bool operator==(const AgentSpec&, const AgentSpec&) = default;
};

struct MdpSource {
    enum class Kind { preset, file, generator };
    Kind kind = Kind::preset;
    std::string name;                    // preset name or file path
    std::optional<json> generator;       // verbatim generator object
    friend bool operator==(const MdpSource&, const MdpSource&) = default;
};

struct ScheduleSpec {
    ShiftSchedule::Mode mode = ShiftSchedule::Mode::none;
    std::optional<std::uint64_t> switch_after, n1, n2;
    std::optional<std::vector<ActionId>> permutation;
    friend bool operator==(const ScheduleSpec&, const ScheduleSpec&) = default;

    ShiftSchedule resolve(std::uint64_t N) const
    {
        ShiftSchedule s;
        switch (mode) {
        case ShiftSchedule::Mode::none: return s;
        case ShiftSchedule::Mode::two_phase: s = ShiftSchedule::two_phase(switch_after.value_or(N / 2)); break;
        case ShiftSchedule::Mode::gradual: s = ShiftSchedule::gradual(n1.value_or(1), n2.value_or(N)); break;
        }
        if (permutation) s.permutation = *permutation;
        return s;
    }
};

struct ExperimentConfig {
    MdpSource mdp;
    std::vector<AgentSpec> agents;
    std::uint64_t N = 1000;
    std::uint64_t R = 1;
    std::uint64_t base_seed = 0;
    ScheduleSpec schedule;
    std::optional<std::vector<std::uint64_t>> checkpoints;
    std::optional<int> max_steps;
    std::optional<std::string> out;
    bool save_beliefs = false;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// 50 log-spaced integers in 1..N (deduplicated, always ending at N).
inline std::vector<std::uint64_t> default_checkpoints(std::uint64_t N, int points = 50)
{
    std::vector<std::uint64_t> out;
    const double top = std::log(static_cast<double>(N));
    for (int i = 0; i < points; ++i) {
        const double x = points == 1 ? top : top * i / (points - 1);
        auto n = static_cast<std::uint64_t>(std::llround(std::exp(x)));
        n = std::clamp<std::uint64_t>(n, 1, N);
        if (out.empty() || n > out.back()) out.push_back(n);
    }
    if (out.back() != N) out.push_back(N);
    return out;
}

namespace detail {

inline const std::vector<std::string>& agent_keys_for(AgentKind k)
{
    static const std::vector<std::string> ts{"kind", "label", "alpha0", "beta0", "projection"};
    static const std::vector<std::string> mf{"kind",    "label", "epsilon", "alpha0",    "beta0",
                                             "variant", "omega", "gamma",   "projection"};
    static const std::vector<std::string> hy{"kind",    "label", "epsilon", "alpha0",    "beta0",    "variant",
                                             "omega",   "gamma", "switch_at", "projection"};
    static const std::vector<std::string> ps{"kind", "label", "reopt_every", "projection"};
    static const std::vector<std::string> ql{"kind", "label", "epsilon", "gamma", "delta", "horizon", "projection"};
    static const std::vector<std::string> op{"kind", "label"};
    switch (k) {
    case AgentKind::ts: return ts;
    case AgentKind::mfabl:
    case AgentKind::pmfabl: return mf;
    case AgentKind::hybrid: return hy;
    case AgentKind::psrl: return ps;
    case AgentKind::qlucb: return ql;
    case AgentKind::optimal: return op;
    }
    return op;
}

inline AgentSpec agent_from_json(const json& j, const std::string& where)
{
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    const auto kind_name = get_field<std::string>(j, "kind", where);
    const auto kind = agent_kind_from_string(kind_name);
    if (!kind)
        throw ConfigError(where + ".kind: unknown agent kind \"" + kind_name +
                          "\" (expected ts, mfabl, pmfabl, hybrid, psrl, qlucb or optimal)");
    reject_unknown_keys(j, agent_keys_for(*kind), where);

    AgentSpec a;
    a.kind = *kind;
    a.label = get_optional<std::string>(j, "label", where);
    a.epsilon = get_optional<double>(j, "epsilon", where);
    a.alpha0 = get_optional<double>(j, "alpha0", where);
    a.beta0 = get_optional<double>(j, "beta0", where);
    a.omega = get_optional<double>(j, "omega", where);
    a.gamma = get_optional<double>(j, "gamma", where);
    a.delta = get_optional<double>(j, "delta", where);
    a.horizon = get_optional<double>(j, "horizon", where);
    a.switch_at = get_optional<std::uint64_t>(j, "switch_at", where);
    a.reopt_every = get_optional<std::uint64_t>(j, "reopt_every", where);
    if (auto v = get_optional<std::string>(j, "variant", where)) {
        if (*v == "linear") a.variant = MfablVariant::linear;
        else if (*v == "polynomial") a.variant = MfablVariant::polynomial;
        else if (*v == "discounted") a.variant = MfablVariant::discounted;
        else throw ConfigError(where + ".variant: expected linear, polynomial or discounted, got \"" + *v + "\"");
    }
    if (auto p = get_optional<std::string>(j, "projection", where)) {
        try {
            a.projection = feature_set_from_string(*p);
        } catch (const std::invalid_argument&) {
            throw ConfigError(where + ".projection: expected full, temporal, temporal+awareness or temporal+engagement, got \"" +
                              *p + "\"");
        }
    }

    const bool is_ql = a.kind == AgentKind::qlucb;
    if (a.epsilon) {
        if (is_ql)
            require_range(*a.epsilon > 0.0 && *a.epsilon <= 1.0, where + ".epsilon", "(0, 1]", *a.epsilon);
        else
            require_range(*a.epsilon >= 0.0 && *a.epsilon <= 1.0, where + ".epsilon", "[0, 1]", *a.epsilon);
    }
    if (a.alpha0) require_range(*a.alpha0 > 0.0, where + ".alpha0", "(0, inf)", *a.alpha0);
    if (a.beta0) require_range(*a.beta0 > 0.0, where + ".beta0", "(0, inf)", *a.beta0);
    if (a.omega) require_range(*a.omega > 0.5 && *a.omega <= 1.0, where + ".omega", "(0.5, 1]", *a.omega);
    if (a.gamma) {
        if (is_ql)
            require_range(*a.gamma > 0.0 && *a.gamma < 1.0, where + ".gamma", "(0, 1)", *a.gamma);
        else
            require_range(*a.gamma >= 0.0 && *a.gamma <= 1.0, where + ".gamma", "[0, 1]", *a.gamma);
    }
    if (a.delta) require_range(*a.delta > 0.0 && *a.delta < 1.0, where + ".delta", "(0, 1)", *a.delta);
    if (a.horizon) require_range(*a.horizon > 0.0, where + ".horizon", "(0, inf)", *a.horizon);
    if (a.reopt_every)
        require_range(*a.reopt_every >= 1, where + ".reopt_every", "[1, inf)", static_cast<double>(*a.reopt_every));
    return a;
}

inline json agent_to_json(const AgentSpec& a)
{
    json j{{"kind", to_string(a.kind)}};
    if (a.label) j["label"] = *a.label;
    if (a.epsilon) j["epsilon"] = *a.epsilon;
    if (a.alpha0) j["alpha0"] = *a.alpha0;
    if (a.beta0) j["beta0"] = *a.beta0;
    if (a.variant) j["variant"] = to_string(*a.variant);
    if (a.omega) j["omega"] = *a.omega;
    if (a.gamma) j["gamma"] = *a.gamma;
    if (a.delta) j["delta"] = *a.delta;
    if (a.horizon) j["horizon"] = *a.horizon;
    if (a.switch_at) j["switch_at"] = *a.switch_at;
    if (a.reopt_every) j["reopt_every"] = *a.reopt_every;
    if (a.projection) j["projection"] = to_string(*a.projection);
    return j;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j)
{
    static const std::vector<std::string> top{"schema_version", "mdp",      "agents",       "N",   "R", "base_seed",
                                              "schedule",       "checkpoints", "max_steps", "out", "save_beliefs"};
    detail::reject_unknown_keys(j, top, "config");
    const auto version = detail::get_field<int>(j, "schema_version", "config");
    if (version != kConfigSchemaVersion)
        throw ConfigError("config.schema_version: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kConfigSchemaVersion) + ")");

    ExperimentConfig cfg;

    // mdp source
    if (!j.contains("mdp")) throw ConfigError("config.mdp: missing");
    const auto& m = j.at("mdp");
    detail::reject_unknown_keys(m, {"preset", "file", "generator"}, "config.mdp");
    if (m.size() != 1) throw ConfigError("config.mdp: give exactly one of preset, file, generator");
    if (m.contains("preset")) {
        cfg.mdp.kind = MdpSource::Kind::preset;
        cfg.mdp.name = detail::get_field<std::string>(m, "preset", "config.mdp");
        const auto& names = preset_names();
        if (std::find(names.begin(), names.end(), cfg.mdp.name) == names.end())
            throw ConfigError("config.mdp.preset: unknown preset \"" + cfg.mdp.name +
                              "\" (expected bandit, funnel-small or funnel-large)");
    } else if (m.contains("file")) {
        cfg.mdp.kind = MdpSource::Kind::file;
        cfg.mdp.name = detail::get_field<std::string>(m, "file", "config.mdp");
    } else {
        cfg.mdp.kind = MdpSource::Kind::generator;
        cfg.mdp.generator = m.at("generator");
        gen_params_from_json(*cfg.mdp.generator, "config.mdp.generator");  // validate now
    }

    // agents
    if (!j.contains("agents") || !j.at("agents").is_array() || j.at("agents").empty())
        throw ConfigError("config.agents: need a non-empty list");
    std::set<std::string> labels;
    for (std::size_t i = 0; i < j.at("agents").size(); ++i) {
        const std::string where = "config.agents[" + std::to_string(i) + "]";
        auto a = detail::agent_from_json(j.at("agents")[i], where);
        if (!labels.insert(a.display_name()).second)
            throw ConfigError(where + ": duplicate agent name \"" + a.display_name() + "\" (set a distinct label)");
        cfg.agents.push_back(std::move(a));
    }

    cfg.N = detail::get_field<std::uint64_t>(j, "N", "config");
    detail::require_range(cfg.N >= 1, "config.N", "[1, inf)", static_cast<double>(cfg.N));
    cfg.R = detail::get_field<std::uint64_t>(j, "R", "config");
    detail::require_range(cfg.R >= 1, "config.R", "[1, inf)", static_cast<double>(cfg.R));
    cfg.base_seed = detail::get_optional<std::uint64_t>(j, "base_seed", "config").value_or(0);

    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        detail::reject_unknown_keys(s, {"mode", "switch_after", "n1", "n2", "permutation"}, "config.schedule");
        const auto mode = detail::get_field<std::string>(s, "mode", "config.schedule");
        if (mode == "none") cfg.schedule.mode = ShiftSchedule::Mode::none;
        else if (mode == "two_phase") cfg.schedule.mode = ShiftSchedule::Mode::two_phase;
        else if (mode == "gradual") cfg.schedule.mode = ShiftSchedule::Mode::gradual;
        else throw ConfigError("config.schedule.mode: expected none, two_phase or gradual, got \"" + mode + "\"");
        cfg.schedule.switch_after = detail::get_optional<std::uint64_t>(s, "switch_after", "config.schedule");
        cfg.schedule.n1 = detail::get_optional<std::uint64_t>(s, "n1", "config.schedule");
        cfg.schedule.n2 = detail::get_optional<std::uint64_t>(s, "n2", "config.schedule");
        cfg.schedule.permutation = detail::get_optional<std::vector<ActionId>>(s, "permutation", "config.schedule");
        try {
            cfg.schedule.resolve(cfg.N).check(cfg.N);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config.schedule: ") + e.what());
        }
    }

    cfg.checkpoints = detail::get_optional<std::vector<std::uint64_t>>(j, "checkpoints", "config");
    if (cfg.checkpoints) {
        const auto& c = *cfg.checkpoints;
        if (c.empty()) throw ConfigError("config.checkpoints: need at least one point");
        for (std::size_t i = 0; i < c.size(); ++i)
            if (c[i] < 1 || c[i] > cfg.N || (i > 0 && c[i] <= c[i - 1]))
                throw ConfigError("config.checkpoints: must be strictly increasing within [1, N]");
    }
    cfg.max_steps = detail::get_optional<int>(j, "max_steps", "config");
    if (cfg.max_steps) detail::require_range(*cfg.max_steps >= 1, "config.max_steps", "[1, inf)", *cfg.max_steps);
    cfg.out = detail::get_optional<std::string>(j, "out", "config");
    cfg.save_beliefs = detail::get_optional<bool>(j, "save_beliefs", "config").value_or(false);
    return cfg;
}

inline json config_to_json(const ExperimentConfig& cfg)
{
    json j;
    j["schema_version"] = kConfigSchemaVersion;
    switch (cfg.mdp.kind) {
    case MdpSource::Kind::preset: j["mdp"] = {{"preset", cfg.mdp.name}}; break;
    case MdpSource::Kind::file: j["mdp"] = {{"file", cfg.mdp.name}}; break;
    case MdpSource::Kind::generator: j["mdp"] = {{"generator", *cfg.mdp.generator}}; break;
    }
    j["agents"] = json::array();
    for (const auto& a : cfg.agents) j["agents"].push_back(detail::agent_to_json(a));
    j["N"] = cfg.N;
    j["R"] = cfg.R;
    j["base_seed"] = cfg.base_seed;
    if (cfg.schedule.mode != ShiftSchedule::Mode::none || cfg.schedule.switch_after || cfg.schedule.n1 ||
        cfg.schedule.n2 || cfg.schedule.permutation) {
        json s{{"mode", to_string(cfg.schedule.mode)}};
        if (cfg.schedule.switch_after) s["switch_after"] = *cfg.schedule.switch_after;
        if (cfg.schedule.n1) s["n1"] = *cfg.schedule.n1;
        if (cfg.schedule.n2) s["n2"] = *cfg.schedule.n2;
        if (cfg.schedule.permutation) s["permutation"] = *cfg.schedule.permutation;
        j["schedule"] = s;
    }
    if (cfg.checkpoints) j["checkpoints"] = *cfg.checkpoints;
    if (cfg.max_steps) j["max_steps"] = *cfg.max_steps;
    if (cfg.out) j["out"] = *cfg.out;
    if (cfg.save_beliefs) j["save_beliefs"] = true;
    return j;
}

inline ExperimentConfig parse_config(const std::string& path)
{
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Environment and agent construction
// ---------------------------------------------------------------------------

/// Immutable ground truth shared by all runs of a batch.
struct Environment {
    std::string name;
    FunnelMdp mdp;
    std::optional<SyntheticFunnel> funnel;  // present for generated instances
    double v_star = 0.0;
    std::vector<ActionId> optimal_policy;
    int max_steps = kDefaultMaxSteps;
};

inline Environment build_environment(const MdpSource& src, std::optional<int> max_steps = std::nullopt)
{
    Environment env;
    switch (src.kind) {
    case MdpSource::Kind::preset:
        env.name = src.name;
        if (src.name == "bandit") {
            env.mdp = bandit_example();
        } else {
            env.funnel = synthetic_funnel(preset_params(src.name));
            env.mdp = env.funnel->mdp;
        }
        break;
    case MdpSource::Kind::file:
        env.name = std::filesystem::path(src.name).stem().string();
        try {
            env.mdp = load_mdp(src.name);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config.mdp.file: ") + e.what());
        }
        break;
    case MdpSource::Kind::generator:
        env.name = "generated";
        env.funnel = synthetic_funnel(gen_params_from_json(*src.generator, "config.mdp.generator"));
        env.mdp = env.funnel->mdp;
        break;
    }
    const auto absorption = check_absorption(env.mdp);
    if (!absorption.is_absorbing)
        throw ConfigError("config.mdp: model is not absorbing (max survival probability " +
                          format_double(absorption.max_survival_prob) + ")");
    auto plan = solve_q_star(env.mdp);
    env.v_star = optimal_conversion_rate(env.mdp, plan.v);
    if (!(env.v_star > 0.0)) throw ConfigError("config.mdp: optimal conversion rate is zero");
    env.optimal_policy = std::move(plan.greedy);
    env.max_steps = max_steps.value_or(env.funnel ? 10 * env.funnel->params.horizon : kDefaultMaxSteps);
    return env;
}

/// Per-agent data derived once from the environment and shared across seeds.
struct AgentPlan {
    AgentSpec spec;
    std::string name;
    std::optional<StateProjection> projection;
    std::shared_ptr<const TransitionSupport> support;  // PSRL only
};

inline AgentPlan plan_agent(const AgentSpec& spec, const Environment& env)
{
    AgentPlan plan{spec, spec.display_name(), std::nullopt, nullptr};
    if (spec.projection && *spec.projection != FeatureSet::full) {
        if (!env.funnel)
            throw ConfigError("agent \"" + plan.name + "\": projection needs a generated funnel (preset or generator)");
        plan.projection = feature_projection(*env.funnel, *spec.projection);
    }
    if (spec.kind == AgentKind::psrl)
        plan.support = std::make_shared<const TransitionSupport>(
            plan.projection ? project_support(env.mdp, *plan.projection) : support_of(env.mdp));
    return plan;
}

inline MfablConfig mfabl_config(const AgentSpec& s)
{
    MfablConfig c;
    c.epsilon = s.epsilon.value_or(c.epsilon);
    c.alpha0 = s.alpha0.value_or(c.alpha0);
    c.beta0 = s.beta0.value_or(c.beta0);
    c.variant = s.variant.value_or(c.variant);
    c.omega = s.omega.value_or(c.omega);
    c.gamma = s.gamma.value_or(c.gamma);
    return c;
}

inline std::unique_ptr<Agent> build_agent(const AgentPlan& plan, const Environment& env, std::uint64_t seed)
{
    const auto& s = plan.spec;
    const ActionId A = env.mdp.num_actions();
    const StateId S = plan.projection ? plan.projection->num_coarse() : env.mdp.num_states();
    const std::uint64_t as = agent_seed(seed);
    std::unique_ptr<Agent> agent;
    switch (s.kind) {
    case AgentKind::ts: agent = std::make_unique<ThompsonAgent>(A, s.alpha0.value_or(1.0), s.beta0.value_or(1.0), as); break;
    case AgentKind::mfabl: agent = make_mfabl(A, mfabl_config(s), as); break;
    case AgentKind::pmfabl: agent = make_pmfabl(A, mfabl_config(s), as); break;
    case AgentKind::hybrid: agent = make_hybrid(A, mfabl_config(s), s.switch_at.value_or(0), as); break;
    case AgentKind::psrl: agent = std::make_unique<PsrlAgent>(*plan.support, s.reopt_every.value_or(1000), as); break;
    case AgentKind::qlucb: {
        QlUcbParams q;
        q.epsilon = s.epsilon.value_or(q.epsilon);
        q.gamma = s.gamma.value_or(q.gamma);
        q.delta = s.delta.value_or(q.delta);
        q.horizon = s.horizon.value_or(q.horizon);
        agent = std::make_unique<QlUcbAgent>(S, A, q, as);
        break;
    }
    case AgentKind::optimal: agent = std::make_unique<FixedPolicyAgent>(env.optimal_policy, "optimal"); break;
    }
    if (plan.projection) agent = wrap_misspecified(std::move(agent), *plan.projection);
    return agent;
}

// ---------------------------------------------------------------------------
// Batch execution
// ---------------------------------------------------------------------------

struct BatchRun {
    RunResult result;
    std::string beliefs_csv;  // filled when requested
};

/**
 * Runs every (agent, r) pair with seed base_seed + r on up to `parallelism`
 * threads. Output is ordered by (agent, r) regardless of scheduling.
 */
inline std::vector<BatchRun> run_batch_detailed(const ExperimentConfig& cfg, const Environment& env, int parallelism,
                                                bool keep_beliefs = false)
{
    if (parallelism < 1) throw ConfigError("parallelism must be at least 1");
    std::vector<AgentPlan> plans;
    for (const auto& a : cfg.agents) plans.push_back(plan_agent(a, env));
    const ShiftSchedule schedule = cfg.schedule.resolve(cfg.N);
    if (!schedule.permutation.empty() && schedule.permutation.size() != static_cast<std::size_t>(env.mdp.num_actions()))
        throw ConfigError("config.schedule.permutation: needs one entry per action");

    const std::size_t total = plans.size() * cfg.R;
    std::vector<BatchRun> out(total);
    std::vector<std::exception_ptr> errors(total);
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t i = next++; i < total; i = next++) {
            const auto& plan = plans[i / cfg.R];
            const std::uint64_t seed = cfg.base_seed + i % cfg.R;
            try {
                auto agent = build_agent(plan, env, seed);
                out[i].result = run_experiment(env.mdp, schedule, *agent, cfg.N, seed, {env.max_steps, env.name});
                out[i].result.agent = plan.name;
                if (keep_beliefs) {
                    std::ostringstream os;
                    if (const auto* b = agent->beta_table())
                        write_beta_csv(os, *b);
                    else if (const auto* d = agent->dirichlet_table())
                        d->write_csv(os);
                    out[i].beliefs_csv = os.str();
                }
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const auto n_threads = static_cast<std::size_t>(std::min<std::uint64_t>(static_cast<std::uint64_t>(parallelism), total));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }
    for (std::size_t i = 0; i < total; ++i) {
        if (!errors[i]) continue;
        const std::string who = "agent \"" + plans[i / cfg.R].name + "\", seed " + std::to_string(cfg.base_seed + i % cfg.R);
        try {
            std::rethrow_exception(errors[i]);
        } catch (const std::exception& e) {
            throw RunFailure(who + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<RunResult> run_batch(const ExperimentConfig& cfg, const Environment& env, int parallelism)
{
    auto detailed = run_batch_detailed(cfg, env, parallelism);
    std::vector<RunResult> out;
    out.reserve(detailed.size());
    for (auto& d : detailed) out.push_back(std::move(d.result));
    return out;
}

inline std::vector<RunResult> run_batch(const ExperimentConfig& cfg, int parallelism)
{
    return run_batch(cfg, build_environment(cfg.mdp, cfg.max_steps), parallelism);
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct PhaseStats {
    double mean_pr = 0.0;
    double std_pr = 0.0;
    double mean_consumers = 0.0;
};

struct AgentAggregate {
    std::string agent;
    std::uint64_t N = 0;
    std::size_t runs = 0;
    double mean_pr = 0.0;
    double std_pr = 0.0;  // population convention: divide by R
    double mean_learner_seconds = 0.0;
    std::vector<double> curve;  // mean prefix PR at each checkpoint
    std::optional<std::array<PhaseStats, 2>> phases;
    std::uint64_t truncations = 0;
};

struct AggregateReport {
    double v_star = 0.0;
    std::vector<std::uint64_t> checkpoints;
    std::vector<AgentAggregate> agents;  // order of first appearance
};

inline std::pair<double, double> mean_and_population_std(const std::vector<double>& xs)
{
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    return {mean, std::sqrt(var)};
}

/**
 * Groups runs by agent (order of first appearance). Phase statistics are
 * reported when any run in a group saw phase 2.
 */
inline AggregateReport aggregate(const std::vector<RunResult>& results, double v_star,
                                 std::optional<std::vector<std::uint64_t>> checkpoints = std::nullopt)
{
    if (results.empty()) throw std::invalid_argument("aggregate: no runs");
    AggregateReport rep;
    rep.v_star = v_star;
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunResult*>> groups;
    for (const auto& r : results) {
        auto [it, fresh] = groups.try_emplace(r.agent);
        if (fresh) order.push_back(r.agent);
        it->second.push_back(&r);
    }
    const std::uint64_t N = results.front().num_consumers();
    rep.checkpoints = checkpoints ? *checkpoints : default_checkpoints(N);

    for (const auto& name : order) {
        const auto& g = groups[name];
        AgentAggregate agg;
        agg.agent = name;
        agg.N = g.front()->num_consumers();
        agg.runs = g.size();
        std::vector<double> prs, secs;
        std::vector<double> curve(rep.checkpoints.size(), 0.0);
        bool shifted = false;
        for (const auto* r : g) {
            if (r->num_consumers() != agg.N) throw std::invalid_argument("aggregate: runs of \"" + name + "\" differ in N");
            prs.push_back(performance_ratio(*r, v_star));
            secs.push_back(r->learner_seconds);
            const auto c = prefix_pr_curve(*r, v_star, rep.checkpoints);
            for (std::size_t k = 0; k < c.size(); ++k) curve[k] += c[k];
            agg.truncations += r->truncations;
            shifted = shifted || std::find(r->phase.begin(), r->phase.end(), 2) != r->phase.end();
        }
        std::tie(agg.mean_pr, agg.std_pr) = mean_and_population_std(prs);
        agg.mean_learner_seconds = mean_and_population_std(secs).first;
        for (auto& c : curve) c /= static_cast<double>(g.size());
        agg.curve = std::move(curve);
        if (shifted) {
            std::array<PhaseStats, 2> ph{};
            for (int p = 1; p <= 2; ++p) {
                std::vector<double> v;
                double consumers = 0.0;
                for (const auto* r : g) {
                    v.push_back(phase_pr(*r, v_star, p));
                    consumers += static_cast<double>(std::count(r->phase.begin(), r->phase.end(), p));
                }
                auto [m, sd] = mean_and_population_std(v);
                ph[p - 1] = {m, sd, consumers / static_cast<double>(g.size())};
            }
            agg.phases = ph;
        }
        rep.agents.push_back(std::move(agg));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

inline void write_summary_csv(std::ostream& os, const AggregateReport& rep)
{
    os << "agent,mean_pr,std_pr\n";
    for (const auto& a : rep.agents) os << a.agent << ',' << format_double(a.mean_pr) << ',' << format_double(a.std_pr) << '\n';
}

inline void write_curves_csv(std::ostream& os, const AggregateReport& rep)
{
    os << "agent,n_checkpoint,pr\n";
    for (const auto& a : rep.agents)
        for (std::size_t k = 0; k < rep.checkpoints.size(); ++k)
            os << a.agent << ',' << rep.checkpoints[k] << ',' << format_double(a.curve[k]) << '\n';
}

inline void write_phases_csv(std::ostream& os, const AggregateReport& rep)
{
    os << "agent,phase,mean_pr,std_pr,mean_consumers\n";
    for (const auto& a : rep.agents) {
        if (!a.phases) continue;
        for (int p = 0; p < 2; ++p) {
            const auto& s = (*a.phases)[p];
            os << a.agent << ',' << p + 1 << ',' << format_double(s.mean_pr) << ',' << format_double(s.std_pr) << ','
               << format_double(s.mean_consumers) << '\n';
        }
    }
}

/// Mean learner seconds and the ratio to the "ts" agent when one is present.
inline void write_timings_csv(std::ostream& os, const AggregateReport& rep)
{
    std::optional<double> ts;
    for (const auto& a : rep.agents)
        if (a.agent == "ts") ts = a.mean_learner_seconds;
    os << "agent,mean_learner_seconds,ratio_to_ts\n";
    for (const auto& a : rep.agents) {
        os << a.agent << ',' << format_double(a.mean_learner_seconds) << ',';
        if (ts && *ts > 0.0) os << format_double(a.mean_learner_seconds / *ts);
        os << '\n';
    }
}

inline void write_summary_text(std::ostream& os, const AggregateReport& rep)
{
    os << "optimal conversion rate v* = " << format_double(rep.v_star) << "\n";
    os << "PR = conversions / (N v*), averaged over seeds; std uses the population convention (divide by R)\n\n";
    std::size_t w = 5;
    for (const auto& a : rep.agents) w = std::max(w, a.agent.size());
    auto pad = [&](const std::string& s) { return s + std::string(w - s.size() + 2, ' '); };
    char line[256];
    os << pad("agent") << "runs        N   mean_pr    std_pr   learner_s\n";
    for (const auto& a : rep.agents) {
        std::snprintf(line, sizeof line, "%4zu %8llu  %8.4f  %8.4f  %10.4f", a.runs, static_cast<unsigned long long>(a.N),
                      a.mean_pr, a.std_pr, a.mean_learner_seconds);
        os << pad(a.agent) << line << '\n';
    }
    bool any_phase = false;
    for (const auto& a : rep.agents) any_phase = any_phase || a.phases.has_value();
    if (any_phase) {
        os << "\nphase-wise PR\n" << pad("agent") << "  phase 1   phase 2\n";
        for (const auto& a : rep.agents) {
            if (!a.phases) continue;
            std::snprintf(line, sizeof line, "%8.4f  %8.4f", (*a.phases)[0].mean_pr, (*a.phases)[1].mean_pr);
            os << pad(a.agent) << ' ' << line << '\n';
        }
    }
}

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& content)
{
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << content;
    if (!os) throw std::runtime_error("error writing " + p.string());
}

template <class F>
std::string render(F&& f)
{
    std::ostringstream os;
    f(os);
    return os.str();
}

}  // namespace detail

/// Writes summary.csv, curves.csv, phases.csv, timings.csv and summary.txt into `dir`.
inline void emit_reports(const AggregateReport& rep, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    detail::write_file(dir / "summary.csv", detail::render([&](auto& os) { write_summary_csv(os, rep); }));
    detail::write_file(dir / "curves.csv", detail::render([&](auto& os) { write_curves_csv(os, rep); }));
    detail::write_file(dir / "phases.csv", detail::render([&](auto& os) { write_phases_csv(os, rep); }));
    detail::write_file(dir / "timings.csv", detail::render([&](auto& os) { write_timings_csv(os, rep); }));
    detail::write_file(dir / "summary.txt", detail::render([&](auto& os) { write_summary_text(os, rep); }));
}

// ---------------------------------------------------------------------------
// Per-run files
// ---------------------------------------------------------------------------

inline void write_run_csv(std::ostream& os, const RunResult& r)
{
    os << "consumer,converted,phase\n";
    for (std::size_t i = 0; i < r.converted.size(); ++i)
        os << i + 1 << ',' << int{r.converted[i]} << ',' << int{r.phase[i]} << '\n';
}

inline json run_metadata(const RunResult& r)
{
    return {{"agent", r.agent},
            {"mdp", r.mdp},
            {"seed", r.seed},
            {"N", r.num_consumers()},
            {"learner_seconds", r.learner_seconds},
            {"truncations", r.truncations},
            {"permutation", r.permutation}};
}

inline RunResult read_run(const std::filesystem::path& csv, const std::filesystem::path& meta)
{
    RunResult r;
    {
        std::ifstream is(meta);
        if (!is) throw std::runtime_error("cannot read " + meta.string());
        const json j = json::parse(is);
        r.agent = j.at("agent").get<std::string>();
        r.mdp = j.at("mdp").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.learner_seconds = j.at("learner_seconds").get<double>();
        r.truncations = j.at("truncations").get<std::uint64_t>();
        r.permutation = j.at("permutation").get<std::vector<ActionId>>();
    }
    std::ifstream is(csv);
    if (!is) throw std::runtime_error("cannot read " + csv.string());
    std::string line;
    std::getline(is, line);
    if (line != "consumer,converted,phase") throw std::runtime_error(csv.string() + ": unexpected header");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) throw std::runtime_error(csv.string() + ": bad row " + line);
        r.converted.push_back(static_cast<std::uint8_t>(std::stoi(line.substr(c1 + 1, c2 - c1 - 1))));
        r.phase.push_back(static_cast<std::uint8_t>(std::stoi(line.substr(c2 + 1))));
    }
    return r;
}

inline std::string run_stem(const RunResult& r) { return "seed_" + std::to_string(r.seed); }

/// Agent labels may contain characters awkward in paths ('+', '@'); keep them readable but safe.
inline std::string path_safe(const std::string& s)
{
    std::string out;
    for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
    return out;
}

/**
 * Full `run` pipeline: builds the environment, runs the batch, writes the
 * resolved config, run_info.json, per-run files and the reports into `dir`.
 */
inline AggregateReport run_and_write(const ExperimentConfig& cfg, int parallelism, const std::filesystem::path& dir)
{
    const Environment env = build_environment(cfg.mdp, cfg.max_steps);
    auto runs = run_batch_detailed(cfg, env, parallelism, cfg.save_beliefs);

    std::filesystem::create_directories(dir / "runs");
    detail::write_file(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
    const json info{{"mdp", env.name},
                    {"states", env.mdp.num_states()},
                    {"actions", env.mdp.num_actions()},
                    {"v_star", env.v_star},
                    {"max_steps", env.max_steps}};
    detail::write_file(dir / "run_info.json", info.dump(2) + "\n");

    std::vector<RunResult> results;
    for (auto& br : runs) {
        const auto& r = br.result;
        const auto sub = dir / "runs" / path_safe(r.agent);
        std::filesystem::create_directories(sub);
        detail::write_file(sub / (run_stem(r) + ".csv"), detail::render([&](auto& os) { write_run_csv(os, r); }));
        detail::write_file(sub / (run_stem(r) + ".json"), run_metadata(r).dump(2) + "\n");
        if (cfg.save_beliefs && !br.beliefs_csv.empty()) {
            const auto bdir = dir / "beliefs" / path_safe(r.agent);
            std::filesystem::create_directories(bdir);
            detail::write_file(bdir / (run_stem(r) + ".csv"), br.beliefs_csv);
        }
        results.push_back(std::move(br.result));
    }
    auto rep = aggregate(results, env.v_star, cfg.checkpoints);
    emit_reports(rep, dir);
    return rep;
}

/// Re-aggregates a directory written by run_and_write.
inline AggregateReport report_from_dir(const std::filesystem::path& dir)
{
    const auto cfg = parse_config((dir / "config.json").string());
    std::ifstream is(dir / "run_info.json");
    if (!is) throw std::runtime_error("cannot read " + (dir / "run_info.json").string());
    const double v_star = json::parse(is).at("v_star").get<double>();
    std::vector<RunResult> results;
    for (const auto& a : cfg.agents)
        for (std::uint64_t r = 0; r < cfg.R; ++r) {
            const auto sub = dir / "runs" / path_safe(a.display_name());
            const std::string stem = "seed_" + std::to_string(cfg.base_seed + r);
            results.push_back(read_run(sub / (stem + ".csv"), sub / (stem + ".json")));
        }
    auto rep = aggregate(results, v_star, cfg.checkpoints);
    emit_reports(rep, dir);
    return rep;
}

}  // namespace funnel
