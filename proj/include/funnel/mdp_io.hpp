#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "funnel/mdp.hpp"

namespace funnel {

using json = nlohmann::json;

namespace detail {

inline json state_to_json(StateId s)
{
    if (s == kConvert) return "c";
    if (s == kQuit) return "q";
    return s;
}

inline StateId state_from_json(const json& j)
{
    if (j.is_string()) {
        const auto& t = j.get_ref<const std::string&>();
        if (t == "c") return kConvert;
        if (t == "q") return kQuit;
        throw std::invalid_argument("MDP file: unknown state label '" + t + "'");
    }
    if (!j.is_number_integer()) throw std::invalid_argument("MDP file: state must be an integer or \"c\"/\"q\"");
    const auto s = j.get<StateId>();
    if (s < 0) throw std::invalid_argument("MDP file: negative state id " + std::to_string(s));
    return s;
}

}  // namespace detail

/**
 * {states, actions, transitions: [[s, a, s', p]...], initial: [[s, p]...]}
 * with "c" and "q" for the convert and quit states. Zero-probability
 * entries are omitted.
 */
inline json mdp_to_json(const FunnelMdp& mdp)
{
    json tr = json::array();
    for (StateId s = 0; s < mdp.num_states(); ++s)
        for (ActionId a = 0; a < mdp.num_actions(); ++a)
            for (const auto& o : mdp.row(s, a)) tr.push_back({s, a, detail::state_to_json(o.next), o.prob});
    json init = json::array();
    for (StateId s = 0; s < mdp.num_states(); ++s)
        if (mdp.initial()[s] != 0.0) init.push_back({s, mdp.initial()[s]});
    return {{"states", mdp.num_states()}, {"actions", mdp.num_actions()}, {"transitions", tr}, {"initial", init}};
}

/// Parses and validates; throws std::invalid_argument with the offending entry.
inline FunnelMdp mdp_from_json(const json& j)
{
    for (const char* key : {"states", "actions", "transitions", "initial"})
        if (!j.contains(key)) throw std::invalid_argument(std::string("MDP file: missing field '") + key + "'");
    for (const auto& [key, _] : j.items())
        if (key != "states" && key != "actions" && key != "transitions" && key != "initial")
            throw std::invalid_argument("MDP file: unknown field '" + key + "'");

    const auto S = j.at("states").get<StateId>();
    const auto A = j.at("actions").get<ActionId>();
    if (S < 1 || A < 1) throw std::invalid_argument("MDP file: states and actions must be positive");

    std::vector<std::vector<Outcome>> rows(static_cast<std::size_t>(S) * A);
    for (const auto& t : j.at("transitions")) {
        if (!t.is_array() || t.size() != 4) throw std::invalid_argument("MDP file: transition must be [s, a, s', p]: " + t.dump());
        const auto s = t[0].get<StateId>();
        const auto a = t[1].get<ActionId>();
        if (s < 0 || s >= S || a < 0 || a >= A) throw std::invalid_argument("MDP file: transition out of range: " + t.dump());
        const StateId next = detail::state_from_json(t[2]);
        if (next >= S) throw std::invalid_argument("MDP file: successor out of range: " + t.dump());
        rows[static_cast<std::size_t>(s) * A + a].push_back({next, t[3].get<double>()});
    }
    std::vector<double> initial(static_cast<std::size_t>(S), 0.0);
    for (const auto& e : j.at("initial")) {
        if (!e.is_array() || e.size() != 2) throw std::invalid_argument("MDP file: initial entry must be [s, p]: " + e.dump());
        const auto s = e[0].get<StateId>();
        if (s < 0 || s >= S) throw std::invalid_argument("MDP file: initial state out of range: " + e.dump());
        initial[s] += e[1].get<double>();
    }
    FunnelMdp mdp(S, A, std::move(rows), std::move(initial));
    require_valid(mdp);
    return mdp;
}

inline void save_mdp(const FunnelMdp& mdp, const std::string& path)
{
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << mdp_to_json(mdp).dump() << '\n';
}

inline FunnelMdp load_mdp(const std::string& path)
{
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
    return mdp_from_json(j);
}

}  // namespace funnel
