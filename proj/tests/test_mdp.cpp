#include <gtest/gtest.h>

#include <map>

#include "funnel/mdp.hpp"
#include "funnel/mdp_io.hpp"
#include "funnel/planner.hpp"
#include "funnel/verification.hpp"

using namespace funnel;

namespace {

FunnelMdp two_state_chain()
{
    // s0 -> s1 w.p. 1; s1 -> {c 0.5, q 0.5}
    return FunnelMdp(2, 1, {{{1, 1.0}}, {{kConvert, 0.5}, {kQuit, 0.5}}}, {1.0, 0.0});
}

}  // namespace

TEST(Validate, BanditExampleIsValid)
{
    const auto r = validate(bandit_example());
    EXPECT_TRUE(r.ok());
}

TEST(Validate, RowSummingToPointNineIsFlagged)
{
    FunnelMdp m(1, 1, {{{kConvert, 0.4}, {kQuit, 0.5}}}, {1.0});
    const auto r = validate(m);
    EXPECT_FALSE(r.ok());
    EXPECT_TRUE(r.has(Violation::Kind::row_sum));
}

TEST(Validate, IsolatedStateIsFlaggedUnreachable)
{
    FunnelMdp m(2, 1, {{{kQuit, 1.0}}, {{kQuit, 1.0}}}, {1.0, 0.0});
    const auto r = validate(m);
    EXPECT_TRUE(r.has(Violation::Kind::unreachable));
    const auto pruned = drop_unreachable(m);
    EXPECT_EQ(pruned.num_states(), 1);
    EXPECT_TRUE(validate(pruned).ok());
}

TEST(Validate, OtherViolationKinds)
{
    FunnelMdp dup(1, 1, {{{kQuit, 0.5}, {kQuit, 0.5}}}, {1.0});
    EXPECT_TRUE(validate(dup).has(Violation::Kind::duplicate_successor));
    FunnelMdp range(1, 1, {{{kQuit, 1.5}, {kConvert, -0.5}}}, {1.0});
    EXPECT_TRUE(validate(range).has(Violation::Kind::probability_range));
    FunnelMdp init(2, 1, {{{kQuit, 1.0}}, {{kQuit, 1.0}}}, {0.7, 0.2});
    EXPECT_TRUE(validate(init).has(Violation::Kind::initial_sum));
    FunnelMdp neg(2, 1, {{{kQuit, 1.0}}, {{kQuit, 1.0}}}, {1.5, -0.5});
    EXPECT_TRUE(validate(neg).has(Violation::Kind::initial_negative));
    FunnelMdp empty(1, 1, {{{kQuit, 1.0}}}, {0.0});
    EXPECT_TRUE(validate(empty).has(Violation::Kind::empty_initial));
}

TEST(Validate, ConstructorRejectsBadShape)
{
    EXPECT_THROW(FunnelMdp(1, 2, {{{kQuit, 1.0}}}, {1.0}), std::invalid_argument);
    EXPECT_THROW(FunnelMdp(1, 1, {{{3, 1.0}}}, {1.0}), std::invalid_argument);
    EXPECT_THROW(FunnelMdp(1, 1, {{{kQuit, 1.0}}}, {0.5, 0.5}), std::invalid_argument);
}

TEST(Absorption, BanditAbsorbsImmediately)
{
    const auto r = check_absorption(bandit_example());
    EXPECT_TRUE(r.is_absorbing);
    EXPECT_EQ(r.max_survival_prob, 0.0);
}

TEST(Absorption, SelfLoopWithProbabilityOneSurvives)
{
    FunnelMdp m(1, 2, {{{kQuit, 1.0}}, {{0, 1.0}}}, {1.0});
    const auto r = check_absorption(m);
    EXPECT_FALSE(r.is_absorbing);
    EXPECT_DOUBLE_EQ(r.max_survival_prob, 1.0);
}

TEST(Absorption, SurvivalIsMonotoneAndNonNegative)
{
    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
        const auto m = random_absorbing_mdp(4, 2, rng);
        double prev = 1.0;
        for (int it = 1; it <= 30; ++it) {
            const auto r = check_absorption(m, 0.0, it);
            EXPECT_LE(r.max_survival_prob, prev);
            EXPECT_GE(r.max_survival_prob, 0.0);
            prev = r.max_survival_prob;
        }
    }
}

TEST(SampleInitial, PointMassAndBandit)
{
    CounterStream g(1);
    EXPECT_EQ(sample_initial(two_state_chain(), g), 0);
    EXPECT_EQ(sample_initial(bandit_example(), g), 0);
}

TEST(SampleInitial, EvenSplitFrequency)
{
    FunnelMdp m(2, 1, {{{kQuit, 1.0}}, {{kQuit, 1.0}}}, {0.5, 0.5});
    CounterStream g(2);
    int zeros = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) zeros += sample_initial(m, g) == 0;
    EXPECT_GE(zeros / double(n), 0.495);
    EXPECT_LE(zeros / double(n), 0.505);
}

TEST(Step, BanditActionOneConvertsThirtyPercent)
{
    const auto m = bandit_example();
    CounterStream g(3);
    int conv = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) conv += step(m, 0, 1, g) == kConvert;
    EXPECT_GE(conv / double(n), 0.294);
    EXPECT_LE(conv / double(n), 0.306);
}

TEST(Step, BanditActionTwoAlwaysQuits)
{
    const auto m = bandit_example();
    CounterStream g(4);
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(step(m, 0, 2, g), kQuit);
}

TEST(Step, DeterministicRowAndRangeErrors)
{
    const auto m = two_state_chain();
    CounterStream g(5);
    EXPECT_EQ(step(m, 0, 0, g), 1);
    EXPECT_THROW(step(m, 2, 0, g), std::out_of_range);
    EXPECT_THROW(step(m, 0, 1, g), std::out_of_range);
    EXPECT_THROW(step(m, kConvert, 0, g), std::out_of_range);
}

TEST(Step, EmpiricalFrequenciesMatchRowChiSquare)
{
    FunnelMdp m(2, 1,
                {{{kConvert, 0.1}, {kQuit, 0.2}, {1, 0.3}, {0, 0.4}}, {{kQuit, 1.0}}}, {1.0, 0.0});
    CounterStream g(6);
    std::map<StateId, int> hits;
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++hits[step(m, 0, 0, g)];
    double chi2 = 0.0;
    for (const auto& o : m.row(0, 0)) {
        const double e = o.prob * n;
        chi2 += (hits[o.next] - e) * (hits[o.next] - e) / e;
    }
    EXPECT_LT(chi2, 16.27);  // 3 dof, p = 0.001
}

TEST(Bandit, Shape)
{
    const auto m = bandit_example();
    EXPECT_EQ(m.num_states(), 1);
    EXPECT_EQ(m.num_actions(), 3);
    const auto r = m.row(0, 1);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0], (Outcome{kConvert, 0.3}));
    EXPECT_EQ(r[1], (Outcome{kQuit, 0.7}));
    EXPECT_EQ(m.row(0, 2)[0], (Outcome{kQuit, 1.0}));
}

TEST(PermuteActions, IdentityIsNoOp)
{
    const auto m = bandit_example();
    const std::vector<ActionId> id{0, 1, 2};
    EXPECT_EQ(permute_actions(m, id), m);
}

TEST(PermuteActions, SwapMovesOptimalAction)
{
    const std::vector<ActionId> swap{0, 2, 1};
    const auto q = solve_q_star(permute_actions(bandit_example(), swap)).q;
    EXPECT_NEAR(q(0, 2), 0.3, 1e-12);
    EXPECT_NEAR(q(0, 1), 0.0, 1e-12);
}

TEST(PermuteActions, InverseRestoresBitExactlyAndValueIsInvariant)
{
    Rng rng(12);
    for (int i = 0; i < 10; ++i) {
        const auto m = random_absorbing_mdp(5, 3, rng);
        const auto perm = random_permutation(3, rng);
        const auto p = permute_actions(m, perm);
        EXPECT_EQ(permute_actions(p, inverse_permutation(perm)), m);
        const double v0 = optimal_conversion_rate(m, solve_q_star(m).v);
        const double v1 = optimal_conversion_rate(p, solve_q_star(p).v);
        EXPECT_NEAR(v0, v1, 1e-12);
    }
}

TEST(PermuteActions, InvolutionAppliedTwiceIsIdentity)
{
    Rng rng(13);
    const auto m = random_absorbing_mdp(4, 3, rng);
    const std::vector<ActionId> inv{2, 1, 0};
    EXPECT_EQ(permute_actions(permute_actions(m, inv), inv), m);
}

TEST(PermuteActions, RejectsNonBijection)
{
    const std::vector<ActionId> bad{0, 0, 1};
    EXPECT_THROW(permute_actions(bandit_example(), bad), std::invalid_argument);
    const std::vector<ActionId> short_perm{0, 1};
    EXPECT_THROW(permute_actions(bandit_example(), short_perm), std::invalid_argument);
}

TEST(Projection, IdentityAndPartial)
{
    const auto m = two_state_chain();
    const auto id = project_state(m, {0, 1});
    EXPECT_TRUE(id.is_identity());
    EXPECT_EQ(id(1), 1);
    EXPECT_EQ(id(kConvert), kConvert);
    EXPECT_EQ(id(kQuit), kQuit);
    EXPECT_THROW(project_state(m, {0}), std::invalid_argument);
    EXPECT_THROW(project_state(m, {0, -1}), std::invalid_argument);
}

TEST(Projection, MergingStatesGivesFewerCoarseStates)
{
    const auto m = two_state_chain();
    const auto p = project_state(m, {7, 7});
    EXPECT_EQ(p.num_coarse(), 1);
    const auto sup = project_support(m, p);
    ASSERT_EQ(sup.num_states, 1);
    const std::vector<StateId> expected{kQuit, kConvert, 0};
    EXPECT_EQ(std::vector<StateId>(sup.row(0, 0).begin(), sup.row(0, 0).end()), expected);
    EXPECT_DOUBLE_EQ(sup.initial[0], 1.0);
}

TEST(Support, KeepsOnlyPositiveEntries)
{
    FunnelMdp m(1, 1, {{{kConvert, 0.0}, {kQuit, 1.0}}}, {1.0});
    const auto sup = support_of(m);
    ASSERT_EQ(sup.row(0, 0).size(), 1u);
    EXPECT_EQ(sup.row(0, 0)[0], kQuit);
}

TEST(MdpJson, RoundTripIsExact)
{
    Rng rng(14);
    for (int i = 0; i < 10; ++i) {
        const auto m = random_absorbing_mdp(5, 3, rng);
        const auto back = mdp_from_json(json::parse(mdp_to_json(m).dump()));
        EXPECT_EQ(back, m);
    }
}

TEST(MdpJson, UsesStringSentinels)
{
    const auto j = mdp_to_json(bandit_example());
    EXPECT_EQ(j["states"], 1);
    EXPECT_EQ(j["actions"], 3);
    EXPECT_EQ(j["transitions"][1][2], "c");
    EXPECT_EQ(j["transitions"][2][2], "q");
}

TEST(MdpJson, RejectsMalformedDocuments)
{
    auto j = mdp_to_json(bandit_example());
    auto bad = j;
    bad["transitions"][1][2] = "x";
    EXPECT_THROW(mdp_from_json(bad), std::invalid_argument);
    bad = j;
    bad.erase("initial");
    EXPECT_THROW(mdp_from_json(bad), std::invalid_argument);
    bad = j;
    bad["extra"] = 1;
    EXPECT_THROW(mdp_from_json(bad), std::invalid_argument);
    bad = j;
    bad["transitions"][1][3] = 0.5;  // row no longer sums to 1
    EXPECT_THROW(mdp_from_json(bad), std::invalid_argument);
}
