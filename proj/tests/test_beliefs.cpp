#include <gtest/gtest.h>

#include <sstream>

#include "funnel/beliefs.hpp"

using namespace funnel;

TEST(BetaTable, UnvisitedReadsReturnPriorWithoutAllocating)
{
    const BetaTable t(3, 1.0, 9.0);
    const auto c = t.get(42, 2);
    EXPECT_EQ(c.alpha, 1.0);
    EXPECT_EQ(c.beta, 9.0);
    EXPECT_EQ(c.visits, 0.0);
    EXPECT_EQ(t.num_entries(), 0u);
    EXPECT_FALSE(t.visited(42));
    EXPECT_DOUBLE_EQ(t.best_mean(42), 0.1);
}

TEST(BetaTable, TouchAllocatesOneRowFromPrior)
{
    BetaTable t(3, 2.0, 3.0);
    t.touch(5);
    t.touch(5);
    EXPECT_EQ(t.num_entries(), 3u);
    EXPECT_EQ(t.num_allocated_states(), 1u);
    EXPECT_TRUE(t.visited(5));
    EXPECT_EQ(t.get(5, 1).base, 5.0);
    EXPECT_EQ(t.get(5, 1).schedule_count(), 5.0);
}

TEST(BetaTable, BestMeanPicksLargestPosteriorMean)
{
    BetaTable t(2, 1.0, 1.0);
    t.at(0, 1).alpha = 3.0;
    EXPECT_DOUBLE_EQ(t.best_mean(0), 0.75);
}

TEST(BetaTable, RejectsBadPrior)
{
    EXPECT_THROW(BetaTable(0, 1.0, 1.0), std::invalid_argument);
    EXPECT_THROW(BetaTable(2, 0.0, 1.0), std::invalid_argument);
    EXPECT_THROW(BetaTable(2, 1.0, -1.0), std::invalid_argument);
}

TEST(BetaCounts, MomentsMatchClosedForm)
{
    const BetaCounts c{2.0, 6.0, 0.0, 8.0};
    EXPECT_DOUBLE_EQ(c.mean(), 0.25);
    EXPECT_DOUBLE_EQ(c.variance(), 12.0 / (64.0 * 9.0));
    EXPECT_LE(c.variance(), 1.0 / (c.alpha + c.beta + 1.0));
}

TEST(BetaTable, CsvSnapshotIsSortedByStateThenAction)
{
    BetaTable t(2, 1.0, 1.0);
    t.at(7, 1).alpha = 4.0;
    t.at(3, 0).visits = 2.0;
    std::ostringstream os;
    write_beta_csv(os, t);
    EXPECT_EQ(os.str(), "state,action,alpha,beta,n\n3,0,1,1,2\n3,1,1,1,0\n7,0,1,1,0\n7,1,4,1,0\n");
}

TEST(DirichletTable, InitialCountsOnSupportOnly)
{
    TransitionSupport sup{2, 1, {{1, kQuit}, {kConvert, kQuit}}, {1.0, 0.0}};
    DirichletTable d(sup);
    EXPECT_EQ(d.num_entries(), 4u);
    EXPECT_EQ(d.count(0, 0, 1), 1.0);
    EXPECT_EQ(d.count(1, 0, kConvert), 1.0);
    EXPECT_THROW(d.count(0, 0, kConvert), std::out_of_range);
}

TEST(DirichletTable, ObserveIncrementsOneCount)
{
    TransitionSupport sup{2, 1, {{1, kQuit}, {kConvert, kQuit}}, {1.0, 0.0}};
    DirichletTable d(sup);
    EXPECT_TRUE(d.observe(0, 0, 1));
    EXPECT_EQ(d.count(0, 0, 1), 2.0);
    EXPECT_EQ(d.count(0, 0, kQuit), 1.0);
    EXPECT_FALSE(d.observe(0, 0, kConvert));
    EXPECT_EQ(d.count(0, 0, 1), 2.0);
    EXPECT_THROW(d.observe(5, 0, 1), std::out_of_range);
}

TEST(DirichletTable, CsvUsesTerminalLabels)
{
    TransitionSupport sup{1, 1, {{kConvert, kQuit}}, {1.0}};
    DirichletTable d(sup);
    d.observe(0, 0, kQuit);
    std::ostringstream os;
    d.write_csv(os);
    EXPECT_EQ(os.str(), "state,action,next,count\n0,0,c,1\n0,0,q,2\n");
}
