#include <random>

#include "doctest.h"
#include "prelora/rank_planner.hpp"
#include "support.hpp"

using namespace prelora;

namespace {

std::map<ModuleAddress, double> layer_values(Role role, const std::vector<double>& v) {
    std::map<ModuleAddress, double> out;
    for (std::size_t l = 0; l < v.size(); ++l) out[{static_cast<int>(l), role}] = v[l];
    return out;
}

}  // namespace

TEST_CASE("ladders") {
    const auto wide = RankLadder::build(8, 64);
    CHECK(std::vector<int>(wide.rungs().begin(), wide.rungs().end()) == std::vector<int>{8, 16, 32, 64});
    CHECK(RankLadder::build(8, 8).size() == 1);
    CHECK(RankLadder::build(2, 32).size() == 5);
    CHECK_THROWS_AS(RankLadder::build(12, 64), Error);
    CHECK_THROWS_AS(RankLadder::build(8, 48), Error);
    CHECK_THROWS_AS(RankLadder::build(64, 8), Error);
    CHECK_THROWS_AS(RankLadder::build(0, 8), Error);
    for (int lo = 1; lo <= 64; lo *= 2)
        for (int hi = lo; hi <= 256; hi *= 2) {
            const auto l = RankLadder::build(lo, hi);
            CHECK(std::vector<int>(l.rungs().begin(), l.rungs().end()) == oracle::brute_ladder(lo, hi));
        }
    const auto l = RankLadder::build(8, 64);
    CHECK(l.largest_at_most(40) == 32);
    CHECK_FALSE(l.largest_at_most(4));
}

TEST_CASE("min-max normalization") {
    const std::vector<double> c{2.0, 4.0, 3.0};
    CHECK(minmax_normalize(c) == std::vector<double>{0.0, 1.0, 0.5});
    const std::vector<double> flat{7.0, 7.0};
    CHECK(minmax_normalize(flat, DegenerateRule::max_rank) == std::vector<double>{1.0, 1.0});
    CHECK(minmax_normalize(flat, DegenerateRule::min_rank) == std::vector<double>{0.0, 0.0});
    CHECK_THROWS_AS(minmax_normalize(std::vector<double>{}), Error);
}

TEST_CASE("bucket index") {
    CHECK(rank_index(0.0, 4) == 0);
    CHECK(rank_index(0.25, 4) == 0);
    CHECK(rank_index(0.2500001, 4) == 1);
    CHECK(rank_index(0.3, 4) == 1);
    CHECK(rank_index(1.0, 4) == 3);
    CHECK(rank_index(0.7, 1) == 0);
}

TEST_CASE("worked example: normalized changes 0, 0.3, 1 on ladder 8..64") {
    const RankPlan plan = assign_ranks(layer_values(Role::query, {5.0, 6.5, 10.0}), RankLadder::build(8, 64));
    CHECK(plan.at({0, Role::query}) == 8);
    CHECK(plan.at({1, Role::query}) == 16);
    CHECK(plan.at({2, Role::query}) == 64);
    CHECK_THROWS_AS(plan.at({3, Role::query}), Error);
}

TEST_CASE("normalization is per role") {
    auto d = layer_values(Role::query, {0.1, 0.2});
    d.merge(layer_values(Role::dense, {10.0, 20.0}));
    const RankPlan plan = assign_ranks(d, RankLadder::build(4, 16));
    CHECK(plan.at({0, Role::query}) == 4);
    CHECK(plan.at({1, Role::query}) == 16);
    CHECK(plan.at({0, Role::dense}) == 4);
    CHECK(plan.at({1, Role::dense}) == 16);
}

TEST_CASE("degenerate rule and single-rung ladder") {
    const auto flat = layer_values(Role::key, {0.3, 0.3, 0.3});
    for (const auto& [a, r] : assign_ranks(flat, RankLadder::build(8, 64), DegenerateRule::max_rank).ranks) CHECK(r == 64);
    for (const auto& [a, r] : assign_ranks(flat, RankLadder::build(8, 64), DegenerateRule::min_rank).ranks) CHECK(r == 8);
    for (const auto& [a, r] : assign_ranks(layer_values(Role::key, {0.1, 5.0}), RankLadder::build(32, 32)).ranks)
        CHECK(r == 32);
}

TEST_CASE("invalid input") {
    CHECK_THROWS_AS(assign_ranks({}, RankLadder::build(8, 64)), Error);
    CHECK_THROWS_AS(assign_ranks(layer_values(Role::key, {1.0, std::nan("")}), RankLadder::build(8, 64)), Error);
    CHECK_THROWS_AS(parse_degenerate_rule("median"), Error);
}

TEST_CASE("random cases agree with the linear-scan oracle and keep the invariants") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 300; ++trial) {
        const oracle::PlannerCase c = oracle::random_planner_case(rng);
        const RankLadder ladder = RankLadder::build(c.r_min, c.r_max);
        for (DegenerateRule rule : {DegenerateRule::max_rank, DegenerateRule::min_rank}) {
            const RankPlan plan = assign_ranks(c.deltas, ladder, rule);
            CHECK(plan.ranks == oracle::brute_assign(c.deltas, c.r_min, c.r_max, rule == DegenerateRule::max_rank));
            for (const auto& [a, r] : plan.ranks) CHECK(ladder.contains(r));
            for (const auto& [a, da] : c.deltas)
                for (const auto& [b, db] : c.deltas)
                    if (a.role == b.role && da <= db) CHECK(plan.at(a) <= plan.at(b));
        }
        // Scaling by a power of two is exact, so the plan is unchanged.
        auto scaled = c.deltas;
        for (auto& [a, d] : scaled) d *= 8.0;
        CHECK(assign_ranks(scaled, ladder).ranks == assign_ranks(c.deltas, ladder).ranks);
    }
}
