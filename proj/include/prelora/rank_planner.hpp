#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "prelora/model.hpp"

namespace prelora {

/// What min-max normalization yields when every value is equal.
enum class DegenerateRule { max_rank, min_rank };

std::string_view degenerate_rule_name(DegenerateRule rule) noexcept;
DegenerateRule parse_degenerate_rule(std::string_view name);

/// Powers of two from r_min to r_max inclusive, each rung double the last.
class RankLadder {
public:
    static RankLadder build(int r_min, int r_max);

    std::span<const int> rungs() const noexcept { return rungs_; }
    std::size_t size() const noexcept { return rungs_.size(); }
    int r_min() const noexcept { return rungs_.front(); }
    int r_max() const noexcept { return rungs_.back(); }
    int operator[](std::size_t i) const { return rungs_.at(i); }
    bool contains(int rank) const noexcept;
    /// Largest rung not exceeding `cap`, if any.
    std::optional<int> largest_at_most(std::size_t cap) const noexcept;

    bool operator==(const RankLadder&) const = default;

private:
    std::vector<int> rungs_;
};

struct RankPlan {
    std::map<ModuleAddress, int> ranks;

    int at(const ModuleAddress& addr) const;
    bool operator==(const RankPlan&) const = default;
};

/// (c - min) / (max - min); all values map to 1.0 (max_rank) or 0.0
/// (min_rank) when the range is zero.
std::vector<double> minmax_normalize(std::span<const double> changes, DegenerateRule rule = DegenerateRule::max_rank);

/// Ladder index for a normalized value: max(ceil(v * size) - 1, 0).
std::size_t rank_index(double v, std::size_t ladder_size);

/// Per-role min-max bucketing of absolute weight-norm changes onto the ladder.
RankPlan assign_ranks(const std::map<ModuleAddress, double>& deltas, const RankLadder& ladder,
                      DegenerateRule rule = DegenerateRule::max_rank);

}  // namespace prelora
