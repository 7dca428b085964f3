#include "prelora/rank_planner.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace prelora {

std::string_view degenerate_rule_name(DegenerateRule rule) noexcept {
    return rule == DegenerateRule::max_rank ? "max" : "min";
}

DegenerateRule parse_degenerate_rule(std::string_view name) {
    if (name == "max") return DegenerateRule::max_rank;
    if (name == "min") return DegenerateRule::min_rank;
    throw Error("ranks.degenerate_rule: expected 'max' or 'min', got '" + std::string(name) + "'");
}

RankLadder RankLadder::build(int r_min, int r_max) {
    auto pow2 = [](int v) { return v > 0 && std::has_single_bit(static_cast<unsigned>(v)); };
    if (!pow2(r_min)) throw Error("ranks.r_min: " + std::to_string(r_min) + " is not a positive power of two");
    if (!pow2(r_max)) throw Error("ranks.r_max: " + std::to_string(r_max) + " is not a positive power of two");
    if (r_min > r_max)
        throw Error("ranks.r_min: " + std::to_string(r_min) + " exceeds r_max " + std::to_string(r_max));
    RankLadder ladder;
    const int lo = std::countr_zero(static_cast<unsigned>(r_min));
    const int hi = std::countr_zero(static_cast<unsigned>(r_max));
    for (int p = lo; p <= hi; ++p) ladder.rungs_.push_back(1 << p);
    return ladder;
}

bool RankLadder::contains(int rank) const noexcept {
    return std::find(rungs_.begin(), rungs_.end(), rank) != rungs_.end();
}

std::optional<int> RankLadder::largest_at_most(std::size_t cap) const noexcept {
    std::optional<int> best;
    for (int r : rungs_)
        if (static_cast<std::size_t>(r) <= cap) best = r;
    return best;
}

int RankPlan::at(const ModuleAddress& addr) const {
    auto it = ranks.find(addr);
    if (it == ranks.end()) throw Error("rank plan has no entry for " + to_string(addr));
    return it->second;
}

std::vector<double> minmax_normalize(std::span<const double> changes, DegenerateRule rule) {
    if (changes.empty()) throw Error("minmax_normalize: empty input");
    const auto [lo_it, hi_it] = std::minmax_element(changes.begin(), changes.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<double> out(changes.size());
    if (!(hi > lo)) {
        std::fill(out.begin(), out.end(), rule == DegenerateRule::max_rank ? 1.0 : 0.0);
        return out;
    }
    const double range = hi - lo;
    for (std::size_t i = 0; i < changes.size(); ++i) out[i] = (changes[i] - lo) / range;
    return out;
}

std::size_t rank_index(double v, std::size_t ladder_size) {
    const double raw = std::ceil(v * static_cast<double>(ladder_size)) - 1.0;
    if (raw <= 0.0) return 0;
    return std::min(static_cast<std::size_t>(raw), ladder_size - 1);
}

RankPlan assign_ranks(const std::map<ModuleAddress, double>& deltas, const RankLadder& ladder, DegenerateRule rule) {
    if (deltas.empty()) throw Error("assign_ranks: no weight-change deltas supplied");
    std::map<Role, std::vector<ModuleAddress>> by_role;
    for (const auto& [addr, delta] : deltas) {
        if (!std::isfinite(delta)) throw Error("assign_ranks: non-finite delta for " + to_string(addr));
        by_role[addr.role].push_back(addr);
    }

    RankPlan plan;
    for (const auto& [role, addrs] : by_role) {
        std::vector<double> changes;
        changes.reserve(addrs.size());
        for (const auto& a : addrs) changes.push_back(deltas.at(a));
        const auto normalized = minmax_normalize(changes, rule);
        for (std::size_t i = 0; i < addrs.size(); ++i)
            plan.ranks.emplace(addrs[i], ladder[rank_index(normalized[i], ladder.size())]);
    }
    return plan;
}

}  // namespace prelora
