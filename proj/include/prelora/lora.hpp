#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string_view>
#include <vector>

#include "prelora/model.hpp"
#include "prelora/rank_planner.hpp"

namespace prelora {

struct LoraOptions {
    double scaling = 1.0;
    std::uint64_t seed = 0;
    // When set, ranks above min(d_in, d_out) fall back to the largest rung that
    // fits instead of failing.
    std::optional<RankLadder> clamp_to;
};

struct RankClamp {
    ModuleAddress address;
    int requested = 0;
    int applied = 0;
};

struct InjectionReport {
    std::map<ModuleAddress, int> applied_ranks;
    std::vector<RankClamp> clamps;
};

/// Attaches an adapter to every target layer. A ~ N(0, (1/r)^2), B = 0, so the
/// adapted model computes exactly the same function right after injection.
/// The plan must cover exactly enumerate_targets(model, roles).
InjectionReport inject(Model& model, const TargetModuleSet& roles, const RankPlan& plan, const LoraOptions& opts);

/// Marks every non-adapter parameter frozen. Adapter factors stay trainable.
void freeze_base(Model& model);

bool is_adapter_parameter(std::string_view name) noexcept;

/// W + s * B * A. Does not modify anything.
Tensor merge(const Tensor& weight, const Tensor& a, const Tensor& b, double scaling);
Tensor merge(const Model& model, const ModuleAddress& addr);

/// Sum over addresses of r * (d_in + d_out).
std::size_t lora_param_count(const RankPlan& plan, const std::map<ModuleAddress, LayerDims>& dims);
std::size_t lora_param_count(const std::map<ModuleAddress, int>& ranks, const std::map<ModuleAddress, LayerDims>& dims);

/// Scalars held by adapter factors currently attached to the model.
std::size_t adapter_parameter_count(const Model& model);

}  // namespace prelora
