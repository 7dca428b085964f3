#pragma once

#include <cstddef>
#include <map>

#include "prelora/model.hpp"

namespace prelora {

/// ViT-Large/16 at 224x224: 24 layers, hidden 1024, 16 heads, mlp 4096,
/// 196 patch tokens of 16*16*3 values, 1000 classes.
ModelConfig vit_large_config();

struct BudgetResult {
    std::size_t full_params = 0;
    std::size_t adapter_params = 0;
    std::map<Role, std::size_t> adapter_params_by_role;
    double reduction_ratio = 0.0;  // adapter / full
    std::size_t memory_full_bytes = 0;
    std::size_t memory_lora_bytes = 0;
    std::size_t optimizer_state_bytes_saved = 0;
};

/// Dry-run parameter and memory arithmetic with every target layer at `rank`.
/// No model is allocated.
BudgetResult compute_budget(const ModelConfig& cfg, const TargetModuleSet& roles, int rank,
                            std::size_t bytes_per_scalar = sizeof(double));

}  // namespace prelora
