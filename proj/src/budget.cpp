#include "prelora/budget.hpp"

#include "prelora/lora.hpp"
#include "prelora/report_io.hpp"

namespace prelora {

ModelConfig vit_large_config() {
    ModelConfig cfg;
    cfg.num_layers = 24;
    cfg.hidden_dim = 1024;
    cfg.num_heads = 16;
    cfg.mlp_dim = 4096;
    cfg.num_classes = 1000;
    cfg.num_tokens = 196;
    cfg.input_dim = 196 * 16 * 16 * 3;
    return cfg;
}

BudgetResult compute_budget(const ModelConfig& cfg, const TargetModuleSet& roles, int rank,
                            std::size_t bytes_per_scalar) {
    cfg.validate();
    if (rank <= 0) throw Error("budget: rank must be positive, got " + std::to_string(rank));
    if (bytes_per_scalar == 0) throw Error("budget: bytes_per_scalar must be positive");

    std::map<ModuleAddress, LayerDims> dims;
    std::map<ModuleAddress, int> ranks;
    for (const auto& addr : enumerate_targets(cfg.num_layers, roles)) {
        const LayerDims d = role_dims(cfg, addr.role);
        if (static_cast<std::size_t>(rank) > std::min(d.d_in, d.d_out))
            throw Error("budget: rank " + std::to_string(rank) + " exceeds the " + std::string(role_name(addr.role)) +
                        " layer dimensions");
        dims.emplace(addr, d);
        ranks.emplace(addr, rank);
    }

    BudgetResult out;
    out.full_params = analytic_parameter_count(cfg);
    out.adapter_params = lora_param_count(ranks, dims);
    for (const auto& [addr, d] : dims)
        out.adapter_params_by_role[addr.role] += static_cast<std::size_t>(rank) * (d.d_in + d.d_out);
    out.reduction_ratio = static_cast<double>(out.adapter_params) / static_cast<double>(out.full_params);
    out.memory_full_bytes = training_memory_bytes(out.full_params, out.full_params, bytes_per_scalar);
    out.memory_lora_bytes =
        training_memory_bytes(out.full_params + out.adapter_params, out.adapter_params, bytes_per_scalar);
    if (out.full_params > out.adapter_params)
        out.optimizer_state_bytes_saved = 2 * (out.full_params - out.adapter_params) * bytes_per_scalar;
    return out;
}

}  // namespace prelora
