#pragma once

#include "prelora/config.hpp"

namespace fixtures {

/// A model small enough to train a dozen epochs in well under a second.
/// Thresholds are wide open so the gate passes at the first possible boundary
/// (end of epoch k*m - 1 = 3).
inline prelora::RunConfig tiny_config() {
    prelora::RunConfig cfg;
    cfg.model.num_layers = 2;
    cfg.model.hidden_dim = 16;
    cfg.model.num_heads = 2;
    cfg.model.mlp_dim = 32;
    cfg.model.num_tokens = 4;
    cfg.model.input_dim = 16;
    cfg.model.num_classes = 4;
    prelora::SyntheticSpec data;
    data.num_examples = 64;
    data.input_dim = 16;
    data.num_classes = 4;
    cfg.data = data;
    cfg.optimizer.batch_size = 16;
    cfg.optimizer.adam.learning_rate = 1e-3;
    cfg.gate.k = 2;
    cfg.gate.m = 2;
    cfg.gate.tau = 1e6;
    cfg.gate.zeta = 1e6;
    cfg.warmup_epochs = 2;
    cfg.ranks.r_min = 2;
    cfg.ranks.r_max = 8;
    cfg.run.total_epochs = 9;
    cfg.validate();
    return cfg;
}

}  // namespace fixtures
