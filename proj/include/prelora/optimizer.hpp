#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "prelora/autodiff.hpp"

namespace prelora {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    bool operator==(const AdamConfig&) const = default;
};

/// Per-parameter Adam moments. `steps` is counted per parameter so that
/// parameters added mid-run get their own bias correction.
struct AdamSlot {
    Tensor first_moment;
    Tensor second_moment;
    std::uint64_t steps = 0;

    bool operator==(const AdamSlot&) const = default;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// Applies one update to every parameter that requires a gradient and has
    /// an entry in `grads`. Frozen parameters are never touched.
    void step(std::span<Parameter> params, const GradientMap& grads);

    /// Drops state for parameters that no longer require gradients.
    void prune_frozen(std::span<const Parameter> params);
    void reset() { slots_.clear(); }

    const AdamConfig& config() const noexcept { return cfg_; }
    const std::map<std::string, AdamSlot>& slots() const noexcept { return slots_; }
    std::map<std::string, AdamSlot>& slots() noexcept { return slots_; }

    /// Bytes held by moment estimates.
    std::size_t state_bytes() const;

private:
    AdamConfig cfg_;
    std::map<std::string, AdamSlot> slots_;
};

}  // namespace prelora
