#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prelora/autodiff.hpp"

namespace prelora {

/// Adaptable linear sublayers of a transformer block, in canonical order.
/// `dense` is the MLP expansion (hidden -> mlp), `output` the MLP projection
/// back (mlp -> hidden). The attention-output projection is not a target.
enum class Role : std::uint8_t { query = 0, key = 1, value = 2, dense = 3, output = 4 };

inline constexpr Role kAllRoles[] = {Role::query, Role::key, Role::value, Role::dense, Role::output};

std::string_view role_name(Role role) noexcept;
Role parse_role(std::string_view name);

struct ModuleAddress {
    int layer = 0;
    Role role = Role::query;

    auto operator<=>(const ModuleAddress&) const = default;
};

std::string to_string(const ModuleAddress& addr);

/// Ordered, duplicate-free, non-empty set of roles.
class TargetModuleSet {
public:
    TargetModuleSet();  // all five roles
    explicit TargetModuleSet(std::vector<Role> roles);

    std::span<const Role> roles() const noexcept { return roles_; }
    bool contains(Role r) const noexcept;
    std::size_t size() const noexcept { return roles_.size(); }

    bool operator==(const TargetModuleSet&) const = default;

private:
    std::vector<Role> roles_;
};

struct ModelConfig {
    int num_layers = 4;
    int hidden_dim = 64;
    int num_heads = 4;
    int mlp_dim = 256;
    int num_classes = 10;
    int input_dim = 64;
    // The flat input vector is split into this many equal-width tokens.
    int num_tokens = 8;
    std::uint64_t seed = 1;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerDims {
    std::size_t d_in = 0;
    std::size_t d_out = 0;

    bool operator==(const LayerDims&) const = default;
};

/// Low-rank factors attached to a linear layer: update = scaling * B * A.
struct LoraAttachment {
    int rank = 0;
    double scaling = 1.0;
    std::size_t a_index = 0;  // r x d_in
    std::size_t b_index = 0;  // d_out x r
};

struct LinearLayer {
    std::size_t weight_index = 0;  // d_out x d_in
    std::size_t bias_index = 0;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::optional<LoraAttachment> lora;
};

struct LayerNormParams {
    std::size_t gamma_index = 0;
    std::size_t beta_index = 0;
};

struct EncoderBlock {
    LayerNormParams attn_norm;
    LinearLayer query;
    LinearLayer key;
    LinearLayer value;
    LinearLayer attn_out;
    LayerNormParams mlp_norm;
    LinearLayer dense;
    LinearLayer output;

    LinearLayer& target(Role r);
    const LinearLayer& target(Role r) const;
};

/// Pre-norm transformer encoder classifier. Parameters live in one flat store;
/// layers refer to them by index, so the model is an ordinary copyable value.
class Model {
public:
    const ModelConfig& config() const noexcept { return cfg_; }

    std::vector<Parameter>& parameters() noexcept { return params_; }
    const std::vector<Parameter>& parameters() const noexcept { return params_; }
    const Parameter& parameter(std::size_t index) const { return params_.at(index); }
    Parameter& parameter(std::size_t index) { return params_.at(index); }
    const Parameter* find_parameter(std::string_view name) const;
    Parameter* find_parameter(std::string_view name);

    std::size_t add_parameter(std::string name, Tensor value, bool requires_grad = true);

    LinearLayer& target(const ModuleAddress& addr);
    const LinearLayer& target(const ModuleAddress& addr) const;
    std::span<const EncoderBlock> blocks() const noexcept { return blocks_; }

    /// Logits [batch, num_classes] for inputs [batch, input_dim].
    Var forward(Tape& tape, const Tensor& inputs) const;
    /// Forward pass applied to an already-bound tape variable.
    Var forward(Tape& tape, Var inputs) const;

    /// Forward for a single linear layer (base + adapter when attached).
    Var apply_linear(Tape& tape, const LinearLayer& layer, Var x) const;

    std::map<ModuleAddress, LayerDims> target_dims(const TargetModuleSet& roles) const;
    bool is_adapted() const noexcept;

private:
    friend Model build_model(const ModelConfig& cfg);

    ModelConfig cfg_;
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t, std::less<>> index_by_name_;
    LinearLayer input_proj_;
    std::size_t pos_embed_index_ = 0;
    std::vector<EncoderBlock> blocks_;
    LayerNormParams final_norm_;
    LinearLayer head_;
};

/// Builds a freshly initialized model: truncated-normal(0.02) weights, zero
/// biases, unit layer-norm gains. Deterministic in cfg.seed.
Model build_model(const ModelConfig& cfg);

/// Canonical target order: by layer, then role order q, k, v, d, o.
std::vector<ModuleAddress> enumerate_targets(const Model& model, const TargetModuleSet& roles);
std::vector<ModuleAddress> enumerate_targets(int num_layers, const TargetModuleSet& roles);

std::size_t parameter_count(const Model& model, bool trainable_only);

/// Closed-form full parameter count for a configuration; does not allocate a model.
std::size_t analytic_parameter_count(const ModelConfig& cfg);

/// Dimensions of a role's linear layer for a configuration.
LayerDims role_dims(const ModelConfig& cfg, Role role);

}  // namespace prelora
