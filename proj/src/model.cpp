#include "prelora/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace prelora {

std::string_view role_name(Role role) noexcept {
    switch (role) {
        case Role::query: return "query";
        case Role::key: return "key";
        case Role::value: return "value";
        case Role::dense: return "dense";
        case Role::output: return "output";
    }
    return "?";
}

Role parse_role(std::string_view name) {
    for (Role r : kAllRoles)
        if (role_name(r) == name) return r;
    throw Error("unknown module role '" + std::string(name) + "' (expected query, key, value, dense or output)");
}

std::string to_string(const ModuleAddress& addr) {
    return std::to_string(addr.layer) + "." + std::string(role_name(addr.role));
}

TargetModuleSet::TargetModuleSet() : roles_(std::begin(kAllRoles), std::end(kAllRoles)) {}

TargetModuleSet::TargetModuleSet(std::vector<Role> roles) : roles_(std::move(roles)) {
    if (roles_.empty()) throw Error("target module set must not be empty");
    for (std::size_t i = 0; i < roles_.size(); ++i)
        for (std::size_t j = i + 1; j < roles_.size(); ++j)
            if (roles_[i] == roles_[j])
                throw Error("target module set lists '" + std::string(role_name(roles_[i])) + "' twice");
    std::sort(roles_.begin(), roles_.end());
}

bool TargetModuleSet::contains(Role r) const noexcept {
    return std::find(roles_.begin(), roles_.end(), r) != roles_.end();
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* key) {
        if (v <= 0) throw Error(std::string("model.") + key + ": must be positive, got " + std::to_string(v));
    };
    positive(num_layers, "num_layers");
    positive(hidden_dim, "hidden_dim");
    positive(num_heads, "num_heads");
    positive(mlp_dim, "mlp_dim");
    positive(num_classes, "num_classes");
    positive(input_dim, "input_dim");
    positive(num_tokens, "num_tokens");
    if (hidden_dim % num_heads != 0)
        throw Error("model.hidden_dim: " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                    std::to_string(num_heads));
    if (input_dim % num_tokens != 0)
        throw Error("model.num_tokens: input_dim " + std::to_string(input_dim) + " is not divisible by " +
                    std::to_string(num_tokens));
}

LinearLayer& EncoderBlock::target(Role r) {
    switch (r) {
        case Role::query: return query;
        case Role::key: return key;
        case Role::value: return value;
        case Role::dense: return dense;
        case Role::output: return output;
    }
    throw Error("invalid role");
}

const LinearLayer& EncoderBlock::target(Role r) const { return const_cast<EncoderBlock*>(this)->target(r); }

const Parameter* Model::find_parameter(std::string_view name) const {
    auto it = index_by_name_.find(name);
    return it == index_by_name_.end() ? nullptr : &params_[it->second];
}

Parameter* Model::find_parameter(std::string_view name) {
    auto it = index_by_name_.find(name);
    return it == index_by_name_.end() ? nullptr : &params_[it->second];
}

std::size_t Model::add_parameter(std::string name, Tensor value, bool requires_grad) {
    if (index_by_name_.contains(name)) throw Error("duplicate parameter name '" + name + "'");
    index_by_name_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), std::move(value), requires_grad});
    return params_.size() - 1;
}

LinearLayer& Model::target(const ModuleAddress& addr) {
    if (addr.layer < 0 || addr.layer >= static_cast<int>(blocks_.size()))
        throw Error("layer index " + std::to_string(addr.layer) + " out of range");
    return blocks_[static_cast<std::size_t>(addr.layer)].target(addr.role);
}

const LinearLayer& Model::target(const ModuleAddress& addr) const { return const_cast<Model*>(this)->target(addr); }

bool Model::is_adapted() const noexcept {
    for (const auto& b : blocks_)
        for (Role r : kAllRoles)
            if (b.target(r).lora) return true;
    return false;
}

std::map<ModuleAddress, LayerDims> Model::target_dims(const TargetModuleSet& roles) const {
    std::map<ModuleAddress, LayerDims> dims;
    for (const auto& addr : enumerate_targets(*this, roles)) {
        const auto& layer = target(addr);
        dims.emplace(addr, LayerDims{layer.d_in, layer.d_out});
    }
    return dims;
}

Var Model::apply_linear(Tape& tape, const LinearLayer& layer, Var x) const {
    Var w = tape.parameter(params_[layer.weight_index]);
    Var b = tape.parameter(params_[layer.bias_index]);
    if (!layer.lora) return ops::linear(x, w, b);
    return ops::lora_linear(x, w, b, tape.parameter(params_[layer.lora->a_index]),
                            tape.parameter(params_[layer.lora->b_index]), layer.lora->scaling);
}

Var Model::forward(Tape& tape, const Tensor& inputs) const { return forward(tape, tape.input("x", inputs)); }

Var Model::forward(Tape& tape, Var inputs) const {
    const Tensor& xv = inputs.value();
    if (xv.rank() != 2 || xv.dim(1) != static_cast<std::size_t>(cfg_.input_dim))
        throw ShapeError("model.forward: expected inputs [batch x " + std::to_string(cfg_.input_dim) + "], got " +
                         shape_to_string(xv.shape()));
    const std::size_t batch = xv.dim(0);
    const auto tokens = static_cast<std::size_t>(cfg_.num_tokens);
    const auto heads = static_cast<std::size_t>(cfg_.num_heads);
    const auto head_dim = static_cast<std::size_t>(cfg_.hidden_dim / cfg_.num_heads);
    const std::size_t token_width = static_cast<std::size_t>(cfg_.input_dim) / tokens;

    auto norm = [&](const LayerNormParams& ln, Var v) {
        return ops::layer_norm(v, tape.parameter(params_[ln.gamma_index]), tape.parameter(params_[ln.beta_index]));
    };

    Var h = apply_linear(tape, input_proj_, ops::reshape(inputs, {batch * tokens, token_width}));
    std::vector<std::size_t> positions(batch * tokens);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % tokens;
    h = ops::add(h, ops::embedding(tape.parameter(params_[pos_embed_index_]), positions));

    const double score_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (const auto& block : blocks_) {
        Var a = norm(block.attn_norm, h);
        Var q = ops::split_heads(apply_linear(tape, block.query, a), batch, tokens, heads);
        Var k = ops::split_heads(apply_linear(tape, block.key, a), batch, tokens, heads);
        Var v = ops::split_heads(apply_linear(tape, block.value, a), batch, tokens, heads);
        Var probs = ops::softmax_rows(ops::scale(ops::bmm(q, k, true), score_scale));
        Var ctx = ops::merge_heads(ops::bmm(probs, v), batch, tokens, heads);
        h = ops::add(h, apply_linear(tape, block.attn_out, ctx));

        Var m = norm(block.mlp_norm, h);
        m = apply_linear(tape, block.output, ops::gelu(apply_linear(tape, block.dense, m)));
        h = ops::add(h, m);
    }
    h = norm(final_norm_, h);
    return apply_linear(tape, head_, ops::mean_pool_tokens(h, tokens));
}

namespace {

Tensor truncated_normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
        double z;
        do {
            z = dist(rng);
        } while (std::abs(z) > 2.0);
        v = z * stddev;
    }
    return t;
}

}  // namespace

Model build_model(const ModelConfig& cfg) {
    cfg.validate();
    Model model;
    model.cfg_ = cfg;
    std::mt19937_64 rng(cfg.seed);
    constexpr double kInitStd = 0.02;

    const auto hidden = static_cast<std::size_t>(cfg.hidden_dim);
    const auto mlp = static_cast<std::size_t>(cfg.mlp_dim);

    auto make_linear = [&](const std::string& prefix, std::size_t d_in, std::size_t d_out) {
        LinearLayer layer;
        layer.d_in = d_in;
        layer.d_out = d_out;
        layer.weight_index = model.add_parameter(prefix + ".weight", truncated_normal({d_out, d_in}, kInitStd, rng));
        layer.bias_index = model.add_parameter(prefix + ".bias", Tensor({d_out}, 0.0));
        return layer;
    };
    auto make_norm = [&](const std::string& prefix) {
        LayerNormParams ln;
        ln.gamma_index = model.add_parameter(prefix + ".gamma", Tensor({hidden}, 1.0));
        ln.beta_index = model.add_parameter(prefix + ".beta", Tensor({hidden}, 0.0));
        return ln;
    };

    const auto token_width = static_cast<std::size_t>(cfg.input_dim / cfg.num_tokens);
    model.input_proj_ = make_linear("input_proj", token_width, hidden);
    model.pos_embed_index_ =
        model.add_parameter("pos_embed", truncated_normal({static_cast<std::size_t>(cfg.num_tokens), hidden}, kInitStd, rng));

    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l);
        EncoderBlock b;
        b.attn_norm = make_norm(p + ".attn_norm");
        b.query = make_linear(p + ".query", hidden, hidden);
        b.key = make_linear(p + ".key", hidden, hidden);
        b.value = make_linear(p + ".value", hidden, hidden);
        b.attn_out = make_linear(p + ".attn_out", hidden, hidden);
        b.mlp_norm = make_norm(p + ".mlp_norm");
        b.dense = make_linear(p + ".dense", hidden, mlp);
        b.output = make_linear(p + ".output", mlp, hidden);
        model.blocks_.push_back(b);
    }
    model.final_norm_ = make_norm("final_norm");
    model.head_ = make_linear("head", hidden, static_cast<std::size_t>(cfg.num_classes));
    return model;
}

std::vector<ModuleAddress> enumerate_targets(int num_layers, const TargetModuleSet& roles) {
    std::vector<ModuleAddress> out;
    out.reserve(static_cast<std::size_t>(num_layers) * roles.size());
    for (int l = 0; l < num_layers; ++l)
        for (Role r : roles.roles()) out.push_back({l, r});
    return out;
}

std::vector<ModuleAddress> enumerate_targets(const Model& model, const TargetModuleSet& roles) {
    return enumerate_targets(static_cast<int>(model.blocks().size()), roles);
}

std::size_t parameter_count(const Model& model, bool trainable_only) {
    std::size_t total = 0;
    for (const auto& p : model.parameters())
        if (!trainable_only || p.requires_grad) total += p.value.size();
    return total;
}

LayerDims role_dims(const ModelConfig& cfg, Role role) {
    const auto hidden = static_cast<std::size_t>(cfg.hidden_dim);
    const auto mlp = static_cast<std::size_t>(cfg.mlp_dim);
    switch (role) {
        case Role::dense: return {hidden, mlp};
        case Role::output: return {mlp, hidden};
        default: return {hidden, hidden};
    }
}

std::size_t analytic_parameter_count(const ModelConfig& cfg) {
    cfg.validate();
    const auto h = static_cast<std::size_t>(cfg.hidden_dim);
    const auto m = static_cast<std::size_t>(cfg.mlp_dim);
    const auto t = static_cast<std::size_t>(cfg.num_tokens);
    const auto c = static_cast<std::size_t>(cfg.num_classes);
    const std::size_t token_width = static_cast<std::size_t>(cfg.input_dim) / t;
    auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };

    const std::size_t per_block = 2 * (2 * h) + 4 * linear(h, h) + linear(h, m) + linear(m, h);
    return linear(token_width, h) + t * h + static_cast<std::size_t>(cfg.num_layers) * per_block + 2 * h +
           linear(h, c);
}

}  // namespace prelora
