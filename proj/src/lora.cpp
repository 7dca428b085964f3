#include "prelora/lora.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <random>

namespace prelora {

namespace {

const std::string_view kLoraA = ".lora_a";
const std::string_view kLoraB = ".lora_b";

std::string layer_prefix(const Model& model, const ModuleAddress& addr) {
    std::string weight_name = model.parameter(model.target(addr).weight_index).name;
    return weight_name.substr(0, weight_name.size() - std::string_view(".weight").size());
}

}  // namespace

bool is_adapter_parameter(std::string_view name) noexcept {
    return name.ends_with(kLoraA) || name.ends_with(kLoraB);
}

InjectionReport inject(Model& model, const TargetModuleSet& roles, const RankPlan& plan, const LoraOptions& opts) {
    if (!(opts.scaling > 0.0)) throw Error("lora scaling must be positive");
    const auto targets = enumerate_targets(model, roles);
    for (const auto& addr : targets)
        if (!plan.ranks.contains(addr)) throw Error("rank plan is missing target " + to_string(addr));
    if (plan.ranks.size() != targets.size()) {
        for (const auto& [addr, rank] : plan.ranks)
            if (std::find(targets.begin(), targets.end(), addr) == targets.end())
                throw Error("rank plan names " + to_string(addr) + ", which is not a target layer");
    }

    InjectionReport report;
    for (const auto& addr : targets) {
        const LinearLayer& layer = model.target(addr);
        if (layer.lora) throw Error("layer " + to_string(addr) + " already carries an adapter");
        const int requested = plan.at(addr);
        if (requested <= 0) throw Error("rank for " + to_string(addr) + " must be positive");
        int rank = requested;
        const std::size_t cap = std::min(layer.d_in, layer.d_out);
        if (static_cast<std::size_t>(rank) > cap) {
            std::optional<int> fallback;
            if (opts.clamp_to) fallback = opts.clamp_to->largest_at_most(cap);
            if (!fallback)
                throw Error("rank " + std::to_string(rank) + " for " + to_string(addr) + " exceeds min(d_in, d_out) = " +
                            std::to_string(cap));
            rank = *fallback;
            report.clamps.push_back({addr, requested, rank});
        }
        report.applied_ranks.emplace(addr, rank);
    }

    std::mt19937_64 rng(opts.seed);
    for (const auto& addr : targets) {
        const int rank = report.applied_ranks.at(addr);
        const auto r = static_cast<std::size_t>(rank);
        const std::string prefix = layer_prefix(model, addr);
        const std::size_t d_in = model.target(addr).d_in;
        const std::size_t d_out = model.target(addr).d_out;

        std::normal_distribution<double> dist(0.0, 1.0 / static_cast<double>(rank));
        Tensor a({r, d_in});
        for (double& v : a.data()) v = dist(rng);

        LoraAttachment att;
        att.rank = rank;
        att.scaling = opts.scaling;
        att.a_index = model.add_parameter(prefix + std::string(kLoraA), std::move(a));
        att.b_index = model.add_parameter(prefix + std::string(kLoraB), Tensor({d_out, r}, 0.0));
        model.target(addr).lora = att;
    }
    return report;
}

void freeze_base(Model& model) {
    for (auto& p : model.parameters()) p.requires_grad = is_adapter_parameter(p.name);
}

Tensor merge(const Tensor& weight, const Tensor& a, const Tensor& b, double scaling) {
    if (weight.rank() != 2 || a.rank() != 2 || b.rank() != 2 || b.dim(1) != a.dim(0) || b.dim(0) != weight.dim(0) ||
        a.dim(1) != weight.dim(1))
        throw ShapeError("merge: incompatible factors W" + shape_to_string(weight.shape()) + " A" +
                         shape_to_string(a.shape()) + " B" + shape_to_string(b.shape()));
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    auto map = [](const Tensor& t) {
        return Eigen::Map<const RowMat>(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                                        static_cast<Eigen::Index>(t.dim(1)));
    };
    Tensor out = weight;
    Eigen::Map<RowMat>(out.data().data(), static_cast<Eigen::Index>(out.dim(0)), static_cast<Eigen::Index>(out.dim(1)))
        .noalias() += scaling * (map(b) * map(a));
    return out;
}

Tensor merge(const Model& model, const ModuleAddress& addr) {
    const LinearLayer& layer = model.target(addr);
    const Tensor& w = model.parameter(layer.weight_index).value;
    if (!layer.lora) return w;
    return merge(w, model.parameter(layer.lora->a_index).value, model.parameter(layer.lora->b_index).value,
                 layer.lora->scaling);
}

std::size_t lora_param_count(const std::map<ModuleAddress, int>& ranks, const std::map<ModuleAddress, LayerDims>& dims) {
    if (ranks.size() != dims.size()) throw Error("lora_param_count: plan and dimension table cover different addresses");
    std::size_t total = 0;
    for (const auto& [addr, rank] : ranks) {
        auto it = dims.find(addr);
        if (it == dims.end()) throw Error("lora_param_count: no dimensions for " + to_string(addr));
        total += static_cast<std::size_t>(rank) * (it->second.d_in + it->second.d_out);
    }
    return total;
}

std::size_t lora_param_count(const RankPlan& plan, const std::map<ModuleAddress, LayerDims>& dims) {
    return lora_param_count(plan.ranks, dims);
}

std::size_t adapter_parameter_count(const Model& model) {
    std::size_t total = 0;
    for (const auto& p : model.parameters())
        if (is_adapter_parameter(p.name)) total += p.value.size();
    return total;
}

}  // namespace prelora
