#include "prelora/optimizer.hpp"

#include <cmath>
#include <unordered_set>

namespace prelora {

void Adam::step(std::span<Parameter> params, const GradientMap& grads) {
    for (Parameter& p : params) {
        if (!p.requires_grad) continue;
        auto git = grads.find(p.name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (g.shape() != p.value.shape())
            throw ShapeError("adam: gradient for '" + p.name + "' has shape " + shape_to_string(g.shape()) +
                             ", parameter has " + shape_to_string(p.value.shape()));

        auto [it, inserted] = slots_.try_emplace(p.name);
        AdamSlot& slot = it->second;
        if (inserted) {
            slot.first_moment = Tensor(p.value.shape(), 0.0);
            slot.second_moment = Tensor(p.value.shape(), 0.0);
        }
        ++slot.steps;
        const double t = static_cast<double>(slot.steps);
        const double c1 = 1.0 - std::pow(cfg_.beta1, t);
        const double c2 = 1.0 - std::pow(cfg_.beta2, t);
        auto w = p.value.data();
        auto m = slot.first_moment.data();
        auto v = slot.second_moment.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            w[i] -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
        }
    }
}

void Adam::prune_frozen(std::span<const Parameter> params) {
    std::unordered_set<std::string> live;
    for (const auto& p : params)
        if (p.requires_grad) live.insert(p.name);
    std::erase_if(slots_, [&](const auto& kv) { return !live.contains(kv.first); });
}

std::size_t Adam::state_bytes() const {
    std::size_t total = 0;
    for (const auto& [name, slot] : slots_) total += (slot.first_moment.size() + slot.second_moment.size()) * sizeof(double);
    return total;
}

}  // namespace prelora
