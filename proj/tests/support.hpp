#pragma once
// Independent reference implementations used as test oracles. Nothing here
// calls into the code under test except for plain data types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "prelora/autodiff.hpp"
#include "prelora/model.hpp"
#include "prelora/telemetry.hpp"

namespace oracle {

using prelora::ModuleAddress;
using prelora::Role;

inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Central finite difference of a scalar loss with respect to one parameter entry.
inline double numeric_grad(prelora::Parameter& p, std::size_t index, const std::function<double()>& loss,
                           double h = 1e-5) {
    const double saved = p.value[index];
    p.value[index] = saved + h;
    const double up = loss();
    p.value[index] = saved - h;
    const double down = loss();
    p.value[index] = saved;
    return (up - down) / (2.0 * h);
}

/// Worst relative error over every entry of every parameter.
inline double grad_check_all(std::vector<prelora::Parameter>& params,
                             const std::function<prelora::Var(prelora::Tape&)>& build, double h = 1e-5) {
    prelora::Tape tape;
    prelora::GradientMap grads = tape.gradients(build(tape));
    auto loss = [&] {
        prelora::Tape t;
        return build(t).value().item();
    };
    double worst = 0.0;
    for (auto& p : params) {
        if (!p.requires_grad) continue;
        const prelora::Tensor& g = grads.at(p.name);
        for (std::size_t i = 0; i < p.value.size(); ++i)
            worst = std::max(worst, rel_err(g[i], numeric_grad(p, i, loss, h)));
    }
    return worst;
}

inline prelora::Tensor random_tensor(prelora::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    prelora::Tensor t(std::move(shape));
    for (double& v : t.data()) v = d(rng);
    return t;
}

/// Scratch directory removed on scope exit.
struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int counter = 0;
        std::random_device rd;
        path = std::filesystem::temp_directory_path() /
               ("prelora-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path write(const std::string& name, const std::string& text) const {
        std::ofstream(path / name, std::ios::binary) << text;
        return path / name;
    }
};

// ---------------------------------------------------------------------------
// Convergence gate, transcribed literally: loop over the trailing pairs and over
// modules, checking the loss inside the module loop.

struct RawWindow {
    std::map<Role, double> norm;
    double loss = 0.0;
};

inline bool brute_gate(const std::vector<RawWindow>& w, int k, double tau, double zeta, const std::vector<Role>& roles) {
    const int T = static_cast<int>(w.size());
    if (T < k) return false;
    for (int t = T - k + 1; t < T; ++t) {
        for (Role a : roles) {
            const double dW = (w[t].norm.at(a) - w[t - 1].norm.at(a)) / w[t - 1].norm.at(a) * 100.0;
            const double dL = (w[t].loss - w[t - 1].loss) / w[t - 1].loss * 100.0;
            if (std::abs(dW) > tau || std::abs(dL) > zeta) return false;
        }
    }
    return true;
}

/// Window index (0-based) of the first boundary that passes, scanning every prefix.
inline std::optional<std::size_t> brute_first_pass(const std::vector<RawWindow>& w, int k, double tau, double zeta,
                                                   const std::vector<Role>& roles) {
    for (std::size_t n = static_cast<std::size_t>(k); n <= w.size(); ++n) {
        std::vector<RawWindow> prefix(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(n));
        if (brute_gate(prefix, k, tau, zeta, roles)) return n - 1;
    }
    return std::nullopt;
}

inline std::vector<RawWindow> raw_windows(std::span<const prelora::WindowStats> windows) {
    std::vector<RawWindow> out;
    for (const auto& w : windows) out.push_back({w.module_norms, w.loss});
    return out;
}

struct GateCase {
    std::vector<prelora::WindowStats> windows;
    int k = 3;
    double tau = 0.5;
    double zeta = 2.5;
    std::vector<Role> roles;
};

/// Random window traces that hover around the thresholds: most pairs are calm,
/// some jump, so both outcomes show up often.
inline GateCase random_gate_case(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GateCase c;
    c.k = 2 + static_cast<int>(rng() % 4);
    c.tau = 0.05 + 2.0 * u(rng);
    c.zeta = 0.2 + 5.0 * u(rng);
    for (Role r : prelora::kAllRoles)
        if (u(rng) < 0.6) c.roles.push_back(r);
    if (c.roles.empty()) c.roles.push_back(prelora::kAllRoles[rng() % 5]);

    const int m = 1 + static_cast<int>(rng() % 4);
    const std::size_t count = 1 + rng() % 12;
    std::map<Role, double> norm;
    for (Role r : prelora::kAllRoles) norm[r] = 1.0 + 50.0 * u(rng);
    double loss = 0.1 + 3.0 * u(rng);
    for (std::size_t i = 0; i < count; ++i) {
        if (i > 0) {
            const double spread = u(rng) < 0.75 ? 0.95 : 3.0;
            for (auto& [r, v] : norm) v *= 1.0 + (2.0 * u(rng) - 1.0) * spread * c.tau / 100.0;
            loss *= 1.0 + (2.0 * u(rng) - 1.0) * spread * c.zeta / 100.0;
        }
        prelora::WindowStats w;
        w.index = static_cast<int>(i) + 1;
        w.first_epoch = static_cast<int>(i) * m;
        w.last_epoch = w.first_epoch + m - 1;
        w.module_norms = norm;
        w.loss = loss;
        c.windows.push_back(std::move(w));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Rank assignment with a linear bucket scan instead of the ceiling formula.

inline std::vector<int> brute_ladder(int r_min, int r_max) {
    std::vector<int> out;
    for (int r = 1; r <= r_max; r *= 2)
        if (r >= r_min) out.push_back(r);
    return out;
}

inline std::map<ModuleAddress, int> brute_assign(const std::map<ModuleAddress, double>& deltas, int r_min, int r_max,
                                                 bool degenerate_max = true) {
    const auto ladder = brute_ladder(r_min, r_max);
    const double n = static_cast<double>(ladder.size());
    std::map<Role, std::vector<std::pair<ModuleAddress, double>>> by_role;
    for (const auto& [addr, d] : deltas) by_role[addr.role].push_back({addr, d});

    std::map<ModuleAddress, int> out;
    for (const auto& [role, items] : by_role) {
        double lo = items.front().second, hi = lo;
        for (const auto& [a, d] : items) lo = std::min(lo, d), hi = std::max(hi, d);
        for (const auto& [addr, d] : items) {
            const double v = hi > lo ? (d - lo) / (hi - lo) : (degenerate_max ? 1.0 : 0.0);
            // Smallest bucket whose upper edge (i+1)/|R| covers v.
            std::size_t i = 0;
            while (i + 1 < ladder.size() && v * n > static_cast<double>(i + 1)) ++i;
            out[addr] = ladder[i];
        }
    }
    return out;
}

struct PlannerCase {
    std::map<ModuleAddress, double> deltas;
    int r_min = 8;
    int r_max = 64;
};

/// Random per-layer deltas with ties, zeros and constant roles mixed in.
inline PlannerCase random_planner_case(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PlannerCase c;
    const int lo_exp = static_cast<int>(rng() % 5);
    c.r_min = 1 << lo_exp;
    c.r_max = 1 << (lo_exp + static_cast<int>(rng() % 5));
    const int layers = 1 + static_cast<int>(rng() % 24);
    for (Role r : prelora::kAllRoles) {
        if (u(rng) < 0.3) continue;
        const double kind = u(rng);
        const double constant = 3.0 * u(rng);
        for (int l = 0; l < layers; ++l) {
            double v;
            if (kind < 0.1) v = constant;
            else if (kind < 0.3) v = static_cast<double>(rng() % 4) * 0.25;  // heavy ties
            else v = std::abs(std::normal_distribution<double>(0.0, 1.0)(rng)) * std::pow(10.0, 4.0 * u(rng) - 2.0);
            c.deltas[{l, r}] = v;
        }
    }
    if (c.deltas.empty()) c.deltas[{0, Role::query}] = u(rng);
    return c;
}

// ---------------------------------------------------------------------------
// Closed-form parameter counts, spelled out piece by piece.

struct Dims {
    std::size_t layers, hidden, mlp, classes, input_dim, tokens;
};

inline std::size_t closed_form_full_count(const Dims& d) {
    const std::size_t patch = d.input_dim / d.tokens;
    std::size_t total = 0;
    total += patch * d.hidden + d.hidden;  // input projection
    total += d.tokens * d.hidden;          // positional embedding
    for (std::size_t l = 0; l < d.layers; ++l) {
        total += 2 * d.hidden;                          // attention layer norm
        total += 3 * (d.hidden * d.hidden + d.hidden);  // q, k, v
        total += d.hidden * d.hidden + d.hidden;        // attention output
        total += 2 * d.hidden;                          // mlp layer norm
        total += d.hidden * d.mlp + d.mlp;              // dense
        total += d.mlp * d.hidden + d.hidden;           // output
    }
    total += 2 * d.hidden;                     // final layer norm
    total += d.hidden * d.classes + d.classes;  // head
    return total;
}

/// Adapters on all five roles at one rank: r * (d_in + d_out) per layer.
inline std::size_t closed_form_adapter_count(const Dims& d, std::size_t r) {
    return d.layers * (3 * r * (d.hidden + d.hidden) + r * (d.hidden + d.mlp) + r * (d.mlp + d.hidden));
}

}  // namespace oracle
