#include "prelora/convergence.hpp"

#include <cmath>

namespace prelora {

void ConvergenceCriteria::validate() const {
    if (k < 2) throw Error("gate.k: must be at least 2, got " + std::to_string(k));
    if (m < 1) throw Error("gate.m: must be positive, got " + std::to_string(m));
    if (!(tau > 0.0) || !std::isfinite(tau)) throw Error("gate.tau: must be > 0, got " + std::to_string(tau));
    if (!(zeta > 0.0) || !std::isfinite(zeta)) throw Error("gate.zeta: must be > 0, got " + std::to_string(zeta));
}

GateDecision evaluate_gate(std::span<const WindowStats> windows, const ConvergenceCriteria& crit) {
    crit.validate();
    const auto k = static_cast<std::size_t>(crit.k);
    if (windows.size() < k)
        throw NotReadyError("gate not ready: " + std::to_string(windows.size()) + " closed windows, need " +
                            std::to_string(k));
    const auto recent = windows.last(k);

    GateDecision decision;
    decision.passed = true;
    for (std::size_t t = 1; t < recent.size(); ++t) {
        WindowDeltas d = window_deltas(recent[t - 1], recent[t]);
        if (std::abs(d.loss_pct) > crit.zeta) decision.passed = false;
        for (Role role : crit.roles.roles()) {
            auto it = d.weight_pct.find(role);
            if (it == d.weight_pct.end())
                throw Error("gate: window " + std::to_string(recent[t].index) + " has no norm for role " +
                            std::string(role_name(role)));
            if (std::abs(it->second) > crit.tau) decision.passed = false;
        }
        decision.pairs.push_back(std::move(d));
    }
    return decision;
}

bool evaluate(std::span<const WindowStats> windows, const ConvergenceCriteria& crit) {
    return evaluate_gate(windows, crit).passed;
}

bool evaluate(const TelemetryLedger& ledger, const ConvergenceCriteria& crit) {
    return evaluate(ledger.windows(), crit);
}

std::optional<int> first_pass_epoch(std::span<const WindowStats> windows, const ConvergenceCriteria& crit) {
    crit.validate();
    for (std::size_t n = static_cast<std::size_t>(crit.k); n <= windows.size(); ++n)
        if (evaluate(windows.first(n), crit)) return windows[n - 1].last_epoch;
    return std::nullopt;
}

std::optional<int> first_pass_epoch(std::span<const EpochSnapshot> trace, const ConvergenceCriteria& crit) {
    crit.validate();
    TelemetryLedger ledger(static_cast<std::size_t>(crit.m));
    for (const auto& snap : trace) {
        if (!ledger.record_epoch(snap)) continue;
        if (ledger.windows().size() >= static_cast<std::size_t>(crit.k) && evaluate(ledger, crit)) return snap.epoch;
    }
    return std::nullopt;
}

}  // namespace prelora
