#pragma once

#include <optional>
#include <span>
#include <vector>

#include "prelora/telemetry.hpp"

namespace prelora {

struct ConvergenceCriteria {
    int k = 3;            // windows examined
    int m = 3;            // epochs per window
    double tau = 0.5;     // weight-norm threshold, percent
    double zeta = 2.5;    // loss threshold, percent
    TargetModuleSet roles;

    void validate() const;
    bool operator==(const ConvergenceCriteria&) const = default;
};

/// Raised when fewer than k windows have closed.
class NotReadyError : public Error {
public:
    using Error::Error;
};

struct GateDecision {
    bool passed = false;
    // Deltas of each consecutive pair among the trailing k windows, oldest first.
    std::vector<WindowDeltas> pairs;
};

/// Partial-convergence test over the trailing k windows: passes iff every
/// |weight delta| <= tau for each role and every |loss delta| <= zeta.
GateDecision evaluate_gate(std::span<const WindowStats> windows, const ConvergenceCriteria& crit);
bool evaluate(std::span<const WindowStats> windows, const ConvergenceCriteria& crit);
bool evaluate(const TelemetryLedger& ledger, const ConvergenceCriteria& crit);

/// Replays a recorded epoch stream and returns the epoch whose window boundary
/// first passes the gate.
std::optional<int> first_pass_epoch(std::span<const EpochSnapshot> trace, const ConvergenceCriteria& crit);
/// Same, over already-closed windows.
std::optional<int> first_pass_epoch(std::span<const WindowStats> windows, const ConvergenceCriteria& crit);

}  // namespace prelora
