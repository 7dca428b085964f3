#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "prelora/model.hpp"

namespace prelora {

struct EpochSnapshot {
    int epoch = 0;
    std::map<ModuleAddress, double> layer_norms;
    double loss = 0.0;  // mean training cross-entropy over the epoch

    bool operator==(const EpochSnapshot&) const = default;
};

/// Statistics of one closed window of m consecutive epochs (all means over the window).
struct WindowStats {
    int index = 0;  // 1-based
    int first_epoch = 0;
    int last_epoch = 0;
    std::map<Role, double> module_norms;          // mean over layers of layer_norms
    std::map<ModuleAddress, double> layer_norms;  // mean over the window's epochs
    double loss = 0.0;

    bool operator==(const WindowStats&) const = default;
};

/// Signed percentage changes between two consecutive windows.
struct WindowDeltas {
    std::map<Role, double> weight_pct;
    double loss_pct = 0.0;
};

/// Frobenius norms of each target layer's base weight (bias excluded).
std::map<ModuleAddress, double> measure_layer_norms(const Model& model, const TargetModuleSet& roles);

/// Closes a window from exactly m snapshots.
WindowStats aggregate_window(int index, std::span<const EpochSnapshot> epochs);

class TelemetryLedger {
public:
    explicit TelemetryLedger(std::size_t window_size);

    /// Appends an epoch; returns the window it closes, if any. Epochs must be consecutive from 0.
    std::optional<WindowStats> record_epoch(EpochSnapshot snap);

    std::size_t window_size() const noexcept { return window_size_; }
    std::span<const WindowStats> windows() const noexcept { return windows_; }
    std::span<const EpochSnapshot> open_epochs() const noexcept { return buffer_; }
    std::optional<int> last_epoch() const noexcept { return last_epoch_; }

    /// Restores a ledger from serialized parts, validating consistency.
    static TelemetryLedger from_parts(std::size_t window_size, std::vector<WindowStats> windows,
                                      std::vector<EpochSnapshot> buffer, std::optional<int> last_epoch);

    bool operator==(const TelemetryLedger&) const = default;

private:
    std::size_t window_size_;
    std::vector<WindowStats> windows_;
    std::vector<EpochSnapshot> buffer_;
    std::optional<int> last_epoch_;
};

WindowDeltas window_deltas(const WindowStats& previous, const WindowStats& current);
/// Deltas between windows t-1 and t (1-based, t >= 2).
WindowDeltas window_deltas(const TelemetryLedger& ledger, std::size_t t);

/// |percentage change| per layer between the two most recent windows.
std::map<ModuleAddress, double> layer_deltas_last_pair(const TelemetryLedger& ledger);
std::map<ModuleAddress, double> layer_deltas(const WindowStats& previous, const WindowStats& current);

}  // namespace prelora
