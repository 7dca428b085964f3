#include "prelora/telemetry.hpp"

#include <cmath>

namespace prelora {

namespace {

double percent_change(double previous, double current, const std::string& what) {
    if (previous == 0.0) throw Error("degenerate trace: zero " + what + " in the earlier window");
    return (current - previous) / previous * 100.0;
}

void check_snapshot(const EpochSnapshot& snap) {
    if (!std::isfinite(snap.loss)) throw Error("epoch " + std::to_string(snap.epoch) + ": non-finite loss");
    if (snap.layer_norms.empty()) throw Error("epoch " + std::to_string(snap.epoch) + ": no layer norms recorded");
    for (const auto& [addr, norm] : snap.layer_norms)
        if (!std::isfinite(norm) || norm < 0.0)
            throw Error("epoch " + std::to_string(snap.epoch) + ": invalid norm for " + to_string(addr));
}

}  // namespace

std::map<ModuleAddress, double> measure_layer_norms(const Model& model, const TargetModuleSet& roles) {
    std::map<ModuleAddress, double> out;
    for (const auto& addr : enumerate_targets(model, roles))
        out.emplace(addr, frobenius_norm(model.parameter(model.target(addr).weight_index).value));
    return out;
}

WindowStats aggregate_window(int index, std::span<const EpochSnapshot> epochs) {
    if (epochs.empty()) throw Error("aggregate_window: empty window");
    WindowStats w;
    w.index = index;
    w.first_epoch = epochs.front().epoch;
    w.last_epoch = epochs.back().epoch;
    const double n = static_cast<double>(epochs.size());
    for (const auto& e : epochs) {
        w.loss += e.loss;
        for (const auto& [addr, norm] : e.layer_norms) w.layer_norms[addr] += norm;
    }
    w.loss /= n;
    std::map<Role, std::size_t> layers_per_role;
    for (auto& [addr, total] : w.layer_norms) {
        total /= n;
        w.module_norms[addr.role] += total;
        ++layers_per_role[addr.role];
    }
    for (auto& [role, total] : w.module_norms) total /= static_cast<double>(layers_per_role[role]);
    return w;
}

TelemetryLedger::TelemetryLedger(std::size_t window_size) : window_size_(window_size) {
    if (window_size == 0) throw Error("telemetry window size must be positive");
}

std::optional<WindowStats> TelemetryLedger::record_epoch(EpochSnapshot snap) {
    const int expected = last_epoch_ ? *last_epoch_ + 1 : 0;
    if (snap.epoch != expected)
        throw Error("non-consecutive epoch: expected " + std::to_string(expected) + ", got " + std::to_string(snap.epoch));
    check_snapshot(snap);
    const auto& reference = !buffer_.empty() ? buffer_.front().layer_norms
                            : !windows_.empty() ? windows_.back().layer_norms
                                                : snap.layer_norms;
    bool same_domain = reference.size() == snap.layer_norms.size();
    for (auto a = reference.cbegin(), b = snap.layer_norms.cbegin(); same_domain && a != reference.end(); ++a, ++b)
        same_domain = a->first == b->first;
    if (!same_domain) throw Error("epoch " + std::to_string(snap.epoch) + ": layer set differs from earlier epochs");

    last_epoch_ = snap.epoch;
    buffer_.push_back(std::move(snap));
    if (buffer_.size() < window_size_) return std::nullopt;
    windows_.push_back(aggregate_window(static_cast<int>(windows_.size()) + 1, buffer_));
    buffer_.clear();
    return windows_.back();
}

TelemetryLedger TelemetryLedger::from_parts(std::size_t window_size, std::vector<WindowStats> windows,
                                            std::vector<EpochSnapshot> buffer, std::optional<int> last_epoch) {
    TelemetryLedger ledger(window_size);
    if (buffer.size() >= window_size) throw Error("ledger restore: open buffer holds a full window");
    const std::size_t epochs = windows.size() * window_size + buffer.size();
    if ((epochs == 0) != !last_epoch.has_value() || (last_epoch && static_cast<std::size_t>(*last_epoch + 1) != epochs))
        throw Error("ledger restore: epoch count does not match window layout");
    ledger.windows_ = std::move(windows);
    ledger.buffer_ = std::move(buffer);
    ledger.last_epoch_ = last_epoch;
    return ledger;
}

WindowDeltas window_deltas(const WindowStats& previous, const WindowStats& current) {
    WindowDeltas d;
    for (const auto& [role, norm] : current.module_norms) {
        auto it = previous.module_norms.find(role);
        if (it == previous.module_norms.end())
            throw Error("window " + std::to_string(previous.index) + " has no norm for role " + std::string(role_name(role)));
        d.weight_pct[role] = percent_change(it->second, norm, std::string(role_name(role)) + " norm");
    }
    d.loss_pct = percent_change(previous.loss, current.loss, "loss");
    return d;
}

WindowDeltas window_deltas(const TelemetryLedger& ledger, std::size_t t) {
    const auto windows = ledger.windows();
    if (t < 2 || t > windows.size())
        throw Error("window_deltas: window " + std::to_string(t) + " needs windows t-1 and t closed (have " +
                    std::to_string(windows.size()) + ")");
    return window_deltas(windows[t - 2], windows[t - 1]);
}

std::map<ModuleAddress, double> layer_deltas(const WindowStats& previous, const WindowStats& current) {
    std::map<ModuleAddress, double> out;
    for (const auto& [addr, norm] : current.layer_norms) {
        auto it = previous.layer_norms.find(addr);
        if (it == previous.layer_norms.end()) throw Error("layer " + to_string(addr) + " missing from earlier window");
        out[addr] = std::abs(percent_change(it->second, norm, to_string(addr) + " norm"));
    }
    return out;
}

std::map<ModuleAddress, double> layer_deltas_last_pair(const TelemetryLedger& ledger) {
    const auto windows = ledger.windows();
    if (windows.size() < 2) throw Error("layer deltas need at least two closed windows");
    return layer_deltas(windows[windows.size() - 2], windows.back());
}

}  // namespace prelora
