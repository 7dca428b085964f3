#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "prelora/config.hpp"
#include "prelora/convergence.hpp"
#include "prelora/dataset.hpp"
#include "prelora/lora.hpp"
#include "prelora/model.hpp"
#include "prelora/optimizer.hpp"
#include "prelora/rank_planner.hpp"
#include "prelora/telemetry.hpp"

namespace prelora {

/// FULL -> WARMUP (gate pass) -> LORA_ONLY (after w warmup epochs).
enum class Phase { full, warmup, lora_only };

std::string_view phase_name(Phase phase) noexcept;
Phase parse_phase(std::string_view name);

class TrainingError : public Error {
public:
    using Error::Error;
};

struct EpochRecord {
    int epoch = 0;
    Phase phase = Phase::full;
    double loss = 0.0;
    double train_acc = 0.0;
    double wall_s = 0.0;
    std::size_t trainable_params = 0;
    double examples_per_s = 0.0;

    /// Equality ignoring wall-clock fields.
    bool same_outcome(const EpochRecord& o) const noexcept {
        return epoch == o.epoch && phase == o.phase && loss == o.loss && train_acc == o.train_acc &&
               trainable_params == o.trainable_params;
    }
};

struct SwitchInfo {
    std::optional<int> gate_pass_epoch;
    std::optional<int> injection_epoch;
    std::optional<int> freeze_epoch;
    std::optional<RankPlan> plan;             // planner output
    std::map<ModuleAddress, int> applied_ranks;  // after clamping to layer dims
    std::map<ModuleAddress, double> layer_deltas;
    int warmup_epochs_done = 0;

    bool switched() const noexcept { return gate_pass_epoch.has_value(); }
    bool operator==(const SwitchInfo&) const = default;
};

struct Event {
    int epoch = 0;
    std::string kind;
    nlohmann::json detail;

    bool operator==(const Event&) const = default;
};

struct TrainState {
    Model model;
    Adam optimizer;
    Phase phase = Phase::full;
    int next_epoch = 0;
    TelemetryLedger ledger{3};
    SwitchInfo switch_info;
    std::vector<EpochRecord> records;
    std::vector<EpochSnapshot> trace;
    std::vector<Event> events;
};

struct EpochResult {
    EpochSnapshot snapshot;
    EpochRecord record;
    std::optional<WindowStats> closed_window;
};

struct RunReport {
    RunConfig config;
    std::vector<EpochRecord> records;
    std::vector<EpochSnapshot> trace;
    std::vector<WindowStats> windows;
    SwitchInfo switch_info;
    std::vector<Event> events;
    std::size_t full_param_count = 0;
    std::optional<std::size_t> lora_param_count;  // of the applied ranks
};

struct RunHooks {
    std::function<void(const TrainState&, const EpochRecord&)> on_epoch_end;
    std::function<void(const TrainState&, const std::exception&)> on_failure;
};

TrainState initial_state(const RunConfig& cfg);

class Trainer {
public:
    Trainer(RunConfig cfg, Dataset data);
    Trainer(RunConfig cfg, Dataset data, TrainState restored);

    /// One shuffled pass over the data; records the snapshot into the ledger.
    EpochResult train_epoch();
    /// Phase logic run after every epoch. Returns the new phase on a transition.
    std::optional<Phase> step_controller();

    /// Trains until run.total_epochs epochs have completed.
    RunReport run(const RunHooks& hooks = {});
    RunReport report() const;

    const TrainState& state() const noexcept { return state_; }
    TrainState& state() noexcept { return state_; }
    const RunConfig& config() const noexcept { return cfg_; }
    const Dataset& data() const noexcept { return data_; }
    bool finished() const noexcept { return state_.next_epoch >= cfg_.run.total_epochs; }

private:
    void log(std::string kind, nlohmann::json detail);
    void enter_lora_only(int epoch);

    RunConfig cfg_;
    Dataset data_;
    TrainState state_;
    RankLadder ladder_;
};

/// Loads the dataset, trains, and returns the report.
RunReport run(const RunConfig& cfg, const RunHooks& hooks = {});

/// Deterministic seed for the adapter initialization at a given injection epoch.
std::uint64_t injection_seed(std::uint64_t run_seed, int epoch) noexcept;

}  // namespace prelora
