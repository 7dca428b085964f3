#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "prelora/orchestrator.hpp"

namespace prelora {

/// Version of the metrics.csv / windows.csv / run.json schemas.
inline constexpr int kReportFormatVersion = 1;

inline constexpr const char* kMetricsColumns[] = {"epoch",  "phase",           "loss",          "train_acc",
                                                  "wall_s", "trainable_params", "examples_per_s"};

class ReportError : public Error {
public:
    using Error::Error;
};

ModuleAddress parse_address(std::string_view text);

nlohmann::json to_json(const EpochRecord& r);
EpochRecord epoch_record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EpochSnapshot& s);
EpochSnapshot snapshot_from_json(const nlohmann::json& j);
nlohmann::json to_json(const WindowStats& w);
WindowStats window_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SwitchInfo& s);
SwitchInfo switch_info_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Event& e);
Event event_from_json(const nlohmann::json& j);
nlohmann::json ranks_to_json(const std::map<ModuleAddress, int>& ranks);
std::map<ModuleAddress, int> ranks_from_json(const nlohmann::json& j);

/// Parameters + gradients + two Adam moments for the trainable part.
std::size_t training_memory_bytes(std::size_t total_params, std::size_t trainable_params,
                                  std::size_t bytes_per_scalar = sizeof(double));

struct ReportAggregates {
    std::map<Phase, double> mean_epoch_s;
    double total_wall_s = 0.0;
    std::optional<double> speedup_ratio;  // mean FULL / mean LORA_ONLY epoch time
    std::optional<double> param_reduction_ratio;  // lora / full
    std::optional<std::size_t> optimizer_state_bytes_saved;
    std::size_t memory_full_bytes = 0;
    std::optional<std::size_t> memory_lora_bytes;
};

ReportAggregates compute_aggregates(const RunReport& report);

nlohmann::json report_to_json(const RunReport& report);

/// Writes metrics.csv, windows.csv, deltas.csv, run.json and events.log.
void export_report(const RunReport& report, const std::filesystem::path& dir);

/// Writes plot_module_norms.csv, plot_loss.csv, plot_query_layers.csv and plot_epoch_time.csv.
void emit_plot_data(const RunReport& report, const std::filesystem::path& dir);

std::vector<EpochRecord> read_metrics_csv(const std::filesystem::path& path);
/// Window-level columns only (index, epochs, loss, per-role norms); layer norms are not exported.
std::vector<WindowStats> read_windows_csv(const std::filesystem::path& path);
std::map<ModuleAddress, double> read_deltas_csv(const std::filesystem::path& path);

/// Rebuilds a report from run.json and metrics.csv in a run directory.
RunReport load_report(const std::filesystem::path& dir);

/// Exclusive claim on a run directory, released on destruction.
class RunDirLock {
public:
    explicit RunDirLock(const std::filesystem::path& dir);
    ~RunDirLock();
    RunDirLock(const RunDirLock&) = delete;
    RunDirLock& operator=(const RunDirLock&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace prelora
