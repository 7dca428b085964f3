#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "json.hpp"
#include "prelora/convergence.hpp"
#include "prelora/dataset.hpp"
#include "prelora/model.hpp"
#include "prelora/optimizer.hpp"
#include "prelora/rank_planner.hpp"

namespace prelora {

class ConfigError : public Error {
public:
    using Error::Error;
};

struct TrainingConfig {
    AdamConfig adam;
    std::size_t batch_size = 32;

    bool operator==(const TrainingConfig&) const = default;
};

struct RankConfig {
    int r_min = 8;
    int r_max = 64;
    double scaling = 1.0;
    DegenerateRule degenerate_rule = DegenerateRule::max_rank;

    bool operator==(const RankConfig&) const = default;
};

enum class RunMode { baseline, prelora };

std::string_view run_mode_name(RunMode mode) noexcept;

struct RunSettings {
    int total_epochs = 60;
    std::uint64_t seed = 0;
    RunMode mode = RunMode::prelora;
    std::string output_dir = "runs/latest";
    // Write a checkpoint after this epoch completes.
    std::optional<int> checkpoint_epoch;

    bool operator==(const RunSettings&) const = default;
};

/// Everything a training run needs. model.input_dim and model.num_classes are
/// derived from the dataset spec, never read from the file.
struct RunConfig {
    ModelConfig model;
    DatasetSpec data = SyntheticSpec{};
    TrainingConfig optimizer;
    ConvergenceCriteria gate;
    int warmup_epochs = 10;
    RankConfig ranks;
    RunSettings run;

    void validate() const;
    bool operator==(const RunConfig&) const = default;
};

/// Builds a validated config from a JSON tree. Unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const RunConfig& cfg);

/// Applies "dotted.key=value" overrides to a JSON tree. Values are parsed as
/// JSON when possible and taken as strings otherwise.
void apply_overrides(nlohmann::json& doc, std::span<const std::string> overrides);

/// Reads a config file; overrides take precedence over file values, which take
/// precedence over defaults.
RunConfig parse_config(const std::filesystem::path& path, std::span<const std::string> overrides = {});

}  // namespace prelora
