#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "prelora/budget.hpp"
#include "prelora/checkpoint.hpp"
#include "prelora/config.hpp"
#include "prelora/convergence.hpp"
#include "prelora/orchestrator.hpp"
#include "prelora/rank_planner.hpp"
#include "prelora/report_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prelora;

namespace {

std::string error_kind(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
    if (dynamic_cast<const ReportError*>(&e)) return "report";
    if (dynamic_cast<const TrainingError*>(&e)) return "training";
    if (dynamic_cast<const IdxFormatError*>(&e)) return "dataset";
    if (dynamic_cast<const ShapeError*>(&e)) return "shape";
    if (dynamic_cast<const NotReadyError*>(&e)) return "gate";
    if (dynamic_cast<const Error*>(&e)) return "error";
    return "internal";
}

void print_error(const std::string& verb, const std::string& kind, const std::string& message) {
    std::cerr << json{{"error", {{"verb", verb}, {"kind", kind}, {"message", message}}}}.dump() << '\n';
}

TargetModuleSet parse_roles(const std::string& list) {
    std::vector<Role> roles;
    std::stringstream in(list);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) roles.push_back(parse_role(item));
    return TargetModuleSet(std::move(roles));
}

std::string roles_string(const TargetModuleSet& roles) {
    std::string out;
    for (Role r : roles.roles()) out += (out.empty() ? "" : ",") + std::string(role_name(r));
    return out;
}

RunConfig run_config_from_dir(const fs::path& dir) { return load_report(dir).config; }

// ---------------------------------------------------------------- run

struct RunArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    std::optional<int> epochs;
    std::string mode;
    std::string resume;
    std::optional<int> checkpoint_epoch;
    bool quiet = false;
};

int cmd_run(const RunArgs& a) {
    RunConfig cfg;
    std::optional<TrainState> restored;
    if (!a.resume.empty()) {
        if (!a.config.empty() || !a.overrides.empty())
            throw ConfigError("--resume takes the config stored in the checkpoint; drop --config/--set");
        Checkpoint ck = load_checkpoint(a.resume);
        cfg = std::move(ck.config);
        restored.emplace(std::move(ck.state));
    } else {
        if (a.config.empty()) throw ConfigError("run: --config is required unless --resume is given");
        cfg = parse_config(a.config, a.overrides);
    }
    if (a.epochs) cfg.run.total_epochs = *a.epochs;
    if (!a.mode.empty()) {
        if (a.mode == "baseline") cfg.run.mode = RunMode::baseline;
        else if (a.mode == "prelora") cfg.run.mode = RunMode::prelora;
        else throw ConfigError("run.mode: expected baseline or prelora, got '" + a.mode + "'");
    }
    if (!a.out.empty()) cfg.run.output_dir = a.out;
    if (a.checkpoint_epoch) cfg.run.checkpoint_epoch = *a.checkpoint_epoch;
    cfg.validate();

    const fs::path dir = cfg.run.output_dir;
    RunDirLock lock(dir);
    Dataset data = load_dataset(cfg.data);
    Trainer trainer = restored ? Trainer(cfg, std::move(data), std::move(*restored)) : Trainer(cfg, std::move(data));

    RunHooks hooks;
    hooks.on_epoch_end = [&](const TrainState& st, const EpochRecord& r) {
        if (!a.quiet)
            std::printf("epoch %3d %-9s loss=%.6f acc=%.4f wall=%.3fs trainable=%zu\n", r.epoch,
                        std::string(phase_name(r.phase)).c_str(), r.loss, r.train_acc, r.wall_s, r.trainable_params);
        if (cfg.run.checkpoint_epoch && *cfg.run.checkpoint_epoch == r.epoch)
            save_checkpoint(dir / "checkpoint.bin", cfg, st);
    };
    hooks.on_failure = [&](const TrainState& st, const std::exception&) {
        try {
            save_checkpoint(dir / "abort.ckpt", cfg, st);
        } catch (const std::exception& e) {
            std::cerr << "could not write abort checkpoint: " << e.what() << '\n';
        }
    };
    const RunReport report = trainer.run(hooks);
    export_report(report, dir);
    emit_plot_data(report, dir);

    const auto& sw = report.switch_info;
    json summary = {{"output_dir", dir.string()},
                    {"epochs", report.records.size()},
                    {"switched", sw.switched()},
                    {"gate_pass_epoch", sw.gate_pass_epoch ? json(*sw.gate_pass_epoch) : json(nullptr)},
                    {"freeze_epoch", sw.freeze_epoch ? json(*sw.freeze_epoch) : json(nullptr)},
                    {"final_loss", report.records.empty() ? json(nullptr) : json(report.records.back().loss)}};
    std::cout << summary.dump() << '\n';
    return 0;
}

// ---------------------------------------------------------------- replay-gate

struct GateArgs {
    std::string windows;
    std::string run_dir;
    std::optional<int> k, m;
    std::optional<double> tau, zeta;
    std::string roles;
};

int cmd_replay_gate(const GateArgs& a) {
    const auto windows = read_windows_csv(a.windows);
    ConvergenceCriteria crit;
    if (!a.run_dir.empty()) {
        crit = run_config_from_dir(a.run_dir).gate;
    } else if (!windows.empty()) {
        std::vector<Role> present;
        for (const auto& [role, v] : windows.front().module_norms) present.push_back(role);
        crit.roles = TargetModuleSet(present);
    }
    if (a.k) crit.k = *a.k;
    if (a.m) crit.m = *a.m;
    if (a.tau) crit.tau = *a.tau;
    if (a.zeta) crit.zeta = *a.zeta;
    if (!a.roles.empty()) crit.roles = parse_roles(a.roles);
    crit.validate();
    if (!windows.empty() && windows.front().last_epoch - windows.front().first_epoch + 1 != crit.m)
        throw ConfigError("gate.m: " + std::to_string(crit.m) + " does not match the recorded window size");

    const auto epoch = first_pass_epoch(std::span<const WindowStats>(windows), crit);
    std::cout << json{{"first_pass_epoch", epoch ? json(*epoch) : json(nullptr)},
                      {"windows", windows.size()},
                      {"criteria",
                       {{"k", crit.k}, {"m", crit.m}, {"tau", crit.tau}, {"zeta", crit.zeta}, {"roles", roles_string(crit.roles)}}}}
                     .dump()
              << '\n';
    return 0;
}

// ---------------------------------------------------------------- plan-ranks

struct PlanArgs {
    std::string deltas;
    std::string run_dir;
    std::optional<int> r_min, r_max;
    std::string rule;
};

int cmd_plan_ranks(const PlanArgs& a) {
    const auto deltas = read_deltas_csv(a.deltas);
    RankConfig rc;
    if (!a.run_dir.empty()) rc = run_config_from_dir(a.run_dir).ranks;
    if (a.r_min) rc.r_min = *a.r_min;
    if (a.r_max) rc.r_max = *a.r_max;
    if (!a.rule.empty()) rc.degenerate_rule = parse_degenerate_rule(a.rule);
    const RankLadder ladder = RankLadder::build(rc.r_min, rc.r_max);
    const RankPlan plan = assign_ranks(deltas, ladder, rc.degenerate_rule);
    std::cout << json{{"rank_plan", ranks_to_json(plan.ranks)}, {"ladder", std::vector<int>(ladder.rungs().begin(), ladder.rungs().end())}}.dump() << '\n';
    return 0;
}

// ---------------------------------------------------------------- budget

struct BudgetArgs {
    std::string preset = "vit-large";
    std::optional<int> layers, hidden, heads, mlp, classes, input_dim, tokens;
    int rank = 64;
    std::string roles;
    std::size_t bytes_per_scalar = sizeof(double);
};

int cmd_budget(const BudgetArgs& a) {
    ModelConfig cfg;
    if (a.preset == "vit-large") cfg = vit_large_config();
    else if (a.preset != "desk") throw ConfigError("budget: unknown preset '" + a.preset + "' (vit-large or desk)");
    if (a.layers) cfg.num_layers = *a.layers;
    if (a.hidden) cfg.hidden_dim = *a.hidden;
    if (a.heads) cfg.num_heads = *a.heads;
    if (a.mlp) cfg.mlp_dim = *a.mlp;
    if (a.classes) cfg.num_classes = *a.classes;
    if (a.input_dim) cfg.input_dim = *a.input_dim;
    if (a.tokens) cfg.num_tokens = *a.tokens;
    const TargetModuleSet roles = a.roles.empty() ? TargetModuleSet{} : parse_roles(a.roles);

    const BudgetResult b = compute_budget(cfg, roles, a.rank, a.bytes_per_scalar);
    json by_role = json::object();
    for (const auto& [role, n] : b.adapter_params_by_role) by_role[std::string(role_name(role))] = n;
    std::cout << json{{"model",
                       {{"num_layers", cfg.num_layers},
                        {"hidden_dim", cfg.hidden_dim},
                        {"num_heads", cfg.num_heads},
                        {"mlp_dim", cfg.mlp_dim},
                        {"num_classes", cfg.num_classes},
                        {"input_dim", cfg.input_dim},
                        {"num_tokens", cfg.num_tokens}}},
                      {"roles", roles_string(roles)},
                      {"rank", a.rank},
                      {"full_params", b.full_params},
                      {"adapter_params", b.adapter_params},
                      {"adapter_params_by_role", by_role},
                      {"reduction_ratio", b.reduction_ratio},
                      {"bytes_per_scalar", a.bytes_per_scalar},
                      {"memory_full_bytes", b.memory_full_bytes},
                      {"memory_lora_bytes", b.memory_lora_bytes},
                      {"optimizer_state_bytes_saved", b.optimizer_state_bytes_saved}}
                     .dump(2)
              << '\n';
    return 0;
}

// ---------------------------------------------------------------- plot-data

int cmd_plot_data(const std::string& run_dir, const std::string& out) {
    const RunReport report = load_report(run_dir);
    const fs::path dest = out.empty() ? fs::path(run_dir) : fs::path(out);
    emit_plot_data(report, dest);
    std::cout << json{{"output_dir", dest.string()}}.dump() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PreLoRA: switch from full-parameter training to LoRA once training partially converges"};
    app.require_subcommand(1);

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "train a model and export metrics");
    run_cmd->add_option("--config,-c", run.config, "JSON config file");
    run_cmd->add_option("--set,-s", run.overrides, "override a config value, e.g. gate.tau=0.5");
    run_cmd->add_option("--out,-o", run.out, "output directory (overrides run.output_dir)");
    run_cmd->add_option("--epochs", run.epochs, "total epochs (overrides run.total_epochs)");
    run_cmd->add_option("--mode", run.mode, "baseline or prelora");
    run_cmd->add_option("--resume", run.resume, "continue from a checkpoint file");
    run_cmd->add_option("--checkpoint-epoch", run.checkpoint_epoch, "write checkpoint.bin after this epoch");
    run_cmd->add_flag("--quiet,-q", run.quiet, "no per-epoch progress lines");

    GateArgs gate;
    auto* gate_cmd = app.add_subcommand("replay-gate", "find the first gate-pass epoch in a windows.csv");
    gate_cmd->add_option("windows", gate.windows, "windows.csv from a run")->required();
    gate_cmd->add_option("--run", gate.run_dir, "take the gate settings from this run directory");
    gate_cmd->add_option("--k", gate.k);
    gate_cmd->add_option("--m", gate.m);
    gate_cmd->add_option("--tau", gate.tau, "weight-norm threshold, percent");
    gate_cmd->add_option("--zeta", gate.zeta, "loss threshold, percent");
    gate_cmd->add_option("--roles", gate.roles, "comma-separated module roles");

    PlanArgs plan;
    auto* plan_cmd = app.add_subcommand("plan-ranks", "assign adapter ranks from a deltas.csv");
    plan_cmd->add_option("deltas", plan.deltas, "deltas.csv from a run")->required();
    plan_cmd->add_option("--run", plan.run_dir, "take the rank settings from this run directory");
    plan_cmd->add_option("--r-min", plan.r_min);
    plan_cmd->add_option("--r-max", plan.r_max);
    plan_cmd->add_option("--degenerate-rule", plan.rule, "max or min");

    BudgetArgs budget;
    auto* budget_cmd = app.add_subcommand("budget", "parameter and memory arithmetic without training");
    budget_cmd->add_option("--preset", budget.preset, "vit-large (default) or desk");
    budget_cmd->add_option("--layers", budget.layers);
    budget_cmd->add_option("--hidden", budget.hidden);
    budget_cmd->add_option("--heads", budget.heads);
    budget_cmd->add_option("--mlp", budget.mlp);
    budget_cmd->add_option("--classes", budget.classes);
    budget_cmd->add_option("--input-dim", budget.input_dim);
    budget_cmd->add_option("--tokens", budget.tokens);
    budget_cmd->add_option("--rank", budget.rank, "rank of every adapter");
    budget_cmd->add_option("--roles", budget.roles, "comma-separated module roles");
    budget_cmd->add_option("--bytes-per-scalar", budget.bytes_per_scalar);

    std::string plot_run, plot_out;
    auto* plot_cmd = app.add_subcommand("plot-data", "re-emit plot CSVs from a run directory");
    plot_cmd->add_option("--run", plot_run, "run directory with run.json and metrics.csv")->required();
    plot_cmd->add_option("--out", plot_out, "destination (default: the run directory)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(), "usage", e.what());
        return 2;
    }

    const std::string verb = app.get_subcommands().front()->get_name();
    try {
        if (*run_cmd) return cmd_run(run);
        if (*gate_cmd) return cmd_replay_gate(gate);
        if (*plan_cmd) return cmd_plan_ranks(plan);
        if (*budget_cmd) return cmd_budget(budget);
        if (*plot_cmd) return cmd_plot_data(plot_run, plot_out);
    } catch (const std::exception& e) {
        print_error(verb, error_kind(e), e.what());
        return 1;
    }
    return 1;
}
