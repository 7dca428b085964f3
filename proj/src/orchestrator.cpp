#include "prelora/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace prelora {

std::string_view phase_name(Phase phase) noexcept {
    switch (phase) {
        case Phase::full: return "FULL";
        case Phase::warmup: return "WARMUP";
        case Phase::lora_only: return "LORA_ONLY";
    }
    return "?";
}

Phase parse_phase(std::string_view name) {
    if (name == "FULL") return Phase::full;
    if (name == "WARMUP") return Phase::warmup;
    if (name == "LORA_ONLY") return Phase::lora_only;
    throw Error("unknown phase '" + std::string(name) + "'");
}

std::uint64_t injection_seed(std::uint64_t run_seed, int epoch) noexcept {
    std::seed_seq seq{static_cast<std::uint32_t>(run_seed), static_cast<std::uint32_t>(run_seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x10a4u};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (std::uint64_t{out[0]} << 32) | out[1];
}

TrainState initial_state(const RunConfig& cfg) {
    TrainState st{build_model(cfg.model), Adam(cfg.optimizer.adam), Phase::full, 0,
                  TelemetryLedger(static_cast<std::size_t>(cfg.gate.m)), {}, {}, {}, {}};
    return st;
}

Trainer::Trainer(RunConfig cfg, Dataset data)
    : Trainer(cfg, std::move(data), initial_state(cfg)) {}

Trainer::Trainer(RunConfig cfg, Dataset data, TrainState restored)
    : cfg_(std::move(cfg)),
      data_(std::move(data)),
      state_(std::move(restored)),
      ladder_(RankLadder::build(cfg_.ranks.r_min, cfg_.ranks.r_max)) {
    cfg_.gate.validate();
    if (data_.input_dim() != static_cast<std::size_t>(cfg_.model.input_dim) ||
        data_.num_classes() != cfg_.model.num_classes)
        throw Error("trainer: dataset shape does not match the model config");
    if (state_.ledger.window_size() != static_cast<std::size_t>(cfg_.gate.m))
        throw Error("trainer: ledger window size differs from gate.m");
}

void Trainer::log(std::string kind, nlohmann::json detail) {
    state_.events.push_back(Event{state_.next_epoch - 1, std::move(kind), std::move(detail)});
}

EpochResult Trainer::train_epoch() {
    const int epoch = state_.next_epoch;
    const std::size_t n = data_.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.run.seed), static_cast<std::uint32_t>(cfg_.run.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t batch_size = std::min(cfg_.optimizer.batch_size, n);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    const auto start = std::chrono::steady_clock::now();
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
        const std::size_t end = std::min(begin + batch_size, n);
        const Batch batch = data_.gather(std::span<const std::size_t>(order).subspan(begin, end - begin));

        Tape tape;
        Var logits = state_.model.forward(tape, batch.inputs);
        Var loss = ops::cross_entropy(logits, batch.labels);
        const double batch_loss = loss.value().item();
        if (!std::isfinite(batch_loss))
            throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " (batch starting at " +
                                std::to_string(begin) + "); check the learning rate and data scaling");
        loss_sum += batch_loss * static_cast<double>(end - begin);

        const Tensor& lv = logits.value();
        for (std::size_t r = 0; r < lv.dim(0); ++r) {
            const double* row = lv.data().data() + r * lv.dim(1);
            const auto pred = static_cast<std::size_t>(std::max_element(row, row + lv.dim(1)) - row);
            if (pred == batch.labels[r]) ++correct;
        }

        GradientMap grads = tape.gradients(loss);
        state_.optimizer.step(state_.model.parameters(), grads);
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    EpochResult result;
    result.snapshot.epoch = epoch;
    result.snapshot.loss = loss_sum / static_cast<double>(n);
    result.snapshot.layer_norms = measure_layer_norms(state_.model, cfg_.gate.roles);

    result.record.epoch = epoch;
    result.record.phase = state_.phase;
    result.record.loss = result.snapshot.loss;
    result.record.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    result.record.wall_s = wall;
    result.record.trainable_params = parameter_count(state_.model, true);
    result.record.examples_per_s = wall > 0.0 ? static_cast<double>(n) / wall : 0.0;

    result.closed_window = state_.ledger.record_epoch(result.snapshot);
    state_.trace.push_back(result.snapshot);
    state_.records.push_back(result.record);
    state_.next_epoch = epoch + 1;
    return result;
}

void Trainer::enter_lora_only(int epoch) {
    freeze_base(state_.model);
    state_.optimizer.prune_frozen(state_.model.parameters());
    state_.phase = Phase::lora_only;
    state_.switch_info.freeze_epoch = epoch;
    log("freeze", {{"trainable_params", parameter_count(state_.model, true)},
                   {"optimizer_state_bytes", state_.optimizer.state_bytes()}});
}

std::optional<Phase> Trainer::step_controller() {
    if (state_.next_epoch == 0) return std::nullopt;
    const int epoch = state_.next_epoch - 1;

    if (state_.phase == Phase::warmup) {
        ++state_.switch_info.warmup_epochs_done;
        if (state_.switch_info.warmup_epochs_done >= cfg_.warmup_epochs) {
            enter_lora_only(epoch);
            return state_.phase;
        }
        return std::nullopt;
    }
    if (state_.phase != Phase::full || cfg_.run.mode == RunMode::baseline || state_.switch_info.switched())
        return std::nullopt;

    const auto windows = state_.ledger.windows();
    const bool at_boundary = state_.ledger.open_epochs().empty() && !windows.empty() && windows.back().last_epoch == epoch;
    if (!at_boundary || windows.size() < static_cast<std::size_t>(cfg_.gate.k)) return std::nullopt;

    const GateDecision decision = evaluate_gate(windows, cfg_.gate);
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& d : decision.pairs) {
        nlohmann::json w;
        for (const auto& [role, pct] : d.weight_pct) w[std::string(role_name(role))] = pct;
        pairs.push_back({{"loss_pct", d.loss_pct}, {"weight_pct", w}});
    }
    log("gate_check", {{"passed", decision.passed}, {"window", windows.back().index}, {"pairs", pairs}});
    if (!decision.passed) return std::nullopt;

    auto& sw = state_.switch_info;
    sw.layer_deltas = layer_deltas_last_pair(state_.ledger);
    sw.plan = assign_ranks(sw.layer_deltas, ladder_, cfg_.ranks.degenerate_rule);
    const InjectionReport injected =
        inject(state_.model, cfg_.gate.roles, *sw.plan,
               LoraOptions{cfg_.ranks.scaling, injection_seed(cfg_.run.seed, epoch), ladder_});
    sw.applied_ranks = injected.applied_ranks;
    for (const auto& c : injected.clamps)
        log("rank_clamped", {{"address", to_string(c.address)}, {"requested", c.requested}, {"applied", c.applied}});
    sw.gate_pass_epoch = epoch;
    sw.injection_epoch = epoch;
    sw.warmup_epochs_done = 0;
    state_.phase = Phase::warmup;

    nlohmann::json ranks = nlohmann::json::object();
    for (const auto& [addr, r] : sw.applied_ranks) ranks[to_string(addr)] = r;
    log("inject", {{"ranks", ranks}, {"trainable_params", parameter_count(state_.model, true)}});

    if (cfg_.warmup_epochs == 0) enter_lora_only(epoch);
    return state_.phase;
}

RunReport Trainer::run(const RunHooks& hooks) {
    try {
        while (!finished()) {
            train_epoch();
            step_controller();
            if (hooks.on_epoch_end) hooks.on_epoch_end(state_, state_.records.back());
        }
    } catch (const std::exception& e) {
        if (hooks.on_failure) hooks.on_failure(state_, e);
        throw;
    }
    return report();
}

RunReport Trainer::report() const {
    RunReport r;
    r.config = cfg_;
    r.records = state_.records;
    r.trace = state_.trace;
    r.windows.assign(state_.ledger.windows().begin(), state_.ledger.windows().end());
    r.switch_info = state_.switch_info;
    r.events = state_.events;
    r.full_param_count = analytic_parameter_count(cfg_.model);
    if (!state_.switch_info.applied_ranks.empty())
        r.lora_param_count = lora_param_count(state_.switch_info.applied_ranks, state_.model.target_dims(cfg_.gate.roles));
    return r;
}

RunReport run(const RunConfig& cfg, const RunHooks& hooks) {
    Trainer trainer(cfg, load_dataset(cfg.data));
    return trainer.run(hooks);
}

}  // namespace prelora
