#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"
#include "prelora/convergence.hpp"
#include "prelora/orchestrator.hpp"
#include "support.hpp"

using namespace prelora;

namespace {

Trainer trainer_for(const RunConfig& cfg) { return Trainer(cfg, load_dataset(cfg.data)); }

std::vector<Phase> phases(const RunReport& r) {
    std::vector<Phase> out;
    for (const auto& rec : r.records) out.push_back(rec.phase);
    return out;
}

}  // namespace

TEST_CASE("forced gate pass walks FULL -> WARMUP -> LORA_ONLY on schedule") {
    const RunConfig cfg = fixtures::tiny_config();
    Trainer t = trainer_for(cfg);
    const RunReport r = t.run();
    using enum Phase;
    CHECK(phases(r) == std::vector<Phase>{full, full, full, full, warmup, warmup, lora_only, lora_only, lora_only});
    CHECK(r.switch_info.gate_pass_epoch == 3);
    CHECK(r.switch_info.injection_epoch == 3);
    CHECK(r.switch_info.freeze_epoch == 5);
    CHECK(r.switch_info.gate_pass_epoch == first_pass_epoch(std::span<const EpochSnapshot>(r.trace), cfg.gate));

    // Trainable count is a step function: full, then full + adapters, then adapters only.
    const std::size_t full_count = analytic_parameter_count(cfg.model);
    REQUIRE(r.lora_param_count);
    const std::size_t lora_count = *r.lora_param_count;
    CHECK(lora_count == lora_param_count(*r.switch_info.plan, t.state().model.target_dims(cfg.gate.roles)));
    for (const auto& rec : r.records) {
        const std::size_t expected = rec.phase == full ? full_count : rec.phase == warmup ? full_count + lora_count : lora_count;
        CHECK(rec.trainable_params == expected);
    }
    for (const auto& [a, rank] : r.switch_info.applied_ranks) CHECK(RankLadder::build(2, 8).contains(rank));

    std::vector<std::string> kinds;
    for (const auto& e : r.events)
        if (e.kind != "gate_check") kinds.push_back(e.kind);
    CHECK(kinds == std::vector<std::string>{"inject", "freeze"});
}

TEST_CASE("a gate that never passes keeps every epoch in FULL") {
    RunConfig cfg = fixtures::tiny_config();
    cfg.gate.tau = 1e-12;
    const RunReport r = trainer_for(cfg).run();
    for (Phase p : phases(r)) CHECK(p == Phase::full);
    CHECK_FALSE(r.switch_info.switched());
    CHECK_FALSE(r.lora_param_count);
    CHECK_FALSE(first_pass_epoch(std::span<const EpochSnapshot>(r.trace), cfg.gate));
}

TEST_CASE("zero warmup freezes at the injection epoch") {
    RunConfig cfg = fixtures::tiny_config();
    cfg.warmup_epochs = 0;
    const RunReport r = trainer_for(cfg).run();
    CHECK(r.switch_info.freeze_epoch == 3);
    CHECK(r.records[3].phase == Phase::full);
    CHECK(r.records[4].phase == Phase::lora_only);
}

TEST_CASE("baseline mode never switches") {
    RunConfig cfg = fixtures::tiny_config();
    cfg.run.mode = RunMode::baseline;
    const RunReport r = trainer_for(cfg).run();
    for (Phase p : phases(r)) CHECK(p == Phase::full);
    CHECK(r.records.size() == 9);
}

TEST_CASE("runs are deterministic") {
    const RunConfig cfg = fixtures::tiny_config();
    Trainer a = trainer_for(cfg), b = trainer_for(cfg);
    const RunReport ra = a.run(), rb = b.run();
    REQUIRE(ra.records.size() == rb.records.size());
    for (std::size_t i = 0; i < ra.records.size(); ++i) CHECK(ra.records[i].same_outcome(rb.records[i]));
    CHECK(ra.switch_info == rb.switch_info);
    CHECK(ra.windows == rb.windows);
    for (std::size_t i = 0; i < a.state().model.parameters().size(); ++i)
        CHECK(a.state().model.parameter(i).value == b.state().model.parameter(i).value);
}

TEST_CASE("zero learning rate leaves the model unchanged and the loss is the full-data mean") {
    RunConfig cfg = fixtures::tiny_config();
    cfg.run.mode = RunMode::baseline;
    cfg.optimizer.adam.learning_rate = 0.0;
    cfg.optimizer.batch_size = 64;
    cfg.run.total_epochs = 2;
    Trainer t = trainer_for(cfg);
    const Model before = t.state().model;
    const RunReport r = t.run();
    for (std::size_t i = 0; i < before.parameters().size(); ++i)
        CHECK(before.parameter(i).value == t.state().model.parameter(i).value);

    const Dataset& d = t.data();
    std::vector<std::size_t> all(d.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const Batch b = d.gather(all);
    Tape tape;
    const double loss = ops::cross_entropy(before.forward(tape, b.inputs), b.labels).value().item();
    CHECK(r.records[0].loss == doctest::Approx(loss).epsilon(1e-12));
    CHECK(r.records[1].loss == doctest::Approx(loss).epsilon(1e-12));
}

TEST_CASE("base weights stay bitwise fixed after the freeze") {
    const RunConfig cfg = fixtures::tiny_config();
    Trainer t = trainer_for(cfg);
    std::vector<Tensor> frozen;
    int checked = 0;
    RunHooks hooks;
    hooks.on_epoch_end = [&](const TrainState& st, const EpochRecord&) {
        if (st.phase != Phase::lora_only) return;
        const auto& params = st.model.parameters();
        if (frozen.empty()) {
            for (const auto& p : params) frozen.push_back(p.value);
            return;
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (is_adapter_parameter(params[i].name)) continue;
            CHECK_FALSE(params[i].requires_grad);
            CHECK(params[i].value.storage() == frozen[i].storage());
            ++checked;
        }
        for (const auto& [name, slot] : st.optimizer.slots()) CHECK(is_adapter_parameter(name));
    };
    t.run(hooks);
    CHECK(checked > 0);
}

TEST_CASE("divergence raises a training error and reaches the failure hook") {
    RunConfig cfg = fixtures::tiny_config();
    cfg.optimizer.adam.learning_rate = 1e300;
    Trainer t = trainer_for(cfg);
    bool hook_called = false;
    RunHooks hooks;
    hooks.on_failure = [&](const TrainState&, const std::exception&) { hook_called = true; };
    CHECK_THROWS_AS(t.run(hooks), TrainingError);
    CHECK(hook_called);
}

TEST_CASE("dataset and config must agree") {
    RunConfig cfg = fixtures::tiny_config();
    SyntheticSpec other = std::get<SyntheticSpec>(cfg.data);
    other.input_dim = 8;
    CHECK_THROWS_AS(Trainer(cfg, make_synthetic(other)), Error);
}
