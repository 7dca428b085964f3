#include <random>
#include <set>

#include "doctest.h"
#include "prelora/lora.hpp"
#include "prelora/model.hpp"
#include "support.hpp"

using namespace prelora;

namespace {

ModelConfig small_cfg() {
    ModelConfig c;
    c.num_layers = 1;
    c.hidden_dim = 8;
    c.num_heads = 2;
    c.mlp_dim = 16;
    c.input_dim = 8;
    c.num_tokens = 2;
    c.num_classes = 3;
    return c;
}

}  // namespace

TEST_CASE("target layer counts") {
    CHECK(enumerate_targets(build_model(small_cfg()), TargetModuleSet{}).size() == 5);
    CHECK(enumerate_targets(build_model(ModelConfig{}), TargetModuleSet{}).size() == 20);
    CHECK(enumerate_targets(24, TargetModuleSet{}).size() == 120);
}

TEST_CASE("enumeration order is by layer then q, k, v, dense, output") {
    const auto two = enumerate_targets(2, TargetModuleSet({Role::query}));
    CHECK(two == std::vector<ModuleAddress>{{0, Role::query}, {1, Role::query}});

    const auto one = enumerate_targets(1, TargetModuleSet({Role::output, Role::query, Role::dense, Role::key, Role::value}));
    CHECK(one == std::vector<ModuleAddress>{{0, Role::query}, {0, Role::key}, {0, Role::value}, {0, Role::dense}, {0, Role::output}});

    // Bijection onto L x |roles|.
    const auto all = enumerate_targets(24, TargetModuleSet{});
    std::set<ModuleAddress> unique(all.begin(), all.end());
    CHECK(unique.size() == all.size());
}

TEST_CASE("target module sets reject empty and duplicate lists") {
    CHECK_THROWS_AS(TargetModuleSet(std::vector<Role>{}), Error);
    CHECK_THROWS_AS(TargetModuleSet({Role::key, Role::key}), Error);
    CHECK(parse_role("dense") == Role::dense);
    CHECK_THROWS_AS(parse_role("attn_out"), Error);
}

TEST_CASE("config validation names the violated field") {
    ModelConfig c;
    c.hidden_dim = 65;
    try {
        build_model(c);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("hidden_dim") != std::string::npos);
    }
    c = ModelConfig{};
    c.num_tokens = 3;
    CHECK_THROWS_AS(build_model(c), Error);
    c = ModelConfig{};
    c.num_layers = 0;
    CHECK_THROWS_AS(build_model(c), Error);
}

TEST_CASE("initialization is deterministic in the seed") {
    const Model a = build_model(ModelConfig{});
    const Model b = build_model(ModelConfig{});
    REQUIRE(a.parameters().size() == b.parameters().size());
    for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameter(i).value == b.parameter(i).value);

    ModelConfig other;
    other.seed = 2;
    CHECK_FALSE(build_model(other).parameter(0).value == a.parameter(0).value);
}

TEST_CASE("initial weights are truncated normal, biases zero, gains one") {
    const Model m = build_model(ModelConfig{});
    const Parameter* w = m.find_parameter("blocks.0.dense.weight");
    REQUIRE(w);
    double sq = 0.0, mx = 0.0;
    for (double v : w->value.data()) sq += v * v, mx = std::max(mx, std::abs(v));
    CHECK(mx <= 0.04);
    // Truncation at two sigma shrinks the stddev to about 0.88 sigma.
    CHECK(std::sqrt(sq / static_cast<double>(w->value.size())) == doctest::Approx(0.0176).epsilon(0.05));
    CHECK(m.find_parameter("blocks.0.dense.bias")->value == Tensor({256}, 0.0));
    CHECK(m.find_parameter("final_norm.gamma")->value == Tensor({64}, 1.0));
}

TEST_CASE("parameter counts") {
    Model single;
    single.add_parameter("w", Tensor({3, 5}));
    single.add_parameter("b", Tensor({3}));
    CHECK(parameter_count(single, false) == 5 * 3 + 3);

    Model m = build_model(ModelConfig{});
    const std::size_t oracle_count = oracle::closed_form_full_count({4, 64, 256, 10, 64, 8});
    CHECK(oracle_count == 201802);
    CHECK(parameter_count(m, false) == oracle_count);
    CHECK(analytic_parameter_count(ModelConfig{}) == oracle_count);

    for (auto& p : m.parameters()) p.requires_grad = false;
    CHECK(parameter_count(m, true) == 0);
    CHECK(parameter_count(m, false) == oracle_count);
}

TEST_CASE("role dimensions") {
    const ModelConfig c;
    CHECK(role_dims(c, Role::query) == LayerDims{64, 64});
    CHECK(role_dims(c, Role::dense) == LayerDims{64, 256});
    CHECK(role_dims(c, Role::output) == LayerDims{256, 64});
    const Model m = build_model(c);
    for (const auto& [addr, d] : m.target_dims(TargetModuleSet{})) CHECK(d == role_dims(c, addr.role));
}

TEST_CASE("forward yields finite logits of shape batch x classes") {
    const Model m = build_model(ModelConfig{});
    std::mt19937_64 rng(1);
    Tape tape;
    const Var logits = m.forward(tape, oracle::random_tensor({5, 64}, rng));
    CHECK(logits.shape() == Shape{5, 10});
    CHECK(logits.value().all_finite());

    Tape bad;
    CHECK_THROWS_AS(m.forward(bad, Tensor({5, 63})), ShapeError);
}

TEST_CASE("full model gradients match finite differences on a small config") {
    Model m = build_model(small_cfg());
    std::mt19937_64 rng(4);
    // Larger weights than the 0.02 init so every path carries signal.
    for (auto& p : m.parameters())
        if (p.value.rank() == 2) p.value = oracle::random_tensor(p.value.shape(), rng, 0.4);
    const Tensor x = oracle::random_tensor({3, 8}, rng);
    const std::vector<std::size_t> y{0, 2, 1};
    auto build = [&](Tape& t) { return ops::cross_entropy(m.forward(t, x), y); };
    CHECK(oracle::grad_check_all(m.parameters(), build) <= 1e-4);
}
