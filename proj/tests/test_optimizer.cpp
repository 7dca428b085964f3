#include <cmath>

#include "doctest.h"
#include "prelora/optimizer.hpp"

using namespace prelora;

TEST_CASE("first Adam step moves each entry by lr against the gradient sign") {
    std::vector<Parameter> p{{"w", Tensor::matrix({{1.0, -2.0}})}};
    Adam opt(AdamConfig{0.1});
    opt.step(p, {{"w", Tensor::matrix({{0.5, -3.0}})}});
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    CHECK(p[0].value[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
    CHECK(p[0].value[1] == doctest::Approx(-2.0 + 0.1 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("second Adam step follows the bias-corrected moments") {
    std::vector<Parameter> p{{"w", Tensor({1}, 0.0)}};
    Adam opt(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    opt.step(p, {{"w", Tensor({1}, 1.0)}});
    opt.step(p, {{"w", Tensor({1}, 3.0)}});
    const double m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0;
    const double v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0;
    const double m_hat = m / (1.0 - 0.81);
    const double v_hat = v / (1.0 - 0.999 * 0.999);
    const double expected = -0.01 / (1.0 + 1e-8) - 0.01 * m_hat / (std::sqrt(v_hat) + 1e-8);
    CHECK(p[0].value[0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(opt.slots().at("w").steps == 2);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    std::vector<Parameter> p{{"w", Tensor::matrix({{1.0, 2.0}})}};
    const Tensor before = p[0].value;
    Adam opt(AdamConfig{0.0});
    for (int i = 0; i < 3; ++i) opt.step(p, {{"w", Tensor::matrix({{1.0, -1.0}})}});
    CHECK(p[0].value == before);
}

TEST_CASE("frozen parameters are never touched and pruning drops their state") {
    std::vector<Parameter> p{{"a", Tensor({2}, 1.0)}, {"b", Tensor({2}, 1.0)}};
    Adam opt;
    const GradientMap g{{"a", Tensor({2}, 1.0)}, {"b", Tensor({2}, 1.0)}};
    opt.step(p, g);
    CHECK(opt.state_bytes() == 2 * 2 * 2 * sizeof(double));

    p[1].requires_grad = false;
    const Tensor frozen = p[1].value;
    opt.step(p, g);
    CHECK(p[1].value == frozen);
    CHECK(opt.slots().at("b").steps == 1);
    opt.prune_frozen(p);
    CHECK_FALSE(opt.slots().contains("b"));
    CHECK(opt.state_bytes() == 2 * 2 * sizeof(double));
}

TEST_CASE("gradient shape mismatch is an error") {
    std::vector<Parameter> p{{"a", Tensor({2}, 1.0)}};
    Adam opt;
    CHECK_THROWS_AS(opt.step(p, {{"a", Tensor({3}, 1.0)}}), ShapeError);
}
