#include <random>

#include "doctest.h"
#include "prelora/convergence.hpp"
#include "prelora/telemetry.hpp"
#include "support.hpp"

using namespace prelora;

namespace {

EpochSnapshot snap(int epoch, double loss, double q0, double q1 = 1.0) {
    return {epoch, {{{0, Role::query}, q0}, {{1, Role::query}, q1}}, loss};
}

WindowStats window_with(double norm, double loss) {
    WindowStats w;
    w.module_norms[Role::query] = norm;
    w.layer_norms[{0, Role::query}] = norm;
    w.loss = loss;
    return w;
}

}  // namespace

TEST_CASE("a window of three epochs averages loss and norms") {
    TelemetryLedger ledger(3);
    CHECK_FALSE(ledger.record_epoch(snap(0, 3.0, 10.0)));
    CHECK_FALSE(ledger.record_epoch(snap(1, 2.0, 12.0)));
    const auto w = ledger.record_epoch(snap(2, 1.0, 14.0));
    REQUIRE(w);
    CHECK(w->index == 1);
    CHECK(w->first_epoch == 0);
    CHECK(w->last_epoch == 2);
    CHECK(w->loss == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(w->layer_norms.at({0, Role::query}) == doctest::Approx(12.0).epsilon(1e-15));
    // Module norm is the mean over layers: (12 + 1) / 2.
    CHECK(w->module_norms.at(Role::query) == doctest::Approx(6.5).epsilon(1e-15));
    CHECK(ledger.open_epochs().empty());
}

TEST_CASE("ledger input validation") {
    TelemetryLedger ledger(2);
    ledger.record_epoch(snap(0, 1.0, 1.0));
    CHECK_THROWS_AS(ledger.record_epoch(snap(2, 1.0, 1.0)), Error);
    CHECK_THROWS_AS(ledger.record_epoch(snap(1, std::nan(""), 1.0)), Error);
    CHECK_THROWS_AS(ledger.record_epoch(snap(1, 1.0, -1.0)), Error);
    CHECK_THROWS_AS(TelemetryLedger(0), Error);
}

TEST_CASE("window deltas are signed percentages") {
    const WindowDeltas up = window_deltas(window_with(100.0, 2.0), window_with(100.4, 1.9));
    CHECK(up.weight_pct.at(Role::query) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(up.loss_pct == doctest::Approx(-5.0).epsilon(1e-12));
    CHECK_THROWS_AS(window_deltas(window_with(0.0, 1.0), window_with(1.0, 1.0)), Error);
    CHECK_THROWS_AS(window_deltas(window_with(1.0, 0.0), window_with(1.0, 1.0)), Error);
}

TEST_CASE("layer deltas are absolute percentages of the last pair") {
    TelemetryLedger ledger(1);
    CHECK_THROWS_AS(layer_deltas_last_pair(ledger), Error);
    ledger.record_epoch(snap(0, 1.0, 50.0, 100.0));
    CHECK_THROWS_AS(layer_deltas_last_pair(ledger), Error);
    ledger.record_epoch(snap(1, 1.0, 51.0, 100.2));
    const auto d = layer_deltas_last_pair(ledger);
    CHECK(d.at({0, Role::query}) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(d.at({1, Role::query}) == doctest::Approx(0.2).epsilon(1e-12));

    ledger.record_epoch(snap(2, 1.0, 49.0, 100.2));
    CHECK(layer_deltas_last_pair(ledger).at({0, Role::query}) == doctest::Approx(100.0 * 2.0 / 51.0).epsilon(1e-12));
}

TEST_CASE("ledger windows are consistent with direct aggregation") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.5, 2.0);
    std::vector<EpochSnapshot> trace;
    for (int e = 0; e < 17; ++e) trace.push_back(snap(e, u(rng), u(rng), u(rng)));
    TelemetryLedger ledger(4);
    for (const auto& s : trace) ledger.record_epoch(s);
    REQUIRE(ledger.windows().size() == 4);
    CHECK(ledger.open_epochs().size() == 1);
    for (std::size_t t = 0; t < 4; ++t) {
        const auto direct = aggregate_window(static_cast<int>(t) + 1, std::span(trace).subspan(4 * t, 4));
        CHECK(direct == ledger.windows()[t]);
    }

    // Replaying the same trace reproduces the ledger exactly.
    TelemetryLedger again(4);
    for (const auto& s : trace) again.record_epoch(s);
    CHECK(again == ledger);

    // And restoring from parts gives an equal ledger.
    const TelemetryLedger restored = TelemetryLedger::from_parts(
        4, {ledger.windows().begin(), ledger.windows().end()},
        {ledger.open_epochs().begin(), ledger.open_epochs().end()}, ledger.last_epoch());
    CHECK(restored == ledger);
    CHECK_THROWS_AS(TelemetryLedger::from_parts(4, {ledger.windows().begin(), ledger.windows().end()}, {}, 16), Error);
}

TEST_CASE("window_deltas by index") {
    TelemetryLedger ledger(1);
    ledger.record_epoch(snap(0, 2.0, 100.0));
    ledger.record_epoch(snap(1, 1.0, 110.0));
    CHECK_THROWS_AS(window_deltas(ledger, 1), Error);
    CHECK_THROWS_AS(window_deltas(ledger, 3), Error);
    CHECK(window_deltas(ledger, 2).loss_pct == doctest::Approx(-50.0));
}
