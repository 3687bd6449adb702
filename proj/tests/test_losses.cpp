#include "ruot/error.hpp"
#include "ruot/losses.hpp"

#include "test_fields.hpp"

#include <doctest.h>

#include <random>
#include <sstream>

using namespace ruot;
using ruot::testing::AffineField;
using Eigen::MatrixXd;

namespace {

MatrixXd normal_cloud(int n, int d, std::uint64_t seed, double shift = 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    MatrixXd m(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = g(rng) + (j == 0 ? shift : 0.0);
    return m;
}

PathAccumulators run(const ScalarField& field, const Dynamics& dyn, const MatrixXd& x0, double t_end, double dt) {
    WeightedEnsemble ens = init_ensemble(x0);
    PathAccumulators acc;
    std::uint64_t step = 0;
    simulate_segment(ens, field, dyn, t_end, dt, NoiseSource(1), step, acc);
    return acc;
}

}  // namespace

TEST_CASE("mass loss") {
    CHECK(mass_loss(std::vector{1.0, 1.5}, std::vector{1.0, 1.5}) == 0.0);
    CHECK(mass_loss(std::vector{1.0, 1.2}, std::vector{1.0, 1.5}) == doctest::Approx(0.09).epsilon(1e-14));
    CHECK(mass_loss(std::vector{1.0, 1.2, 1.4}, std::vector{1.0, 1.2, 1.5}) == doctest::Approx(0.01).epsilon(1e-13));
    // The first snapshot is fixed by construction and never scored.
    CHECK(mass_loss(std::vector{3.0, 1.0}, std::vector{1.0, 1.0}) == 0.0);
    CHECK_THROWS_AS(mass_loss(std::vector{1.0}, std::vector{1.0, 1.0}), UsageError);
}

TEST_CASE("OT loss") {
    SUBCASE("ensemble on the data scores zero") {
        const MatrixXd x0 = normal_cloud(30, 2, 1), x1 = normal_cloud(30, 2, 2, 1.0);
        const auto data = SnapshotDataset::make("t", {0.0, 1.0}, {x0, x1});
        std::vector<WeightedEnsemble> ens{init_ensemble(x0, 0.0), init_ensemble(x1, 1.0)};
        CHECK(std::abs(ot_loss(ens, data, OtMode::Exact).total) <= 1e-12);
        CHECK(std::abs(ot_loss(ens, data, OtMode::Sinkhorn).total) <= 1e-6);
    }
    SUBCASE("singletons at distance 5") {
        const MatrixXd p = (MatrixXd(1, 2) << 0, 0).finished(), q = (MatrixXd(1, 2) << 3, 4).finished();
        const auto data = SnapshotDataset::make("t", {0.0, 1.0, 2.0}, {p, q, q});
        std::vector<WeightedEnsemble> ens{init_ensemble(p), init_ensemble(p), init_ensemble(p)};
        const OtLoss r = ot_loss(ens, data, OtMode::Exact);
        REQUIRE(r.per_snapshot.size() == 2);
        CHECK(r.per_snapshot[0] == doctest::Approx(5.0).epsilon(1e-14));
        CHECK(r.total == doctest::Approx(10.0).epsilon(1e-14));
    }
    SUBCASE("shifted second snapshot matches the exact solver") {
        const MatrixXd x0 = normal_cloud(40, 2, 3), x1 = normal_cloud(40, 2, 4);
        MatrixXd shifted = x1;
        shifted.col(0).array() += 1.0;
        const auto data = SnapshotDataset::make("t", {0.0, 1.0}, {x0, shifted});
        std::vector<WeightedEnsemble> ens{init_ensemble(x0), init_ensemble(x1)};
        const double oracle = std::sqrt(emd(WeightedCloud::uniform(x1), WeightedCloud::uniform(shifted), GroundCost::L2sq));
        CHECK(ot_loss(ens, data, OtMode::Exact).total == doctest::Approx(oracle).epsilon(1e-12));
    }
    SUBCASE("weights are normalized and particle order is irrelevant") {
        const MatrixXd x0 = normal_cloud(20, 2, 5), x1 = normal_cloud(25, 2, 6, 0.5);
        const auto data = SnapshotDataset::make("t", {0.0, 1.0}, {x0, x1});
        WeightedEnsemble e = init_ensemble(normal_cloud(20, 2, 7));
        e.weights = Eigen::VectorXd::LinSpaced(20, 0.5, 2.0);
        WeightedEnsemble scaled = e;
        scaled.weights *= 3.0;
        WeightedEnsemble reversed = e;
        reversed.positions = e.positions.colwise().reverse();
        reversed.weights = e.weights.reverse();
        const std::vector<WeightedEnsemble> a{init_ensemble(x0), e}, b{init_ensemble(x0), scaled},
            c{init_ensemble(x0), reversed};
        const double base = ot_loss(a, data, OtMode::Exact).total;
        CHECK(ot_loss(b, data, OtMode::Exact).total == doctest::Approx(base).epsilon(1e-12));
        CHECK(ot_loss(c, data, OtMode::Exact).total == doctest::Approx(base).epsilon(1e-12));
    }
    SUBCASE("count mismatch") {
        const MatrixXd x0 = normal_cloud(5, 2, 8);
        const auto data = SnapshotDataset::make("t", {0.0, 1.0}, {x0, x0});
        std::vector<WeightedEnsemble> ens{init_ensemble(x0)};
        CHECK_THROWS_AS(ot_loss(ens, data, OtMode::Exact), UsageError);
    }
}

TEST_CASE("HJB and action losses from path accumulators") {
    const MatrixXd x0 = normal_cloud(50, 2, 9);
    Dynamics dyn;
    dyn.penalty = GrowthPenalty::wfr(1.0);

    SUBCASE("zero field") {
        const AffineField zero({0.0, 0.0}, 0.0);
        const auto acc = run(zero, dyn, x0, 1.0, 0.1);
        CHECK(hjb_loss(acc) == 0.0);
        CHECK(action_loss(acc) == 0.0);
    }
    SUBCASE("constant residual") {
        // lambda = c t with Disabled growth: u = 0 and the residual is c everywhere.
        dyn.penalty = GrowthPenalty::disabled();
        const AffineField f({0.0, 0.0}, 0.7);
        CHECK(hjb_loss(run(f, dyn, x0, 1.0, 0.1)) == doctest::Approx(0.49).epsilon(1e-12));
        dyn.hjb_norm = LossNorm::L1;
        CHECK(hjb_loss(run(f, dyn, x0, 1.0, 0.1)) == doctest::Approx(0.7).epsilon(1e-12));
    }
    SUBCASE("constant speed") {
        dyn.penalty = GrowthPenalty::disabled();
        const AffineField f({0.6, 0.8}, 0.0);
        CHECK(action_loss(run(f, dyn, x0, 1.0, 0.01)) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("WFR growth cost with growing weights") {
        // u = 0, lambda = c = alpha = 1: g = 1, cost alpha psi(g) w = e^t / 2,
        // integral (e - 1) / 2; the left-point rule is within O(dt).
        const AffineField f({0.0, 0.0}, 0.0, 1.0);
        const double want = 0.5 * (std::exp(1.0) - 1.0);
        const double coarse = action_loss(run(f, dyn, x0, 1.0, 0.01));
        const double fine = action_loss(run(f, dyn, x0, 1.0, 0.001));
        CHECK(std::abs(coarse - want) <= 0.01 * want);
        CHECK(std::abs(fine - want) < std::abs(coarse - want));
        dyn.integrator = Integrator::SRK2;
        CHECK(std::abs(action_loss(run(f, dyn, x0, 1.0, 0.01)) - want) <= 1e-4 * want);
    }
}

TEST_CASE("total loss composition") {
    OtLoss ot;
    ot.total = 2.0;
    ot.per_snapshot = {2.0};
    const LossWeights w{1.0, 0.0625, 0.0625};
    const LossReport r = total_loss(1.0, ot, 4.0, 8.0, w);
    CHECK(r.total == doctest::Approx(3.75).epsilon(1e-15));
    CHECK(r.per_snapshot_ot == std::vector<double>{2.0});
    CHECK(total_loss(0.0, OtLoss{}, 0.0, 0.0, w).total == 0.0);
    CHECK(total_loss(1.0, ot, 4.0, 8.0, LossWeights{1.0, 0.0, 0.0}).total == 3.0);
    CHECK_THROWS_AS(total_loss(1.0, ot, 4.0, 8.0, LossWeights{-1.0, 0.0, 0.0}), UsageError);
}

TEST_CASE("history rows") {
    std::ostringstream os;
    write_history_header(os);
    LossReport r;
    r.mass = 0.1;
    r.ot = 0.25;
    r.total = 0.35;
    write_history_row(os, 3, r);
    CHECK(os.str() == "epoch,mass,ot,hjb,action,total\n3,0.10000000000000001,0.25,0,0,0.34999999999999998\n");
}
