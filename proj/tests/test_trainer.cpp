#include "ruot/error.hpp"
#include "ruot/trainer.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

using namespace ruot;
namespace fs = std::filesystem;

namespace {

SnapshotDataset small_shift(int n = 40) {
    std::vector<GaussianSnapshot> spec{{0.0, {{{0.0, 0.0}, 0.2, 1.0}}, n}, {1.0, {{{1.0, 0.0}, 0.2, 1.0}}, n}};
    return generate_gaussian_mixture(spec, 11, "small");
}

SnapshotDataset small_growth() {
    std::vector<GaussianSnapshot> spec{{0.0, {{{0.0, 0.0}, 0.3, 1.0}}, 30},
                                       {0.5, {{{0.3, 0.2}, 0.3, 1.0}}, 36},
                                       {1.0, {{{0.6, 0.0}, 0.3, 1.0}}, 45}};
    return generate_gaussian_mixture(spec, 12, "growth");
}

// Output weights scaled up so the field is far from its near-zero initialization.
ScalarFieldModel lively_model(int d, std::uint64_t seed) {
    ScalarFieldModel m(d, 8, 1, seed);
    auto p = m.mutable_params();
    for (std::size_t i = m.output_weight_index(); i < m.output_bias_index(); ++i) p[i] *= 30.0;
    p[m.output_bias_index()] = 0.3;
    return m;
}

void check_gradient(const ScalarFieldModel& model, const SnapshotDataset& data, const TrainConfig& cfg) {
    const EpochEvaluation ev = evaluate_epoch(model, data, cfg, 1, true);
    REQUIRE(ev.grad.size() == model.num_params());
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> pick(0, model.num_params() - 1);
    std::set<std::size_t> coords{model.output_bias_index()};
    while (coords.size() < 10) coords.insert(pick(rng));
    const double h = 1e-5;
    for (std::size_t c : coords) {
        ScalarFieldModel plus = model, minus = model;
        plus.mutable_params()[c] += h;
        minus.mutable_params()[c] -= h;
        const double fd = (evaluate_epoch(plus, data, cfg, 1, false).report.total -
                           evaluate_epoch(minus, data, cfg, 1, false).report.total) /
                          (2 * h);
        INFO("coordinate " << c << " analytic " << ev.grad[c] << " fd " << fd);
        CHECK(std::abs(ev.grad[c] - fd) <= 1e-3 * std::max(std::abs(fd), 1e-2));
    }
}

}  // namespace

TEST_CASE("AdamW step") {
    SUBCASE("zero gradient without decay leaves parameters unchanged") {
        std::vector<double> p{1.0, -2.0, 3.0};
        const std::vector<double> g(3, 0.0);
        AdamState s;
        for (int i = 0; i < 5; ++i) optimizer_step(p, g, s, AdamOptions{1e-2, 0.0});
        CHECK(p == std::vector<double>{1.0, -2.0, 3.0});
    }
    SUBCASE("constant gradient moves by lr per step") {
        std::vector<double> p{0.0, 0.0};
        const std::vector<double> g{0.5, -3.0};
        AdamState s;
        const double lr = 1e-3;
        for (int i = 0; i < 100; ++i) optimizer_step(p, g, s, AdamOptions{lr, 0.0});
        // mhat = g and vhat = g^2 exactly under bias correction, so each step is lr g / (|g| + eps).
        CHECK(p[0] == doctest::Approx(-100 * lr * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(100 * lr * 3.0 / (3.0 + 1e-8)).epsilon(1e-12));
    }
    SUBCASE("decoupled decay shrinks geometrically") {
        std::vector<double> p{2.0};
        AdamState s;
        for (int i = 0; i < 10; ++i) optimizer_step(p, std::vector<double>{0.0}, s, AdamOptions{0.1, 0.5});
        CHECK(p[0] == doctest::Approx(2.0 * std::pow(1.0 - 0.05, 10)).epsilon(1e-14));
    }
    SUBCASE("size mismatch") {
        std::vector<double> p{1.0};
        AdamState s;
        CHECK_THROWS_AS(optimizer_step(p, std::vector<double>{1.0, 2.0}, s, AdamOptions{}), UsageError);
    }
}

TEST_CASE("particle sampling") {
    const auto sub = sample_particles(50, 20, 1, 3);
    CHECK(std::set<Eigen::Index>(sub.begin(), sub.end()).size() == 20);
    const auto all = sample_particles(50, 50, 1, 3);
    CHECK(std::set<Eigen::Index>(all.begin(), all.end()).size() == 50);
    const auto more = sample_particles(50, 200, 1, 3);
    CHECK(more.size() == 200);
    CHECK(*std::max_element(more.begin(), more.end()) < 50);
    CHECK(sample_particles(50, 20, 1, 3) == sub);
    CHECK(sample_particles(50, 20, 1, 4) != sub);
}

TEST_CASE("profiles and config files") {
    const TrainConfig wfr = profile_config(Profile::WFR);
    CHECK(wfr.penalty.kind == PenaltyKind::WFR);
    CHECK(wfr.penalty.alpha == 2.0);
    CHECK(wfr.weights.hjb == 6.25e-2);
    CHECK(wfr.weights.action == 6.25e-2);
    CHECK(wfr.learning_rate == 1e-4);
    const TrainConfig mod = profile_config(Profile::Modified);
    CHECK(mod.penalty.kind == PenaltyKind::SubLinear);
    CHECK(mod.penalty.alpha == 7.0);
    CHECK(mod.weights.hjb == 6.25e-3);
    CHECK(mod.weights.action == 6.25e-2);
    CHECK(mod.learning_rate == 2e-5);
    CHECK(wfr.sigma == 0.1);
    CHECK(wfr.ot_blur == 0.1);
    CHECK(wfr.convergence_threshold == 0.30);

    const fs::path dir = fs::temp_directory_path() / "ruot_test_trainer_cfg";
    fs::create_directories(dir);
    {
        std::ofstream(dir / "a.cfg") << "# explicit keys win over the profile\nlearning_rate = 0.5\nprofile = modified\n"
                                        "epochs = 7\nsigma = 0\n";
    }
    const TrainConfig cfg = load_train_config(dir / "a.cfg");
    CHECK(cfg.learning_rate == 0.5);
    CHECK(cfg.penalty.alpha == 7.0);
    CHECK(cfg.epochs == 7);
    CHECK(cfg.sigma == 0.0);

    {
        std::ofstream(dir / "b.cfg") << "epochs = 3\nbogus = 1\n";
    }
    try {
        load_train_config(dir / "b.cfg");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }

    // Echo round trip.
    TrainConfig odd = mod;
    odd.seed = 42;
    odd.time_scale = 0.125;
    odd.hutchinson_probes = 3;
    odd.integrator = Integrator::SRK2;
    odd.output_gain = 0.5;
    {
        std::ofstream os(dir / "c.cfg");
        write_train_config(os, odd);
    }
    const TrainConfig back = load_train_config(dir / "c.cfg");
    CHECK(back.seed == 42);
    CHECK(back.time_scale == 0.125);
    CHECK(back.hutchinson_probes == 3);
    CHECK(back.integrator == Integrator::SRK2);
    CHECK(back.penalty.kind == PenaltyKind::SubLinear);
    CHECK(back.learning_rate == 2e-5);
    CHECK(back.output_gain == 0.5);

    // run.* keys are rejected unless the caller collects them.
    {
        std::ofstream(dir / "d.cfg") << "run.seed = 9\nepochs = 4\n";
    }
    CHECK_THROWS_AS(load_train_config(dir / "d.cfg"), ParseError);
    std::map<std::string, std::string> run_keys;
    CHECK(load_train_config(dir / "d.cfg", &run_keys).epochs == 4);
    CHECK(run_keys == std::map<std::string, std::string>{{"seed", "9"}});
    fs::remove_all(dir);
}

TEST_CASE("convergence probe") {
    std::vector<LossReport> h(2);
    h[0].ot = 0.5;
    h[1].ot = 0.2;
    const std::vector<double> secs{1.5, 3.0};
    const auto r = convergence_probe(h, 0.3, secs);
    REQUIRE(r.epoch.has_value());
    CHECK(*r.epoch == 2);
    CHECK(r.reported_epochs == 2);
    CHECK(r.wall_seconds == 3.0);

    const auto never = convergence_probe(h, 0.1, secs);
    CHECK_FALSE(never.epoch.has_value());
    CHECK(never.reported_epochs == 500);
    CHECK(never.wall_seconds == 3.0);
    CHECK_FALSE(convergence_probe(h, 0.0).epoch.has_value());
    CHECK_THROWS_AS(convergence_probe(std::vector<LossReport>{}, 0.3), UsageError);
}

TEST_CASE("epoch gradient matches finite differences") {
    TrainConfig cfg = profile_config(Profile::WFR);
    cfg.n_particles = 24;
    cfg.dt = 0.1;
    cfg.ot_blur = 0.3;

    SUBCASE("deterministic paths, WFR, two snapshots") {
        cfg.sigma = 0.0;
        check_gradient(lively_model(2, 1), small_shift(24), cfg);
    }
    SUBCASE("stochastic paths with fixed noise, three snapshots, growth") {
        cfg.sigma = 0.1;
        check_gradient(lively_model(2, 2), small_growth(), cfg);
    }
    SUBCASE("sub-linear penalty, Heun integrator, Hutchinson Laplacian, L1 norm") {
        cfg = profile_config(Profile::Modified);
        cfg.n_particles = 24;
        cfg.ot_blur = 0.3;
        cfg.sigma = 0.1;
        cfg.integrator = Integrator::SRK2;
        cfg.hutchinson_probes = 2;
        cfg.loss_norm = LossNorm::L1;
        cfg.weights.hjb = 0.5;
        check_gradient(lively_model(2, 3), small_growth(), cfg);
    }
}

TEST_CASE("training is deterministic and reduces the loss") {
    TrainConfig cfg = profile_config(Profile::WFR);
    cfg.n_particles = 40;
    cfg.width = 16;
    cfg.epochs = 30;
    cfg.learning_rate = 1e-2;
    cfg.sigma = 0.0;
    const auto data = small_shift();
    const TrainResult a = train(data, cfg);
    const TrainResult b = train(data, cfg);
    REQUIRE(a.history.size() == 30);
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].total == b.history[i].total);
        CHECK(a.history[i].ot == b.history[i].ot);
    }
    CHECK(std::equal(a.model.params().begin(), a.model.params().end(), b.model.params().begin()));
    CHECK(a.history.back().total < 0.5 * a.history.front().total);
}

TEST_CASE("zero epochs and checkpoints") {
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.width = 8;
    const auto data = small_shift(10);
    const TrainResult r = train(data, cfg);
    CHECK(r.history.empty());
    const ScalarFieldModel fresh(2, 8, cfg.depth, cfg.seed);
    CHECK(std::equal(r.model.params().begin(), r.model.params().end(), fresh.params().begin()));

    cfg.epochs = 4;
    cfg.n_particles = 10;
    cfg.checkpoint_every = 2;
    cfg.checkpoint_dir = fs::temp_directory_path() / "ruot_test_trainer_ckpt";
    fs::remove_all(cfg.checkpoint_dir);
    const TrainResult t = train(data, cfg);
    CHECK(fs::exists(cfg.checkpoint_dir / "checkpoint_epoch_2.bin"));
    const auto last = ScalarFieldModel::load(cfg.checkpoint_dir / "checkpoint_epoch_4.bin");
    CHECK(std::equal(last.params().begin(), last.params().end(), t.model.params().begin()));
    fs::remove_all(cfg.checkpoint_dir);
}

TEST_CASE("non-finite values abort training") {
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.width = 8;
    cfg.n_particles = 10;
    ScalarFieldModel m(2, 8, cfg.depth, 0);
    m.mutable_params()[m.output_bias_index()] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(train(m, small_shift(10), cfg), TrainingAbort);
}
