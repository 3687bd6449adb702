// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are fixed
// constants below; the exit status is the number of failures.
//
//   acceptance            run every criterion
//   acceptance 3 7        run only the listed criteria

#include "ruot/datasets.hpp"
#include "ruot/evaluation.hpp"
#include "ruot/growth.hpp"
#include "ruot/particles.hpp"
#include "ruot/scalarfield.hpp"
#include "ruot/trainer.hpp"
#include "ruot/transport.hpp"

#include "test_fields.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace ruot;
using ruot::testing::AffineField;
using ruot::testing::central_difference;
using ruot::testing::rel_err;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::vector<double> random_point(int d, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    std::vector<double> x(static_cast<std::size_t>(d));
    for (double& v : x) v = g(rng);
    return x;
}

ad::Matrix normal_points(int n, int d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    ad::Matrix m(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = g(rng);
    return m;
}

// ---- 1: balanced transport action --------------------------------------

constexpr double kActionOracle = 0.5;
constexpr double kActionRelTol = 0.15;

Outcome balanced_action() {
    const SnapshotDataset data = generate_gaussian_mixture(gaussian_preset("shift2d-unit"), 0, "shift2d-unit");
    TrainConfig cfg = profile_config(Profile::WFR);
    cfg.penalty = GrowthPenalty::disabled();
    cfg.sigma = 0.0;
    cfg.n_particles = 500;
    const TrainResult r = train(data, cfg);
    EvalOptions eo = EvalOptions::from(cfg);
    eo.seeds = {0};
    const EvaluationTable t = evaluate_model(r.model, data, eo);
    const double rel = std::abs(t.action.mean - kActionOracle) / kActionOracle;
    return {rel <= kActionRelTol, "action " + fmt("%.4f", t.action.mean) + " vs 0.5, relative error " +
                                      fmt("%.3f", rel) + " (tol 0.15), W1 " + fmt("%.4f", t.rows[0].w1.mean) +
                                      ", " + fmt("%.0f", r.elapsed_seconds.back()) + " s"};
}

// ---- 2: sign of u . grad g ---------------------------------------------

constexpr int kSignSamples = 10000;
constexpr double kSignTol = 1e-12;

Outcome sign_property() {
    // Unit output gain: at the default gain nearly every |lambda| falls inside the sub-linear band.
    const ScalarFieldModel model(3, 64, 2, 17, 1.0);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ut(0.0, 4.0);
    std::vector<SignSample> samples;
    for (int i = 0; i < kSignSamples; ++i) samples.push_back({random_point(3, rng, 1.5), ut(rng)});
    const SignReport wfr = sign_check(model, GrowthPenalty::wfr(2.0), samples);
    const SignReport sub = sign_check(model, GrowthPenalty::sublinear(7.0, 0.1), samples);
    const bool pass = wfr.included == kSignSamples && wfr.min >= -kSignTol && sub.included > 0 &&
                      sub.included + sub.excluded == kSignSamples && sub.max <= kSignTol;
    return {pass, "WFR min " + fmt("%.3e", wfr.min) + " over " + std::to_string(wfr.included) + ", sub-linear max " +
                      fmt("%.3e", sub.max) + " over " + std::to_string(sub.included) + " (" +
                      std::to_string(sub.excluded) + " in band)"};
}

// ---- 3: mass under constant growth --------------------------------------

constexpr double kMassTol = 1e-12;

Outcome mass_law() {
    const AffineField field({0.0, 0.0}, 0.0, 0.2);  // lambda = 0.2, so g = 0.2 at alpha = 1
    Dynamics dyn;
    dyn.penalty = GrowthPenalty::wfr(1.0);
    dyn.sigma = 0.0;
    dyn.track_hjb = false;
    WeightedEnsemble ens = init_ensemble(normal_points(64, 2, 1), 0.0);
    const NoiseSource noise(0);
    std::uint64_t step = 0;
    PathAccumulators acc;
    simulate_segment(ens, field, dyn, 1.0, 0.1, noise, step, acc);
    const double err = std::abs(mass(ens) - std::exp(0.2));
    return {err <= kMassTol, "mass " + fmt("%.15f", mass(ens)) + ", |error| " + fmt("%.2e", err)};
}

// ---- 4: HJB machinery --------------------------------------------------

constexpr double kHjbZeroTol = 1e-10;
constexpr int kHutchinsonProbes = 10000;

Outcome hjb_machinery() {
    std::mt19937_64 rng(11);
    // (a) lambda = a.x - 0.5 |a|^2 t solves the HJB at the origin with sigma 0, alpha 1.
    const std::vector<double> a{0.7, -1.3, 0.4};
    const double a2 = 0.7 * 0.7 + 1.3 * 1.3 + 0.4 * 0.4;
    const AffineField plane(a, -0.5 * a2);
    const std::vector<double> origin(3, 0.0);
    const double r = hjb_residual(plane, GrowthPenalty::wfr(1.0), 0.0, origin, 0.0, LaplacianSpec{}, rng);
    const bool ok_a = std::abs(r) <= kHjbZeroTol;

    // (b) Rademacher probes on 0.5 |x|^2 in d = 5: every sample is exactly 5.
    const QuadraticPotential quad(5, 1.0);
    const double hq = laplacian_hutchinson(quad, std::vector<double>{0.3, -0.1, 2.0, 0.0, 1.0}, 0.5, 64, rng);
    const bool ok_b = hq == 5.0;

    // (c) Seeded network: Hutchinson mean within 3 standard errors of the exact trace.
    const ScalarFieldModel net(3, 64, 2, 23);
    const std::vector<double> x{0.4, -0.8, 1.1};
    const auto s = hutchinson_samples(net, x, 0.7, kHutchinsonProbes, rng);
    const MeanStd ms = mean_std(s);
    const double se = ms.std / std::sqrt(static_cast<double>(s.size()));
    const double exact = laplacian_exact(net, x, 0.7);
    const bool ok_c = std::abs(ms.mean - exact) <= 3.0 * se;

    return {ok_a && ok_b && ok_c, "(a) |r| " + fmt("%.2e", std::abs(r)) + ", (b) " + fmt("%.17g", hq) +
                                      ", (c) |mean - exact| " + fmt("%.3e", std::abs(ms.mean - exact)) + " vs 3 SE " +
                                      fmt("%.3e", 3.0 * se)};
}

// ---- 5: derivative correctness -----------------------------------------

constexpr int kDerivativeCases = 100;
constexpr double kFdStep = 1e-4;
constexpr double kFirstOrderTol = 1e-4;
constexpr double kLaplacianStep = 1e-3;
constexpr double kLaplacianTol = 1e-3;
constexpr double kParamStep = 1e-6;
constexpr double kParamTol = 1e-3;
constexpr int kParamCoordsPerCase = 5;

Outcome derivatives() {
    std::mt19937_64 rng(2025);
    std::uniform_real_distribution<double> ut(0.0, 2.0);
    int fails = 0;
    double worst_g = 0, worst_t = 0, worst_l = 0, worst_p = 0;
    for (int c = 0; c < kDerivativeCases; ++c) {
        const int d = 1 + c % 3;
        const ScalarFieldModel m(d, 16, 2, 500 + static_cast<std::uint64_t>(c));
        const auto x = random_point(d, rng);
        const double t = ut(rng);

        const auto g = grad_x(m, x, t);
        for (int i = 0; i < d; ++i) {
            auto f = [&](double xi) {
                auto y = x;
                y[static_cast<std::size_t>(i)] = xi;
                return evaluate(m, y, t);
            };
            const double e = rel_err(g[static_cast<std::size_t>(i)], central_difference(f, x[static_cast<std::size_t>(i)], kFdStep));
            worst_g = std::max(worst_g, e);
            fails += e > kFirstOrderTol;
        }
        const double et =
            rel_err(time_derivative(m, x, t), central_difference([&](double s) { return evaluate(m, x, s); }, t, kFdStep));
        worst_t = std::max(worst_t, et);
        fails += et > kFirstOrderTol;

        const double f0 = evaluate(m, x, t);
        double lap_fd = 0.0;
        for (int i = 0; i < d; ++i) {
            auto yp = x, ym = x;
            yp[static_cast<std::size_t>(i)] += kLaplacianStep;
            ym[static_cast<std::size_t>(i)] -= kLaplacianStep;
            lap_fd += (evaluate(m, yp, t) - 2 * f0 + evaluate(m, ym, t)) / (kLaplacianStep * kLaplacianStep);
        }
        const double el = rel_err(laplacian_exact(m, x, t), lap_fd);
        worst_l = std::max(worst_l, el);
        fails += el > kLaplacianTol;

        // Parameter gradient of |grad_x lambda|^2 + lambda_t + lap lambda at the point.
        ad::Matrix xm(1, d);
        for (int i = 0; i < d; ++i) xm(0, i) = x[static_cast<std::size_t>(i)];
        auto loss_of = [&](const ScalarFieldModel& model, ad::Tape& tape, const FieldParams& bound) {
            JetRequest req;
            req.laplacian = LaplacianMode::Exact;
            const FieldJet j = model.jet(tape, bound, tape.constant(xm), t, req);
            ad::Var acc;
            for (const auto& gi : j.grad) acc = acc + ad::square(gi);
            return ad::sum(acc + j.time_derivative + j.laplacian);
        };
        ad::Tape tape;
        const FieldParams bound = m.bind(tape, true);
        const auto pg = m.param_grad(tape, bound, loss_of(m, tape, bound));
        std::uniform_int_distribution<std::size_t> pick(0, m.num_params() - 1);
        for (int k = 0; k < kParamCoordsPerCase; ++k) {
            const std::size_t i = pick(rng);
            auto eval = [&](double delta) {
                ScalarFieldModel shifted = m;
                shifted.mutable_params()[i] += delta;
                ad::Tape t2;
                return loss_of(shifted, t2, shifted.bind(t2, false)).scalar();
            };
            const double fd = (eval(kParamStep) - eval(-kParamStep)) / (2 * kParamStep);
            const double e = rel_err(pg[i], fd);
            worst_p = std::max(worst_p, e);
            fails += e > kParamTol;
        }
    }
    return {fails == 0, std::to_string(kDerivativeCases) + " cases, worst relative error grad " + fmt("%.1e", worst_g) +
                            ", dt " + fmt("%.1e", worst_t) + ", laplacian " + fmt("%.1e", worst_l) + ", params " +
                            fmt("%.1e", worst_p) + ", " + std::to_string(fails) + " over tolerance"};
}

// ---- 6: exact OT solver --------------------------------------------------

constexpr int kEmdCloudsPerSize = 25;
constexpr double kEmdTol = 1e-12;
constexpr double kSelfDivergenceTol = 1e-6;

Outcome exact_ot() {
    std::mt19937_64 rng(6);
    double worst = 0.0;
    int compared = 0;
    for (int m = 1; m <= 6; ++m)
        for (int rep = 0; rep < kEmdCloudsPerSize; ++rep)
            for (GroundCost cost : {GroundCost::L2, GroundCost::L2sq}) {
                const int d = 1 + rep % 3;
                Eigen::MatrixXd pa(m, d), pb(m, d);
                std::normal_distribution<double> g(0.0, 1.0);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < d; ++j) {
                        pa(i, j) = g(rng);
                        pb(i, j) = g(rng);
                    }
                std::vector<int> perm(static_cast<std::size_t>(m));
                std::iota(perm.begin(), perm.end(), 0);
                double best = std::numeric_limits<double>::infinity();
                do {
                    double s = 0.0;
                    for (int i = 0; i < m; ++i) {
                        const double sq = (pa.row(i) - pb.row(perm[static_cast<std::size_t>(i)])).squaredNorm();
                        s += cost == GroundCost::L2 ? std::sqrt(sq) : sq;
                    }
                    best = std::min(best, s / m);
                } while (std::next_permutation(perm.begin(), perm.end()));
                const double got = emd(WeightedCloud::uniform(pa), WeightedCloud::uniform(pb), cost);
                worst = std::max(worst, std::abs(got - best) / std::max(1.0, best));
                ++compared;
            }
    const WeightedCloud a = WeightedCloud::uniform(normal_points(300, 3, 9));
    const double self = sinkhorn(a, a, SinkhornOptions{}).value;
    return {worst <= kEmdTol && std::abs(self) <= kSelfDivergenceTol,
            std::to_string(compared) + " brute-force comparisons (M 1..6), worst relative gap " + fmt("%.1e", worst) +
                ", S(a,a) " + fmt("%.2e", self)};
}

// ---- 7: Monte Carlo rate -----------------------------------------------

constexpr double kSlopeLo = -0.65;
constexpr double kSlopeHi = -0.35;

Outcome mc_rate() {
    McStudyOptions opts;
    opts.dynamics.penalty = GrowthPenalty::disabled();
    opts.dynamics.sigma = 0.5;
    opts.dynamics.track_hjb = false;
    opts.n_list = {100, 1000, 10000};
    opts.seeds = 20;
    const QuadraticPotential field(2, -0.5);  // u = -0.5 x
    const McStudyResult r = mc_convergence_study(
        field, [](int n, std::uint64_t seed) { return normal_points(n, 2, seed); }, opts);
    const bool pass = !r.degenerate && r.slope >= kSlopeLo && r.slope <= kSlopeHi;
    return {pass, "slope " + fmt("%.3f", r.slope) + " +- " + fmt("%.3f", r.half_width) + " (95%), window [-0.65, -0.35]"};
}

// ---- 8: three-gene desk run -----------------------------------------------

constexpr int kThreeGeneSeeds = 5;
constexpr int kThreeGeneEpochs = 200;
constexpr double kW1DropFactor = 3.0;
constexpr int kProbeEpochLimit = 150;

TrainConfig three_gene_config(std::uint64_t seed) {
    TrainConfig cfg = profile_config(Profile::WFR);
    cfg.width = 64;
    cfg.depth = 4;
    cfg.output_gain = 1.0;
    cfg.epochs = kThreeGeneEpochs;
    cfg.seed = seed;
    cfg.n_particles = 200;
    cfg.time_scale = 0.125;
    cfg.convergence_threshold = 0.30;
    return cfg;
}

Outcome three_gene() {
    int ok = 0;
    std::ostringstream detail;
    for (int s = 0; s < kThreeGeneSeeds; ++s) {
        ThreeGeneConfig gen;
        gen.seed = static_cast<std::uint64_t>(s);
        const SnapshotDataset data = generate_three_gene(gen);
        const TrainConfig cfg = three_gene_config(static_cast<std::uint64_t>(s));
        const EvalOptions eo = EvalOptions::from(cfg);
        const ScalarFieldModel init(static_cast<int>(data.dim()), cfg.width, cfg.depth, cfg.seed, cfg.output_gain);
        const double w1_before = evaluate_model(init, data, eo).total_w1();
        const TrainResult r = train(init, data, cfg);
        const double w1_after = evaluate_model(r.model, data, eo).total_w1();
        const ConvergenceReport probe = convergence_probe(r.history, cfg.convergence_threshold, r.elapsed_seconds);
        const bool drop = w1_after * kW1DropFactor <= w1_before;
        const bool fired = probe.epoch && *probe.epoch <= kProbeEpochLimit;
        ok += drop && fired;
        detail << (s ? "; " : "") << "seed " << s << ": W1 " << fmt("%.3f", w1_before) << " -> "
               << fmt("%.3f", w1_after) << " (x" << fmt("%.2f", w1_before / w1_after) << "), probe "
               << (probe.epoch ? std::to_string(*probe.epoch) : std::string("never")) << ", min OT "
               << fmt("%.3f", std::min_element(r.history.begin(), r.history.end(),
                                               [](const LossReport& a, const LossReport& b) { return a.ot < b.ot; })
                                  ->ot)
               << ", " << fmt("%.0f", r.elapsed_seconds.back()) << " s";
        std::cerr << "  three-gene " << detail.str().substr(detail.str().rfind("seed ")) << '\n';
    }
    return {ok == kThreeGeneSeeds, std::to_string(ok) + "/5 seeds pass; " + detail.str()};
}

// ---- 9: loss expectations ----------------------------------------------

constexpr int kExpectationSeeds = 50;
constexpr int kSmallN = 1000;
constexpr int kReferenceN = 100000;
constexpr int kChunk = 5000;
constexpr double kExpectationSe = 2.0;

// Euler-Maruyama path integrals over [0, 1] for n particles simulated in
// independent chunks, recombined into the full-ensemble estimates.
PathAccumulators chunked_losses(const ScalarField& field, const Dynamics& dyn, int n, std::uint64_t seed) {
    const int d = field.input_dim();
    std::vector<WeightedEnsemble> chunks;
    std::vector<NoiseSource> noises;
    for (int start = 0, c = 0; start < n; start += kChunk, ++c) {
        const int m = std::min(kChunk, n - start);
        chunks.push_back(init_ensemble(normal_points(m, d, seed * 1000003ULL + static_cast<std::uint64_t>(c)), 0.0));
        noises.emplace_back(seed, static_cast<std::uint64_t>(c));
    }
    PathAccumulators total;
    const auto steps = segment_steps(0.0, 1.0, 0.1);
    for (std::size_t s = 0; s < steps.size(); ++s) {
        double action_sum = 0.0, hjb_num = 0.0, w_total = 0.0;
        for (std::size_t c = 0; c < chunks.size(); ++c) {
            WeightedEnsemble& e = chunks[c];
            const double w_sum = e.weights.sum();
            PathAccumulators part;
            step(e, field, dyn, steps[s], draw_step_noise(noises[c], s, e.size(), e.dim(), dyn), part);
            action_sum += part.action * static_cast<double>(e.size());
            hjb_num += part.hjb * w_sum;
            w_total += w_sum;
        }
        total.action += action_sum / n;
        total.hjb += hjb_num / w_total;
    }
    return total;
}

Outcome loss_expectations() {
    const ScalarFieldModel field(2, 32, 2, 99);
    Dynamics dyn;
    dyn.penalty = GrowthPenalty::wfr(2.0);
    dyn.sigma = 0.1;
    dyn.track_hjb = true;
    dyn.laplacian = {LaplacianMode::Exact, 1};
    std::vector<double> actions, hjbs;
    for (int s = 0; s < kExpectationSeeds; ++s) {
        const PathAccumulators a = chunked_losses(field, dyn, kSmallN, static_cast<std::uint64_t>(s + 1));
        actions.push_back(a.action);
        hjbs.push_back(a.hjb);
    }
    const PathAccumulators ref = chunked_losses(field, dyn, kReferenceN, 777);
    // The reference has its own Monte Carlo error, std * sqrt(N_small / N_ref) for one run.
    auto check = [&](const std::vector<double>& v, double r, std::string& out) {
        const MeanStd ms = mean_std(v);
        const double se_mean = ms.std / std::sqrt(static_cast<double>(v.size()));
        const double se_ref = ms.std * std::sqrt(static_cast<double>(kSmallN) / kReferenceN);
        const double se = std::hypot(se_mean, se_ref);
        const double z = std::abs(ms.mean - r) / se;
        out = fmt("%.6g", ms.mean) + " vs " + fmt("%.6g", r) + " (" + fmt("%.2f", z) + " SE)";
        return z <= kExpectationSe;
    };
    std::string da, dh;
    const bool pa = check(actions, ref.action, da);
    const bool ph = check(hjbs, ref.hjb, dh);
    return {pa && ph, "action " + da + ", hjb " + dh};
}

// ---- 10: determinism -----------------------------------------------------

Outcome determinism() {
    const SnapshotDataset data = generate_gaussian_mixture(gaussian_preset("mixture2d-unbalanced"), 3);
    TrainConfig cfg = profile_config(Profile::WFR);
    cfg.n_particles = 200;
    cfg.epochs = 15;
    cfg.seed = 5;
    cfg.sigma = 0.1;
    const TrainResult a = train(data, cfg);
    const TrainResult b = train(data, cfg);
    bool same = a.history.size() == b.history.size();
    for (std::size_t i = 0; same && i < a.history.size(); ++i) {
        const LossReport &x = a.history[i], &y = b.history[i];
        same = x.total == y.total && x.ot == y.ot && x.mass == y.mass && x.hjb == y.hjb && x.action == y.action &&
               x.per_snapshot_ot == y.per_snapshot_ot;
    }
    same = same && std::equal(a.model.params().begin(), a.model.params().end(), b.model.params().begin());
    return {same, std::to_string(a.history.size()) + " epochs, histories and parameters " +
                      (same ? "bitwise identical" : "differ")};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {1, "balanced transport action", balanced_action},
        {2, "sign of u . grad g", sign_property},
        {3, "mass under constant growth", mass_law},
        {4, "HJB residual and Laplacian estimators", hjb_machinery},
        {5, "derivatives vs finite differences", derivatives},
        {6, "exact OT solver", exact_ot},
        {7, "Monte Carlo rate of the action", mc_rate},
        {8, "three-gene desk run", three_gene},
        {9, "loss expectations vs large-N reference", loss_expectations},
        {10, "bitwise determinism", determinism},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << ": " << o.detail << " ["
                  << fmt("%.1f", secs) << " s]" << std::endl;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures;
}
