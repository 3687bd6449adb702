#pragma once

// Post-training evaluation with the exact OT solver, hold-one-out
// retraining, and the Monte Carlo convergence study of the action estimate.

#include "ruot/datasets.hpp"
#include "ruot/particles.hpp"
#include "ruot/trainer.hpp"

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ruot {

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation (n - 1)
};

MeanStd mean_std(const std::vector<double>& values);

struct EvalOptions {
    GrowthPenalty penalty = GrowthPenalty::wfr(2.0);
    double sigma = 0.1;
    double dt = 0.1;
    Integrator integrator = Integrator::EulerMaruyama;
    // 0 = every point of snapshot 1 (fixed evaluation particles); otherwise a
    // per-seed sample of this size.
    int n_particles = 0;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    double time_scale = 1.0;

    static EvalOptions from(const TrainConfig& cfg);
    Dynamics dynamics() const;
};

struct SnapshotScore {
    std::size_t snapshot = 0;  // 1-based index into the dataset
    double time = 0.0;         // data clock
    MeanStd w1, w2;
    std::vector<double> w1_runs, w2_runs;
};

struct EvaluationTable {
    std::vector<SnapshotScore> rows;  // snapshots 2..K
    MeanStd action;
    MeanStd mass_error;  // |predicted - true| at the last snapshot
    std::vector<double> action_runs;

    // Sum of W1 means over the scored snapshots.
    double total_w1() const;
};

// Simulates from snapshot 1 for each seed and scores every later snapshot
// with exact W1/W2. Times are mapped by opts.time_scale onto the field's clock.
EvaluationTable evaluate_model(const ScalarField& field, const SnapshotDataset& data, const EvalOptions& opts);

// dataset,snapshot,metric,mean,std with one action row (snapshot "all").
void write_results_header(std::ostream& os);
void write_results_rows(std::ostream& os, const std::string& dataset, const EvaluationTable& table);

struct HoldOutResult {
    ScalarFieldModel model;
    std::vector<LossReport> history;
    std::size_t k_out = 0;  // 1-based
    bool extrapolation = false;
    SnapshotScore score;
};

// Trains without snapshot k_out (1-based, 2 <= k_out <= K, K >= 3), then
// simulates the full horizon and scores only the held-out time.
HoldOutResult hold_one_out(const SnapshotDataset& data, std::size_t k_out, const TrainConfig& cfg,
                           const std::vector<std::uint64_t>& seeds = {0, 1, 2, 3, 4});

// lambda = 0.5 c |x|^2, so u = c x: a linear-drift double for the Monte Carlo study.
class QuadraticPotential : public ScalarField {
public:
    QuadraticPotential(int dim, double c) : dim_(dim), c_(c) {}
    int input_dim() const override { return dim_; }
    FieldJet jet(ad::Tape& tape, const ad::Var& x, double t, const JetRequest& request) const override;

private:
    int dim_;
    double c_;
};

struct McStudyOptions {
    Dynamics dynamics;
    double t_end = 1.0;
    double dt = 0.1;
    std::vector<int> n_list{100, 1000, 10000};
    int seeds = 20;
    std::uint64_t base_seed = 0;
};

struct McStudyResult {
    std::vector<int> n;
    std::vector<double> mean, std;
    double slope = 0.0;
    double half_width = 0.0;  // 95% normal half-width of the slope
    bool degenerate = false;  // some std was zero, so no slope
};

// Initial particles for (n, seed).
using ParticleSampler = std::function<ad::Matrix(int n, std::uint64_t seed)>;

// For each N, the action estimate over `seeds` independent runs; then the
// weighted least-squares slope of log std against log N. Each log std gets
// weight 2 (seeds - 1), the inverse of its large-sample variance.
McStudyResult mc_convergence_study(const ScalarField& field, const ParticleSampler& sampler,
                                   const McStudyOptions& opts);

void write_mc_study(std::ostream& os, const McStudyResult& r);

}  // namespace ruot
