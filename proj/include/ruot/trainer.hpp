#pragma once

// Training loop: per epoch, sample particles from the first snapshot,
// simulate across all snapshot times, assemble the losses, backpropagate
// through the simulated path and take one AdamW step.

#include "ruot/datasets.hpp"
#include "ruot/losses.hpp"
#include "ruot/particles.hpp"
#include "ruot/scalarfield.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ruot {

enum class Profile { WFR, Modified };

std::string to_string(Profile p);
Profile parse_profile(const std::string& text);

struct TrainConfig {
    GrowthPenalty penalty = GrowthPenalty::wfr(2.0);
    double sigma = 0.1;
    int n_particles = 1000;
    double dt = 0.1;
    int epochs = 200;
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    LossWeights weights;
    std::uint64_t seed = 0;
    int hutchinson_probes = 0;  // 0 = exact Laplacian
    LossNorm loss_norm = LossNorm::L2;
    Integrator integrator = Integrator::EulerMaruyama;
    int width = 64;
    int depth = 2;
    double output_gain = ScalarFieldModel::kDefaultOutputGain;
    double ot_blur = 0.1;
    double convergence_threshold = 0.30;
    // Data times are multiplied by this before training (the model runs on the scaled clock).
    double time_scale = 1.0;
    int checkpoint_every = 0;  // 0 = off
    std::filesystem::path checkpoint_dir;

    // Throws UsageError on out-of-range values.
    void validate() const;
    Dynamics dynamics() const;
    SinkhornOptions sinkhorn() const;
};

// Parameter sets for the quadratic (WFR) and sub-linear growth penalties.
TrainConfig profile_config(Profile p);

// Applies one `key = value` setting; throws UsageError on unknown keys or bad values.
void apply_config_key(TrainConfig& cfg, const std::string& key, const std::string& value);

// Key-value config file. A `profile` key is applied first; every other key
// overrides it regardless of order. Throws ParseError with the line number.
// When run_keys is given, `run.<name>` entries are collected there instead of
// rejected, so a run manifest doubles as a config file.
TrainConfig load_train_config(const std::filesystem::path& path,
                              std::map<std::string, std::string>* run_keys = nullptr);

// Every key in a form load_train_config reads back.
void write_train_config(std::ostream& os, const TrainConfig& cfg);

// Copy of the dataset with times multiplied by `scale`.
SnapshotDataset scale_times(const SnapshotDataset& data, double scale);

struct AdamOptions {
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m, v;
    long step = 0;
};

// Decoupled weight decay: p <- p (1 - lr wd) - lr mhat / (sqrt(vhat) + eps).
void optimizer_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                    const AdamOptions& opts);

// Rows of snapshot 1 used as the particles of `epoch`: a subset without
// replacement when n <= N1, otherwise draws with replacement.
std::vector<Eigen::Index> sample_particles(Eigen::Index n_data, int n, std::uint64_t seed, int epoch);

struct EpochEvaluation {
    LossReport report;
    std::vector<double> grad;  // d total / d theta (empty unless requested)
    bool sinkhorn_converged = true;
};

// Loss (and optionally its gradient) of `model` for the particles and noise of `epoch`.
// `data` must already be on the model's clock. Throws TrainingAbort on non-finite values.
EpochEvaluation evaluate_epoch(const ScalarFieldModel& model, const SnapshotDataset& data, const TrainConfig& cfg,
                               int epoch, bool with_gradient);

struct TrainCallbacks {
    std::function<void(int epoch, const LossReport&, const ScalarFieldModel&)> on_epoch;
};

struct TrainResult {
    ScalarFieldModel model;
    std::vector<LossReport> history;
    std::vector<double> elapsed_seconds;  // cumulative wall time after each epoch
};

// Trains a fresh model seeded from cfg.seed.
TrainResult train(const SnapshotDataset& data, const TrainConfig& cfg, const TrainCallbacks& callbacks = {});
// Continues from `init`.
TrainResult train(ScalarFieldModel init, const SnapshotDataset& data, const TrainConfig& cfg,
                  const TrainCallbacks& callbacks = {});

inline constexpr int kConvergenceCap = 500;

struct ConvergenceReport {
    std::optional<int> epoch;  // 1-based first epoch with summed OT below the threshold
    int reported_epochs = 0;   // epoch, or the cap when the threshold is never reached
    double wall_seconds = 0.0;
};

ConvergenceReport convergence_probe(std::span<const LossReport> history, double threshold,
                                    std::span<const double> elapsed_seconds = {}, int cap = kConvergenceCap);

}  // namespace ruot
