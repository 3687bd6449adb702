#pragma once

// Training losses: reconstruction (mass + OT), HJB and action, and their
// weighted total.

#include "ruot/datasets.hpp"
#include "ruot/particles.hpp"
#include "ruot/transport.hpp"

#include <iosfwd>
#include <span>
#include <vector>

namespace ruot {

struct LossWeights {
    double mass = 1.0;
    double hjb = 6.25e-2;
    double action = 6.25e-2;
};

struct LossReport {
    double mass = 0.0;
    double ot = 0.0;
    double hjb = 0.0;
    double action = 0.0;
    double total = 0.0;
    std::vector<double> per_snapshot_ot;  // snapshots 2..K
};

// Sum of squared mass errors over snapshots 2..K. Throws UsageError on a length mismatch.
double mass_loss(std::span<const double> predicted, std::span<const double> truth);

enum class OtMode {
    Sinkhorn,  // debiased divergence, the differentiable training path
    Exact,     // W2 from the exact solver, for evaluation
};

struct OtLoss {
    double total = 0.0;
    std::vector<double> per_snapshot;
    bool converged = true;
};

// `ensembles[k]` is the particle state at data.times[k]; k = 0 is skipped.
// Throws UsageError on a count mismatch or an empty snapshot.
OtLoss ot_loss(std::span<const WeightedEnsemble> ensembles, const SnapshotDataset& data, OtMode mode,
               const SinkhornOptions& opts = {});

// The accumulators already hold the weighted quadratures.
inline double hjb_loss(const PathAccumulators& acc) { return acc.hjb; }
inline double action_loss(const PathAccumulators& acc) { return acc.action; }

LossReport total_loss(double mass, const OtLoss& ot, double hjb, double action, const LossWeights& weights);

// epoch,mass,ot,hjb,action,total
void write_history_header(std::ostream& os);
void write_history_row(std::ostream& os, int epoch, const LossReport& r);

}  // namespace ruot
