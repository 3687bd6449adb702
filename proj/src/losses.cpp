#include "ruot/losses.hpp"

#include "ruot/error.hpp"

#include <cmath>
#include <ostream>

namespace ruot {

double mass_loss(std::span<const double> predicted, std::span<const double> truth) {
    if (predicted.size() != truth.size())
        throw UsageError("mass_loss: " + std::to_string(predicted.size()) + " predictions for " +
                         std::to_string(truth.size()) + " snapshots");
    double s = 0.0;
    for (std::size_t k = 1; k < truth.size(); ++k) {
        const double e = predicted[k] - truth[k];
        s += e * e;
    }
    return s;
}

OtLoss ot_loss(std::span<const WeightedEnsemble> ensembles, const SnapshotDataset& data, OtMode mode,
               const SinkhornOptions& opts) {
    if (ensembles.size() != data.size())
        throw UsageError("ot_loss: " + std::to_string(ensembles.size()) + " ensembles for " +
                         std::to_string(data.size()) + " snapshots");
    OtLoss out;
    for (std::size_t k = 1; k < data.size(); ++k) {
        const auto& ens = ensembles[k];
        if (ens.size() == 0 || data.clouds[k].rows() == 0) throw UsageError("ot_loss: empty snapshot");
        const WeightedCloud a = WeightedCloud::normalized(ens.positions, ens.weights);
        const WeightedCloud b = WeightedCloud::uniform(data.clouds[k]);
        double v = 0.0;
        if (mode == OtMode::Exact) {
            v = wasserstein2(a, b);
        } else {
            const SinkhornResult r = sinkhorn(a, b, opts);
            out.converged = out.converged && r.converged;
            v = r.value;
        }
        out.per_snapshot.push_back(v);
        out.total += v;
    }
    return out;
}

LossReport total_loss(double mass, const OtLoss& ot, double hjb, double action, const LossWeights& weights) {
    if (weights.mass < 0 || weights.hjb < 0 || weights.action < 0)
        throw UsageError("loss weights must be nonnegative");
    LossReport r;
    r.mass = mass;
    r.ot = ot.total;
    r.hjb = hjb;
    r.action = action;
    r.per_snapshot_ot = ot.per_snapshot;
    r.total = weights.mass * mass + ot.total + weights.hjb * hjb + weights.action * action;
    return r;
}

void write_history_header(std::ostream& os) { os << "epoch,mass,ot,hjb,action,total\n"; }

void write_history_row(std::ostream& os, int epoch, const LossReport& r) {
    const auto old = os.precision(17);
    os << epoch << ',' << r.mass << ',' << r.ot << ',' << r.hjb << ',' << r.action << ',' << r.total << '\n';
    os.precision(old);
}

}  // namespace ruot
