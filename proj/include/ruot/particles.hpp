#pragma once

// Weighted particle simulation: positions follow dX = u dt + sigma dW,
// weights follow dw = g w dt, and the action and HJB integrands are
// accumulated along the paths.

#include "ruot/growth.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>

namespace ruot {

enum class Integrator { EulerMaruyama, SRK2 };
enum class LossNorm { L1, L2 };

std::string to_string(Integrator integrator);
Integrator parse_integrator(const std::string& text);
std::string to_string(LossNorm norm);
LossNorm parse_loss_norm(const std::string& text);

struct WeightedEnsemble {
    ad::Matrix positions;     // N x d
    Eigen::VectorXd weights;  // N, all > 0
    double time = 0.0;

    ad::Index size() const { return positions.rows(); }
    ad::Index dim() const { return positions.cols(); }
};

struct PathAccumulators {
    double action = 0.0;
    double hjb = 0.0;
};

// Unit weights at time t0. Throws UsageError on an empty point set.
WeightedEnsemble init_ensemble(const ad::Matrix& points, double t0 = 0.0);

// Mean weight.
double mass(const WeightedEnsemble& ens);

// Counter-based generator: every draw is a pure function of
// (seed, stream, step, particle, coordinate), so results never depend on
// evaluation order.
class NoiseSource {
public:
    explicit NoiseSource(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

    double normal(std::uint64_t step, std::uint64_t particle, std::uint64_t coord) const;
    double uniform(std::uint64_t step, std::uint64_t particle, std::uint64_t coord) const;
    // N x d standard normals for one step.
    ad::Matrix gaussian(std::uint64_t step, ad::Index n, ad::Index d) const;
    // N x d Rademacher signs for probe `probe` of one step.
    ad::Matrix rademacher(std::uint64_t step, int probe, ad::Index n, ad::Index d) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

private:
    std::uint64_t key(std::uint64_t tag, std::uint64_t step, std::uint64_t particle, std::uint64_t coord) const;

    std::uint64_t seed_;
    std::uint64_t stream_;
};

struct Dynamics {
    GrowthPenalty penalty;
    double sigma = 0.0;
    Integrator integrator = Integrator::EulerMaruyama;
    // Accumulate the HJB integrand (needs time derivative and, for sigma > 0, the Laplacian).
    bool track_hjb = true;
    LaplacianSpec laplacian;
    LossNorm hjb_norm = LossNorm::L2;
};

// Random inputs of one step, fixed before the step is built so that the
// step is a deterministic function of (x, w, theta).
struct StepNoise {
    ad::Matrix xi;                   // N x d standard normals
    std::vector<ad::Matrix> probes;  // Hutchinson probes (empty unless used)
};

StepNoise draw_step_noise(const NoiseSource& noise, std::uint64_t step, ad::Index n, ad::Index d,
                          const Dynamics& dyn);

// One integrator step recorded on `tape`. action and hjb are the 1 x 1
// quadrature contributions of this step.
struct StepGraph {
    ad::Var x_next;
    ad::Var w_next;
    ad::Var action;
    ad::Var hjb;
};

StepGraph step_graph(ad::Tape& tape, const ScalarField& field, const ad::Var& x, const ad::Var& w, double t,
                     double dt, const Dynamics& dyn, const StepNoise& noise);

// Advances the ensemble by dt in place and adds to the accumulators.
// Throws SimulationError if a particle leaves the finite range.
void step(WeightedEnsemble& ens, const ScalarField& field, const Dynamics& dyn, double dt, const StepNoise& noise,
          PathAccumulators& acc);

// Step sizes covering [t_start, t_end]: full steps of dt, with a shortened
// final step landing exactly on t_end.
std::vector<double> segment_steps(double t_start, double t_end, double dt);

using StepObserver = std::function<void(std::uint64_t step, const WeightedEnsemble&)>;

// Runs steps from ens.time to t_end. `step_index` is the global step
// counter used to key the noise; it is advanced by the number of steps.
void simulate_segment(WeightedEnsemble& ens, const ScalarField& field, const Dynamics& dyn, double t_end, double dt,
                      const NoiseSource& noise, std::uint64_t& step_index, PathAccumulators& acc,
                      const StepObserver& observer = {});

// Trajectory dump: step,t,particle,w,x1..xd
void write_trajectory_header(std::ostream& os, ad::Index dim);
void write_trajectory_rows(std::ostream& os, std::uint64_t step, const WeightedEnsemble& ens);

}  // namespace ruot
