#pragma once

// Optimal transport between weighted point clouds: exact network-simplex EMD
// for evaluation and a debiased log-domain Sinkhorn divergence for training.

#include <Eigen/Dense>

namespace ruot {

struct WeightedCloud {
    Eigen::MatrixXd points;  // M x d
    Eigen::VectorXd masses;  // M, nonnegative, summing to 1

    Eigen::Index size() const { return points.rows(); }
    Eigen::Index dim() const { return points.cols(); }

    static WeightedCloud uniform(const Eigen::MatrixXd& points);
    // masses = weights / sum(weights).
    static WeightedCloud normalized(const Eigen::MatrixXd& points, const Eigen::VectorXd& weights);
    // Throws UsageError on empty clouds, negative masses or sum(masses) off 1 by more than 1e-9.
    void validate() const;
};

enum class GroundCost {
    L2,    // |x - y|, gives W1
    L2sq,  // |x - y|^2, gives W2^2
};

// Largest M * M' the exact solver accepts.
inline constexpr double kEmdMaxPairs = 1e6;

// Exact optimal transport cost. Throws UsageError above the size cap (use sinkhorn instead).
double emd(const WeightedCloud& a, const WeightedCloud& b, GroundCost cost);

struct EmdSolution {
    double cost = 0.0;
    Eigen::MatrixXd plan;     // M x M'
    Eigen::VectorXd u, v;     // dual potentials: u_i + v_j <= c_ij, equality on the support
    long pivots = 0;
};
EmdSolution emd_solve(const WeightedCloud& a, const WeightedCloud& b, GroundCost cost);

double wasserstein1(const WeightedCloud& a, const WeightedCloud& b);
double wasserstein2(const WeightedCloud& a, const WeightedCloud& b);

// Ground cost 0.5 |x - y|^2 and temperature eps = blur^2, so for small blur
// the divergence approaches 0.5 W2^2.
struct SinkhornOptions {
    double blur = 0.1;
    int max_iters = 2000;
    double tol = 1e-9;       // on the sup-norm change of the dual potentials
    double scaling = 0.5;    // blur multiplier between annealing stages
};

// Self-transport potential of one cloud, reusable across calls against a fixed target.
struct SinkhornSelf {
    Eigen::VectorXd potential;
    double value = 0.0;  // OT_eps(b, b)
    bool converged = true;
};
SinkhornSelf sinkhorn_self(const WeightedCloud& b, const SinkhornOptions& opts);

struct SinkhornResult {
    double value = 0.0;
    bool converged = true;
    int iterations = 0;
    // Gradients with respect to the first cloud (only when requested).
    Eigen::MatrixXd grad_points;  // M x d
    Eigen::VectorXd grad_masses;  // M
};

// S_eps(a, b) = OT_eps(a, b) - OT_eps(a, a) / 2 - OT_eps(b, b) / 2.
SinkhornResult sinkhorn(const WeightedCloud& a, const WeightedCloud& b, const SinkhornOptions& opts,
                        bool with_gradient = false, const SinkhornSelf* b_self = nullptr);

// Minimal dynamical action over unit time between balanced clouds: 0.5 W2^2.
double bb_action_oracle(const WeightedCloud& a, const WeightedCloud& b);

}  // namespace ruot
