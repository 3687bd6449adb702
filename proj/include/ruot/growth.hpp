#pragma once

// Growth penalties psi(g) and the optimality maps that turn the scalar
// potential lambda into velocity u = grad lambda and growth g = (psi')^-1(lambda / alpha).

#include "ruot/scalarfield.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

namespace ruot {

enum class PenaltyKind { WFR, SubLinear, Disabled };

struct GrowthPenalty {
    PenaltyKind kind = PenaltyKind::WFR;
    double alpha = 1.0;
    // Half-width of the linear band that regularizes the sub-linear inverse at lambda = 0.
    double delta = 0.1;

    static GrowthPenalty wfr(double alpha) { return {PenaltyKind::WFR, alpha, 0.1}; }
    static GrowthPenalty sublinear(double alpha, double delta = 0.1) { return {PenaltyKind::SubLinear, alpha, delta}; }
    static GrowthPenalty disabled() { return {PenaltyKind::Disabled, 1.0, 0.1}; }

    // Throws UsageError unless alpha > 0 and delta > 0.
    void validate() const;
};

std::string to_string(PenaltyKind kind);
// Accepts "wfr", "sublinear", "disabled" (case-sensitive). Throws UsageError otherwise.
PenaltyKind parse_penalty_kind(const std::string& text);

// psi(g): 0.5 g^2, |g|^(2/15), or 0.
double psi(const GrowthPenalty& p, double g);
// d psi / dg. The sub-linear derivative is singular at 0 and reported as 0 there.
double psi_prime(const GrowthPenalty& p, double g);
// d^2 psi / dg^2 (same convention at 0).
double psi_second(const GrowthPenalty& p, double g);

// g(lambda) solving alpha psi'(g) = lambda; the sub-linear branch uses the
// odd regularized inverse, linear inside |lambda| < delta.
double growth_from_lambda(const GrowthPenalty& p, double lambda);
// d g / d lambda for the map above (one-sided value at the band edges).
double growth_slope(const GrowthPenalty& p, double lambda);
// lambda g - alpha psi(g) evaluated at g = growth_from_lambda(lambda).
double growth_hamiltonian(const GrowthPenalty& p, double lambda);

// Tape versions, elementwise over an N x 1 node. Return a structural zero for Disabled.
ad::Var growth_from_lambda(const GrowthPenalty& p, const ad::Var& lambda);
// alpha psi(g(lambda)).
ad::Var penalty_cost(const GrowthPenalty& p, const ad::Var& lambda);
ad::Var growth_hamiltonian(const GrowthPenalty& p, const ad::Var& lambda);

// u = grad_x lambda.
std::vector<double> velocity_from_lambda(const ScalarField& field, std::span<const double> x, double t);

struct LaplacianSpec {
    LaplacianMode mode = LaplacianMode::Exact;
    int probes = 1;  // Hutchinson only
};

// HJB residual d_t lambda + 0.5 |grad lambda|^2 + 0.5 sigma^2 lap lambda + lambda g - alpha psi(g)
// on a batch; needs grad and time derivative in the jet, plus the Laplacian when sigma > 0.
ad::Var hjb_residual(const FieldJet& jet, const GrowthPenalty& p, double sigma);

double hjb_residual(const ScalarField& field, const GrowthPenalty& p, double sigma, std::span<const double> x,
                    double t, const LaplacianSpec& lap, std::mt19937_64& rng);

struct SignSample {
    std::vector<double> x;
    double t = 0.0;
};

struct SignReport {
    double min = 0.0;  // of u . grad g over included samples
    double max = 0.0;
    int included = 0;
    int excluded = 0;  // sub-linear samples inside the interpolation band
};

// Evaluates u . grad g = |grad lambda|^2 / (alpha psi''(g)) at each sample.
SignReport sign_check(const ScalarField& field, const GrowthPenalty& p, std::span<const SignSample> samples);

}  // namespace ruot
