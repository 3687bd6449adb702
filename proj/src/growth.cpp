#include "ruot/growth.hpp"

#include "ruot/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ruot {

namespace {

constexpr double kSubExponent = 2.0 / 15.0;
constexpr double kInverseExponent = 15.0 / 13.0;

// Unregularized positive branch: g = (2 alpha / (15 lambda))^(15/13), lambda > 0.
double sublinear_branch(double alpha, double lambda) {
    return std::pow(2.0 * alpha / (15.0 * lambda), kInverseExponent);
}

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

}  // namespace

void GrowthPenalty::validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw UsageError("growth penalty: alpha must be positive");
    if (!(delta > 0.0) || !std::isfinite(delta)) throw UsageError("growth penalty: delta must be positive");
}

std::string to_string(PenaltyKind kind) {
    switch (kind) {
        case PenaltyKind::WFR: return "wfr";
        case PenaltyKind::SubLinear: return "sublinear";
        case PenaltyKind::Disabled: return "disabled";
    }
    return "unknown";
}

PenaltyKind parse_penalty_kind(const std::string& text) {
    if (text == "wfr") return PenaltyKind::WFR;
    if (text == "sublinear") return PenaltyKind::SubLinear;
    if (text == "disabled") return PenaltyKind::Disabled;
    throw UsageError("unknown penalty kind '" + text + "' (expected wfr, sublinear or disabled)");
}

double psi(const GrowthPenalty& p, double g) {
    switch (p.kind) {
        case PenaltyKind::WFR: return 0.5 * g * g;
        case PenaltyKind::SubLinear: return std::pow(std::abs(g), kSubExponent);
        case PenaltyKind::Disabled: return 0.0;
    }
    return 0.0;
}

double psi_prime(const GrowthPenalty& p, double g) {
    switch (p.kind) {
        case PenaltyKind::WFR: return g;
        case PenaltyKind::SubLinear:
            if (g == 0.0) return 0.0;
            return kSubExponent * sign(g) * std::pow(std::abs(g), kSubExponent - 1.0);
        case PenaltyKind::Disabled: return 0.0;
    }
    return 0.0;
}

double psi_second(const GrowthPenalty& p, double g) {
    switch (p.kind) {
        case PenaltyKind::WFR: return 1.0;
        case PenaltyKind::SubLinear:
            if (g == 0.0) return 0.0;
            return kSubExponent * (kSubExponent - 1.0) * std::pow(std::abs(g), kSubExponent - 2.0);
        case PenaltyKind::Disabled: return 0.0;
    }
    return 0.0;
}

double growth_from_lambda(const GrowthPenalty& p, double lambda) {
    switch (p.kind) {
        case PenaltyKind::WFR: return lambda / p.alpha;
        case PenaltyKind::SubLinear: {
            const double a = std::abs(lambda);
            if (a >= p.delta) return sign(lambda) * sublinear_branch(p.alpha, a);
            return lambda / p.delta * sublinear_branch(p.alpha, p.delta);
        }
        case PenaltyKind::Disabled: return 0.0;
    }
    return 0.0;
}

double growth_slope(const GrowthPenalty& p, double lambda) {
    switch (p.kind) {
        case PenaltyKind::WFR: return 1.0 / p.alpha;
        case PenaltyKind::SubLinear: {
            const double a = std::abs(lambda);
            if (a >= p.delta) return -kInverseExponent * sublinear_branch(p.alpha, a) / a;
            return sublinear_branch(p.alpha, p.delta) / p.delta;
        }
        case PenaltyKind::Disabled: return 0.0;
    }
    return 0.0;
}

double growth_hamiltonian(const GrowthPenalty& p, double lambda) {
    if (p.kind == PenaltyKind::WFR) return 0.5 * lambda * lambda / p.alpha;
    const double g = growth_from_lambda(p, lambda);
    return lambda * g - p.alpha * psi(p, g);
}

ad::Var growth_from_lambda(const GrowthPenalty& p, const ad::Var& lambda) {
    switch (p.kind) {
        case PenaltyKind::WFR: return lambda * (1.0 / p.alpha);
        case PenaltyKind::SubLinear:
            return ad::map(
                lambda, [p](double l) { return growth_from_lambda(p, l); },
                [p](double l) { return growth_slope(p, l); });
        case PenaltyKind::Disabled: return {};
    }
    return {};
}

ad::Var penalty_cost(const GrowthPenalty& p, const ad::Var& lambda) {
    switch (p.kind) {
        case PenaltyKind::WFR: return ad::square(lambda) * (0.5 / p.alpha);
        case PenaltyKind::SubLinear:
            return ad::map(
                lambda, [p](double l) { return p.alpha * psi(p, growth_from_lambda(p, l)); },
                [p](double l) { return p.alpha * psi_prime(p, growth_from_lambda(p, l)) * growth_slope(p, l); });
        case PenaltyKind::Disabled: return {};
    }
    return {};
}

ad::Var growth_hamiltonian(const GrowthPenalty& p, const ad::Var& lambda) {
    switch (p.kind) {
        case PenaltyKind::WFR: return ad::square(lambda) * (0.5 / p.alpha);
        case PenaltyKind::SubLinear:
            return ad::map(
                lambda, [p](double l) { return growth_hamiltonian(p, l); },
                [p](double l) {
                    const double g = growth_from_lambda(p, l);
                    return g + growth_slope(p, l) * (l - p.alpha * psi_prime(p, g));
                });
        case PenaltyKind::Disabled: return {};
    }
    return {};
}

std::vector<double> velocity_from_lambda(const ScalarField& field, std::span<const double> x, double t) {
    return grad_x(field, x, t);
}

ad::Var hjb_residual(const FieldJet& jet, const GrowthPenalty& p, double sigma) {
    if (jet.time_derivative.is_zero() && jet.grad.empty())
        throw UsageError("hjb residual: jet lacks gradient and time derivative");
    ad::Var kinetic;
    for (const ad::Var& gi : jet.grad) kinetic = kinetic + ad::square(gi);
    ad::Var r = jet.time_derivative + 0.5 * kinetic;
    if (sigma != 0.0) {
        if (jet.laplacian.is_zero()) throw UsageError("hjb residual: sigma > 0 needs the Laplacian");
        r = r + (0.5 * sigma * sigma) * jet.laplacian;
    }
    return r + growth_hamiltonian(p, jet.value);
}

double hjb_residual(const ScalarField& field, const GrowthPenalty& p, double sigma, std::span<const double> x,
                    double t, const LaplacianSpec& lap, std::mt19937_64& rng) {
    if (static_cast<int>(x.size()) != field.input_dim()) throw UsageError("hjb residual: dimension mismatch");
    const int d = field.input_dim();
    ad::Tape tape;
    JetRequest req;
    ad::Index rows = 1;
    if (sigma != 0.0) {
        req.laplacian = lap.mode;
        if (lap.mode == LaplacianMode::Hutchinson) {
            if (lap.probes < 1) throw UsageError("hjb residual: Hutchinson needs at least one probe");
            // One row per probe; the residual is affine in the Laplacian, so the row mean
            // equals the residual at the mean estimate.
            rows = lap.probes;
            req.probes.push_back(rademacher(rows, d, rng));
        }
    }
    ad::Matrix xs(rows, d);
    for (ad::Index r = 0; r < rows; ++r)
        for (int i = 0; i < d; ++i) xs(r, i) = x[static_cast<std::size_t>(i)];
    const FieldJet j = field.jet(tape, tape.constant(xs), t, req);
    return hjb_residual(j, p, sigma).value().mean();
}

SignReport sign_check(const ScalarField& field, const GrowthPenalty& p, std::span<const SignSample> samples) {
    if (p.kind == PenaltyKind::Disabled) throw UsageError("sign check: penalty must be wfr or sublinear");
    SignReport rep;
    rep.min = std::numeric_limits<double>::infinity();
    rep.max = -std::numeric_limits<double>::infinity();
    for (const SignSample& s : samples) {
        if (static_cast<int>(s.x.size()) != field.input_dim()) throw UsageError("sign check: dimension mismatch");
        ad::Tape tape;
        JetRequest req;
        req.time_derivative = false;
        ad::Matrix xs(1, field.input_dim());
        for (int i = 0; i < field.input_dim(); ++i) xs(0, i) = s.x[static_cast<std::size_t>(i)];
        const FieldJet j = field.jet(tape, tape.constant(xs), s.t, req);
        const double lambda = j.value.scalar();
        if (p.kind == PenaltyKind::SubLinear && std::abs(lambda) < p.delta) {
            ++rep.excluded;
            continue;
        }
        double grad2 = 0.0;
        for (const ad::Var& gi : j.grad) grad2 += gi.scalar() * gi.scalar();
        const double value = grad2 == 0.0 ? 0.0 : grad2 / (p.alpha * psi_second(p, growth_from_lambda(p, lambda)));
        rep.min = std::min(rep.min, value);
        rep.max = std::max(rep.max, value);
        ++rep.included;
    }
    if (rep.included == 0) rep.min = rep.max = 0.0;
    return rep;
}

}  // namespace ruot
