#include "ruot/particles.hpp"

#include "ruot/error.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

namespace ruot {

using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

constexpr std::uint64_t kTagGaussian = 0x6761757373ULL;
constexpr std::uint64_t kTagUniform = 0x756e69666f726dULL;
constexpr std::uint64_t kTagProbe = 0x70726f6265ULL;

std::uint64_t splitmix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Uniform on (0, 1].
double to_unit(std::uint64_t h) { return (static_cast<double>(h >> 11) + 1.0) * 0x1.0p-53; }

struct Stage {
    Var u;     // N x d
    Var g;     // N x 1, structural zero when growth is disabled
    Var cost;  // N x 1: 0.5 |u|^2 + alpha psi(g)
    Var hjb;   // N x 1: r^2 or |r|, zero Var when not tracked
};

Stage evaluate_stage(Tape& tape, const ScalarField& field, const Var& x, double t, const Dynamics& dyn,
                     const StepNoise& noise) {
    JetRequest req;
    req.time_derivative = dyn.track_hjb;
    if (dyn.track_hjb && dyn.sigma != 0.0) {
        req.laplacian = dyn.laplacian.mode;
        if (dyn.laplacian.mode == LaplacianMode::Hutchinson) req.probes = noise.probes;
    }
    const FieldJet jet = field.jet(tape, x, t, req);
    Stage s;
    s.u = ad::hcat(jet.grad);
    s.g = growth_from_lambda(dyn.penalty, jet.value);
    s.cost = 0.5 * ad::row_sum(ad::square(s.u)) + penalty_cost(dyn.penalty, jet.value);
    if (dyn.track_hjb) {
        const Var r = hjb_residual(jet, dyn.penalty, dyn.sigma);
        s.hjb = dyn.hjb_norm == LossNorm::L2 ? ad::square(r) : ad::abs(r);
    }
    return s;
}

Var weighted_hjb(const Stage& s, const Var& w, double dt) {
    if (s.hjb.is_zero()) return {};
    return ad::sum(s.hjb * w) * ad::pow(ad::sum(w), -1.0) * dt;
}

Var grow(const Var& w, const Var& rate, double dt) {
    if (rate.is_zero()) return w;
    return w * ad::exp(rate * dt);
}

void check_finite(const WeightedEnsemble& ens) {
    for (ad::Index i = 0; i < ens.size(); ++i) {
        const bool ok = ens.positions.row(i).allFinite() && std::isfinite(ens.weights(i)) && ens.weights(i) > 0.0;
        if (!ok) throw SimulationError("non-finite particle state", static_cast<long>(i), ens.time);
    }
}

}  // namespace

std::string to_string(Integrator integrator) {
    return integrator == Integrator::SRK2 ? "srk2" : "euler";
}

Integrator parse_integrator(const std::string& text) {
    if (text == "euler") return Integrator::EulerMaruyama;
    if (text == "srk2") return Integrator::SRK2;
    throw UsageError("unknown integrator '" + text + "' (expected euler or srk2)");
}

std::string to_string(LossNorm norm) { return norm == LossNorm::L1 ? "l1" : "l2"; }

LossNorm parse_loss_norm(const std::string& text) {
    if (text == "l1") return LossNorm::L1;
    if (text == "l2") return LossNorm::L2;
    throw UsageError("unknown loss norm '" + text + "' (expected l1 or l2)");
}

WeightedEnsemble init_ensemble(const Matrix& points, double t0) {
    if (points.rows() < 1 || points.cols() < 1) throw UsageError("init_ensemble: empty point set");
    WeightedEnsemble ens;
    ens.positions = points;
    ens.weights = Eigen::VectorXd::Ones(points.rows());
    ens.time = t0;
    return ens;
}

double mass(const WeightedEnsemble& ens) { return ens.weights.mean(); }

std::uint64_t NoiseSource::key(std::uint64_t tag, std::uint64_t step, std::uint64_t particle,
                               std::uint64_t coord) const {
    std::uint64_t h = splitmix(seed_ ^ tag);
    h = splitmix(h ^ stream_);
    h = splitmix(h ^ step);
    h = splitmix(h ^ particle);
    return splitmix(h ^ coord);
}

double NoiseSource::uniform(std::uint64_t step, std::uint64_t particle, std::uint64_t coord) const {
    return to_unit(key(kTagUniform, step, particle, coord));
}

double NoiseSource::normal(std::uint64_t step, std::uint64_t particle, std::uint64_t coord) const {
    // Box-Muller from two hashed uniforms.
    const std::uint64_t k = key(kTagGaussian, step, particle, coord);
    const double u1 = to_unit(k);
    const double u2 = to_unit(splitmix(k));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Matrix NoiseSource::gaussian(std::uint64_t step, ad::Index n, ad::Index d) const {
    Matrix m(n, d);
    for (ad::Index i = 0; i < n; ++i)
        for (ad::Index j = 0; j < d; ++j)
            m(i, j) = normal(step, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
    return m;
}

Matrix NoiseSource::rademacher(std::uint64_t step, int probe, ad::Index n, ad::Index d) const {
    Matrix m(n, d);
    const std::uint64_t tag = kTagProbe + static_cast<std::uint64_t>(probe);
    for (ad::Index i = 0; i < n; ++i)
        for (ad::Index j = 0; j < d; ++j)
            m(i, j) = (key(tag, step, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)) >> 63) ? 1.0 : -1.0;
    return m;
}

StepNoise draw_step_noise(const NoiseSource& noise, std::uint64_t step, ad::Index n, ad::Index d,
                          const Dynamics& dyn) {
    StepNoise s;
    s.xi = dyn.sigma != 0.0 ? noise.gaussian(step, n, d) : Matrix::Zero(n, d);
    if (dyn.track_hjb && dyn.sigma != 0.0 && dyn.laplacian.mode == LaplacianMode::Hutchinson) {
        if (dyn.laplacian.probes < 1) throw UsageError("Hutchinson mode needs at least one probe");
        for (int p = 0; p < dyn.laplacian.probes; ++p) s.probes.push_back(noise.rademacher(step, p, n, d));
    }
    return s;
}

StepGraph step_graph(Tape& tape, const ScalarField& field, const Var& x, const Var& w, double t, double dt,
                     const Dynamics& dyn, const StepNoise& noise) {
    if (!(dt > 0.0)) throw UsageError("step: dt must be positive");
    const double n = static_cast<double>(x.rows());
    const Var diffusion = tape.constant((dyn.sigma * std::sqrt(dt)) * noise.xi);

    const Stage s1 = evaluate_stage(tape, field, x, t, dyn, noise);
    StepGraph out;
    if (dyn.integrator == Integrator::EulerMaruyama) {
        out.x_next = x + s1.u * dt + diffusion;
        out.w_next = grow(w, s1.g, dt);
        out.action = ad::sum(s1.cost * w) * (dt / n);
        out.hjb = weighted_hjb(s1, w, dt);
        return out;
    }

    // Heun predictor-corrector with the same Brownian increment in both
    // stages; path integrals use the trapezoid rule.
    const Var x_pred = x + s1.u * dt + diffusion;
    const Var w_pred = grow(w, s1.g, dt);
    const Stage s2 = evaluate_stage(tape, field, x_pred, t + dt, dyn, noise);
    out.x_next = x + (s1.u + s2.u) * (0.5 * dt) + diffusion;
    out.w_next = grow(w, s1.g + s2.g, 0.5 * dt);
    out.action = (ad::sum(s1.cost * w) + ad::sum(s2.cost * w_pred)) * (0.5 * dt / n);
    const Var h1 = weighted_hjb(s1, w, dt);
    const Var h2 = weighted_hjb(s2, w_pred, dt);
    if (!h1.is_zero()) out.hjb = (h1 + h2) * 0.5;
    return out;
}

void step(WeightedEnsemble& ens, const ScalarField& field, const Dynamics& dyn, double dt, const StepNoise& noise,
          PathAccumulators& acc) {
    Tape tape;
    const Var x = tape.constant(ens.positions);
    const Var w = tape.constant(Matrix(ens.weights));
    const StepGraph g = step_graph(tape, field, x, w, ens.time, dt, dyn, noise);
    ens.positions = g.x_next.value();
    ens.weights = g.w_next.value().col(0);
    ens.time += dt;
    check_finite(ens);
    const double a = g.action.scalar();
    const double h = g.hjb.is_zero() ? 0.0 : g.hjb.scalar();
    if (!std::isfinite(a) || !std::isfinite(h)) throw SimulationError("non-finite path integrand", -1, ens.time);
    acc.action += a;
    acc.hjb += h;
}

std::vector<double> segment_steps(double t_start, double t_end, double dt) {
    if (!(t_end > t_start)) throw UsageError("segment: t_end must exceed t_start");
    if (!(dt > 0.0)) throw UsageError("segment: dt must be positive");
    const double span = t_end - t_start;
    const double tol = 1e-9 * dt;
    const auto full = static_cast<std::size_t>(std::floor(span / dt + 1e-9));
    std::vector<double> steps(full, dt);
    const double rest = span - static_cast<double>(full) * dt;
    if (rest > tol) steps.push_back(rest);
    if (steps.empty()) steps.push_back(span);
    return steps;
}

void simulate_segment(WeightedEnsemble& ens, const ScalarField& field, const Dynamics& dyn, double t_end, double dt,
                      const NoiseSource& noise, std::uint64_t& step_index, PathAccumulators& acc,
                      const StepObserver& observer) {
    const double t_start = ens.time;
    const std::vector<double> steps = segment_steps(t_start, t_end, dt);
    for (std::size_t k = 0; k < steps.size(); ++k) {
        const StepNoise sn = draw_step_noise(noise, step_index, ens.size(), ens.dim(), dyn);
        step(ens, field, dyn, steps[k], sn, acc);
        ++step_index;
        // Pin the clock to the grid so rounding never accumulates.
        ens.time = k + 1 == steps.size() ? t_end : t_start + static_cast<double>(k + 1) * dt;
        if (observer) observer(step_index, ens);
    }
}

void write_trajectory_header(std::ostream& os, ad::Index dim) {
    os << "step,t,particle,w";
    for (ad::Index j = 0; j < dim; ++j) os << ",x" << (j + 1);
    os << '\n';
}

void write_trajectory_rows(std::ostream& os, std::uint64_t step, const WeightedEnsemble& ens) {
    const auto old = os.precision(17);
    for (ad::Index i = 0; i < ens.size(); ++i) {
        os << step << ',' << ens.time << ',' << i << ',' << ens.weights(i);
        for (ad::Index j = 0; j < ens.dim(); ++j) os << ',' << ens.positions(i, j);
        os << '\n';
    }
    os.precision(old);
}

}  // namespace ruot
