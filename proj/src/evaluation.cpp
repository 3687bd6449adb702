#include "ruot/evaluation.hpp"

#include "ruot/error.hpp"
#include "ruot/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace ruot {

using ad::Matrix;

namespace {

// Evaluation noise uses its own stream range so it never coincides with a training epoch.
constexpr std::uint64_t kEvalStream = 0xE7A1000000000000ULL;

}  // namespace

MeanStd mean_std(const std::vector<double>& values) {
    MeanStd r;
    if (values.empty()) return r;
    // Identical runs report their value and an exact zero spread.
    if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); }))
        return {values.front(), 0.0};
    for (double v : values) r.mean += v;
    r.mean /= static_cast<double>(values.size());
    if (values.size() < 2) return r;
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return r;
}

EvalOptions EvalOptions::from(const TrainConfig& cfg) {
    EvalOptions o;
    o.penalty = cfg.penalty;
    o.sigma = cfg.sigma;
    o.dt = cfg.dt;
    o.integrator = cfg.integrator;
    o.time_scale = cfg.time_scale;
    return o;
}

Dynamics EvalOptions::dynamics() const {
    Dynamics d;
    d.penalty = penalty;
    d.sigma = sigma;
    d.integrator = integrator;
    d.track_hjb = false;
    return d;
}

double EvaluationTable::total_w1() const {
    double s = 0.0;
    for (const auto& r : rows) s += r.w1.mean;
    return s;
}

EvaluationTable evaluate_model(const ScalarField& field, const SnapshotDataset& data_in, const EvalOptions& opts) {
    data_in.validate();
    if (field.input_dim() != data_in.dim()) throw UsageError("evaluate: model and dataset dimensions differ");
    if (opts.seeds.empty()) throw UsageError("evaluate: at least one seed is required");
    if (opts.n_particles < 0) throw UsageError("evaluate: particle count must be nonnegative");
    const SnapshotDataset data = scale_times(data_in, opts.time_scale);
    const Dynamics dyn = opts.dynamics();
    const std::size_t K = data.size();

    EvaluationTable table;
    for (std::size_t k = 1; k < K; ++k) {
        SnapshotScore s;
        s.snapshot = k + 1;
        s.time = data_in.times[k];
        table.rows.push_back(s);
    }
    std::vector<double> mass_errors;
    for (std::uint64_t seed : opts.seeds) {
        Matrix x0 = data.clouds[0];
        if (opts.n_particles > 0) {
            const auto rows = sample_particles(data.clouds[0].rows(), opts.n_particles, seed, 0);
            x0.resize(static_cast<Eigen::Index>(rows.size()), data.dim());
            for (std::size_t i = 0; i < rows.size(); ++i)
                x0.row(static_cast<Eigen::Index>(i)) = data.clouds[0].row(rows[i]);
        }
        WeightedEnsemble ens = init_ensemble(x0, data.times[0]);
        const NoiseSource noise(seed, kEvalStream);
        std::uint64_t step_index = 0;
        PathAccumulators acc;
        for (std::size_t k = 1; k < K; ++k) {
            simulate_segment(ens, field, dyn, data.times[k], opts.dt, noise, step_index, acc);
            const WeightedCloud a = WeightedCloud::normalized(ens.positions, ens.weights);
            const WeightedCloud b = WeightedCloud::uniform(data.clouds[k]);
            table.rows[k - 1].w1_runs.push_back(wasserstein1(a, b));
            table.rows[k - 1].w2_runs.push_back(wasserstein2(a, b));
        }
        table.action_runs.push_back(acc.action);
        mass_errors.push_back(std::abs(mass(ens) - data.masses.back()));
    }
    for (auto& r : table.rows) {
        r.w1 = mean_std(r.w1_runs);
        r.w2 = mean_std(r.w2_runs);
    }
    table.action = mean_std(table.action_runs);
    table.mass_error = mean_std(mass_errors);
    return table;
}

void write_results_header(std::ostream& os) { os << "dataset,snapshot,metric,mean,std\n"; }

void write_results_rows(std::ostream& os, const std::string& dataset, const EvaluationTable& table) {
    const auto old = os.precision(17);
    for (const auto& r : table.rows) {
        os << dataset << ',' << r.snapshot << ",W1," << r.w1.mean << ',' << r.w1.std << '\n';
        os << dataset << ',' << r.snapshot << ",W2," << r.w2.mean << ',' << r.w2.std << '\n';
    }
    os << dataset << ",all,action," << table.action.mean << ',' << table.action.std << '\n';
    os.precision(old);
}

HoldOutResult hold_one_out(const SnapshotDataset& data, std::size_t k_out, const TrainConfig& cfg,
                           const std::vector<std::uint64_t>& seeds) {
    data.validate();
    if (data.size() < 3) throw UsageError("hold-one-out needs at least 3 snapshots");
    if (k_out < 2 || k_out > data.size())
        throw UsageError("hold-one-out index must lie in 2.." + std::to_string(data.size()) +
                         " (the first snapshot seeds the particles)");
    const SnapshotDataset reduced = data.without(k_out - 1);
    TrainResult trained = train(reduced, cfg);

    EvalOptions opts = EvalOptions::from(cfg);
    opts.seeds = seeds;
    const EvaluationTable table = evaluate_model(trained.model, data, opts);
    HoldOutResult r{std::move(trained.model), std::move(trained.history), k_out, k_out == data.size(),
                    table.rows[k_out - 2]};
    return r;
}

FieldJet QuadraticPotential::jet(ad::Tape& tape, const ad::Var& x, double /*t*/, const JetRequest& request) const {
    if (x.cols() != dim_) throw UsageError("QuadraticPotential: dimension mismatch");
    const ad::Index n = x.rows();
    FieldJet j;
    j.value = 0.5 * c_ * ad::row_sum(ad::square(x));
    if (request.gradient)
        for (int i = 0; i < dim_; ++i) j.grad.push_back(c_ * ad::col(x, i));
    if (request.time_derivative) j.time_derivative = tape.constant(Matrix::Zero(n, 1));
    if (request.laplacian == LaplacianMode::Exact) j.laplacian = tape.constant(Matrix::Constant(n, 1, c_ * dim_));
    if (request.laplacian == LaplacianMode::Hutchinson) {
        ad::Var acc;
        for (const Matrix& v : request.probes) {
            Matrix q = (c_ * v.rowwise().squaredNorm()).eval();
            if (q.rows() != n) q = q.replicate(n, 1);
            j.probe_quad.push_back(tape.constant(q));
            acc = acc + j.probe_quad.back();
        }
        j.laplacian = acc * (1.0 / static_cast<double>(request.probes.size()));
    }
    return j;
}

McStudyResult mc_convergence_study(const ScalarField& field, const ParticleSampler& sampler,
                                   const McStudyOptions& opts) {
    if (opts.n_list.size() < 3) throw UsageError("mc study needs at least 3 particle counts");
    if (opts.seeds < 2) throw UsageError("mc study needs at least 2 seeds");
    McStudyResult r;
    for (int n : opts.n_list) {
        if (n <= 0) throw UsageError("mc study particle counts must be positive");
        std::vector<double> actions;
        for (int s = 0; s < opts.seeds; ++s) {
            const std::uint64_t seed = opts.base_seed + static_cast<std::uint64_t>(s);
            WeightedEnsemble ens = init_ensemble(sampler(n, seed), 0.0);
            const NoiseSource noise(seed, static_cast<std::uint64_t>(n));
            std::uint64_t step_index = 0;
            PathAccumulators acc;
            simulate_segment(ens, field, opts.dynamics, opts.t_end, opts.dt, noise, step_index, acc);
            actions.push_back(acc.action);
        }
        const MeanStd ms = mean_std(actions);
        r.n.push_back(n);
        r.mean.push_back(ms.mean);
        r.std.push_back(ms.std);
        if (!(ms.std > 0.0)) r.degenerate = true;
    }
    if (r.degenerate) {
        r.slope = r.half_width = std::numeric_limits<double>::quiet_NaN();
        return r;
    }
    // Equal weights per point, so the weighted fit reduces to ordinary least
    // squares with a known residual variance 1 / (2 (seeds - 1)).
    const double w = 2.0 * (opts.seeds - 1);
    double sx = 0, sy = 0;
    const auto m = static_cast<double>(r.n.size());
    for (std::size_t i = 0; i < r.n.size(); ++i) {
        sx += std::log(static_cast<double>(r.n[i]));
        sy += std::log(r.std[i]);
    }
    const double mx = sx / m, my = sy / m;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < r.n.size(); ++i) {
        const double dx = std::log(static_cast<double>(r.n[i])) - mx;
        sxx += dx * dx;
        sxy += dx * (std::log(r.std[i]) - my);
    }
    if (!(sxx > 0)) throw UsageError("mc study particle counts must not all be equal");
    r.slope = sxy / sxx;
    r.half_width = 1.959963984540054 * std::sqrt(1.0 / (w * sxx));
    return r;
}

void write_mc_study(std::ostream& os, const McStudyResult& r) {
    const auto old = os.precision(17);
    os << "n,mean_action,std_action\n";
    for (std::size_t i = 0; i < r.n.size(); ++i) os << r.n[i] << ',' << r.mean[i] << ',' << r.std[i] << '\n';
    os << "slope," << r.slope << ',' << r.half_width << '\n';
    os.precision(old);
}

}  // namespace ruot
