#include "ruot/trainer.hpp"

#include "ruot/error.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>

namespace ruot {

namespace {

using ad::Matrix;
using ad::Var;
using Eigen::Index;
using Eigen::VectorXd;

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != value.size() || !std::isfinite(v))
        throw UsageError("config key '" + key + "' expects a number, got '" + value + "'");
    return v;
}

long to_int(const std::string& key, const std::string& value) {
    const double v = to_double(key, value);
    if (v != std::floor(v) || std::abs(v) > 9e15)
        throw UsageError("config key '" + key + "' expects an integer, got '" + value + "'");
    return static_cast<long>(v);
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace

std::string to_string(Profile p) { return p == Profile::WFR ? "wfr" : "modified"; }

Profile parse_profile(const std::string& text) {
    const std::string t = lower(text);
    if (t == "wfr") return Profile::WFR;
    if (t == "modified") return Profile::Modified;
    throw UsageError("unknown profile '" + text + "' (expected wfr or modified)");
}

TrainConfig profile_config(Profile p) {
    TrainConfig cfg;
    if (p == Profile::WFR) {
        cfg.penalty = GrowthPenalty::wfr(2.0);
        cfg.weights.hjb = 6.25e-2;
        cfg.weights.action = 6.25e-2;
        cfg.learning_rate = 1e-4;
    } else {
        cfg.penalty = GrowthPenalty::sublinear(7.0);
        cfg.weights.hjb = 6.25e-3;
        cfg.weights.action = 6.25e-2;
        cfg.learning_rate = 2e-5;
    }
    return cfg;
}

void TrainConfig::validate() const {
    if (penalty.kind != PenaltyKind::Disabled) penalty.validate();
    auto need = [](bool ok, const char* what) {
        if (!ok) throw UsageError(std::string("train config: ") + what);
    };
    need(sigma >= 0, "sigma must be nonnegative");
    need(n_particles > 0, "particles must be positive");
    need(dt > 0, "dt must be positive");
    need(epochs >= 0, "epochs must be nonnegative");
    need(learning_rate > 0, "learning_rate must be positive");
    need(weight_decay >= 0, "weight_decay must be nonnegative");
    need(weights.mass >= 0 && weights.hjb >= 0 && weights.action >= 0, "loss weights must be nonnegative");
    need(hutchinson_probes >= 0, "hutchinson probes must be nonnegative");
    need(width > 0 && depth >= 0, "network width must be positive and depth nonnegative");
    need(output_gain >= 0 && std::isfinite(output_gain), "output_gain must be finite and nonnegative");
    need(ot_blur > 0, "ot_blur must be positive");
    need(time_scale > 0, "time_scale must be positive");
    need(checkpoint_every >= 0, "checkpoint_every must be nonnegative");
}

Dynamics TrainConfig::dynamics() const {
    Dynamics d;
    d.penalty = penalty;
    d.sigma = sigma;
    d.integrator = integrator;
    d.track_hjb = true;
    d.laplacian = hutchinson_probes > 0 ? LaplacianSpec{LaplacianMode::Hutchinson, hutchinson_probes}
                                        : LaplacianSpec{LaplacianMode::Exact, 1};
    d.hjb_norm = loss_norm;
    return d;
}

SinkhornOptions TrainConfig::sinkhorn() const {
    SinkhornOptions o;
    o.blur = ot_blur;
    return o;
}

void apply_config_key(TrainConfig& cfg, const std::string& key_in, const std::string& value) {
    const std::string key = lower(key_in);
    if (key == "profile") {
        const TrainConfig p = profile_config(parse_profile(value));
        cfg.penalty = p.penalty;
        cfg.weights.hjb = p.weights.hjb;
        cfg.weights.action = p.weights.action;
        cfg.learning_rate = p.learning_rate;
    } else if (key == "penalty") {
        cfg.penalty.kind = parse_penalty_kind(value);
    } else if (key == "alpha") {
        cfg.penalty.alpha = to_double(key, value);
    } else if (key == "delta") {
        cfg.penalty.delta = to_double(key, value);
    } else if (key == "sigma") {
        cfg.sigma = to_double(key, value);
    } else if (key == "particles") {
        cfg.n_particles = static_cast<int>(to_int(key, value));
    } else if (key == "dt") {
        cfg.dt = to_double(key, value);
    } else if (key == "epochs") {
        cfg.epochs = static_cast<int>(to_int(key, value));
    } else if (key == "learning_rate") {
        cfg.learning_rate = to_double(key, value);
    } else if (key == "weight_decay") {
        cfg.weight_decay = to_double(key, value);
    } else if (key == "gamma_mass") {
        cfg.weights.mass = to_double(key, value);
    } else if (key == "gamma_hjb") {
        cfg.weights.hjb = to_double(key, value);
    } else if (key == "gamma_action") {
        cfg.weights.action = to_double(key, value);
    } else if (key == "seed") {
        const long s = to_int(key, value);
        if (s < 0) throw UsageError("seed must be nonnegative");
        cfg.seed = static_cast<std::uint64_t>(s);
    } else if (key == "hutchinson") {
        cfg.hutchinson_probes = static_cast<int>(to_int(key, value));
    } else if (key == "loss_norm") {
        cfg.loss_norm = parse_loss_norm(value);
    } else if (key == "integrator") {
        cfg.integrator = parse_integrator(value);
    } else if (key == "width") {
        cfg.width = static_cast<int>(to_int(key, value));
    } else if (key == "depth") {
        cfg.depth = static_cast<int>(to_int(key, value));
    } else if (key == "output_gain") {
        cfg.output_gain = to_double(key, value);
    } else if (key == "ot_blur") {
        cfg.ot_blur = to_double(key, value);
    } else if (key == "threshold") {
        cfg.convergence_threshold = to_double(key, value);
    } else if (key == "time_scale") {
        cfg.time_scale = to_double(key, value);
    } else if (key == "checkpoint_every") {
        cfg.checkpoint_every = static_cast<int>(to_int(key, value));
    } else {
        throw UsageError("unknown config key '" + key_in + "'");
    }
}

TrainConfig load_train_config(const std::filesystem::path& path, std::map<std::string, std::string>* run_keys) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config " + path.string());
    std::vector<std::tuple<std::string, std::string, int>> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        const std::string t = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ParseError("expected 'key = value'", lineno);
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (run_keys && key.starts_with("run.")) {
            (*run_keys)[key.substr(4)] = value;
            continue;
        }
        entries.emplace_back(std::move(key), std::move(value), lineno);
    }
    TrainConfig cfg;
    auto apply = [&cfg](const auto& e) {
        try {
            apply_config_key(cfg, std::get<0>(e), std::get<1>(e));
        } catch (const UsageError& err) {
            throw ParseError(err.what(), std::get<2>(e));
        }
    };
    for (const auto& e : entries)
        if (lower(std::get<0>(e)) == "profile") apply(e);
    for (const auto& e : entries)
        if (lower(std::get<0>(e)) != "profile") apply(e);
    return cfg;
}

void write_train_config(std::ostream& os, const TrainConfig& cfg) {
    const auto old = os.precision(17);
    os << "penalty = " << to_string(cfg.penalty.kind) << '\n'
       << "alpha = " << cfg.penalty.alpha << '\n'
       << "delta = " << cfg.penalty.delta << '\n'
       << "sigma = " << cfg.sigma << '\n'
       << "particles = " << cfg.n_particles << '\n'
       << "dt = " << cfg.dt << '\n'
       << "epochs = " << cfg.epochs << '\n'
       << "learning_rate = " << cfg.learning_rate << '\n'
       << "weight_decay = " << cfg.weight_decay << '\n'
       << "gamma_mass = " << cfg.weights.mass << '\n'
       << "gamma_hjb = " << cfg.weights.hjb << '\n'
       << "gamma_action = " << cfg.weights.action << '\n'
       << "seed = " << cfg.seed << '\n'
       << "hutchinson = " << cfg.hutchinson_probes << '\n'
       << "loss_norm = " << to_string(cfg.loss_norm) << '\n'
       << "integrator = " << to_string(cfg.integrator) << '\n'
       << "width = " << cfg.width << '\n'
       << "depth = " << cfg.depth << '\n'
       << "output_gain = " << cfg.output_gain << '\n'
       << "ot_blur = " << cfg.ot_blur << '\n'
       << "threshold = " << cfg.convergence_threshold << '\n'
       << "time_scale = " << cfg.time_scale << '\n'
       << "checkpoint_every = " << cfg.checkpoint_every << '\n';
    os.precision(old);
}

SnapshotDataset scale_times(const SnapshotDataset& data, double scale) {
    if (!(scale > 0)) throw UsageError("time scale must be positive");
    SnapshotDataset out = data;
    for (double& t : out.times) t *= scale;
    return out;
}

void optimizer_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                    const AdamOptions& opts) {
    if (params.size() != grads.size()) throw UsageError("optimizer_step: parameter and gradient sizes differ");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size()) throw UsageError("optimizer_step: state size does not match parameters");
    ++state.step;
    const double bc1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
    const double decay = 1.0 - opts.lr * opts.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = opts.beta1 * state.m[i] + (1.0 - opts.beta1) * grads[i];
        state.v[i] = opts.beta2 * state.v[i] + (1.0 - opts.beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] = params[i] * decay - opts.lr * mhat / (std::sqrt(vhat) + opts.eps);
    }
}

std::vector<Index> sample_particles(Index n_data, int n, std::uint64_t seed, int epoch) {
    if (n_data <= 0 || n <= 0) throw UsageError("sample_particles: empty request");
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(epoch) + 0x5EED)));
    std::vector<Index> out;
    if (n <= n_data) {
        std::vector<Index> all(static_cast<std::size_t>(n_data));
        std::iota(all.begin(), all.end(), Index{0});
        for (int i = 0; i < n; ++i) {
            std::uniform_int_distribution<Index> pick(i, n_data - 1);
            std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
        }
        out.assign(all.begin(), all.begin() + n);
    } else {
        std::uniform_int_distribution<Index> pick(0, n_data - 1);
        for (int i = 0; i < n; ++i) out.push_back(pick(rng));
    }
    return out;
}

namespace {

struct StepRecord {
    Matrix x;
    VectorXd w;
    double t;
    double dt;
};

// Fixed per-run data: the time-scaled dataset and cached Sinkhorn self terms.
struct RunContext {
    const SnapshotDataset& data;
    std::vector<SinkhornSelf> self;
    std::vector<WeightedCloud> targets;

    RunContext(const SnapshotDataset& d, const SinkhornOptions& opts) : data(d) {
        targets.reserve(d.size());
        self.reserve(d.size());
        for (std::size_t k = 0; k < d.size(); ++k) {
            targets.push_back(WeightedCloud::uniform(d.clouds[k]));
            self.push_back(k == 0 ? SinkhornSelf{} : sinkhorn_self(targets.back(), opts));
        }
    }
};

void require_finite(double v, int epoch, const char* component) {
    if (!std::isfinite(v)) throw TrainingAbort("non-finite " + std::string(component) + " loss", epoch, component);
}

EpochEvaluation run_epoch(const ScalarFieldModel& model, const RunContext& ctx, const TrainConfig& cfg, int epoch,
                          bool with_gradient) {
    const SnapshotDataset& data = ctx.data;
    const Dynamics dyn = cfg.dynamics();
    const SinkhornOptions sopts = cfg.sinkhorn();
    const NoiseSource noise(cfg.seed, static_cast<std::uint64_t>(epoch));
    const std::size_t K = data.size();

    const auto rows = sample_particles(data.clouds[0].rows(), cfg.n_particles, cfg.seed, epoch);
    Matrix x0(static_cast<Index>(rows.size()), data.dim());
    for (std::size_t i = 0; i < rows.size(); ++i) x0.row(static_cast<Index>(i)) = data.clouds[0].row(rows[i]);
    WeightedEnsemble ens = init_ensemble(x0, data.times[0]);
    const Index n = ens.size();

    // Forward pass, keeping every state for the adjoint sweep.
    std::vector<StepRecord> records;
    std::vector<std::size_t> snapshot_state(K, 0);  // index into states (records.size() at T_k)
    std::vector<WeightedEnsemble> at_snapshot{ens};
    PathAccumulators acc;
    try {
        for (std::size_t k = 1; k < K; ++k) {
            const double t_start = ens.time;
            const auto steps = segment_steps(t_start, data.times[k], cfg.dt);
            for (std::size_t s = 0; s < steps.size(); ++s) {
                const auto step_index = static_cast<std::uint64_t>(records.size());
                if (with_gradient) records.push_back({ens.positions, ens.weights, ens.time, steps[s]});
                else records.push_back({Matrix(), VectorXd(), ens.time, steps[s]});
                const StepNoise sn = draw_step_noise(noise, step_index, n, ens.dim(), dyn);
                step(ens, model, dyn, steps[s], sn, acc);
                ens.time = s + 1 == steps.size() ? data.times[k] : t_start + static_cast<double>(s + 1) * cfg.dt;
            }
            snapshot_state[k] = records.size();
            at_snapshot.push_back(ens);
        }
    } catch (const SimulationError& e) {
        throw TrainingAbort(e.what(), epoch, "simulation");
    }

    // Losses and their adjoints at the snapshot states.
    std::vector<double> predicted(K), truth(data.masses);
    for (std::size_t k = 0; k < K; ++k) predicted[k] = mass(at_snapshot[k]);
    const double lmass = mass_loss(predicted, truth);

    EpochEvaluation out;
    OtLoss ot;
    std::vector<Matrix> x_adj(K);
    std::vector<VectorXd> w_adj(K);
    for (std::size_t k = 1; k < K; ++k) {
        const WeightedEnsemble& e = at_snapshot[k];
        const WeightedCloud a = WeightedCloud::normalized(e.positions, e.weights);
        const SinkhornResult r = sinkhorn(a, ctx.targets[k], sopts, with_gradient, &ctx.self[k]);
        out.sinkhorn_converged = out.sinkhorn_converged && r.converged;
        ot.per_snapshot.push_back(r.value);
        ot.total += r.value;
        if (!with_gradient) continue;
        // Through the normalization a = w / sum(w), then the mass term.
        const double wsum = e.weights.sum();
        const double centered = r.grad_masses.dot(a.masses);
        w_adj[k] = (r.grad_masses.array() - centered) / wsum;
        w_adj[k].array() += cfg.weights.mass * 2.0 * (predicted[k] - truth[k]) / static_cast<double>(n);
        x_adj[k] = r.grad_points;
    }
    ot.converged = out.sinkhorn_converged;

    out.report = total_loss(lmass, ot, hjb_loss(acc), action_loss(acc), cfg.weights);
    require_finite(out.report.mass, epoch, "mass");
    require_finite(out.report.ot, epoch, "ot");
    require_finite(out.report.hjb, epoch, "hjb");
    require_finite(out.report.action, epoch, "action");
    if (!with_gradient) return out;

    // Adjoint sweep: rebuild each step on a fresh tape with the stored state
    // and noise, and pull the state adjoints back one step at a time.
    out.grad.assign(model.num_params(), 0.0);
    Matrix xbar = x_adj[K - 1];
    VectorXd wbar = w_adj[K - 1];
    std::size_t next_snapshot = K - 2;
    for (std::size_t s = records.size(); s-- > 0;) {
        const StepRecord& rec = records[s];
        ad::Tape tape;
        const Var xv = tape.variable(rec.x);
        const Var wv = tape.variable(Matrix(rec.w));
        const FieldParams bound = model.bind(tape, true);
        const BoundField field(model, bound);
        const StepNoise sn = draw_step_noise(noise, s, n, rec.x.cols(), dyn);
        const StepGraph g = step_graph(tape, field, xv, wv, rec.t, rec.dt, dyn, sn);
        Var objective = ad::dot(g.x_next, xbar) + ad::dot(g.w_next, Matrix(wbar));
        if (cfg.weights.action != 0.0 && !g.action.is_zero()) objective = objective + g.action * cfg.weights.action;
        if (cfg.weights.hjb != 0.0 && !g.hjb.is_zero()) objective = objective + g.hjb * cfg.weights.hjb;
        tape.backward(objective);
        const std::vector<double> gtheta = model.flatten_grad(tape, bound);
        for (std::size_t i = 0; i < gtheta.size(); ++i) out.grad[i] += gtheta[i];
        xbar = tape.grad(xv);
        wbar = tape.grad(wv).col(0);
        // State s is the one recorded at a snapshot time: add that snapshot's loss adjoint.
        if (next_snapshot >= 1 && snapshot_state[next_snapshot] == s) {
            xbar += x_adj[next_snapshot];
            wbar += w_adj[next_snapshot];
            --next_snapshot;
        }
    }
    for (double gi : out.grad)
        if (!std::isfinite(gi)) throw TrainingAbort("non-finite gradient", epoch, "gradient");
    return out;
}

}  // namespace

EpochEvaluation evaluate_epoch(const ScalarFieldModel& model, const SnapshotDataset& data, const TrainConfig& cfg,
                               int epoch, bool with_gradient) {
    cfg.validate();
    data.validate();
    if (model.input_dim() != data.dim()) throw UsageError("model and dataset dimensions differ");
    const RunContext ctx(data, cfg.sinkhorn());
    return run_epoch(model, ctx, cfg, epoch, with_gradient);
}

TrainResult train(const SnapshotDataset& data, const TrainConfig& cfg, const TrainCallbacks& callbacks) {
    cfg.validate();
    return train(ScalarFieldModel(static_cast<int>(data.dim()), cfg.width, cfg.depth, cfg.seed, cfg.output_gain),
                 data, cfg, callbacks);
}

TrainResult train(ScalarFieldModel init, const SnapshotDataset& data_in, const TrainConfig& cfg,
                  const TrainCallbacks& callbacks) {
    cfg.validate();
    data_in.validate();
    if (init.input_dim() != data_in.dim()) throw UsageError("model and dataset dimensions differ");
    const SnapshotDataset data = scale_times(data_in, cfg.time_scale);
    const RunContext ctx(data, cfg.sinkhorn());

    TrainResult result{std::move(init), {}, {}};
    AdamState state;
    const AdamOptions opts{cfg.learning_rate, cfg.weight_decay, 0.9, 0.999, 1e-8};
    const auto start = std::chrono::steady_clock::now();
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochEvaluation ev = run_epoch(result.model, ctx, cfg, epoch, true);
        optimizer_step(result.model.mutable_params(), ev.grad, state, opts);
        for (double p : result.model.params())
            if (!std::isfinite(p)) throw TrainingAbort("non-finite parameter after update", epoch, "gradient");
        result.history.push_back(ev.report);
        result.elapsed_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && epoch % cfg.checkpoint_every == 0) {
            std::filesystem::create_directories(cfg.checkpoint_dir);
            result.model.save(cfg.checkpoint_dir / ("checkpoint_epoch_" + std::to_string(epoch) + ".bin"));
        }
        if (callbacks.on_epoch) callbacks.on_epoch(epoch, ev.report, result.model);
    }
    return result;
}

ConvergenceReport convergence_probe(std::span<const LossReport> history, double threshold,
                                    std::span<const double> elapsed_seconds, int cap) {
    if (history.empty()) throw UsageError("convergence_probe: empty history");
    ConvergenceReport r;
    r.reported_epochs = cap;
    const std::size_t limit = std::min(history.size(), static_cast<std::size_t>(std::max(cap, 0)));
    for (std::size_t i = 0; i < limit; ++i) {
        if (history[i].ot < threshold) {
            r.epoch = static_cast<int>(i + 1);
            r.reported_epochs = *r.epoch;
            if (i < elapsed_seconds.size()) r.wall_seconds = elapsed_seconds[i];
            return r;
        }
    }
    if (!elapsed_seconds.empty()) r.wall_seconds = elapsed_seconds[std::min(limit, elapsed_seconds.size()) - 1];
    return r;
}

}  // namespace ruot
