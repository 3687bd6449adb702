// ruot: data generation, training, evaluation and plot-data export.
//
// Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error,
// 3 numerical abort (non-finite loss or particle).

#include "ruot/datasets.hpp"
#include "ruot/error.hpp"
#include "ruot/evaluation.hpp"
#include "ruot/growth.hpp"
#include "ruot/trainer.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ruot;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

constexpr const char* kThreadsEnv = "RUOT_NUM_THREADS";

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os.precision(17);
    return os;
}

std::string command_line(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) {
        if (i) s += ' ';
        s += argv[i];
    }
    return s;
}

// Flags shared by every command that trains or simulates.
struct TrainFlags {
    std::string config;
    std::string profile;
    std::optional<double> sigma, dt, threshold, time_scale, lr, output_gain;
    std::optional<int> particles, epochs, hutchinson, width, depth;
    std::optional<std::uint64_t> seed;
    std::string loss_norm, integrator, penalty;

    void add(CLI::App& cmd) {
        cmd.add_option("--config", config, "key = value config file (a run manifest also works)");
        cmd.add_option("--profile", profile, "parameter profile")->check(CLI::IsMember({"wfr", "modified"}));
        cmd.add_option("--penalty", penalty, "growth penalty")->check(CLI::IsMember({"wfr", "sublinear", "disabled"}));
        cmd.add_option("--sigma", sigma, "diffusion coefficient");
        cmd.add_option("--particles", particles, "particles per epoch");
        cmd.add_option("--dt", dt, "integration step");
        cmd.add_option("--epochs", epochs, "training epochs");
        cmd.add_option("--lr", lr, "learning rate");
        cmd.add_option("--seed", seed, "run seed");
        cmd.add_option("--hutchinson", hutchinson, "Hutchinson probes (0 = exact Laplacian)");
        cmd.add_option("--loss-norm", loss_norm, "HJB residual norm")->check(CLI::IsMember({"l1", "l2"}));
        cmd.add_option("--integrator", integrator, "particle integrator")->check(CLI::IsMember({"em", "srk2"}));
        cmd.add_option("--width", width, "hidden width");
        cmd.add_option("--depth", depth, "residual blocks");
        cmd.add_option("--output-gain", output_gain, "scale of the initial output weights");
        cmd.add_option("--time-scale", time_scale, "multiplier from data time to model time");
        cmd.add_option("--threshold", threshold, "convergence probe threshold on the summed OT loss");
    }

    TrainConfig resolve() const {
        TrainConfig cfg;
        if (!config.empty()) {
            std::map<std::string, std::string> run_keys;
            cfg = load_train_config(config, &run_keys);
        }
        // A profile flag replaces the file's profile-controlled keys; every other flag overrides single keys.
        if (!profile.empty()) apply_config_key(cfg, "profile", profile);
        auto set = [&cfg](const char* key, const auto& v) {
            if (v) {
                std::ostringstream os;
                os.precision(17);
                os << *v;
                apply_config_key(cfg, key, os.str());
            }
        };
        if (!penalty.empty()) apply_config_key(cfg, "penalty", penalty);
        set("sigma", sigma);
        set("particles", particles);
        set("dt", dt);
        set("epochs", epochs);
        set("learning_rate", lr);
        set("seed", seed);
        set("hutchinson", hutchinson);
        set("width", width);
        set("depth", depth);
        set("output_gain", output_gain);
        set("time_scale", time_scale);
        set("threshold", threshold);
        if (!loss_norm.empty()) apply_config_key(cfg, "loss_norm", loss_norm);
        if (!integrator.empty()) apply_config_key(cfg, "integrator", integrator);
        cfg.validate();
        return cfg;
    }
};

std::vector<std::uint64_t> seed_list(int count, std::uint64_t base) {
    if (count < 1) throw UsageError("--seeds must be at least 1");
    std::vector<std::uint64_t> s;
    for (int i = 0; i < count; ++i) s.push_back(base + static_cast<std::uint64_t>(i));
    return s;
}

void print_summary(const SnapshotDataset& d) {
    std::cout << "dataset " << d.name << ": K=" << d.size() << " d=" << d.dim() << '\n';
    for (std::size_t k = 0; k < d.size(); ++k)
        std::cout << "  t=" << d.times[k] << "  N=" << d.clouds[k].rows() << "  mass=" << d.masses[k] << '\n';
}

void write_history(const fs::path& path, const std::vector<LossReport>& history) {
    auto os = open_out(path);
    write_history_header(os);
    for (std::size_t e = 0; e < history.size(); ++e) write_history_row(os, static_cast<int>(e + 1), history[e]);
}

// ---- generate ------------------------------------------------------------

struct GenerateArgs {
    std::string out;
    std::uint64_t seed = 0;
    std::string preset;
    double alpha_g = ThreeGeneConfig{}.alpha_g;
    int n_init = ThreeGeneConfig{}.n_init;
};

int run_generate_three_gene(const GenerateArgs& a) {
    ThreeGeneConfig cfg;
    cfg.seed = a.seed;
    cfg.alpha_g = a.alpha_g;
    cfg.n_init = a.n_init;
    const SnapshotDataset d = generate_three_gene(cfg);
    save_dataset(d, a.out);
    print_summary(d);
    return 0;
}

int run_generate_gaussian(const GenerateArgs& a) {
    const SnapshotDataset d = generate_gaussian_mixture(gaussian_preset(a.preset), a.seed, a.preset);
    save_dataset(d, a.out);
    print_summary(d);
    return 0;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
    TrainFlags flags;
    std::string data;
    std::string out;
    int log_every = 10;
    int checkpoint_every = 0;
};

int run_train(const TrainArgs& a, const std::string& cmdline) {
    TrainConfig cfg = a.flags.resolve();
    const SnapshotDataset data = load_dataset(a.data);
    data.validate();
    const fs::path out(a.out);
    fs::create_directories(out);
    if (a.checkpoint_every > 0) {
        cfg.checkpoint_every = a.checkpoint_every;
        cfg.checkpoint_dir = out / "checkpoints";
    }

    TrainCallbacks cb;
    if (a.log_every > 0)
        cb.on_epoch = [&](int epoch, const LossReport& r, const ScalarFieldModel&) {
            if (epoch % a.log_every == 0 || epoch == 1)
                std::cerr << "epoch " << epoch << "  total " << r.total << "  ot " << r.ot << "  mass " << r.mass
                          << "  hjb " << r.hjb << "  action " << r.action << '\n';
        };

    const auto start = std::chrono::steady_clock::now();
    TrainResult res = train(data, cfg, cb);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    res.model.save(out / "model.bin");
    write_history(out / "history.csv", res.history);
    std::optional<ConvergenceReport> probe;
    if (!res.history.empty()) probe = convergence_probe(res.history, cfg.convergence_threshold, res.elapsed_seconds);

    auto os = open_out(out / "manifest.txt");
    os << "# Run manifest. Reproduce with: ruot train --config <this file> --data <run.data> --out <dir>\n"
       << "run.command = " << cmdline << '\n'
       << "run.data = " << fs::absolute(a.data).string() << '\n'
       << "run.seed = " << cfg.seed << '\n'
       << "run.wall_seconds = " << wall << '\n'
       << "run.epochs_completed = " << res.history.size() << '\n';
    if (probe) os << "run.convergence_epoch = " << probe->reported_epochs << '\n';
    write_train_config(os, cfg);

    std::cout << "trained " << res.history.size() << " epochs in " << wall << " s\n";
    if (!res.history.empty()) std::cout << "final total loss " << res.history.back().total << '\n';
    if (probe) {
        std::cout << "convergence epoch (threshold " << cfg.convergence_threshold << "): ";
        if (probe->epoch)
            std::cout << *probe->epoch << '\n';
        else
            std::cout << "not reached, reported as " << probe->reported_epochs << '\n';
    }
    std::cout << "wrote " << (out / "model.bin").string() << ", history.csv, manifest.txt\n";
    return 0;
}

// ---- evaluate / holdout / mcstudy -----------------------------------------

struct RunFiles {
    TrainConfig cfg;
    std::map<std::string, std::string> keys;
    fs::path model;
    fs::path history;
};

RunFiles open_run(const fs::path& dir) {
    RunFiles r;
    const fs::path manifest = dir / "manifest.txt";
    if (!fs::exists(manifest)) throw IoError("no run manifest at " + manifest.string());
    r.cfg = load_train_config(manifest, &r.keys);
    r.model = dir / "model.bin";
    r.history = dir / "history.csv";
    if (!fs::exists(r.model)) throw IoError("no model checkpoint at " + r.model.string());
    return r;
}

struct EvaluateArgs {
    std::string run;
    std::string data;
    std::string out;
    int seeds = 5;
    std::uint64_t base_seed = 0;
    int particles = 0;
};

int run_evaluate(const EvaluateArgs& a) {
    const RunFiles run = open_run(a.run);
    const std::string data_path = a.data.empty() ? run.keys.count("data") ? run.keys.at("data") : "" : a.data;
    if (data_path.empty()) throw UsageError("no --data given and the manifest has no run.data");
    const SnapshotDataset data = load_dataset(data_path);
    const ScalarFieldModel model = ScalarFieldModel::load(run.model);
    EvalOptions opts = EvalOptions::from(run.cfg);
    opts.seeds = seed_list(a.seeds, a.base_seed);
    opts.n_particles = a.particles;
    const EvaluationTable table = evaluate_model(model, data, opts);

    std::ostringstream csv;
    write_results_header(csv);
    write_results_rows(csv, data.name, table);
    if (a.out.empty()) {
        std::cout << csv.str();
    } else {
        auto os = open_out(a.out);
        os << csv.str();
        std::cout << "wrote " << a.out << '\n';
    }
    std::cout << "summed W1 " << table.total_w1() << "  mass error " << table.mass_error.mean << '\n';
    return 0;
}

struct HoldoutArgs {
    TrainFlags flags;
    std::string data;
    std::string out;
    std::size_t k = 0;
    int seeds = 5;
};

int run_holdout(const HoldoutArgs& a, const std::string& cmdline) {
    const TrainConfig cfg = a.flags.resolve();
    const SnapshotDataset data = load_dataset(a.data);
    const HoldOutResult r = hold_one_out(data, a.k, cfg, seed_list(a.seeds, 0));
    const fs::path out(a.out);
    fs::create_directories(out);
    r.model.save(out / "model.bin");
    write_history(out / "history.csv", r.history);
    {
        auto os = open_out(out / "manifest.txt");
        os << "run.command = " << cmdline << '\n'
           << "run.data = " << fs::absolute(a.data).string() << '\n'
           << "run.holdout = " << a.k << '\n'
           << "run.seed = " << cfg.seed << '\n';
        write_train_config(os, cfg);
    }
    auto os = open_out(out / "holdout.csv");
    const char* label = r.extrapolation ? "extrapolation" : "interpolation";
    os << "dataset,snapshot,time,kind,metric,mean,std\n";
    os << data.name << ',' << r.k_out << ',' << r.score.time << ',' << label << ",W1," << r.score.w1.mean << ','
       << r.score.w1.std << '\n';
    os << data.name << ',' << r.k_out << ',' << r.score.time << ',' << label << ",W2," << r.score.w2.mean << ','
       << r.score.w2.std << '\n';
    std::cout << "held out snapshot " << r.k_out << " (t=" << r.score.time << ", " << label << "): W1 "
              << r.score.w1.mean << " +- " << r.score.w1.std << '\n';
    return 0;
}

struct McArgs {
    std::vector<int> n_list{100, 1000, 10000};
    int seeds = 20;
    std::uint64_t base_seed = 0;
    double sigma = 0.5;
    double c = -0.5;
    int dim = 2;
    double t_end = 1.0;
    double dt = 0.1;
    std::string model;
    std::string out;
};

int run_mcstudy(const McArgs& a) {
    McStudyOptions opts;
    opts.n_list = a.n_list;
    opts.seeds = a.seeds;
    opts.base_seed = a.base_seed;
    opts.t_end = a.t_end;
    opts.dt = a.dt;
    opts.dynamics.penalty = GrowthPenalty::disabled();
    opts.dynamics.sigma = a.sigma;
    opts.dynamics.track_hjb = false;

    std::optional<ScalarFieldModel> model;
    if (!a.model.empty()) model = ScalarFieldModel::load(a.model);
    const QuadraticPotential quad(a.dim, a.c);
    const ScalarField& field = model ? static_cast<const ScalarField&>(*model) : quad;
    const int d = field.input_dim();
    const ParticleSampler sampler = [d](int n, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> g(0.0, 1.0);
        ad::Matrix m(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) m(i, j) = g(rng);
        return m;
    };
    const McStudyResult r = mc_convergence_study(field, sampler, opts);
    std::ostringstream csv;
    write_mc_study(csv, r);
    if (a.out.empty()) {
        std::cout << csv.str();
    } else {
        auto os = open_out(a.out);
        os << csv.str();
        std::cout << "wrote " << a.out << '\n';
    }
    if (r.degenerate)
        std::cout << "degenerate: some std is zero, no slope\n";
    else
        std::cout << "slope " << r.slope << " +- " << r.half_width << " (95%)\n";
    return 0;
}

// ---- plotdata --------------------------------------------------------------

struct PlotArgs {
    std::string run;
    std::string data;
    std::string out;
    int particles = 50;
    std::uint64_t seed = 0;
    std::vector<double> times{0.0};
    int grid = 21;
    std::vector<double> range{-2.0, 2.0};
};

int run_plotdata(const PlotArgs& a) {
    const RunFiles run = open_run(a.run);
    if (!fs::exists(run.history)) throw IoError("no history at " + run.history.string());
    const std::string data_path = a.data.empty() ? run.keys.count("data") ? run.keys.at("data") : "" : a.data;
    if (data_path.empty()) throw UsageError("no --data given and the manifest has no run.data");
    if (a.particles < 1) throw UsageError("--particles must be positive");
    if (a.grid < 2) throw UsageError("--grid must be at least 2");
    if (a.range.size() != 2 || !(a.range[0] < a.range[1])) throw UsageError("--range needs lo < hi");
    const SnapshotDataset data = scale_times(load_dataset(data_path), run.cfg.time_scale);
    const ScalarFieldModel model = ScalarFieldModel::load(run.model);
    if (model.input_dim() != data.dim()) throw UsageError("model and dataset dimensions differ");
    const fs::path out(a.out);
    fs::create_directories(out);

    // Trajectories: one row per (step, particle) after every step.
    {
        const auto rows = sample_particles(data.clouds[0].rows(), a.particles, a.seed, 0);
        ad::Matrix x0(static_cast<Eigen::Index>(rows.size()), data.dim());
        for (std::size_t i = 0; i < rows.size(); ++i)
            x0.row(static_cast<Eigen::Index>(i)) = data.clouds[0].row(rows[i]);
        WeightedEnsemble ens = init_ensemble(x0, data.times[0]);
        Dynamics dyn = run.cfg.dynamics();
        dyn.track_hjb = false;
        const NoiseSource noise(a.seed, 0x9107000000000000ULL);
        std::uint64_t step_index = 0;
        PathAccumulators acc;
        auto os = open_out(out / "trajectories.csv");
        write_trajectory_header(os, data.dim());
        const StepObserver obs = [&os](std::uint64_t s, const WeightedEnsemble& e) { write_trajectory_rows(os, s, e); };
        for (std::size_t k = 1; k < data.size(); ++k)
            simulate_segment(ens, model, dyn, data.times[k], run.cfg.dt, noise, step_index, acc, obs);
    }

    // Grid of lambda, u and g over the first two coordinates; the rest sit at the snapshot-1 mean.
    {
        const Eigen::RowVectorXd centre = data.clouds[0].colwise().mean();
        const int axes = std::min<int>(2, static_cast<int>(data.dim()));
        auto os = open_out(out / "grid.csv");
        os << "t";
        for (Eigen::Index j = 0; j < data.dim(); ++j) os << ",x" << j + 1;
        os << ",lambda";
        for (Eigen::Index j = 0; j < data.dim(); ++j) os << ",u" << j + 1;
        os << ",g\n";
        const double lo = a.range[0], hi = a.range[1];
        const int n1 = a.grid, n2 = axes == 2 ? a.grid : 1;
        std::vector<double> x(static_cast<std::size_t>(data.dim()));
        for (double t_data : a.times) {
            const double t = t_data * run.cfg.time_scale;
            for (int i = 0; i < n1; ++i)
                for (int j = 0; j < n2; ++j) {
                    for (Eigen::Index c = 0; c < data.dim(); ++c) x[static_cast<std::size_t>(c)] = centre(c);
                    x[0] = lo + (hi - lo) * i / (n1 - 1);
                    if (axes == 2) x[1] = lo + (hi - lo) * j / (n2 - 1);
                    const double lam = evaluate(model, x, t);
                    const std::vector<double> u = grad_x(model, x, t);
                    os << t_data;
                    for (double v : x) os << ',' << v;
                    os << ',' << lam;
                    for (double v : u) os << ',' << v;
                    os << ',' << growth_from_lambda(run.cfg.penalty, lam) << '\n';
                }
        }
    }

    fs::copy_file(run.history, out / "loss.csv", fs::copy_options::overwrite_existing);
    std::cout << "wrote trajectories.csv, grid.csv, loss.csv to " << out.string() << '\n';
    return 0;
}

void apply_thread_env() {
    if (const char* env = std::getenv(kThreadsEnv)) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || n < 1) throw UsageError(std::string(kThreadsEnv) + " must be a positive integer");
        Eigen::setNbThreads(static_cast<int>(n));
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unbalanced dynamic optimal transport from snapshot data"};
    app.require_subcommand(1);
    const std::string cmdline = command_line(argc, argv);

    GenerateArgs gen;
    auto* generate = app.add_subcommand("generate", "write a synthetic dataset");
    generate->require_subcommand(1);
    auto* three = generate->add_subcommand("three-gene", "three-gene regulatory simulation with division");
    three->add_option("--out", gen.out, "output directory")->required();
    three->add_option("--seed", gen.seed, "simulation seed");
    three->add_option("--alpha-g", gen.alpha_g, "division-rate scale");
    three->add_option("--n-init", gen.n_init, "cells per initial component");
    auto* gauss = generate->add_subcommand("gaussian", "Gaussian-mixture snapshots from a preset");
    gauss->add_option("--out", gen.out, "output directory")->required();
    gauss->add_option("--seed", gen.seed, "sampling seed");
    gauss->add_option("--preset", gen.preset, "preset name")->required()->check(CLI::IsMember(gaussian_preset_names()));

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train a potential on a dataset");
    tr.flags.add(*train_cmd);
    train_cmd->add_option("--data", tr.data, "dataset directory")->required();
    train_cmd->add_option("--out", tr.out, "run directory")->required();
    train_cmd->add_option("--log-every", tr.log_every, "progress line interval (0 = quiet)");
    train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "checkpoint interval in epochs (0 = off)");

    EvaluateArgs ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "score a trained run with exact W1/W2");
    eval_cmd->add_option("--run", ev.run, "run directory")->required();
    eval_cmd->add_option("--data", ev.data, "dataset (default: the one in the manifest)");
    eval_cmd->add_option("--out", ev.out, "results CSV (default: stdout)");
    eval_cmd->add_option("--seeds", ev.seeds, "number of simulation seeds");
    eval_cmd->add_option("--seed", ev.base_seed, "first simulation seed");
    eval_cmd->add_option("--particles", ev.particles, "particles per run (0 = all of snapshot 1)");

    HoldoutArgs ho;
    auto* hold_cmd = app.add_subcommand("holdout", "train without one snapshot and score it");
    ho.flags.add(*hold_cmd);
    hold_cmd->add_option("--data", ho.data, "dataset directory")->required();
    hold_cmd->add_option("--out", ho.out, "output directory")->required();
    hold_cmd->add_option("--k", ho.k, "held-out snapshot, 1-based")->required();
    hold_cmd->add_option("--seeds", ho.seeds, "number of evaluation seeds");

    McArgs mc;
    auto* mc_cmd = app.add_subcommand("mcstudy", "Monte Carlo rate of the action estimate");
    mc_cmd->add_option("--N", mc.n_list, "particle counts")->delimiter(',');
    mc_cmd->add_option("--seeds", mc.seeds, "runs per particle count");
    mc_cmd->add_option("--seed", mc.base_seed, "first seed");
    mc_cmd->add_option("--sigma", mc.sigma, "diffusion coefficient");
    mc_cmd->add_option("--c", mc.c, "linear drift u = c x (ignored with --model)");
    mc_cmd->add_option("--dim", mc.dim, "dimension (ignored with --model)");
    mc_cmd->add_option("--t-end", mc.t_end, "horizon");
    mc_cmd->add_option("--dt", mc.dt, "integration step");
    mc_cmd->add_option("--model", mc.model, "use a trained checkpoint instead of the linear drift");
    mc_cmd->add_option("--out", mc.out, "results CSV (default: stdout)");

    PlotArgs pl;
    auto* plot_cmd = app.add_subcommand("plotdata", "export trajectories, field grids and loss curves as CSV");
    plot_cmd->add_option("--run", pl.run, "run directory")->required();
    plot_cmd->add_option("--out", pl.out, "output directory")->required();
    plot_cmd->add_option("--data", pl.data, "dataset (default: the one in the manifest)");
    plot_cmd->add_option("--particles", pl.particles, "trajectories to sample");
    plot_cmd->add_option("--seed", pl.seed, "sampling and noise seed");
    plot_cmd->add_option("--times", pl.times, "grid times on the data clock")->delimiter(',');
    plot_cmd->add_option("--grid", pl.grid, "grid points per axis");
    plot_cmd->add_option("--range", pl.range, "grid range lo,hi")->delimiter(',')->expected(2);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        apply_thread_env();
        if (three->parsed()) return run_generate_three_gene(gen);
        if (gauss->parsed()) return run_generate_gaussian(gen);
        if (train_cmd->parsed()) return run_train(tr, cmdline);
        if (eval_cmd->parsed()) return run_evaluate(ev);
        if (hold_cmd->parsed()) return run_holdout(ho, cmdline);
        if (mc_cmd->parsed()) return run_mcstudy(mc);
        if (plot_cmd->parsed()) return run_plotdata(pl);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const TrainingAbort& e) {
        std::cerr << "training aborted: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const SimulationError& e) {
        std::cerr << "simulation failed: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
