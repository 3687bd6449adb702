#include "ruot/datasets.hpp"

#include "ruot/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace ruot {

namespace fs = std::filesystem;

SnapshotDataset SnapshotDataset::make(std::string name, std::vector<double> times, std::vector<Eigen::MatrixXd> clouds) {
    SnapshotDataset d;
    d.name = std::move(name);
    d.times = std::move(times);
    d.clouds = std::move(clouds);
    const double n1 = d.clouds.empty() ? 1.0 : static_cast<double>(d.clouds.front().rows());
    for (const auto& c : d.clouds) d.masses.push_back(static_cast<double>(c.rows()) / n1);
    return d;
}

void SnapshotDataset::validate() const {
    if (times.size() < 2) throw ValidationError("dataset needs at least 2 snapshots, got " + std::to_string(times.size()));
    if (clouds.size() != times.size() || masses.size() != times.size())
        throw ValidationError("dataset has mismatched times, clouds and masses");
    for (std::size_t k = 0; k < times.size(); ++k) {
        if (!std::isfinite(times[k])) throw ValidationError("snapshot time is not finite");
        if (k > 0 && !(times[k] > times[k - 1]))
            throw ValidationError("snapshot times must be strictly increasing (snapshot " + std::to_string(k) + ")");
        if (clouds[k].rows() == 0) throw ValidationError("snapshot " + std::to_string(k) + " is empty");
        if (clouds[k].cols() != clouds[0].cols() || clouds[k].cols() == 0)
            throw ValidationError("snapshot " + std::to_string(k) + " has a different dimension");
        if (!clouds[k].allFinite()) throw ValidationError("snapshot " + std::to_string(k) + " has non-finite values");
    }
}

SnapshotDataset SnapshotDataset::without(std::size_t k) const {
    if (k >= size()) throw UsageError("snapshot index out of range");
    SnapshotDataset d = *this;
    d.times.erase(d.times.begin() + static_cast<long>(k));
    d.clouds.erase(d.clouds.begin() + static_cast<long>(k));
    d.masses.erase(d.masses.begin() + static_cast<long>(k));
    return d;
}

// ---------------------------------------------------------------------------
// Three-gene system

double division_probability(const ThreeGeneConfig& cfg, double x2) {
    const double s = x2 * x2;
    return cfg.alpha_g * s / (1.0 + s);
}

namespace {

void validate_config(const ThreeGeneConfig& cfg) {
    if (!(cfg.dt > 0)) throw UsageError("three-gene dt must be positive");
    if (!(cfg.alpha_g >= 0)) throw UsageError("three-gene alpha_g must be nonnegative");
    if (cfg.n_init <= 0) throw UsageError("three-gene n_init must be positive");
    if (cfg.time_points.size() < 2) throw UsageError("three-gene needs at least 2 time points");
    for (std::size_t k = 0; k < cfg.time_points.size(); ++k) {
        if (cfg.time_points[k] < 0 || (k > 0 && !(cfg.time_points[k] > cfg.time_points[k - 1])))
            throw UsageError("three-gene time points must be nonnegative and strictly increasing");
    }
    for (double eta : {cfg.eta1, cfg.eta2, cfg.eta3, cfg.eta_d, cfg.init_std})
        if (!(eta >= 0)) throw UsageError("three-gene noise scales must be nonnegative");
}

}  // namespace

SnapshotDataset generate_three_gene(const ThreeGeneConfig& cfg) {
    validate_config(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    std::vector<std::array<double, 3>> cells;
    cells.reserve(static_cast<std::size_t>(2 * cfg.n_init));
    for (const auto& mean : {std::array<double, 3>{2.0, 0.2, 0.0}, std::array<double, 3>{0.0, 0.0, 2.0}}) {
        for (int i = 0; i < cfg.n_init; ++i) {
            std::array<double, 3> c{};
            for (int j = 0; j < 3; ++j) c[j] = std::max(0.0, mean[j] + cfg.init_std * normal(rng));
            cells.push_back(c);
        }
    }

    auto snapshot = [&cells] {
        Eigen::MatrixXd m(static_cast<Eigen::Index>(cells.size()), 3);
        for (std::size_t i = 0; i < cells.size(); ++i)
            for (int j = 0; j < 3; ++j) m(static_cast<Eigen::Index>(i), j) = cells[i][j];
        return m;
    };

    std::vector<Eigen::MatrixXd> clouds;
    const double dt = cfg.dt, sq = std::sqrt(cfg.dt);
    double t = 0.0;
    std::size_t next = 0;
    // Time points are reached on the dt grid; a point that falls between
    // grid nodes is recorded at the first node at or after it.
    while (next < cfg.time_points.size()) {
        if (t >= cfg.time_points[next] - 1e-9 * std::max(1.0, cfg.time_points[next])) {
            clouds.push_back(snapshot());
            ++next;
            continue;
        }
        const std::size_t n = cells.size();
        for (std::size_t i = 0; i < n; ++i) {
            auto& c = cells[i];
            const double x1s = c[0] * c[0], x2s = c[1] * c[1], x3s = c[2] * c[2];
            const double denom = 1.0 + cfg.gamma1 * x1s + cfg.alpha2 * x2s + cfg.gamma3 * x3s + cfg.beta;
            const double f1 = (cfg.alpha1 * x1s + cfg.beta) / denom - cfg.delta1 * c[0];
            const double f2 = (cfg.alpha2 * x2s + cfg.beta) / denom - cfg.delta2 * c[1];
            const double f3 = cfg.alpha3 * x3s / (1.0 + cfg.alpha3 * x3s) - cfg.delta3 * c[2];
            const double xi1 = normal(rng), xi2 = normal(rng), xi3 = normal(rng);
            c[0] = std::max(0.0, c[0] + f1 * dt + cfg.eta1 * sq * xi1);
            c[1] = std::max(0.0, c[1] + f2 * dt + cfg.eta2 * sq * xi2);
            c[2] = std::max(0.0, c[2] + f3 * dt + cfg.eta3 * sq * xi3);
        }
        if (cfg.alpha_g > 0) {
            for (std::size_t i = 0; i < n; ++i) {
                const double p = std::clamp(division_probability(cfg, cells[i][1]) * dt, 0.0, 1.0);
                if (unif(rng) >= p) continue;
                std::array<double, 3> daughter = cells[i];
                for (double& v : daughter) v = std::max(0.0, v + cfg.eta_d * normal(rng));
                cells.push_back(daughter);
                if (cells.size() > cfg.max_cells)
                    throw SimulationError("three-gene population exceeded " + std::to_string(cfg.max_cells) +
                                              " cells; lower alpha_g (division-rate scale, currently " +
                                              std::to_string(cfg.alpha_g) + ")",
                                          static_cast<long>(i), t);
            }
        }
        t += dt;
    }
    return SnapshotDataset::make("three-gene", cfg.time_points, std::move(clouds));
}

// ---------------------------------------------------------------------------
// Gaussian mixtures

namespace {

// Per-component counts by largest remainder, so they sum to `count` exactly.
std::vector<int> allocate(const std::vector<GaussianComponent>& comps, int count) {
    double total = 0.0;
    for (const auto& c : comps) {
        if (!(c.weight >= 0)) throw UsageError("mixture weights must be nonnegative");
        total += c.weight;
    }
    if (!(total > 0)) throw UsageError("mixture weights must not all be zero");
    std::vector<int> out(comps.size());
    std::vector<std::pair<double, std::size_t>> rem;
    int used = 0;
    for (std::size_t i = 0; i < comps.size(); ++i) {
        const double share = count * comps[i].weight / total;
        out[i] = static_cast<int>(std::floor(share));
        used += out[i];
        rem.emplace_back(share - out[i], i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; used < count; ++r, ++used) ++out[rem[r % rem.size()].second];
    return out;
}

}  // namespace

SnapshotDataset generate_gaussian_mixture(const std::vector<GaussianSnapshot>& spec, std::uint64_t seed,
                                          std::string name) {
    if (spec.size() < 2) throw UsageError("a mixture dataset needs at least 2 snapshots");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> times;
    std::vector<Eigen::MatrixXd> clouds;
    std::size_t dim = 0;
    for (const auto& snap : spec) {
        if (snap.repeat_previous) {
            if (clouds.empty()) throw UsageError("the first mixture snapshot cannot repeat a previous one");
            times.push_back(snap.time);
            clouds.push_back(clouds.back());
            continue;
        }
        if (snap.count <= 0 || snap.components.empty())
            throw UsageError("each mixture snapshot needs a positive count and at least one component");
        if (dim == 0) dim = snap.components.front().mean.size();
        const auto counts = allocate(snap.components, snap.count);
        Eigen::MatrixXd cloud(snap.count, static_cast<Eigen::Index>(dim));
        Eigen::Index row = 0;
        for (std::size_t c = 0; c < snap.components.size(); ++c) {
            const auto& comp = snap.components[c];
            if (comp.mean.size() != dim || dim == 0) throw UsageError("mixture components must share one dimension");
            if (!(comp.std >= 0)) throw UsageError("mixture std must be nonnegative");
            for (int i = 0; i < counts[c]; ++i, ++row)
                for (std::size_t j = 0; j < dim; ++j)
                    cloud(row, static_cast<Eigen::Index>(j)) = comp.mean[j] + comp.std * normal(rng);
        }
        times.push_back(snap.time);
        clouds.push_back(std::move(cloud));
    }
    auto d = SnapshotDataset::make(std::move(name), std::move(times), std::move(clouds));
    d.validate();
    return d;
}

std::vector<std::string> gaussian_preset_names() {
    return {"shift2d", "shift2d-unit", "identical2d", "mixture2d", "mixture2d-unbalanced",
            "highdim50", "highdim100", "highdim150"};
}

namespace {

std::vector<double> point(std::size_t dim, double x, double y = 0.0) {
    std::vector<double> p(dim, 0.0);
    p[0] = x;
    if (dim > 1) p[1] = y;
    return p;
}

}  // namespace

std::vector<GaussianSnapshot> gaussian_preset(const std::string& name) {
    auto single = [](double dx, double sd, int n) {
        return std::vector<GaussianSnapshot>{{0.0, {{point(2, 0.0), sd, 1.0}}, n},
                                             {1.0, {{point(2, dx), sd, 1.0}}, n}};
    };
    if (name == "shift2d") return single(2.0, 0.1, 500);
    if (name == "shift2d-unit") return single(1.0, 0.1, 500);
    if (name == "identical2d") {
        auto s = single(0.0, 0.1, 200);
        s[1].repeat_previous = true;
        return s;
    }
    if (name == "mixture2d" || name == "mixture2d-unbalanced") {
        const bool grow = name == "mixture2d-unbalanced";
        GaussianSnapshot s0{0.0, {{point(2, -1.0, 0.0), 0.2, 1.0}, {point(2, 1.0, 0.0), 0.2, 1.0}}, 500};
        GaussianSnapshot s1{1.0,
                            {{point(2, -1.0, 1.0), 0.2, 1.0}, {point(2, -1.0, -1.0), 0.2, 1.0},
                             {point(2, 1.5, 0.0), 0.2, grow ? 4.0 : 2.0}},
                            grow ? 750 : 500};
        return {s0, s1};
    }
    for (std::size_t dim : {50u, 100u, 150u}) {
        if (name != "highdim" + std::to_string(dim)) continue;
        // Left component splits up and down; right component grows in place.
        GaussianSnapshot s0{0.0, {{point(dim, -2.0), 0.5, 1.0}, {point(dim, 2.0), 0.5, 1.0}}, 400};
        GaussianSnapshot s1{1.0,
                            {{point(dim, -2.0, 1.5), 0.5, 1.0}, {point(dim, -2.0, -1.5), 0.5, 1.0},
                             {point(dim, 2.0), 0.5, 4.0}},
                            600};
        return {s0, s1};
    }
    throw UsageError("unknown gaussian preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// File format

namespace {

constexpr const char* kFormat = "ruot-snapshots-1";

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& text, int line) {
    const std::string s = trim(text);
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw ParseError("expected a number, got '" + s + "'", line);
    }
    if (used != s.size()) throw ParseError("expected a number, got '" + s + "'", line);
    return v;
}

long parse_count(const std::string& text, int line) {
    const double v = parse_double(text, line);
    if (v < 0 || v != std::floor(v) || v > 1e9) throw ParseError("expected a nonnegative integer, got '" + text + "'", line);
    return static_cast<long>(v);
}

Eigen::MatrixXd read_csv(const fs::path& path, long dim) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open snapshot file " + path.string());
    std::string line;
    int lineno = 0;
    std::vector<double> values;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(t);
        for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(trim(cell));
        if (static_cast<long>(cells.size()) != dim)
            throw ParseError(path.filename().string() + ": expected " + std::to_string(dim) + " columns, got " +
                                 std::to_string(cells.size()),
                             lineno);
        if (!header) {
            for (long j = 0; j < dim; ++j)
                if (cells[static_cast<std::size_t>(j)] != "x" + std::to_string(j + 1))
                    throw ParseError(path.filename().string() + ": header must be x1..x" + std::to_string(dim), lineno);
            header = true;
            continue;
        }
        for (const auto& c : cells) values.push_back(parse_double(c, lineno));
    }
    if (!header) throw ParseError(path.filename().string() + ": missing header", lineno);
    const long rows = static_cast<long>(values.size()) / dim;
    Eigen::MatrixXd m(rows, dim);
    for (long i = 0; i < rows; ++i)
        for (long j = 0; j < dim; ++j) m(i, j) = values[static_cast<std::size_t>(i * dim + j)];
    return m;
}

}  // namespace

void save_dataset(const SnapshotDataset& data, const fs::path& dir) {
    data.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create directory " + dir.string() + ": " + ec.message());
    std::ofstream man(dir / "manifest.txt");
    if (!man) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
    man << "# snapshot dataset manifest; masses are derived from row counts\n";
    man << "format = " << kFormat << "\n";
    man << "name = " << data.name << "\n";
    man << "dim = " << data.dim() << "\n";
    man << "snapshots = " << data.size() << "\n";
    for (std::size_t k = 0; k < data.size(); ++k) {
        const std::string file = "snapshot_" + std::to_string(k) + ".csv";
        man << "time." << k << " = " << fmt17(data.times[k]) << "\n";
        man << "file." << k << " = " << file << "\n";
        std::ofstream csv(dir / file);
        if (!csv) throw std::runtime_error("cannot write " + (dir / file).string());
        for (Eigen::Index j = 0; j < data.dim(); ++j) csv << (j ? "," : "") << "x" << j + 1;
        csv << "\n";
        const auto& c = data.clouds[k];
        for (Eigen::Index i = 0; i < c.rows(); ++i) {
            for (Eigen::Index j = 0; j < c.cols(); ++j) csv << (j ? "," : "") << fmt17(c(i, j));
            csv << "\n";
        }
        if (!csv) throw std::runtime_error("failed writing " + (dir / file).string());
    }
    if (!man) throw std::runtime_error("failed writing manifest in " + dir.string());
}

SnapshotDataset load_dataset(const fs::path& path) {
    const fs::path manifest = fs::is_directory(path) ? path / "manifest.txt" : path;
    const fs::path dir = manifest.parent_path();
    std::ifstream in(manifest);
    if (!in) throw ParseError("cannot open dataset manifest " + manifest.string());

    std::map<std::string, std::pair<std::string, int>> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        const std::string t = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ParseError("expected 'key = value'", lineno);
        const std::string key = trim(t.substr(0, eq));
        if (key.empty()) throw ParseError("empty key", lineno);
        if (kv.count(key)) throw ParseError("duplicate key '" + key + "'", lineno);
        kv[key] = {trim(t.substr(eq + 1)), lineno};
    }
    if (kv.empty()) throw ParseError("empty dataset manifest " + manifest.string(), lineno);

    auto get = [&](const std::string& key) -> const std::pair<std::string, int>& {
        auto it = kv.find(key);
        if (it == kv.end()) throw ParseError("manifest is missing key '" + key + "'", lineno);
        return it->second;
    };
    if (const auto& f = get("format"); f.first != kFormat)
        throw ParseError("unsupported format '" + f.first + "'", f.second);
    const long dim = parse_count(get("dim").first, get("dim").second);
    const long k = parse_count(get("snapshots").first, get("snapshots").second);
    if (dim < 1) throw ParseError("dim must be positive", get("dim").second);
    const std::string name = kv.count("name") ? kv["name"].first : "dataset";

    std::vector<double> times;
    std::vector<Eigen::MatrixXd> clouds;
    for (long i = 0; i < k; ++i) {
        const auto& tv = get("time." + std::to_string(i));
        times.push_back(parse_double(tv.first, tv.second));
        clouds.push_back(read_csv(dir / get("file." + std::to_string(i)).first, dim));
    }
    auto data = SnapshotDataset::make(name, std::move(times), std::move(clouds));
    data.validate();
    return data;
}

}  // namespace ruot
