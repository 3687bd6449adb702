#pragma once

// Snapshot datasets: synthetic generators and the on-disk format.
//
// On disk a dataset is a directory holding `manifest.txt` plus one CSV per
// snapshot. The manifest is `key = value` lines ('#' starts a comment):
//
//   format = ruot-snapshots-1
//   name = three-gene
//   dim = 3
//   snapshots = 5
//   time.0 = 0
//   file.0 = snapshot_0.csv
//   ...
//
// Each CSV has a header x1,...,xd and one row per cell. Masses are derived
// from row counts on load and never stored.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ruot {

struct SnapshotDataset {
    std::string name;
    std::vector<double> times;
    std::vector<Eigen::MatrixXd> clouds;
    std::vector<double> masses;  // N_k / N_1

    // Builds a dataset and derives masses from the cloud sizes.
    static SnapshotDataset make(std::string name, std::vector<double> times, std::vector<Eigen::MatrixXd> clouds);

    std::size_t size() const { return times.size(); }
    Eigen::Index dim() const { return clouds.empty() ? 0 : clouds.front().cols(); }
    // Throws ValidationError on K < 2, non-increasing times, empty or mismatched clouds.
    void validate() const;
    // Copy without snapshot k (masses of the kept snapshots are unchanged).
    SnapshotDataset without(std::size_t k) const;
};

struct ThreeGeneConfig {
    double alpha1 = 0.5, gamma1 = 0.5;
    double alpha2 = 1.0, gamma2 = 1.0;
    double alpha3 = 1.0, gamma3 = 10.0;
    double delta1 = 0.4, delta2 = 0.4, delta3 = 0.4;
    double eta1 = 0.05, eta2 = 0.05, eta3 = 0.01;
    double eta_d = 0.014;
    double beta = 1.0;
    double dt = 1.0;
    std::vector<double> time_points{0, 8, 16, 24, 32};
    double alpha_g = 0.02;     // division-rate scale
    int n_init = 100;          // cells per initial mixture component
    double init_std = 0.1;
    std::size_t max_cells = 100000;
    std::uint64_t seed = 0;
};

// g = alpha_g X2^2 / (1 + X2^2).
double division_probability(const ThreeGeneConfig& cfg, double x2);

// Euler-Maruyama simulation with cell division and clipping at zero.
SnapshotDataset generate_three_gene(const ThreeGeneConfig& cfg);

struct GaussianComponent {
    std::vector<double> mean;
    double std = 1.0;     // isotropic
    double weight = 1.0;  // relative share of the snapshot's count
};

struct GaussianSnapshot {
    double time = 0.0;
    std::vector<GaussianComponent> components;
    int count = 0;
    bool repeat_previous = false;  // reuse the previous snapshot's points exactly
};

SnapshotDataset generate_gaussian_mixture(const std::vector<GaussianSnapshot>& spec, std::uint64_t seed,
                                          std::string name = "gaussian");

// Named presets: shift2d, shift2d-unit, identical2d, mixture2d, mixture2d-unbalanced,
// highdim50, highdim100, highdim150.
std::vector<std::string> gaussian_preset_names();
std::vector<GaussianSnapshot> gaussian_preset(const std::string& name);

void save_dataset(const SnapshotDataset& data, const std::filesystem::path& dir);
// Accepts the dataset directory or its manifest file.
SnapshotDataset load_dataset(const std::filesystem::path& path);

}  // namespace ruot
