#pragma once

// The scalar potential lambda(x, t) and its differential operators.
//
// Fields are evaluated on particle batches: x is an N x d tape node and all
// outputs are N x 1 nodes. Spatial and time derivatives are propagated
// forward as second-order Taylor jets along a set of input directions, so
// gradient, time derivative and Laplacian all live on the same tape and can
// be differentiated again with respect to the network parameters.

#include "ruot/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

namespace ruot {

enum class LaplacianMode { None, Exact, Hutchinson };

// Default cap on d for the exact Laplacian (d second-order directions).
inline constexpr int kExactLaplacianMaxDim = 32;

struct JetRequest {
    bool gradient = true;
    bool time_derivative = true;
    LaplacianMode laplacian = LaplacianMode::None;
    // Hutchinson probe matrices, one N x d (or 1 x d) matrix of +-1 per probe.
    std::vector<ad::Matrix> probes;
    int exact_dim_cap = kExactLaplacianMaxDim;
};

struct FieldJet {
    ad::Var value;                    // N x 1
    std::vector<ad::Var> grad;        // d entries, each N x 1 (empty if not requested)
    ad::Var time_derivative;          // N x 1 (zero Var if not requested)
    ad::Var laplacian;                // N x 1 (zero Var if not requested)
    std::vector<ad::Var> probe_quad;  // v^T H v per Hutchinson probe, N x 1 each
};

// Anything that can produce value/derivative jets of a scalar field on a batch.
class ScalarField {
public:
    virtual ~ScalarField() = default;
    virtual int input_dim() const = 0;
    virtual FieldJet jet(ad::Tape& tape, const ad::Var& x, double t, const JetRequest& request) const = 0;
};

enum class Activation : std::uint32_t { Tanh = 1 };

// Tape nodes bound to a model's parameter blocks, in checkpoint order.
struct FieldParams {
    std::vector<ad::Var> blocks;
};

// Residual MLP lambda_theta(x, t):
//   h   = [x, t] W_in + b_in
//   h  += tanh(LayerNorm_k(h) W_k + b_k)        for k = 1..depth
//   out = h w_out + b_out
//
// Flat parameter order (every matrix row-major, rows index the input feature):
//   W_in (d+1) x width, b_in width,
//   per block: ln_scale width, ln_shift width, W_k width x width, b_k width,
//   w_out width, b_out 1.
class ScalarFieldModel : public ScalarField {
public:
    // Output weights are drawn at output_gain times the hidden-layer scale, so
    // the default starts close to the zero field.
    static constexpr double kDefaultOutputGain = 0.01;

    ScalarFieldModel(int input_dim, int hidden_width, int depth, std::uint64_t seed,
                     double output_gain = kDefaultOutputGain);

    static ScalarFieldModel zeros(int input_dim, int hidden_width, int depth);

    int input_dim() const override { return input_dim_; }
    int hidden_width() const { return width_; }
    int depth() const { return depth_; }
    std::uint64_t seed() const { return seed_; }
    Activation activation() const { return Activation::Tanh; }

    std::size_t num_params() const { return params_.size(); }
    std::span<const double> params() const { return params_; }
    std::span<double> mutable_params() { return params_; }
    void set_params(std::vector<double> params);

    // Offset of the output bias in the flat vector.
    std::size_t output_bias_index() const { return params_.size() - 1; }
    // Offset of the first output weight.
    std::size_t output_weight_index() const { return params_.size() - 1 - static_cast<std::size_t>(width_); }

    // Parameters as tape leaves (trainable) or constants.
    FieldParams bind(ad::Tape& tape, bool trainable) const;
    std::vector<double> flatten_grad(const ad::Tape& tape, const FieldParams& bound) const;

    FieldJet jet(ad::Tape& tape, const ad::Var& x, double t, const JetRequest& request) const override;
    FieldJet jet(ad::Tape& tape, const FieldParams& bound, const ad::Var& x, double t,
                 const JetRequest& request) const;

    // Runs backward() from `loss` and returns d loss / d theta. Consumes the tape.
    std::vector<double> param_grad(ad::Tape& tape, const FieldParams& bound, const ad::Var& loss) const;

    void save(const std::filesystem::path& path) const;
    static ScalarFieldModel load(const std::filesystem::path& path);

private:
    ScalarFieldModel(int input_dim, int hidden_width, int depth, std::uint64_t seed, std::vector<double> params);
    static std::size_t param_count(int input_dim, int hidden_width, int depth);

    int input_dim_;
    int width_;
    int depth_;
    std::uint64_t seed_;
    std::vector<double> params_;
};

// Presents a model with bound (trainable) parameters through the ScalarField
// interface so generic code can record parameter gradients.
class BoundField : public ScalarField {
public:
    BoundField(const ScalarFieldModel& model, FieldParams params) : model_(model), params_(std::move(params)) {}
    int input_dim() const override { return model_.input_dim(); }
    FieldJet jet(ad::Tape& tape, const ad::Var& x, double t, const JetRequest& request) const override {
        return model_.jet(tape, params_, x, t, request);
    }
    const FieldParams& params() const { return params_; }

private:
    const ScalarFieldModel& model_;
    FieldParams params_;
};

// Pointwise numeric operators for any field.
double evaluate(const ScalarField& field, std::span<const double> x, double t);
std::vector<double> grad_x(const ScalarField& field, std::span<const double> x, double t);
double time_derivative(const ScalarField& field, std::span<const double> x, double t);
double laplacian_exact(const ScalarField& field, std::span<const double> x, double t,
                       int dim_cap = kExactLaplacianMaxDim);
// One v^T H v sample per Rademacher probe.
std::vector<double> hutchinson_samples(const ScalarField& field, std::span<const double> x, double t,
                                       int n_probes, std::mt19937_64& rng);
double laplacian_hutchinson(const ScalarField& field, std::span<const double> x, double t, int n_probes,
                            std::mt19937_64& rng);

// N x d matrix of independent +-1 entries.
ad::Matrix rademacher(ad::Index rows, ad::Index cols, std::mt19937_64& rng);

}  // namespace ruot
