#include "ruot/scalarfield.hpp"

#include "ruot/error.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ruot {

using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::array<char, 8> kCheckpointMagic = {'R', 'U', 'O', 'T', 'F', 'L', 'D', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

// Value plus first and second derivatives along a fixed list of input
// directions. second[k] is only propagated where track[k] is set.
struct Jet {
    Var value;
    std::vector<Var> first;
    std::vector<Var> second;
};

struct JetContext {
    std::vector<char> track;
};

Jet affine(const Jet& in, const Var& weight, const Var& bias) {
    Jet out;
    out.value = ad::matmul(in.value, weight) + bias;
    out.first.reserve(in.first.size());
    out.second.reserve(in.second.size());
    for (std::size_t k = 0; k < in.first.size(); ++k) {
        out.first.push_back(ad::matmul(in.first[k], weight));
        out.second.push_back(ad::matmul(in.second[k], weight));
    }
    return out;
}

Jet tanh_jet(const Jet& in, const JetContext& ctx) {
    Jet out;
    out.value = ad::tanh(in.value);
    const Var slope = 1.0 - ad::square(out.value);
    Var curvature;
    for (std::size_t k = 0; k < in.first.size(); ++k) {
        out.first.push_back(slope * in.first[k]);
        if (!ctx.track[k]) {
            out.second.emplace_back();
            continue;
        }
        if (curvature.is_zero()) curvature = -2.0 * (out.value * slope);
        out.second.push_back(slope * in.second[k] + curvature * ad::square(in.first[k]));
    }
    return out;
}

// Row-wise layer normalization with per-feature scale and shift.
Jet layer_norm_jet(const Jet& in, const Var& scale, const Var& shift, const JetContext& ctx) {
    const Var centered = in.value - ad::row_mean(in.value);
    const Var var_eps = ad::row_mean(ad::square(centered)) + kLayerNormEps;
    const Var inv_std = ad::pow(var_eps, -0.5);
    const Var normed = centered * inv_std;

    Jet out;
    out.value = normed * scale + shift;
    Var inv_std3, inv_std5;
    for (std::size_t k = 0; k < in.first.size(); ++k) {
        const Var dc = in.first[k] - ad::row_mean(in.first[k]);
        const Var dvar = 2.0 * ad::row_mean(centered * dc);
        if (inv_std3.is_zero()) inv_std3 = ad::pow(var_eps, -1.5);
        const Var ds = -0.5 * (inv_std3 * dvar);
        out.first.push_back((dc * inv_std + centered * ds) * scale);
        if (!ctx.track[k]) {
            out.second.emplace_back();
            continue;
        }
        const Var ddc = in.second[k] - ad::row_mean(in.second[k]);
        const Var ddvar = 2.0 * ad::row_mean(ad::square(dc) + centered * ddc);
        if (inv_std5.is_zero()) inv_std5 = ad::pow(var_eps, -2.5);
        const Var dds = 0.75 * (inv_std5 * ad::square(dvar)) - 0.5 * (inv_std3 * ddvar);
        out.second.push_back((ddc * inv_std + 2.0 * (dc * ds) + centered * dds) * scale);
    }
    return out;
}

void put_u32(std::ostream& os, std::uint32_t v) {
    std::array<unsigned char, 4> b{};
    for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b.data()), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    std::array<unsigned char, 8> b{};
    for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b.data()), 8);
}

std::uint64_t get_bytes(std::istream& is, int n) {
    std::array<unsigned char, 8> b{};
    is.read(reinterpret_cast<char*>(b.data()), n);
    if (!is) throw ParseError("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

Matrix x_row(std::span<const double> x) {
    Matrix m(1, static_cast<ad::Index>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) m(0, static_cast<ad::Index>(i)) = x[i];
    return m;
}

void check_dim(const ScalarField& field, std::span<const double> x) {
    if (static_cast<int>(x.size()) != field.input_dim())
        throw UsageError("scalar field: expected x of dimension " + std::to_string(field.input_dim()) + ", got " +
                         std::to_string(x.size()));
}

}  // namespace

// ---------------------------------------------------------------- model

std::size_t ScalarFieldModel::param_count(int d, int w, int depth) {
    const auto D = static_cast<std::size_t>(d), W = static_cast<std::size_t>(w),
               L = static_cast<std::size_t>(depth);
    return (D + 1) * W + W + L * (3 * W + W * W) + W + 1;
}

ScalarFieldModel::ScalarFieldModel(int input_dim, int hidden_width, int depth, std::uint64_t seed,
                                   std::vector<double> params)
    : input_dim_(input_dim), width_(hidden_width), depth_(depth), seed_(seed), params_(std::move(params)) {
    if (input_dim < 1 || hidden_width < 1 || depth < 1)
        throw UsageError("scalar field: input_dim, hidden_width and depth must be positive");
    if (params_.size() != param_count(input_dim, hidden_width, depth))
        throw UsageError("scalar field: parameter vector has wrong length");
}

ScalarFieldModel::ScalarFieldModel(int input_dim, int hidden_width, int depth, std::uint64_t seed,
                                   double output_gain)
    : ScalarFieldModel(input_dim, hidden_width, depth, seed,
                       std::vector<double>(param_count(std::max(input_dim, 1), std::max(hidden_width, 1),
                                                       std::max(depth, 1)))) {
    if (!(output_gain >= 0.0) || !std::isfinite(output_gain))
        throw UsageError("scalar field: output gain must be finite and nonnegative");
    std::mt19937_64 rng(seed);
    std::size_t pos = 0;
    auto fill_uniform = [&](std::size_t n, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        for (std::size_t i = 0; i < n; ++i) params_[pos++] = u(rng);
    };
    auto fill_const = [&](std::size_t n, double v) {
        for (std::size_t i = 0; i < n; ++i) params_[pos++] = v;
    };
    const auto W = static_cast<std::size_t>(width_);
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(input_dim_ + 1));
    const double hid_bound = 1.0 / std::sqrt(static_cast<double>(width_));
    fill_uniform((static_cast<std::size_t>(input_dim_) + 1) * W, in_bound);
    fill_uniform(W, in_bound);
    for (int k = 0; k < depth_; ++k) {
        fill_const(W, 1.0);
        fill_const(W, 0.0);
        fill_uniform(W * W, hid_bound);
        fill_uniform(W, hid_bound);
    }
    fill_uniform(W, output_gain * hid_bound);
    fill_const(1, 0.0);
}

ScalarFieldModel ScalarFieldModel::zeros(int input_dim, int hidden_width, int depth) {
    return ScalarFieldModel(input_dim, hidden_width, depth, 0,
                            std::vector<double>(param_count(input_dim, hidden_width, depth), 0.0));
}

void ScalarFieldModel::set_params(std::vector<double> params) {
    if (params.size() != params_.size()) throw UsageError("scalar field: parameter vector has wrong length");
    params_ = std::move(params);
}

FieldParams ScalarFieldModel::bind(Tape& tape, bool trainable) const {
    FieldParams out;
    std::size_t pos = 0;
    auto take = [&](ad::Index rows, ad::Index cols) {
        Matrix m(rows, cols);
        for (ad::Index r = 0; r < rows; ++r)
            for (ad::Index c = 0; c < cols; ++c) m(r, c) = params_[pos++];
        out.blocks.push_back(trainable ? tape.variable(std::move(m)) : tape.constant(std::move(m)));
    };
    const ad::Index W = width_;
    take(input_dim_ + 1, W);
    take(1, W);
    for (int k = 0; k < depth_; ++k) {
        take(1, W);
        take(1, W);
        take(W, W);
        take(1, W);
    }
    take(W, 1);
    take(1, 1);
    return out;
}

std::vector<double> ScalarFieldModel::flatten_grad(const Tape& tape, const FieldParams& bound) const {
    std::vector<double> g;
    g.reserve(params_.size());
    for (const Var& block : bound.blocks) {
        const Matrix m = tape.grad(block);
        for (ad::Index r = 0; r < m.rows(); ++r)
            for (ad::Index c = 0; c < m.cols(); ++c) g.push_back(m(r, c));
    }
    return g;
}

std::vector<double> ScalarFieldModel::param_grad(Tape& tape, const FieldParams& bound, const Var& loss) const {
    tape.backward(loss);
    return flatten_grad(tape, bound);
}

FieldJet ScalarFieldModel::jet(Tape& tape, const Var& x, double t, const JetRequest& request) const {
    return jet(tape, bind(tape, false), x, t, request);
}

FieldJet ScalarFieldModel::jet(Tape& tape, const FieldParams& bound, const Var& x, double t,
                               const JetRequest& request) const {
    if (x.cols() != input_dim_)
        throw UsageError("scalar field: expected x with " + std::to_string(input_dim_) + " columns");
    const bool exact = request.laplacian == LaplacianMode::Exact;
    const bool hutch = request.laplacian == LaplacianMode::Hutchinson;
    if (exact && input_dim_ > request.exact_dim_cap)
        throw UsageError("scalar field: exact Laplacian capped at d <= " + std::to_string(request.exact_dim_cap) +
                         "; use the Hutchinson estimator");
    if (hutch && request.probes.empty()) throw UsageError("scalar field: Hutchinson mode needs at least one probe");

    const auto& blocks = bound.blocks;
    const Var& w_in = blocks[0];
    const Var& b_in = blocks[1];
    const Var w_x = ad::row_block(w_in, 0, input_dim_);
    const Var w_t = ad::row_block(w_in, input_dim_, 1);

    // Direction list: spatial axes, then time, then probes.
    Jet h;
    JetContext ctx;
    const bool spatial = request.gradient || exact;
    if (spatial) {
        for (int i = 0; i < input_dim_; ++i) {
            h.first.push_back(ad::row_block(w_in, i, 1));
            ctx.track.push_back(exact ? 1 : 0);
        }
    }
    const std::size_t time_dir = h.first.size();
    if (request.time_derivative) {
        h.first.push_back(w_t);
        ctx.track.push_back(0);
    }
    const std::size_t probe_dir = h.first.size();
    if (hutch) {
        for (const Matrix& v : request.probes) {
            if (v.cols() != input_dim_ || (v.rows() != 1 && v.rows() != x.rows()))
                throw UsageError("scalar field: probe shape mismatch");
            h.first.push_back(ad::matmul(tape.constant(v), w_x));
            ctx.track.push_back(1);
        }
    }
    h.second.assign(h.first.size(), Var());
    h.value = ad::matmul(x, w_x) + w_t * t + b_in;

    for (int k = 0; k < depth_; ++k) {
        const std::size_t base = 2 + 4 * static_cast<std::size_t>(k);
        const Jet normed = layer_norm_jet(h, blocks[base], blocks[base + 1], ctx);
        const Jet act = tanh_jet(affine(normed, blocks[base + 2], blocks[base + 3]), ctx);
        h.value = h.value + act.value;
        for (std::size_t d = 0; d < h.first.size(); ++d) {
            h.first[d] = h.first[d] + act.first[d];
            h.second[d] = h.second[d] + act.second[d];
        }
    }
    const Jet out = affine(h, blocks[blocks.size() - 2], blocks.back());

    // Directional derivatives can stay 1 x 1 when they never met a batch
    // dependent op; broadcast them to N x 1 for callers.
    const ad::Index n = x.rows();
    auto batch = [&](const Var& v) -> Var {
        if (v.is_zero()) return tape.constant(Matrix::Zero(n, 1));
        if (v.rows() == n) return v;
        return v + tape.constant(Matrix::Zero(n, 1));
    };

    FieldJet result;
    result.value = out.value;
    if (request.gradient)
        for (int i = 0; i < input_dim_; ++i) result.grad.push_back(batch(out.first[static_cast<std::size_t>(i)]));
    if (request.time_derivative) result.time_derivative = batch(out.first[time_dir]);
    if (exact) {
        Var lap;
        for (int i = 0; i < input_dim_; ++i) lap = lap + out.second[static_cast<std::size_t>(i)];
        result.laplacian = batch(lap);
    }
    if (hutch) {
        Var acc;
        for (std::size_t p = 0; p < request.probes.size(); ++p) {
            result.probe_quad.push_back(batch(out.second[probe_dir + p]));
            acc = acc + result.probe_quad.back();
        }
        result.laplacian = acc * (1.0 / static_cast<double>(request.probes.size()));
    }
    return result;
}

void ScalarFieldModel::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    put_u32(os, kCheckpointVersion);
    put_u32(os, static_cast<std::uint32_t>(input_dim_));
    put_u32(os, static_cast<std::uint32_t>(width_));
    put_u32(os, static_cast<std::uint32_t>(depth_));
    put_u32(os, static_cast<std::uint32_t>(activation()));
    put_u64(os, seed_);
    put_u64(os, params_.size());
    for (double p : params_) put_u64(os, std::bit_cast<std::uint64_t>(p));
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

ScalarFieldModel ScalarFieldModel::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kCheckpointMagic) throw ParseError("checkpoint: bad magic in " + path.string());
    const auto version = static_cast<std::uint32_t>(get_bytes(is, 4));
    if (version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    const auto d = static_cast<int>(get_bytes(is, 4));
    const auto w = static_cast<int>(get_bytes(is, 4));
    const auto depth = static_cast<int>(get_bytes(is, 4));
    const auto act = static_cast<std::uint32_t>(get_bytes(is, 4));
    if (act != static_cast<std::uint32_t>(Activation::Tanh))
        throw ParseError("checkpoint: unknown activation id " + std::to_string(act));
    const std::uint64_t seed = get_bytes(is, 8);
    const std::uint64_t count = get_bytes(is, 8);
    if (d < 1 || w < 1 || depth < 1 || count != param_count(d, w, depth))
        throw ParseError("checkpoint: header does not match parameter count");
    std::vector<double> params(count);
    for (auto& p : params) p = std::bit_cast<double>(get_bytes(is, 8));
    return ScalarFieldModel(d, w, depth, seed, std::move(params));
}

// ---------------------------------------------------------------- pointwise operators

double evaluate(const ScalarField& field, std::span<const double> x, double t) {
    check_dim(field, x);
    Tape tape;
    JetRequest req;
    req.gradient = false;
    req.time_derivative = false;
    return field.jet(tape, tape.constant(x_row(x)), t, req).value.scalar();
}

std::vector<double> grad_x(const ScalarField& field, std::span<const double> x, double t) {
    check_dim(field, x);
    Tape tape;
    JetRequest req;
    req.time_derivative = false;
    const FieldJet j = field.jet(tape, tape.constant(x_row(x)), t, req);
    std::vector<double> g;
    for (const Var& v : j.grad) g.push_back(v.scalar());
    return g;
}

double time_derivative(const ScalarField& field, std::span<const double> x, double t) {
    check_dim(field, x);
    Tape tape;
    JetRequest req;
    req.gradient = false;
    return field.jet(tape, tape.constant(x_row(x)), t, req).time_derivative.scalar();
}

double laplacian_exact(const ScalarField& field, std::span<const double> x, double t, int dim_cap) {
    check_dim(field, x);
    Tape tape;
    JetRequest req;
    req.gradient = false;
    req.time_derivative = false;
    req.laplacian = LaplacianMode::Exact;
    req.exact_dim_cap = dim_cap;
    return field.jet(tape, tape.constant(x_row(x)), t, req).laplacian.scalar();
}

Matrix rademacher(ad::Index rows, ad::Index cols, std::mt19937_64& rng) {
    Matrix m(rows, cols);
    for (ad::Index r = 0; r < rows; ++r)
        for (ad::Index c = 0; c < cols; ++c) m(r, c) = (rng() >> 63) ? 1.0 : -1.0;
    return m;
}

std::vector<double> hutchinson_samples(const ScalarField& field, std::span<const double> x, double t, int n_probes,
                                       std::mt19937_64& rng) {
    check_dim(field, x);
    if (n_probes < 1) throw UsageError("hutchinson: n_probes must be >= 1");
    // One batch row per probe, all at the same point.
    Tape tape;
    const Matrix xs = x_row(x).replicate(n_probes, 1);
    JetRequest req;
    req.gradient = false;
    req.time_derivative = false;
    req.laplacian = LaplacianMode::Hutchinson;
    req.probes.push_back(rademacher(n_probes, field.input_dim(), rng));
    const FieldJet j = field.jet(tape, tape.constant(xs), t, req);
    const Matrix& q = j.probe_quad.front().value();
    return std::vector<double>(q.data(), q.data() + q.size());
}

double laplacian_hutchinson(const ScalarField& field, std::span<const double> x, double t, int n_probes,
                            std::mt19937_64& rng) {
    const std::vector<double> s = hutchinson_samples(field, x, t, n_probes, rng);
    double acc = 0.0;
    for (double v : s) acc += v;
    return acc / static_cast<double>(s.size());
}

}  // namespace ruot
