#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// Every node holds a full Eigen matrix, so one tape entry covers a whole
// particle batch. Binary elementwise ops broadcast singleton dimensions
// (1 x c against n x c, n x 1 against n x c, 1 x 1 against anything) and
// the backward pass sums gradients back down to the operand's shape.
//
// A default-constructed Var is a structural zero: it carries no storage and
// the arithmetic helpers short-circuit on it. Jet propagation relies on this
// to skip second-order terms that are identically zero (e.g. after a linear
// layer).
//
// A Tape is single-use: after backward() it rejects new nodes and a second
// backward().

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

namespace ruot::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

class Var {
public:
    Var() = default;

    bool is_zero() const noexcept { return tape_ == nullptr; }
    Tape* tape() const noexcept { return tape_; }
    int id() const noexcept { return id_; }

    const Matrix& value() const;
    Index rows() const;
    Index cols() const;
    // Convenience for 1x1 nodes.
    double scalar() const;

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    Var constant(double value);
    // Leaf whose gradient is retained after backward().
    Var variable(Matrix value);

    const Matrix& value(const Var& v) const;
    const Matrix& value_at(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    // Seeds d(output)/d(output) = 1; output must be 1 x 1.
    void backward(const Var& output);
    // Seeds an arbitrary upstream gradient of the output's shape.
    void backward(const Var& output, const Matrix& seed);

    // Gradient of a variable leaf after backward(); zeros if it was unreachable.
    Matrix grad(const Var& v) const;

    bool consumed() const noexcept { return consumed_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool needs_grad(const Var& v) const;

    // Used by the op library. Inputs without a gradient path get no closure.
    Var push(Matrix value, bool needs_grad, Backward backward);
    // Adds g to the gradient of node `id`, reducing broadcast dimensions.
    void accumulate(int id, const Matrix& g);

private:
    struct Node {
        Matrix value;
        bool needs_grad = false;
        bool is_variable = false;
        Backward backward;
    };

    void check_open() const;

    std::deque<Node> nodes_;
    std::vector<Matrix> grads_;
    bool consumed_ = false;
};

// ---- elementwise arithmetic (broadcasting) ----
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(const Var& a, double c);
Var operator*(double c, const Var& a);
Var operator+(const Var& a, double c);
Var operator+(double c, const Var& a);
Var operator-(const Var& a, double c);
Var operator-(double c, const Var& a);

Var square(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
// a^p elementwise; a must stay positive when p is not an integer.
Var pow(const Var& a, double p);

// Elementwise f with first derivative df. The result is differentiable once;
// use it only for maps whose own derivative is never needed on the tape.
Var map(const Var& a, const std::function<double(double)>& f,
        const std::function<double(double)>& df);

// ---- linear algebra and reductions ----
Var matmul(const Var& a, const Var& b);
Var row_sum(const Var& a);   // n x c -> n x 1
Var row_mean(const Var& a);  // n x c -> n x 1
Var col_sum(const Var& a);   // n x c -> 1 x c
Var sum(const Var& a);       // -> 1 x 1
Var mean(const Var& a);      // -> 1 x 1
// Frobenius inner product with a constant matrix of the same shape.
Var dot(const Var& a, const Matrix& weights);

// ---- structure ----
Var hcat(const std::vector<Var>& columns);
Var col(const Var& a, Index j);
Var row_block(const Var& a, Index start, Index count);

}  // namespace ruot::ad
