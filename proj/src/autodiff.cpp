#include "ruot/autodiff.hpp"

#include "ruot/error.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace ruot::ad {

namespace {

Tape* tape_of(const Var& a, const Var& b) {
    if (!a.is_zero() && !b.is_zero() && a.tape() != b.tape())
        throw UsageError("autodiff: operands recorded on different tapes");
    return a.is_zero() ? b.tape() : a.tape();
}

Index broadcast_dim(Index x, Index y, const char* op) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw UsageError(std::string("autodiff: incompatible shapes in ") + op);
}

// Materializes m at shape r x c by replicating singleton dimensions.
Matrix expand(const Matrix& m, Index r, Index c) {
    if (m.rows() == r && m.cols() == c) return m;
    return m.replicate(m.rows() == r ? 1 : r, m.cols() == c ? 1 : c);
}

enum class BinOp { Add, Sub, Mul };

template <class A, class B>
Matrix apply_same(const A& a, const B& b, BinOp op) {
    switch (op) {
        case BinOp::Add: return a + b;
        case BinOp::Sub: return a - b;
        case BinOp::Mul: return a.cwiseProduct(b);
    }
    return {};
}

// Elementwise a (op) b with broadcasting; fast paths for the shapes that
// dominate jet propagation.
Matrix broadcast_binary(const Matrix& a, const Matrix& b, BinOp op) {
    const Index r = broadcast_dim(a.rows(), b.rows(), "elementwise op");
    const Index c = broadcast_dim(a.cols(), b.cols(), "elementwise op");
    const bool a_full = a.rows() == r && a.cols() == c;
    const bool b_full = b.rows() == r && b.cols() == c;
    if (a_full && b_full) return apply_same(a, b, op);
    if (a_full && b.size() == 1) {
        const double s = b(0, 0);
        switch (op) {
            case BinOp::Add: return (a.array() + s).matrix();
            case BinOp::Sub: return (a.array() - s).matrix();
            case BinOp::Mul: return a * s;
        }
    }
    if (b_full && a.size() == 1) {
        const double s = a(0, 0);
        switch (op) {
            case BinOp::Add: return (s + b.array()).matrix();
            case BinOp::Sub: return (s - b.array()).matrix();
            case BinOp::Mul: return b * s;
        }
    }
    if (a_full && b.rows() == 1) {
        Matrix out(r, c);
        for (Index j = 0; j < c; ++j) {
            const double s = b(0, j);
            switch (op) {
                case BinOp::Add: out.col(j) = a.col(j).array() + s; break;
                case BinOp::Sub: out.col(j) = a.col(j).array() - s; break;
                case BinOp::Mul: out.col(j) = a.col(j) * s; break;
            }
        }
        return out;
    }
    if (a_full && b.cols() == 1) {
        Matrix out(r, c);
        for (Index j = 0; j < c; ++j) {
            switch (op) {
                case BinOp::Add: out.col(j) = a.col(j) + b.col(0); break;
                case BinOp::Sub: out.col(j) = a.col(j) - b.col(0); break;
                case BinOp::Mul: out.col(j) = a.col(j).cwiseProduct(b.col(0)); break;
            }
        }
        return out;
    }
    return apply_same(expand(a, r, c), expand(b, r, c), op);
}

Var unary(const Var& a, Matrix value, std::function<Matrix(const Matrix& x, const Matrix& y,
                                                           const Matrix& g)> dfn) {
    Tape* t = a.tape();
    const int ia = a.id();
    const bool ng = t->needs_grad(a);
    // The output node id is the next slot; closures read their own value back.
    const int self = static_cast<int>(t->size());
    return t->push(std::move(value), ng, [ia, self, dfn = std::move(dfn)](Tape& tp, const Matrix& g) {
        tp.accumulate(ia, dfn(tp.value_at(ia), tp.value_at(self), g));
    });
}

void require_nonzero(const Var& a, const char* op) {
    if (a.is_zero())
        throw UsageError(std::string("autodiff: ") + op + " of a structural zero is not representable");
}

}  // namespace

// ---------------------------------------------------------------- Var

const Matrix& Var::value() const {
    if (is_zero()) throw UsageError("autodiff: structural zero has no value");
    return tape_->value(*this);
}
Index Var::rows() const { return value().rows(); }
Index Var::cols() const { return value().cols(); }
double Var::scalar() const {
    const Matrix& v = value();
    if (v.size() != 1) throw UsageError("autodiff: scalar() on a non-1x1 node");
    return v(0, 0);
}

// ---------------------------------------------------------------- Tape

void Tape::check_open() const {
    if (consumed_) throw UsageError("autodiff: tape already consumed by backward()");
}

Var Tape::push(Matrix value, bool needs_grad, Backward backward) {
    check_open();
    Node node;
    node.value = std::move(value);
    node.needs_grad = needs_grad;
    if (needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::variable(Matrix value) {
    Var v = push(std::move(value), true, nullptr);
    nodes_.back().is_variable = true;
    return v;
}

const Matrix& Tape::value(const Var& v) const {
    if (v.tape() != this) throw UsageError("autodiff: node belongs to another tape");
    return nodes_[static_cast<std::size_t>(v.id())].value;
}

bool Tape::needs_grad(const Var& v) const {
    return !v.is_zero() && nodes_[static_cast<std::size_t>(v.id())].needs_grad;
}

void Tape::accumulate(int id, const Matrix& g) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.needs_grad) return;
    const Index r = node.value.rows(), c = node.value.cols();
    Matrix& acc = grads_[static_cast<std::size_t>(id)];
    auto add = [&acc](const auto& m) {
        if (acc.size() == 0)
            acc = m;
        else
            acc += m;
    };
    if (g.rows() == r && g.cols() == c) {
        add(g);
    } else if (r == 1 && c == 1) {
        add(Matrix::Constant(1, 1, g.sum()));
    } else if (r == 1 && g.cols() == c) {
        add(g.colwise().sum());
    } else if (c == 1 && g.rows() == r) {
        add(g.rowwise().sum());
    } else {
        throw UsageError("autodiff: gradient shape does not reduce to node shape");
    }
}

void Tape::backward(const Var& output) {
    if (output.is_zero()) throw UsageError("autodiff: backward() from a structural zero");
    if (output.rows() != 1 || output.cols() != 1)
        throw UsageError("autodiff: backward() without seed requires a 1x1 output");
    backward(output, Matrix::Ones(1, 1));
}

void Tape::backward(const Var& output, const Matrix& seed) {
    check_open();
    if (output.tape() != this) throw UsageError("autodiff: output belongs to another tape");
    const auto out = static_cast<std::size_t>(output.id());
    if (seed.rows() != nodes_[out].value.rows() || seed.cols() != nodes_[out].value.cols())
        throw UsageError("autodiff: seed shape mismatch");
    consumed_ = true;
    grads_.assign(nodes_.size(), Matrix());
    if (!nodes_[out].needs_grad) return;
    grads_[out] = seed;
    for (auto id = static_cast<long>(out); id >= 0; --id) {
        Node& node = nodes_[static_cast<std::size_t>(id)];
        Matrix& g = grads_[static_cast<std::size_t>(id)];
        if (!node.needs_grad || g.size() == 0 || node.is_variable) continue;
        if (node.backward) node.backward(*this, g);
        g.resize(0, 0);
    }
}

Matrix Tape::grad(const Var& v) const {
    if (v.tape() != this) throw UsageError("autodiff: node belongs to another tape");
    if (!consumed_) throw UsageError("autodiff: grad() before backward()");
    const auto idx = static_cast<std::size_t>(v.id());
    if (!nodes_[idx].is_variable) throw UsageError("autodiff: grad() is kept for variables only");
    if (idx < grads_.size() && grads_[idx].size() != 0) return grads_[idx];
    return Matrix::Zero(nodes_[idx].value.rows(), nodes_[idx].value.cols());
}

// ---------------------------------------------------------------- arithmetic

Var operator+(const Var& a, const Var& b) {
    if (a.is_zero()) return b;
    if (b.is_zero()) return a;
    Tape* t = tape_of(a, b);
    const int ia = a.id(), ib = b.id();
    return t->push(broadcast_binary(a.value(), b.value(), BinOp::Add),
                   t->needs_grad(a) || t->needs_grad(b), [ia, ib](Tape& tp, const Matrix& g) {
                       tp.accumulate(ia, g);
                       tp.accumulate(ib, g);
                   });
}

Var operator-(const Var& a) {
    if (a.is_zero()) return a;
    Tape* t = a.tape();
    const int ia = a.id();
    return t->push(-a.value(), t->needs_grad(a),
                   [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, -g); });
}

Var operator-(const Var& a, const Var& b) {
    if (b.is_zero()) return a;
    if (a.is_zero()) return -b;
    Tape* t = tape_of(a, b);
    const int ia = a.id(), ib = b.id();
    return t->push(broadcast_binary(a.value(), b.value(), BinOp::Sub),
                   t->needs_grad(a) || t->needs_grad(b), [ia, ib](Tape& tp, const Matrix& g) {
                       tp.accumulate(ia, g);
                       tp.accumulate(ib, -g);
                   });
}

Var operator*(const Var& a, const Var& b) {
    if (a.is_zero() || b.is_zero()) return Var();
    Tape* t = tape_of(a, b);
    const int ia = a.id(), ib = b.id();
    const bool ga = t->needs_grad(a), gb = t->needs_grad(b);
    return t->push(broadcast_binary(a.value(), b.value(), BinOp::Mul), ga || gb,
                   [ia, ib, ga, gb](Tape& tp, const Matrix& g) {
                       if (ga) tp.accumulate(ia, broadcast_binary(g, tp.value_at(ib), BinOp::Mul));
                       if (gb) tp.accumulate(ib, broadcast_binary(g, tp.value_at(ia), BinOp::Mul));
                   });
}

Var operator*(const Var& a, double c) {
    if (a.is_zero()) return a;
    Tape* t = a.tape();
    const int ia = a.id();
    return t->push(a.value() * c, t->needs_grad(a),
                   [ia, c](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * c); });
}

Var operator*(double c, const Var& a) { return a * c; }

Var operator+(const Var& a, double c) {
    require_nonzero(a, "scalar shift");
    Tape* t = a.tape();
    const int ia = a.id();
    return t->push((a.value().array() + c).matrix(), t->needs_grad(a),
                   [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); });
}

Var operator+(double c, const Var& a) { return a + c; }
Var operator-(const Var& a, double c) { return a + (-c); }
Var operator-(double c, const Var& a) { return (-a) + c; }

Var square(const Var& a) {
    if (a.is_zero()) return a;
    return unary(a, a.value().cwiseAbs2(), [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return 2.0 * g.cwiseProduct(x);
    });
}

Var tanh(const Var& a) {
    if (a.is_zero()) return a;
    return unary(a, a.value().array().tanh().matrix(),
                 [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
                     return (g.array() * (1.0 - y.array().square())).matrix();
                 });
}

Var exp(const Var& a) {
    require_nonzero(a, "exp");
    return unary(a, a.value().array().exp().matrix(),
                 [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix { return g.cwiseProduct(y); });
}

Var log(const Var& a) {
    require_nonzero(a, "log");
    return unary(a, a.value().array().log().matrix(),
                 [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
                     return (g.array() / x.array()).matrix();
                 });
}

Var abs(const Var& a) {
    if (a.is_zero()) return a;
    return unary(a, a.value().cwiseAbs(), [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return (g.array() * x.array().sign()).matrix();
    });
}

Var pow(const Var& a, double p) {
    require_nonzero(a, "pow");
    return unary(a, a.value().array().pow(p).matrix(),
                 [p](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
                     return (g.array() * p * x.array().pow(p - 1.0)).matrix();
                 });
}

Var map(const Var& a, const std::function<double(double)>& f, const std::function<double(double)>& df) {
    require_nonzero(a, "map");
    return unary(a, a.value().unaryExpr(f), [df](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return g.cwiseProduct(x.unaryExpr(df));
    });
}

// ---------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
    if (a.is_zero() || b.is_zero()) return Var();
    Tape* t = tape_of(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.cols() != bv.rows()) throw UsageError("autodiff: matmul inner dimension mismatch");
    const int ia = a.id(), ib = b.id();
    const bool ga = t->needs_grad(a), gb = t->needs_grad(b);
    Matrix out = av * bv;
    return t->push(std::move(out), ga || gb, [ia, ib, ga, gb](Tape& tp, const Matrix& g) {
        if (ga) tp.accumulate(ia, g * tp.value_at(ib).transpose());
        if (gb) tp.accumulate(ib, tp.value_at(ia).transpose() * g);
    });
}

Var row_sum(const Var& a) {
    if (a.is_zero()) return a;
    Tape* t = a.tape();
    const int ia = a.id();
    const Index c = a.cols();
    return t->push(a.value().rowwise().sum(), t->needs_grad(a), [ia, c](Tape& tp, const Matrix& g) {
        tp.accumulate(ia, g.replicate(1, c));
    });
}

Var row_mean(const Var& a) {
    if (a.is_zero()) return a;
    const double inv = 1.0 / static_cast<double>(a.cols());
    return row_sum(a) * inv;
}

Var col_sum(const Var& a) {
    if (a.is_zero()) return a;
    Tape* t = a.tape();
    const int ia = a.id();
    const Index r = a.rows();
    return t->push(a.value().colwise().sum(), t->needs_grad(a), [ia, r](Tape& tp, const Matrix& g) {
        tp.accumulate(ia, g.replicate(r, 1));
    });
}

Var sum(const Var& a) {
    if (a.is_zero()) return a;
    Tape* t = a.tape();
    const int ia = a.id();
    const Index r = a.rows(), c = a.cols();
    return t->push(Matrix::Constant(1, 1, a.value().sum()), t->needs_grad(a),
                   [ia, r, c](Tape& tp, const Matrix& g) { tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0))); });
}

Var mean(const Var& a) {
    if (a.is_zero()) return a;
    return sum(a) * (1.0 / static_cast<double>(a.value().size()));
}

Var dot(const Var& a, const Matrix& weights) {
    if (a.is_zero()) return a;
    Tape* t = a.tape();
    if (weights.rows() != a.rows() || weights.cols() != a.cols())
        throw UsageError("autodiff: dot() weight shape mismatch");
    const int ia = a.id();
    return t->push(Matrix::Constant(1, 1, a.value().cwiseProduct(weights).sum()), t->needs_grad(a),
                   [ia, weights](Tape& tp, const Matrix& g) { tp.accumulate(ia, weights * g(0, 0)); });
}

// ---------------------------------------------------------------- structure

Var hcat(const std::vector<Var>& columns) {
    if (columns.empty()) throw UsageError("autodiff: hcat of nothing");
    Tape* t = nullptr;
    Index rows = -1;
    Index total = 0;
    for (const Var& v : columns) {
        if (v.is_zero()) throw UsageError("autodiff: hcat of a structural zero");
        if (t && v.tape() != t) throw UsageError("autodiff: hcat across tapes");
        t = v.tape();
        if (rows >= 0 && v.rows() != rows) throw UsageError("autodiff: hcat row mismatch");
        rows = v.rows();
        total += v.cols();
    }
    Matrix out(rows, total);
    std::vector<int> ids;
    std::vector<Index> widths;
    bool ng = false;
    Index offset = 0;
    for (const Var& v : columns) {
        out.middleCols(offset, v.cols()) = v.value();
        offset += v.cols();
        ids.push_back(v.id());
        widths.push_back(v.cols());
        ng = ng || t->needs_grad(v);
    }
    return t->push(std::move(out), ng, [ids, widths](Tape& tp, const Matrix& g) {
        Index off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            tp.accumulate(ids[k], g.middleCols(off, widths[k]));
            off += widths[k];
        }
    });
}

Var col(const Var& a, Index j) {
    require_nonzero(a, "col");
    Tape* t = a.tape();
    if (j < 0 || j >= a.cols()) throw UsageError("autodiff: column index out of range");
    const int ia = a.id();
    const Index r = a.rows(), c = a.cols();
    return t->push(a.value().col(j), t->needs_grad(a), [ia, j, r, c](Tape& tp, const Matrix& g) {
        Matrix full = Matrix::Zero(r, c);
        full.col(j) = g;
        tp.accumulate(ia, full);
    });
}

Var row_block(const Var& a, Index start, Index count) {
    require_nonzero(a, "row_block");
    Tape* t = a.tape();
    if (start < 0 || count < 1 || start + count > a.rows())
        throw UsageError("autodiff: row block out of range");
    const int ia = a.id();
    const Index r = a.rows(), c = a.cols();
    return t->push(a.value().middleRows(start, count), t->needs_grad(a),
                   [ia, start, count, r, c](Tape& tp, const Matrix& g) {
                       Matrix full = Matrix::Zero(r, c);
                       full.middleRows(start, count) = g;
                       tp.accumulate(ia, full);
                   });
}

}  // namespace ruot::ad
