#include "ruot/transport.hpp"

#include "ruot/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace ruot {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

WeightedCloud WeightedCloud::uniform(const MatrixXd& points) {
    if (points.rows() == 0) throw UsageError("weighted cloud: no points");
    return {points, VectorXd::Constant(points.rows(), 1.0 / static_cast<double>(points.rows()))};
}

WeightedCloud WeightedCloud::normalized(const MatrixXd& points, const VectorXd& weights) {
    if (points.rows() == 0 || points.rows() != weights.size()) throw UsageError("weighted cloud: size mismatch");
    const double total = weights.sum();
    if (!(total > 0.0)) throw UsageError("weighted cloud: total weight must be positive");
    return {points, weights / total};
}

void WeightedCloud::validate() const {
    if (points.rows() == 0) throw UsageError("weighted cloud: no points");
    if (masses.size() != points.rows()) throw UsageError("weighted cloud: masses and points differ in length");
    if ((masses.array() < 0.0).any()) throw UsageError("weighted cloud: negative mass");
    if (std::abs(masses.sum() - 1.0) > 1e-9) throw UsageError("weighted cloud: masses must sum to 1");
    if (!points.allFinite()) throw UsageError("weighted cloud: non-finite point");
}

namespace {

constexpr double kRelaxation = 1.8;
constexpr int kSymmetricIters = 30;

MatrixXd cost_matrix(const MatrixXd& x, const MatrixXd& y, GroundCost cost) {
    // |x|^2 + |y|^2 - 2 x.y, clamped at 0 against cancellation.
    MatrixXd c = (-2.0 * x * y.transpose()).colwise() + x.rowwise().squaredNorm();
    c.rowwise() += y.rowwise().squaredNorm().transpose();
    c = c.cwiseMax(0.0);
    if (cost == GroundCost::L2) c = c.cwiseSqrt();
    return c;
}

// Primal network simplex on the complete bipartite graph from supplies a to
// demands b with uncapacitated arcs. Tree bookkeeping (thread order,
// successor counts, last successors) follows the classic block-search
// implementation with an artificial root.
class NetworkSimplex {
public:
    NetworkSimplex(const VectorXd& a, const VectorXd& b, const MatrixXd& cost)
        : n1_(static_cast<int>(a.size())), n2_(static_cast<int>(b.size())) {
        node_num_ = n1_ + n2_;
        arc_num_ = n1_ * n2_;
        const int all = arc_num_ + node_num_;
        source_.resize(all);
        target_.resize(all);
        cost_.resize(all);
        flow_.assign(all, 0.0);
        state_.assign(all, kLower);
        supply_.resize(node_num_ + 1);
        pi_.resize(node_num_ + 1);
        parent_.resize(node_num_ + 1);
        pred_.resize(node_num_ + 1);
        thread_.resize(node_num_ + 1);
        rev_thread_.resize(node_num_ + 1);
        succ_num_.resize(node_num_ + 1);
        last_succ_.resize(node_num_ + 1);
        pred_dir_.resize(node_num_ + 1);

        double max_cost = 0.0;
        for (int i = 0; i < n1_; ++i) {
            for (int j = 0; j < n2_; ++j) {
                const int e = i * n2_ + j;
                source_[e] = i;
                target_[e] = n1_ + j;
                cost_[e] = cost(i, j);
                max_cost = std::max(max_cost, cost_[e]);
            }
        }
        double sum = 0.0;
        for (int i = 0; i < n1_; ++i) sum += (supply_[i] = a(i));
        for (int j = 0; j < n2_; ++j) sum += (supply_[n1_ + j] = -b(j));
        art_cost_ = (max_cost + 1.0) * node_num_;
        tol_ = 64.0 * std::numeric_limits<double>::epsilon() * art_cost_;
        block_size_ = std::max(10, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(arc_num_)))));

        root_ = node_num_;
        parent_[root_] = -1;
        pred_[root_] = -1;
        thread_[root_] = 0;
        rev_thread_[0] = root_;
        succ_num_[root_] = node_num_ + 1;
        last_succ_[root_] = root_ - 1;
        supply_[root_] = -sum;
        pi_[root_] = 0.0;
        for (int u = 0, e = arc_num_; u != node_num_; ++u, ++e) {
            parent_[u] = root_;
            pred_[u] = e;
            thread_[u] = u + 1;
            rev_thread_[u + 1] = u;
            succ_num_[u] = 1;
            last_succ_[u] = u;
            state_[e] = kTree;
            if (supply_[u] >= 0.0) {
                pred_dir_[u] = kUp;
                pi_[u] = 0.0;
                source_[e] = u;
                target_[e] = root_;
                flow_[e] = supply_[u];
                cost_[e] = 0.0;
            } else {
                pred_dir_[u] = kDown;
                pi_[u] = art_cost_;
                source_[e] = root_;
                target_[e] = u;
                flow_[e] = -supply_[u];
                cost_[e] = art_cost_;
            }
        }
    }

    void run() {
        while (find_entering_arc()) {
            find_join_node();
            if (!find_leaving_arc()) throw std::logic_error("network simplex: unbounded problem");
            change_flow();
            update_tree_structure();
            update_potential();
            ++pivots_;
        }
        for (int e = arc_num_; e < arc_num_ + node_num_; ++e)
            if (flow_[e] > 1e-9) throw UsageError("emd: supplies and demands do not balance");
    }

    double total_cost() const {
        double c = 0.0;
        for (int e = 0; e < arc_num_; ++e) c += flow_[e] * cost_[e];
        return c;
    }
    double flow(int i, int j) const { return flow_[i * n2_ + j]; }
    double potential(int node) const { return pi_[node]; }
    long pivots() const { return pivots_; }

private:
    static constexpr signed char kUpper = -1, kTree = 0, kLower = 1;
    static constexpr signed char kUp = 1, kDown = -1;

    bool find_entering_arc() {
        double min = -tol_;
        int cnt = block_size_;
        bool found = false;
        int e;
        for (e = next_arc_; e != arc_num_; ++e) {
            const double c = state_[e] * (cost_[e] + pi_[source_[e]] - pi_[target_[e]]);
            if (c < min) {
                min = c;
                in_arc_ = e;
                found = true;
            }
            if (--cnt == 0) {
                if (found) goto search_end;
                cnt = block_size_;
            }
        }
        for (e = 0; e != next_arc_; ++e) {
            const double c = state_[e] * (cost_[e] + pi_[source_[e]] - pi_[target_[e]]);
            if (c < min) {
                min = c;
                in_arc_ = e;
                found = true;
            }
            if (--cnt == 0) {
                if (found) goto search_end;
                cnt = block_size_;
            }
        }
        if (!found) return false;
    search_end:
        next_arc_ = e == arc_num_ ? 0 : e;
        return true;
    }

    void find_join_node() {
        int u = source_[in_arc_], v = target_[in_arc_];
        while (u != v) {
            if (succ_num_[u] < succ_num_[v])
                u = parent_[u];
            else
                v = parent_[v];
        }
        join_ = u;
    }

    bool find_leaving_arc() {
        int first, second;
        if (state_[in_arc_] == kLower) {
            first = source_[in_arc_];
            second = target_[in_arc_];
        } else {
            first = target_[in_arc_];
            second = source_[in_arc_];
        }
        const double inf = std::numeric_limits<double>::infinity();
        delta_ = inf;
        int result = 0;
        for (int u = first; u != join_; u = parent_[u]) {
            const double d = pred_dir_[u] == kDown ? inf : flow_[pred_[u]];
            if (d < delta_) {
                delta_ = d;
                u_out_ = u;
                result = 1;
            }
        }
        for (int u = second; u != join_; u = parent_[u]) {
            const double d = pred_dir_[u] == kUp ? inf : flow_[pred_[u]];
            if (d <= delta_) {
                delta_ = d;
                u_out_ = u;
                result = 2;
            }
        }
        if (result == 1) {
            u_in_ = first;
            v_in_ = second;
        } else {
            u_in_ = second;
            v_in_ = first;
        }
        return result != 0;
    }

    void change_flow() {
        if (delta_ > 0.0) {
            const double val = state_[in_arc_] * delta_;
            flow_[in_arc_] += val;
            for (int u = source_[in_arc_]; u != join_; u = parent_[u]) flow_[pred_[u]] -= pred_dir_[u] * val;
            for (int u = target_[in_arc_]; u != join_; u = parent_[u]) flow_[pred_[u]] += pred_dir_[u] * val;
        }
        state_[in_arc_] = kTree;
        const int out = pred_[u_out_];
        flow_[out] = 0.0;
        state_[out] = kLower;
    }

    void update_tree_structure() {
        const int old_rev_thread = rev_thread_[u_out_];
        const int old_succ_num = succ_num_[u_out_];
        const int old_last_succ = last_succ_[u_out_];
        v_out_ = parent_[u_out_];

        if (u_in_ == u_out_) {
            parent_[u_in_] = v_in_;
            pred_[u_in_] = in_arc_;
            pred_dir_[u_in_] = u_in_ == source_[in_arc_] ? kUp : kDown;
            if (thread_[v_in_] != u_out_) {
                int after = thread_[old_last_succ];
                thread_[old_rev_thread] = after;
                rev_thread_[after] = old_rev_thread;
                after = thread_[v_in_];
                thread_[v_in_] = u_out_;
                rev_thread_[u_out_] = v_in_;
                thread_[old_last_succ] = after;
                rev_thread_[after] = old_last_succ;
            }
        } else {
            const int thread_continue = old_rev_thread == v_in_ ? thread_[old_last_succ] : thread_[v_in_];

            // Re-hang the stem from u_in up to u_out under v_in.
            int stem = u_in_;
            int par_stem = v_in_;
            int last = last_succ_[u_in_];
            int after = thread_[last];
            thread_[v_in_] = u_in_;
            dirty_revs_.clear();
            dirty_revs_.push_back(v_in_);
            while (stem != u_out_) {
                const int next_stem = parent_[stem];
                thread_[last] = next_stem;
                dirty_revs_.push_back(last);

                const int before = rev_thread_[stem];
                thread_[before] = after;
                rev_thread_[after] = before;

                parent_[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;

                last = last_succ_[stem] == last_succ_[par_stem] ? rev_thread_[par_stem] : last_succ_[stem];
                after = thread_[last];
            }
            parent_[u_out_] = par_stem;
            thread_[last] = thread_continue;
            rev_thread_[thread_continue] = last;
            last_succ_[u_out_] = last;

            if (old_rev_thread != v_in_) {
                thread_[old_rev_thread] = after;
                rev_thread_[after] = old_rev_thread;
            }
            for (int u : dirty_revs_) rev_thread_[thread_[u]] = u;

            int tmp_sc = 0;
            const int tmp_ls = last_succ_[u_out_];
            for (int u = u_out_, p = parent_[u]; u != u_in_; u = p, p = parent_[u]) {
                pred_[u] = pred_[p];
                pred_dir_[u] = static_cast<signed char>(-pred_dir_[p]);
                tmp_sc += succ_num_[u] - succ_num_[p];
                succ_num_[u] = tmp_sc;
                last_succ_[p] = tmp_ls;
            }
            pred_[u_in_] = in_arc_;
            pred_dir_[u_in_] = u_in_ == source_[in_arc_] ? kUp : kDown;
            succ_num_[u_in_] = old_succ_num;
        }

        const int up_limit_out = last_succ_[join_] == v_in_ ? join_ : -1;
        const int last_succ_out = last_succ_[u_out_];
        for (int u = v_in_; u != -1 && last_succ_[u] == v_in_; u = parent_[u]) last_succ_[u] = last_succ_out;

        if (join_ != old_rev_thread && v_in_ != old_rev_thread) {
            for (int u = v_out_; u != up_limit_out && last_succ_[u] == old_last_succ; u = parent_[u])
                last_succ_[u] = old_rev_thread;
        } else if (last_succ_out != old_last_succ) {
            for (int u = v_out_; u != up_limit_out && last_succ_[u] == old_last_succ; u = parent_[u])
                last_succ_[u] = last_succ_out;
        }

        for (int u = v_in_; u != join_; u = parent_[u]) succ_num_[u] += old_succ_num;
        for (int u = v_out_; u != join_; u = parent_[u]) succ_num_[u] -= old_succ_num;
    }

    void update_potential() {
        const double sigma = pi_[v_in_] - pi_[u_in_] - pred_dir_[u_in_] * cost_[in_arc_];
        const int end = thread_[last_succ_[u_in_]];
        for (int u = u_in_; u != end; u = thread_[u]) pi_[u] += sigma;
    }

    int n1_, n2_, node_num_ = 0, arc_num_ = 0, root_ = 0;
    double art_cost_ = 0.0, tol_ = 0.0;
    int block_size_ = 10, next_arc_ = 0;
    long pivots_ = 0;

    std::vector<int> source_, target_;
    std::vector<double> cost_, flow_;
    std::vector<signed char> state_;
    std::vector<double> supply_, pi_;
    std::vector<int> parent_, pred_, thread_, rev_thread_, succ_num_, last_succ_;
    std::vector<signed char> pred_dir_;
    std::vector<int> dirty_revs_;

    int in_arc_ = 0, join_ = 0, u_in_ = 0, v_in_ = 0, u_out_ = 0, v_out_ = 0;
    double delta_ = 0.0;
};

void check_pair(const WeightedCloud& a, const WeightedCloud& b) {
    a.validate();
    b.validate();
    if (a.dim() != b.dim()) throw UsageError("transport: clouds differ in dimension");
}

// out_i = -eps log sum_j exp(logw_j + (h_j - C_ij) / eps)
VectorXd softmin(const MatrixXd& c, const VectorXd& h, const VectorXd& logw, double eps) {
    const VectorXd shift = h / eps + logw;
    MatrixXd arg = (-c / eps).rowwise() + shift.transpose();
    const VectorXd mx = arg.rowwise().maxCoeff();
    arg.colwise() -= mx;
    const VectorXd s = arg.array().exp().rowwise().sum();
    return -eps * (mx.array() + s.array().log()).matrix();
}

VectorXd safe_log(const VectorXd& m) {
    return m.unaryExpr([](double v) { return v > 0.0 ? std::log(v) : -std::numeric_limits<double>::infinity(); });
}

std::vector<double> eps_schedule(const MatrixXd& x, const MatrixXd& y, const SinkhornOptions& opts) {
    if (!(opts.blur > 0.0)) throw UsageError("sinkhorn: blur must be positive");
    if (!(opts.scaling > 0.0 && opts.scaling < 1.0)) throw UsageError("sinkhorn: scaling must lie in (0, 1)");
    const Eigen::RowVectorXd lo = x.colwise().minCoeff().cwiseMin(y.colwise().minCoeff());
    const Eigen::RowVectorXd hi = x.colwise().maxCoeff().cwiseMax(y.colwise().maxCoeff());
    const double diameter = (hi - lo).norm();
    const double target = opts.blur * opts.blur;
    std::vector<double> out;
    for (double e = diameter * diameter; e > target; e *= opts.scaling * opts.scaling) out.push_back(e);
    out.push_back(target);
    return out;
}

struct SelfSolve {
    VectorXd p;
    bool converged = true;
    int iterations = 0;
};

SelfSolve solve_self(const MatrixXd& c, const VectorXd& logw, const std::vector<double>& schedule,
                     const SinkhornOptions& opts) {
    SelfSolve s;
    s.p = VectorXd::Zero(c.rows());
    for (std::size_t k = 0; k + 1 < schedule.size(); ++k) s.p = 0.5 * (s.p + softmin(c, s.p, logw, schedule[k]));
    const double eps = schedule.back();
    s.converged = false;
    for (int it = 0; it < opts.max_iters; ++it) {
        const VectorXd next = 0.5 * (s.p + softmin(c, s.p, logw, eps));
        const double change = (next - s.p).cwiseAbs().maxCoeff();
        s.p = next;
        s.iterations = it + 1;
        if (change < opts.tol) {
            s.converged = true;
            break;
        }
    }
    // Final full update so p is the exact fixed-point map of itself.
    s.p = softmin(c, s.p, logw, eps);
    return s;
}

}  // namespace

EmdSolution emd_solve(const WeightedCloud& a, const WeightedCloud& b, GroundCost cost) {
    check_pair(a, b);
    if (static_cast<double>(a.size()) * static_cast<double>(b.size()) > kEmdMaxPairs)
        throw UsageError("emd: problem exceeds the exact-solver size cap; use sinkhorn");
    const MatrixXd c = cost_matrix(a.points, b.points, cost);
    // Rebalance the demands so both sides carry exactly the same total.
    VectorXd demand = b.masses * (a.masses.sum() / b.masses.sum());
    NetworkSimplex ns(a.masses, demand, c);
    ns.run();
    EmdSolution sol;
    sol.cost = ns.total_cost();
    sol.pivots = ns.pivots();
    sol.plan.resize(a.size(), b.size());
    for (Index i = 0; i < a.size(); ++i)
        for (Index j = 0; j < b.size(); ++j) sol.plan(i, j) = ns.flow(static_cast<int>(i), static_cast<int>(j));
    sol.u.resize(a.size());
    sol.v.resize(b.size());
    for (Index i = 0; i < a.size(); ++i) sol.u(i) = -ns.potential(static_cast<int>(i));
    for (Index j = 0; j < b.size(); ++j) sol.v(j) = ns.potential(static_cast<int>(a.size() + j));
    return sol;
}

double emd(const WeightedCloud& a, const WeightedCloud& b, GroundCost cost) { return emd_solve(a, b, cost).cost; }

double wasserstein1(const WeightedCloud& a, const WeightedCloud& b) { return emd(a, b, GroundCost::L2); }

double wasserstein2(const WeightedCloud& a, const WeightedCloud& b) {
    return std::sqrt(std::max(0.0, emd(a, b, GroundCost::L2sq)));
}

double bb_action_oracle(const WeightedCloud& a, const WeightedCloud& b) {
    return 0.5 * emd(a, b, GroundCost::L2sq);
}

SinkhornSelf sinkhorn_self(const WeightedCloud& b, const SinkhornOptions& opts) {
    b.validate();
    const MatrixXd c = 0.5 * cost_matrix(b.points, b.points, GroundCost::L2sq);
    const SelfSolve s = solve_self(c, safe_log(b.masses), eps_schedule(b.points, b.points, opts), opts);
    SinkhornSelf out;
    out.potential = s.p;
    out.value = 2.0 * b.masses.dot(s.p);
    out.converged = s.converged;
    return out;
}

SinkhornResult sinkhorn(const WeightedCloud& a, const WeightedCloud& b, const SinkhornOptions& opts,
                        bool with_gradient, const SinkhornSelf* b_self) {
    check_pair(a, b);
    const std::vector<double> schedule = eps_schedule(a.points, b.points, opts);
    const double eps = schedule.back();
    const VectorXd loga = safe_log(a.masses), logb = safe_log(b.masses);

    const MatrixXd cab = 0.5 * cost_matrix(a.points, b.points, GroundCost::L2sq);
    const MatrixXd cba = cab.transpose();
    VectorXd f = VectorXd::Zero(a.size()), g = VectorXd::Zero(b.size());
    // Symmetric averaged updates first, the same arithmetic as solve_self, so
    // that identical clouds reproduce the self potentials exactly. They stall
    // when the clouds differ, so after a fixed budget the solver switches to
    // over-relaxed alternating updates.
    auto averaged = [&](double e) {
        VectorXd next_f = 0.5 * (f + softmin(cab, g, logb, e));
        g = 0.5 * (g + softmin(cba, f, loga, e));
        const double change = (next_f - f).cwiseAbs().maxCoeff();
        f = std::move(next_f);
        return change;
    };
    for (std::size_t k = 0; k + 1 < schedule.size(); ++k) averaged(schedule[k]);
    SinkhornResult res;
    res.converged = false;
    for (int it = 0; it < std::min(kSymmetricIters, opts.max_iters); ++it) {
        res.iterations = it + 1;
        if (averaged(eps) < opts.tol) {
            res.converged = true;
            break;
        }
    }
    for (int it = res.iterations; !res.converged && it < opts.max_iters; ++it) {
        const VectorXd next = (1.0 - kRelaxation) * f + kRelaxation * softmin(cab, g, logb, eps);
        const double change = (next - f).cwiseAbs().maxCoeff();
        f = next;
        g = (1.0 - kRelaxation) * g + kRelaxation * softmin(cba, f, loga, eps);
        res.iterations = it + 1;
        if (change < opts.tol) res.converged = true;
    }
    g = softmin(cba, f, loga, eps);

    const MatrixXd caa = 0.5 * cost_matrix(a.points, a.points, GroundCost::L2sq);
    const SelfSolve sa = solve_self(caa, loga, eps_schedule(a.points, a.points, opts), opts);
    SinkhornSelf own;
    if (b_self == nullptr) {
        own = sinkhorn_self(b, opts);
        b_self = &own;
    } else if (b_self->potential.size() != b.size()) {
        throw UsageError("sinkhorn: cached self term does not match the target cloud");
    }
    res.converged = res.converged && sa.converged && b_self->converged;
    res.value = a.masses.dot(f - sa.p) + b.masses.dot(g - b_self->potential);

    if (with_gradient) {
        res.grad_masses = f - sa.p;
        // Transport plans in log space: log a_i + log b_j + (f_i + g_j - C_ij) / eps.
        MatrixXd pab = ((-cab / eps).colwise() + (f / eps + loga)).rowwise() + (g / eps + logb).transpose();
        pab = pab.array().exp();
        MatrixXd paa = ((-caa / eps).colwise() + (sa.p / eps + loga)).rowwise() + (sa.p / eps + loga).transpose();
        paa = paa.array().exp();
        const VectorXd rab = pab.rowwise().sum(), raa = paa.rowwise().sum();
        res.grad_points = a.points.array().colwise() * (rab - raa).array();
        res.grad_points.noalias() -= pab * b.points;
        res.grad_points.noalias() += paa * a.points;
    }
    return res;
}

}  // namespace ruot
