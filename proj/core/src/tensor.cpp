#include "avcap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace avcap {

namespace {

size_t numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (const int d : shape) n *= static_cast<size_t>(d);
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

NodePtr make_node(std::vector<int> shape, const char* op) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.resize(numel(n->shape));
    n->op = op;
    return n;
}

void check_shape_dims(const std::vector<int>& shape, const char* op) {
    for (const int d : shape) {
        if (d < 0) throw ShapeError(std::string(op) + ": negative dimension in " + shape_str(shape));
    }
}

void check_finite(const TensorNode& n) {
    for (const double v : n.value) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(n.op) + " produced a non-finite value");
        }
    }
}

void ensure_grad(TensorNode& n) {
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

void accumulate(const NodePtr& parent, const std::vector<double>& contrib) {
    if (!parent->requires_grad) return;
    ensure_grad(*parent);
    for (size_t i = 0; i < contrib.size(); ++i) parent->grad[i] += contrib[i];
}

bool tracked(const Tensor& t) { return t.requires_grad(); }

void require_rank(const Tensor& t, int r, const char* op) {
    if (t.rank() != r) {
        throw ShapeError(std::string(op) + ": expected rank-" + std::to_string(r) +
                         " tensor, got " + shape_str(t.shape()));
    }
}

// rows x cols view of the last axis, for rank-1 and rank-2 tensors
std::pair<int, int> row_view(const Tensor& t, const char* op) {
    if (t.rank() == 1) return {1, t.dim(0)};
    if (t.rank() == 2) return {t.dim(0), t.dim(1)};
    throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    check_shape_dims(shape, "zeros");
    auto n = make_node(std::move(shape), "leaf");
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(std::vector<int> shape, double fill, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), fill);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    check_shape_dims(shape, "from_data");
    if (numel(shape) != data.size()) {
        throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    check_finite(*n);
    return Tensor(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double std, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = rng.gaussian(0.0, std);
    return t;
}

std::vector<double>& Tensor::grad() {
    ensure_grad(*node_);
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    ensure_grad(*node_);
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item: tensor has " + std::to_string(size()) + " values, expected 1");
    }
    return node_->value[0];
}

// ---- Graph -----------------------------------------------------------------

Graph Graph::trace(const Tensor& root) {
    Graph g;
    if (!root.defined()) throw ContractError("trace: undefined tensor");
    std::unordered_set<TensorNode*> visited;
    // iterative post-order so parents always precede their consumers
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            TensorNode* parent = node->parents[next_child].get();
            ++next_child;
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            g.order_.push_back(node);
            stack.pop_back();
        }
    }
    return g;
}

void Graph::run_backward(double seed) {
    if (order_.empty()) return;
    TensorNode* root = order_.back();
    ensure_grad(*root);
    for (auto& v : root->grad) v += seed;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward) {
            ensure_grad(*n);
            n->backward(*n);
        }
    }
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.node()->backward && loss.node()->parents.empty()) {
        throw ContractError("backward: loss is not connected to a graph");
    }
    Graph::trace(loss).run_backward(1.0);
}

// ---- kernels ---------------------------------------------------------------

namespace kernels {

void mm_nn(const double* a, const double* b, double* c, int n, int k, int m, bool accumulate) {
    for (int i = 0; i < n; ++i) {
        double* ci = c + static_cast<size_t>(i) * m;
        if (!accumulate) std::fill(ci, ci + m, 0.0);
        const double* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
}

void mm_nt(const double* a, const double* b, double* c, int n, int k, int m, bool accumulate) {
    for (int i = 0; i < n; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

void mm_tn(const double* a, const double* b, double* c, int n, int k, int m, bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<size_t>(k) * m, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* bi = b + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace kernels

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    auto out = make_node({n, m}, "matmul");
    kernels::mm_nn(a.data().data(), b.data().data(), out->value.data(), n, k, m, false);
    check_finite(*out);
    if (tracked(a) || tracked(b)) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        NodePtr an = a.node(), bn = b.node();
        out->backward = [an, bn, n, k, m](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                kernels::mm_nt(self.grad.data(), bn->value.data(), an->grad.data(), n, m, k, true);
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                kernels::mm_tn(an->value.data(), self.grad.data(), bn->grad.data(), n, k, m, true);
            }
        };
    }
    return Tensor(out);
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Bwd bwd) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    auto out = make_node(a.shape(), op);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = fwd(av[i], bv[i]);
    check_finite(*out);
    if (tracked(a) || tracked(b)) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        NodePtr an = a.node(), bn = b.node();
        out->backward = [an, bn, bwd](TensorNode& self) {
            const bool need_a = an->requires_grad, need_b = bn->requires_grad;
            if (need_a) ensure_grad(*an);
            if (need_b) ensure_grad(*bn);
            for (size_t i = 0; i < self.grad.size(); ++i) {
                auto [da, db] = bwd(an->value[i], bn->value[i]);
                if (need_a) an->grad[i] += self.grad[i] * da;
                if (need_b) bn->grad[i] += self.grad[i] * db;
            }
        };
    }
    return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y) { return std::pair<double, double>{y, x}; });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    require_rank(a, 2, "add_bias");
    require_rank(bias, 1, "add_bias");
    if (a.dim(1) != bias.dim(0)) {
        throw ShapeError("add_bias: " + shape_str(a.shape()) + " vs bias " +
                         shape_str(bias.shape()));
    }
    const int n = a.dim(0), m = a.dim(1);
    auto out = make_node({n, m}, "add_bias");
    const auto& av = a.data();
    const auto& bv = bias.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out->value[static_cast<size_t>(i) * m + j] = av[static_cast<size_t>(i) * m + j] + bv[j];
    check_finite(*out);
    if (tracked(a) || tracked(bias)) {
        out->requires_grad = true;
        out->parents = {a.node(), bias.node()};
        NodePtr an = a.node(), bn = bias.node();
        out->backward = [an, bn, n, m](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) bn->grad[j] += self.grad[static_cast<size_t>(i) * m + j];
            }
        };
    }
    return Tensor(out);
}

Tensor scale(const Tensor& a, double s) {
    if (!std::isfinite(s)) throw DomainError("scale: non-finite factor");
    auto out = make_node(a.shape(), "scale");
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * s;
    check_finite(*out);
    if (tracked(a)) {
        out->requires_grad = true;
        out->parents = {a.node()};
        NodePtr an = a.node();
        out->backward = [an, s](TensorNode& self) {
            ensure_grad(*an);
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
        };
    }
    return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DomainError("concat: no inputs");
    const int rank = parts.front().rank();
    if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
    for (const auto& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat: mixed ranks");
        for (int d = 0; d < rank; ++d) {
            if (d != axis && p.dim(d) != parts.front().dim(d)) {
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts.front().shape()));
            }
        }
    }
    std::vector<int> out_shape = parts.front().shape();
    int total = 0;
    for (const auto& p : parts) total += p.dim(axis);
    out_shape[static_cast<size_t>(axis)] = total;
    auto out = make_node(out_shape, "concat");

    const int rows = (rank == 2) ? out_shape[0] : 1;
    const int cols = out_shape[static_cast<size_t>(rank) - 1];
    if (axis == rank - 1) {
        // column-wise: interleave each row
        int col_off = 0;
        for (const auto& p : parts) {
            const int pc = p.dim(axis);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < pc; ++j)
                    out->value[static_cast<size_t>(i) * cols + col_off + j] =
                        p.data()[static_cast<size_t>(i) * pc + j];
            col_off += pc;
        }
    } else {
        // row-wise: contiguous blocks
        size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p.data().begin(), p.data().end(), out->value.begin() + off);
            off += p.size();
        }
    }
    check_finite(*out);

    bool any = false;
    for (const auto& p : parts) any = any || tracked(p);
    if (any) {
        out->requires_grad = true;
        std::vector<NodePtr> ps;
        ps.reserve(parts.size());
        for (const auto& p : parts) ps.push_back(p.node());
        out->parents = ps;
        out->backward = [ps, axis, rank, rows, cols](TensorNode& self) {
            if (axis == rank - 1) {
                int col_off = 0;
                for (const auto& p : ps) {
                    const int pc = p->shape[static_cast<size_t>(axis)];
                    if (p->requires_grad) {
                        ensure_grad(*p);
                        for (int i = 0; i < rows; ++i)
                            for (int j = 0; j < pc; ++j)
                                p->grad[static_cast<size_t>(i) * pc + j] +=
                                    self.grad[static_cast<size_t>(i) * cols + col_off + j];
                    }
                    col_off += pc;
                }
            } else {
                size_t off = 0;
                for (const auto& p : ps) {
                    if (p->requires_grad) {
                        ensure_grad(*p);
                        for (size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[off + i];
                    }
                    off += p->value.size();
                }
            }
        };
    }
    return Tensor(out);
}

Tensor slice(const Tensor& a, int axis, int begin, int end) {
    const int rank = a.rank();
    if (axis < 0 || axis >= rank) throw ShapeError("slice: axis out of range");
    const int extent = a.dim(axis);
    if (begin < 0 || end < begin || end > extent) {
        throw DomainError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                          ") invalid for extent " + std::to_string(extent));
    }
    std::vector<int> out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = end - begin;
    auto out = make_node(out_shape, "slice");

    const int cols = a.dim(rank - 1);
    if (axis == rank - 1) {
        const int rows = (rank == 2) ? a.dim(0) : 1;
        const int oc = end - begin;
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < oc; ++j)
                out->value[static_cast<size_t>(i) * oc + j] =
                    a.data()[static_cast<size_t>(i) * cols + begin + j];
    } else {
        const size_t row_sz = static_cast<size_t>(cols);
        std::copy(a.data().begin() + static_cast<size_t>(begin) * row_sz,
                  a.data().begin() + static_cast<size_t>(end) * row_sz, out->value.begin());
    }
    // no finite check needed: values come from an already-validated tensor
    if (tracked(a)) {
        out->requires_grad = true;
        out->parents = {a.node()};
        NodePtr an = a.node();
        out->backward = [an, axis, begin, end, rank, cols](TensorNode& self) {
            ensure_grad(*an);
            if (axis == rank - 1) {
                const int rows = (rank == 2) ? an->shape[0] : 1;
                const int oc = end - begin;
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < oc; ++j)
                        an->grad[static_cast<size_t>(i) * cols + begin + j] +=
                            self.grad[static_cast<size_t>(i) * oc + j];
            } else {
                const size_t row_sz = static_cast<size_t>(cols);
                const size_t off = static_cast<size_t>(begin) * row_sz;
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[off + i] += self.grad[i];
            }
        };
    }
    return Tensor(out);
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const int n = a.dim(0), m = a.dim(1);
    auto out = make_node({m, n}, "transpose");
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out->value[static_cast<size_t>(j) * n + i] = a.data()[static_cast<size_t>(i) * m + j];
    if (tracked(a)) {
        out->requires_grad = true;
        out->parents = {a.node()};
        NodePtr an = a.node();
        out->backward = [an, n, m](TensorNode& self) {
            ensure_grad(*an);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j)
                    an->grad[static_cast<size_t>(i) * m + j] += self.grad[static_cast<size_t>(j) * n + i];
        };
    }
    return Tensor(out);
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    require_rank(table, 2, "embedding");
    const int vocab = table.dim(0), dim = table.dim(1);
    for (const int id : ids) {
        if (id < 0 || id >= vocab) {
            throw DomainError("embedding: id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(vocab));
        }
    }
    const int n = static_cast<int>(ids.size());
    auto out = make_node({n, dim}, "embedding");
    for (int i = 0; i < n; ++i)
        std::copy(table.data().begin() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * dim,
                  table.data().begin() + static_cast<size_t>(ids[static_cast<size_t>(i)] + 1) * dim,
                  out->value.begin() + static_cast<size_t>(i) * dim);
    if (tracked(table)) {
        out->requires_grad = true;
        out->parents = {table.node()};
        NodePtr tn = table.node();
        out->backward = [tn, ids, dim](TensorNode& self) {
            ensure_grad(*tn);
            for (size_t i = 0; i < ids.size(); ++i) {
                const size_t row = static_cast<size_t>(ids[i]) * dim;
                for (int j = 0; j < dim; ++j) tn->grad[row + j] += self.grad[i * dim + j];
            }
        };
    }
    return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    auto [rows, cols] = row_view(x, "layer_norm");
    require_rank(gamma, 1, "layer_norm");
    require_rank(beta, 1, "layer_norm");
    if (gamma.dim(0) != cols || beta.dim(0) != cols) {
        throw ShapeError("layer_norm: feature dim " + std::to_string(cols) +
                         " vs gamma " + shape_str(gamma.shape()) + ", beta " +
                         shape_str(beta.shape()));
    }
    auto out = make_node(x.shape(), "layer_norm");
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(static_cast<size_t>(rows));
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        double mu = 0.0;
        for (int j = 0; j < cols; ++j) mu += xv[off + j];
        mu /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = xv[off + j] - mu;
            var += d * d;
        }
        var /= cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = inv;
        for (int j = 0; j < cols; ++j) {
            const double xh = (xv[off + j] - mu) * inv;
            xhat[off + j] = xh;
            out->value[off + j] = gv[j] * xh + bv[j];
        }
    }
    check_finite(*out);
    if (tracked(x) || tracked(gamma) || tracked(beta)) {
        out->requires_grad = true;
        out->parents = {x.node(), gamma.node(), beta.node()};
        NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
        out->backward = [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                         cols](TensorNode& self) {
            if (gn->requires_grad) ensure_grad(*gn);
            if (bn->requires_grad) ensure_grad(*bn);
            if (xn->requires_grad) ensure_grad(*xn);
            for (int i = 0; i < rows; ++i) {
                const size_t off = static_cast<size_t>(i) * cols;
                if (gn->requires_grad || bn->requires_grad) {
                    for (int j = 0; j < cols; ++j) {
                        if (gn->requires_grad) gn->grad[j] += self.grad[off + j] * xhat[off + j];
                        if (bn->requires_grad) bn->grad[j] += self.grad[off + j];
                    }
                }
                if (xn->requires_grad) {
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        const double dxh = self.grad[off + j] * gn->value[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[off + j];
                    }
                    mean_dxh /= cols;
                    mean_dxh_xh /= cols;
                    const double inv = inv_std[static_cast<size_t>(i)];
                    for (int j = 0; j < cols; ++j) {
                        const double dxh = self.grad[off + j] * gn->value[j];
                        xn->grad[off + j] += inv * (dxh - mean_dxh - xhat[off + j] * mean_dxh_xh);
                    }
                }
            }
        };
    }
    return Tensor(out);
}

Tensor softmax(const Tensor& x) {
    auto [rows, cols] = row_view(x, "softmax");
    auto out = make_node(x.shape(), "softmax");
    const auto& xv = x.data();
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        double mx = xv[off];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xv[off + j]);
        double s = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double e = std::exp(xv[off + j] - mx);
            out->value[off + j] = e;
            s += e;
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < cols; ++j) out->value[off + j] *= inv;
    }
    check_finite(*out);
    if (tracked(x)) {
        out->requires_grad = true;
        out->parents = {x.node()};
        NodePtr xn = x.node();
        out->backward = [xn, rows, cols](TensorNode& self) {
            ensure_grad(*xn);
            for (int i = 0; i < rows; ++i) {
                const size_t off = static_cast<size_t>(i) * cols;
                double dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += self.grad[off + j] * self.value[off + j];
                for (int j = 0; j < cols; ++j)
                    xn->grad[off + j] += self.value[off + j] * (self.grad[off + j] - dot);
            }
        };
    }
    return Tensor(out);
}

Tensor log_softmax(const Tensor& x) {
    auto [rows, cols] = row_view(x, "log_softmax");
    auto out = make_node(x.shape(), "log_softmax");
    const auto& xv = x.data();
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        double mx = xv[off];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xv[off + j]);
        double s = 0.0;
        for (int j = 0; j < cols; ++j) s += std::exp(xv[off + j] - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < cols; ++j) out->value[off + j] = xv[off + j] - lse;
    }
    check_finite(*out);
    if (tracked(x)) {
        out->requires_grad = true;
        out->parents = {x.node()};
        NodePtr xn = x.node();
        out->backward = [xn, rows, cols](TensorNode& self) {
            ensure_grad(*xn);
            for (int i = 0; i < rows; ++i) {
                const size_t off = static_cast<size_t>(i) * cols;
                double gsum = 0.0;
                for (int j = 0; j < cols; ++j) gsum += self.grad[off + j];
                for (int j = 0; j < cols; ++j)
                    xn->grad[off + j] += self.grad[off + j] - std::exp(self.value[off + j]) * gsum;
            }
        };
    }
    return Tensor(out);
}

Tensor gelu(const Tensor& x) {
    auto out = make_node(x.shape(), "gelu");
    const auto& xv = x.data();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (size_t i = 0; i < xv.size(); ++i)
        out->value[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
    check_finite(*out);
    if (tracked(x)) {
        out->requires_grad = true;
        out->parents = {x.node()};
        NodePtr xn = x.node();
        out->backward = [xn](TensorNode& self) {
            ensure_grad(*xn);
            constexpr double inv_sqrt2 = 0.70710678118654752440;
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const double v = xn->value[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                xn->grad[i] += self.grad[i] * (cdf + v * pdf);
            }
        };
    }
    return Tensor(out);
}

Tensor sum(const Tensor& x) {
    auto out = make_node({1}, "sum");
    double s = 0.0;
    for (const double v : x.data()) s += v;
    out->value[0] = s;
    check_finite(*out);
    if (tracked(x)) {
        out->requires_grad = true;
        out->parents = {x.node()};
        NodePtr xn = x.node();
        out->backward = [xn](TensorNode& self) {
            ensure_grad(*xn);
            for (auto& g : xn->grad) g += self.grad[0];
        };
    }
    return Tensor(out);
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw DomainError("mean: empty tensor");
    const double inv = 1.0 / static_cast<double>(x.size());
    auto out = make_node({1}, "mean");
    double s = 0.0;
    for (const double v : x.data()) s += v;
    out->value[0] = s * inv;
    check_finite(*out);
    if (tracked(x)) {
        out->requires_grad = true;
        out->parents = {x.node()};
        NodePtr xn = x.node();
        out->backward = [xn, inv](TensorNode& self) {
            ensure_grad(*xn);
            for (auto& g : xn->grad) g += self.grad[0] * inv;
        };
    }
    return Tensor(out);
}

Tensor gather_cols(const Tensor& x, const std::vector<int>& cols) {
    require_rank(x, 2, "gather_cols");
    const int n = x.dim(0), m = x.dim(1);
    if (static_cast<int>(cols.size()) != n) {
        throw ShapeError("gather_cols: need one column index per row, got " +
                         std::to_string(cols.size()) + " for " + std::to_string(n) + " rows");
    }
    for (const int c : cols) {
        if (c < 0 || c >= m) throw DomainError("gather_cols: column " + std::to_string(c) + " out of range");
    }
    auto out = make_node({n}, "gather_cols");
    for (int i = 0; i < n; ++i)
        out->value[static_cast<size_t>(i)] =
            x.data()[static_cast<size_t>(i) * m + cols[static_cast<size_t>(i)]];
    if (tracked(x)) {
        out->requires_grad = true;
        out->parents = {x.node()};
        NodePtr xn = x.node();
        out->backward = [xn, cols, m](TensorNode& self) {
            ensure_grad(*xn);
            for (size_t i = 0; i < cols.size(); ++i)
                xn->grad[i * m + static_cast<size_t>(cols[i])] += self.grad[i];
        };
    }
    return Tensor(out);
}

Tensor logsigmoid(const Tensor& x) {
    auto out = make_node(x.shape(), "logsigmoid");
    const auto& xv = x.data();
    for (size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        out->value[i] = v >= 0.0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
    }
    check_finite(*out);
    if (tracked(x)) {
        out->requires_grad = true;
        out->parents = {x.node()};
        NodePtr xn = x.node();
        out->backward = [xn](TensorNode& self) {
            ensure_grad(*xn);
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const double v = xn->value[i];
                // d/dv log sigmoid(v) = sigmoid(-v)
                double sneg;
                if (v >= 0.0) {
                    const double e = std::exp(-v);
                    sneg = e / (1.0 + e);
                } else {
                    sneg = 1.0 / (1.0 + std::exp(v));
                }
                xn->grad[i] += self.grad[i] * sneg;
            }
        };
    }
    return Tensor(out);
}

}  // namespace avcap
