#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "avcap/errors.hpp"
#include "avcap/rng.hpp"

namespace avcap {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node of the define-by-run tape. Ops allocate a fresh node per forward
// evaluation; parameters are long-lived leaves whose grad buffers accumulate
// across backward calls until zero_grad().
struct TensorNode {
    std::vector<int> shape;
    std::vector<double> value;
    bool requires_grad = false;
    std::vector<double> grad;  // sized lazily; same length as value once used
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward;  // accumulates into parents
    const char* op = "leaf";
};

// Value-semantics handle over a shared tape node. Copying a Tensor aliases
// the underlying storage; ops never mutate their inputs.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double fill, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, double std = 1.0,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t size() const { return node_->value.size(); }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    double at(int i) const { return node_->value[static_cast<size_t>(i)]; }
    double at(int i, int j) const {
        return node_->value[static_cast<size_t>(i) * static_cast<size_t>(node_->shape[1]) +
                            static_cast<size_t>(j)];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();

    // Scalar read; contract error unless the tensor holds exactly one value.
    double item() const;

    NodePtr node() const { return node_; }

  private:
    NodePtr node_;
};

// Materialized topological order over the tape reachable from a root.
// backward() visits each node exactly once, parents after children.
class Graph {
  public:
    static Graph trace(const Tensor& root);
    void run_backward(double seed = 1.0);
    size_t node_count() const { return order_.size(); }

  private:
    std::vector<TensorNode*> order_;  // topological, root last
};

// Populates grads of every tracked leaf reachable from `loss`.
void backward(const Tensor& loss);

// ---- op family -----------------------------------------------------------
// Shapes follow standard linear-algebra rules; no broadcasting beyond
// add_bias over the leading axis. Every op validates shapes, verifies the
// result is finite, and registers a backward rule when any input is tracked.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& a, const Tensor& bias);  // (n,m) + (m)
Tensor scale(const Tensor& a, double s);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int begin, int end);
Tensor transpose(const Tensor& a);
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor softmax(const Tensor& x);      // last axis
Tensor log_softmax(const Tensor& x);  // last axis
Tensor gelu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor gather_cols(const Tensor& x, const std::vector<int>& cols);  // (n,m) -> (n)
Tensor logsigmoid(const Tensor& x);

namespace kernels {
// Row-major GEMM helpers shared by forward and backward paths.
// c (n x m) (+)= a (n x k) * b (k x m)
void mm_nn(const double* a, const double* b, double* c, int n, int k, int m, bool accumulate);
// c (n x m) (+)= a (n x k) * b^T, b stored (m x k)
void mm_nt(const double* a, const double* b, double* c, int n, int k, int m, bool accumulate);
// c (k x m) (+)= a^T * b, a stored (n x k), b (n x m)
void mm_tn(const double* a, const double* b, double* c, int n, int k, int m, bool accumulate);
}  // namespace kernels

}  // namespace avcap
