#pragma once

/**
 * @file tensor.hpp
 * @brief Dense double-precision tensors with tape-based reverse-mode autodiff.
 *
 * Tensors are immutable values: every op returns a fresh tensor. When an
 * input is attached to a Graph the op records itself on that graph's tape,
 * and Graph::backward replays the tape in reverse to accumulate gradients
 * for the registered leaves. Detached tensors act as constants and ops on
 * them are pure functions.
 *
 * Every op validates shapes (errors name both shapes) and checks its output
 * for NaN/Inf; a non-finite result throws NumericError.
 */

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prvr {

/// Thrown when an op produces a non-finite value (NaN/Inf is an error state).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

std::string shape_str(const std::vector<size_t>& shape);

class Graph;

class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<size_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor vec(std::vector<double> v);
    static Tensor matrix(size_t rows, size_t cols, std::vector<double> data);
    static Tensor zeros(std::vector<size_t> shape);
    static Tensor full(std::vector<size_t> shape, double v);

    bool defined() const { return p_ != nullptr; }
    const std::vector<size_t>& shape() const;
    size_t numel() const;
    size_t rank() const { return shape().size(); }
    size_t rows() const;  // rank 1 -> numel, rank 2 -> shape[0]
    size_t cols() const;  // rank 1 -> 1,     rank 2 -> shape[1]
    const std::vector<double>& data() const;

    double item() const;                   // scalar tensors only
    double at(size_t r, size_t c) const;   // rank-2 only

    bool requires_grad() const { return g_ != nullptr; }
    Graph* graph() const { return g_; }
    int node() const { return node_; }

    /// Same values, detached from any graph.
    Tensor detached() const;

private:
    struct Payload {
        std::vector<size_t> shape;
        std::vector<double> data;
    };
    std::shared_ptr<const Payload> p_;
    Graph* g_ = nullptr;
    int node_ = -1;

    friend class Graph;
    friend struct OpHelper;
};

/// Per-node context handed to backward closures.
class BackCtx {
public:
    std::span<const double> out_grad() const { return out_grad_; }
    /// True when input slot `k` is graph-attached and needs a gradient.
    bool wants(size_t k) const;
    /// Gradient accumulator for input slot `k` (zero-initialised).
    std::span<double> in_grad(size_t k);

private:
    friend class Graph;
    Graph* g_ = nullptr;
    const std::vector<int>* inputs_ = nullptr;
    std::span<const double> out_grad_;
};

using BackFn = std::function<void(BackCtx&)>;

/**
 * @brief Tape of op records for one differentiation pass.
 *
 * Topological order is creation order, so reverse tape traversal visits
 * every node exactly once. A Graph is confined to a single worker; it must
 * outlive all tensors attached to it.
 */
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Register a parameter tensor; returns the attached handle.
    Tensor leaf(const Tensor& value);

    size_t num_nodes() const { return nodes_.size(); }
    size_t num_leaves() const { return leaves_.size(); }

    class Gradients {
    public:
        /// d loss / d leaf; `leaf` must be a tensor returned by Graph::leaf.
        const std::vector<double>& wrt(const Tensor& leaf) const;

    private:
        friend class Graph;
        const Graph* g_ = nullptr;
        std::vector<std::vector<double>> grads_;  // indexed by node id
    };

    /// Reverse pass from a scalar loss node of this graph.
    Gradients backward(const Tensor& loss);

    /// Record an op. Input ids may be -1 for constant (detached) operands.
    Tensor record(const char* op, std::vector<int> inputs, Tensor value, BackFn back);

private:
    struct Node {
        const char* op;
        std::vector<int> inputs;
        std::shared_ptr<const Tensor::Payload> out;
        BackFn back;
        bool is_leaf;
    };
    std::vector<Node> nodes_;
    std::vector<int> leaves_;

    // backward scratch
    std::vector<std::vector<double>> grad_;
    std::vector<char> touched_;

    friend class BackCtx;
    std::span<double> grad_buffer(int node);
};

// ---------------------------------------------------------------------------
// Ops. All validate shapes and finiteness; all differentiable unless noted.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_n(std::span<const Tensor> terms);
/// A / s with s a scalar tensor.
Tensor div_by_scalar(const Tensor& a, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<size_t> shape);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor gelu(const Tensor& a);
/// max(0, x) elementwise; subgradient 0 at the kink.
Tensor hinge(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Largest element; gradient routes to the first argmax.
Tensor max_all(const Tensor& a);

/// Row-wise softmax of a matrix, with optional additive logit bias per column
/// (the proportional-attention hook). Outputs are strictly positive and each
/// row sums to 1.
Tensor softmax_rows(const Tensor& a, const Tensor* logit_bias = nullptr);
/// Row-wise log(sum_j mask[i][j] * exp(a[i][j])); mask is a constant 0/1
/// matrix and every row must select at least one entry.
Tensor masked_logsumexp_rows(const Tensor& a, const Tensor& mask);
Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);
/// Rows scaled to unit L2 norm; a zero row is an error.
Tensor normalize_rows(const Tensor& a);

Tensor slice_rows(const Tensor& a, size_t r0, size_t r1);
Tensor concat_rows(std::span<const Tensor> parts);
/// Assemble rows*cols scalar tensors (row-major) into a matrix.
Tensor stack_scalars(size_t rows, size_t cols, std::span<const Tensor> scalars);

Tensor dot(const Tensor& x, const Tensor& y);
/// Euclidean norm of a vector. Not differentiable at the zero vector.
Tensor norm2(const Tensor& x);

/// Cosine similarity of two equal-dimension vectors, in [-1, 1].
/// Zero-norm input is an error, never clamped.
Tensor cosine_sim(const Tensor& x, const Tensor& y);

/// Huber loss of the error a - b: quadratic within |e| <= delta, linear
/// outside, with a continuous first derivative at the seam.
Tensor huber(const Tensor& a, const Tensor& b, double delta);

}  // namespace prvr
