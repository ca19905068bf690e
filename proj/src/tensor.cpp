#include "prvr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace prvr {

std::string shape_str(const std::vector<size_t>& shape) {
    if (shape.empty()) return "()";
    std::ostringstream os;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    return os.str();
}

namespace {

size_t product(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t s : shape) n *= s;
    return n;
}

void check_finite(const std::vector<double>& data, const char* op) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

void require_matrix(const char* op, const Tensor& a) {
    if (a.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " +
                                    shape_str(a.shape()));
    }
}

void require_vector(const char* op, const Tensor& a) {
    if (a.rank() != 1) {
        throw std::invalid_argument(std::string(op) + ": expected a vector, got shape " +
                                    shape_str(a.shape()));
    }
}

Graph* merged_graph(const char* op, std::initializer_list<const Tensor*> ts) {
    Graph* g = nullptr;
    for (const Tensor* t : ts) {
        if (!t->requires_grad()) continue;
        if (g && g != t->graph()) {
            throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
        }
        g = t->graph();
    }
    return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data) {
    if (product(shape) != data.size()) {
        throw std::invalid_argument("tensor: shape " + shape_str(shape) + " implies " +
                                    std::to_string(product(shape)) + " values, got " +
                                    std::to_string(data.size()));
    }
    check_finite(data, "tensor-init");
    auto p = std::make_shared<Payload>();
    p->shape = std::move(shape);
    p->data = std::move(data);
    p_ = std::move(p);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }
Tensor Tensor::vec(std::vector<double> v) {
    size_t n = v.size();
    return Tensor({n}, std::move(v));
}
Tensor Tensor::matrix(size_t rows, size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
}
Tensor Tensor::zeros(std::vector<size_t> shape) {
    size_t n = product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}
Tensor Tensor::full(std::vector<size_t> shape, double v) {
    size_t n = product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
}

const std::vector<size_t>& Tensor::shape() const {
    if (!p_) throw std::logic_error("tensor: use of undefined tensor");
    return p_->shape;
}
size_t Tensor::numel() const { return product(shape()); }
size_t Tensor::rows() const {
    const auto& s = shape();
    if (s.size() == 1) return s[0];
    if (s.size() == 2) return s[0];
    throw std::invalid_argument("tensor: rows() on shape " + shape_str(s));
}
size_t Tensor::cols() const {
    const auto& s = shape();
    if (s.size() == 1) return 1;
    if (s.size() == 2) return s[1];
    throw std::invalid_argument("tensor: cols() on shape " + shape_str(s));
}
const std::vector<double>& Tensor::data() const {
    if (!p_) throw std::logic_error("tensor: use of undefined tensor");
    return p_->data;
}
double Tensor::item() const {
    if (numel() != 1) {
        throw std::invalid_argument("tensor: item() on non-scalar shape " + shape_str(shape()));
    }
    return data()[0];
}
double Tensor::at(size_t r, size_t c) const {
    require_matrix("at", *this);
    return data()[r * cols() + c];
}
Tensor Tensor::detached() const {
    Tensor t;
    t.p_ = p_;
    return t;
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

Tensor Graph::leaf(const Tensor& value) {
    if (!value.defined()) throw std::invalid_argument("graph: leaf() on undefined tensor");
    if (value.requires_grad()) {
        throw std::invalid_argument("graph: leaf() input is already attached to a graph");
    }
    Tensor t = value;
    t.g_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{"leaf", {}, t.p_, nullptr, true});
    leaves_.push_back(t.node_);
    return t;
}

Tensor Graph::record(const char* op, std::vector<int> inputs, Tensor value, BackFn back) {
    value.g_ = this;
    value.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{op, std::move(inputs), value.p_, std::move(back), false});
    return value;
}

std::span<double> Graph::grad_buffer(int node) {
    auto& buf = grad_[static_cast<size_t>(node)];
    if (buf.empty()) buf.assign(product(nodes_[static_cast<size_t>(node)].out->shape), 0.0);
    touched_[static_cast<size_t>(node)] = 1;
    return buf;
}

bool BackCtx::wants(size_t k) const { return (*inputs_)[k] >= 0; }

std::span<double> BackCtx::in_grad(size_t k) {
    int id = (*inputs_)[k];
    if (id < 0) throw std::logic_error("backward: gradient requested for constant operand");
    return g_->grad_buffer(id);
}

Graph::Gradients Graph::backward(const Tensor& loss) {
    if (loss.graph() != this) {
        throw std::invalid_argument("backward: loss does not belong to this graph");
    }
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(loss.shape()));
    }
    grad_.assign(nodes_.size(), {});
    touched_.assign(nodes_.size(), 0);
    grad_buffer(loss.node())[0] = 1.0;

    for (int id = loss.node(); id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!touched_[static_cast<size_t>(id)] || n.is_leaf || !n.back) continue;
        BackCtx ctx;
        ctx.g_ = this;
        ctx.inputs_ = &n.inputs;
        ctx.out_grad_ = grad_[static_cast<size_t>(id)];
        n.back(ctx);
        grad_[static_cast<size_t>(id)].clear();  // interior grads are no longer needed
    }

    Gradients out;
    out.g_ = this;
    out.grads_.resize(nodes_.size());
    for (int id : leaves_) {
        auto& buf = grad_[static_cast<size_t>(id)];
        if (buf.empty()) buf.assign(product(nodes_[static_cast<size_t>(id)].out->shape), 0.0);
        out.grads_[static_cast<size_t>(id)] = std::move(buf);
    }
    grad_.clear();
    touched_.clear();
    return out;
}

const std::vector<double>& Graph::Gradients::wrt(const Tensor& leaf) const {
    if (leaf.graph() != g_) throw std::invalid_argument("gradients: tensor from another graph");
    size_t id = static_cast<size_t>(leaf.node());
    if (id >= grads_.size() || !g_->nodes_[id].is_leaf) {
        throw std::invalid_argument("gradients: tensor is not a leaf");
    }
    return grads_[id];
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace {

// Builds the result tensor and records the node when any input is attached.
Tensor finish(const char* op, std::initializer_list<const Tensor*> ins,
              std::vector<size_t> shape, std::vector<double> data, BackFn back) {
    check_finite(data, op);
    Tensor out(std::move(shape), std::move(data));
    Graph* g = merged_graph(op, ins);
    if (!g) return out;
    std::vector<int> ids;
    ids.reserve(ins.size());
    for (const Tensor* t : ins) ids.push_back(t->requires_grad() ? t->node() : -1);
    return g->record(op, std::move(ids), std::move(out), std::move(back));
}

void axpy(std::span<double> acc, double c, std::span<const double> x) {
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += c * x[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("add", a, b);
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return finish("add", {&a, &b}, a.shape(), std::move(out), [](BackCtx& ctx) {
        for (size_t k : {size_t{0}, size_t{1}}) {
            if (ctx.wants(k)) axpy(ctx.in_grad(k), 1.0, ctx.out_grad());
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("sub", a, b);
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return finish("sub", {&a, &b}, a.shape(), std::move(out), [](BackCtx& ctx) {
        if (ctx.wants(0)) axpy(ctx.in_grad(0), 1.0, ctx.out_grad());
        if (ctx.wants(1)) axpy(ctx.in_grad(1), -1.0, ctx.out_grad());
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul", a, b);
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto pa = std::make_shared<std::vector<double>>(a.data());
    auto pb = std::make_shared<std::vector<double>>(b.data());
    return finish("mul", {&a, &b}, a.shape(), std::move(out), [pa, pb](BackCtx& ctx) {
        auto og = ctx.out_grad();
        if (ctx.wants(0)) {
            auto ga = ctx.in_grad(0);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += og[i] * (*pb)[i];
        }
        if (ctx.wants(1)) {
            auto gb = ctx.in_grad(1);
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += og[i] * (*pa)[i];
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("div", a, b);
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    auto pa = std::make_shared<std::vector<double>>(a.data());
    auto pb = std::make_shared<std::vector<double>>(b.data());
    return finish("div", {&a, &b}, a.shape(), std::move(out), [pa, pb](BackCtx& ctx) {
        auto og = ctx.out_grad();
        if (ctx.wants(0)) {
            auto ga = ctx.in_grad(0);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += og[i] / (*pb)[i];
        }
        if (ctx.wants(1)) {
            auto gb = ctx.in_grad(1);
            for (size_t i = 0; i < gb.size(); ++i)
                gb[i] -= og[i] * (*pa)[i] / ((*pb)[i] * (*pb)[i]);
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return finish("scale", {&a}, a.shape(), std::move(out), [c](BackCtx& ctx) {
        if (ctx.wants(0)) axpy(ctx.in_grad(0), c, ctx.out_grad());
    });
}

Tensor add_n(std::span<const Tensor> terms) {
    if (terms.empty()) throw std::invalid_argument("add_n: no terms");
    const auto& shape = terms[0].shape();
    std::vector<double> out(terms[0].numel(), 0.0);
    Graph* g = nullptr;
    std::vector<int> ids(terms.size(), -1);
    for (size_t k = 0; k < terms.size(); ++k) {
        if (terms[k].shape() != shape) shape_error("add_n", terms[0], terms[k]);
        for (size_t i = 0; i < out.size(); ++i) out[i] += terms[k].data()[i];
        if (terms[k].requires_grad()) {
            if (g && g != terms[k].graph())
                throw std::invalid_argument("add_n: operands belong to different graphs");
            g = terms[k].graph();
            ids[k] = terms[k].node();
        }
    }
    check_finite(out, "add_n");
    Tensor t(shape, std::move(out));
    if (!g) return t;
    size_t n = terms.size();
    return g->record("add_n", std::move(ids), std::move(t), [n](BackCtx& ctx) {
        for (size_t k = 0; k < n; ++k) {
            if (ctx.wants(k)) axpy(ctx.in_grad(k), 1.0, ctx.out_grad());
        }
    });
}

Tensor div_by_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) {
        throw std::invalid_argument("div_by_scalar: divisor must be scalar, got shape " +
                                    shape_str(s.shape()));
    }
    double sv = s.data()[0];
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / sv;
    auto pa = std::make_shared<std::vector<double>>(a.data());
    return finish("div_by_scalar", {&a, &s}, a.shape(), std::move(out), [pa, sv](BackCtx& ctx) {
        auto og = ctx.out_grad();
        if (ctx.wants(0)) axpy(ctx.in_grad(0), 1.0 / sv, og);
        if (ctx.wants(1)) {
            double acc = 0.0;
            for (size_t i = 0; i < og.size(); ++i) acc += og[i] * (*pa)[i];
            ctx.in_grad(1)[0] -= acc / (sv * sv);
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix("matmul", a);
    require_matrix("matmul", b);
    if (a.cols() != b.rows()) shape_error("matmul", a, b);
    size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < m; ++i) {
        for (size_t p = 0; p < k; ++p) {
            double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv.data() + p * n;
            double* orow = out.data() + i * n;
            for (size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    auto pa = std::make_shared<std::vector<double>>(av);
    auto pb = std::make_shared<std::vector<double>>(bv);
    return finish("matmul", {&a, &b}, {m, n}, std::move(out), [pa, pb, m, k, n](BackCtx& ctx) {
        auto og = ctx.out_grad();
        if (ctx.wants(0)) {  // dA += dC * B^T
            auto ga = ctx.in_grad(0);
            for (size_t i = 0; i < m; ++i)
                for (size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (size_t j = 0; j < n; ++j) acc += og[i * n + j] * (*pb)[p * n + j];
                    ga[i * k + p] += acc;
                }
        }
        if (ctx.wants(1)) {  // dB += A^T * dC
            auto gb = ctx.in_grad(1);
            for (size_t i = 0; i < m; ++i)
                for (size_t p = 0; p < k; ++p) {
                    double aip = (*pa)[i * k + p];
                    if (aip == 0.0) continue;
                    for (size_t j = 0; j < n; ++j) gb[p * n + j] += aip * og[i * n + j];
                }
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_matrix("transpose", a);
    size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return finish("transpose", {&a}, {n, m}, std::move(out), [m, n](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        auto og = ctx.out_grad();
        auto ga = ctx.in_grad(0);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) ga[i * n + j] += og[j * m + i];
    });
}

Tensor reshape(const Tensor& a, std::vector<size_t> shape) {
    if (product(shape) != a.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(shape));
    }
    std::vector<double> out = a.data();
    return finish("reshape", {&a}, std::move(shape), std::move(out), [](BackCtx& ctx) {
        if (ctx.wants(0)) axpy(ctx.in_grad(0), 1.0, ctx.out_grad());
    });
}

// ---------------------------------------------------------------------------
// Nonlinear elementwise
// ---------------------------------------------------------------------------

Tensor exp(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    auto po = std::make_shared<std::vector<double>>(out);
    return finish("exp", {&a}, a.shape(), std::move(out), [po](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        auto og = ctx.out_grad();
        auto ga = ctx.in_grad(0);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += og[i] * (*po)[i];
    });
}

Tensor log(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
    auto pa = std::make_shared<std::vector<double>>(a.data());
    return finish("log", {&a}, a.shape(), std::move(out), [pa](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        auto og = ctx.out_grad();
        auto ga = ctx.in_grad(0);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += og[i] / (*pa)[i];
    });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    auto pa = std::make_shared<std::vector<double>>(a.data());
    return finish("gelu", {&a}, a.shape(), std::move(out), [pa](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        auto og = ctx.out_grad();
        auto ga = ctx.in_grad(0);
        for (size_t i = 0; i < ga.size(); ++i) {
            double x = (*pa)[i];
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            ga[i] += og[i] * (cdf + x * pdf);
        }
    });
}

Tensor hinge(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    auto pa = std::make_shared<std::vector<double>>(a.data());
    return finish("hinge", {&a}, a.shape(), std::move(out), [pa](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        auto og = ctx.out_grad();
        auto ga = ctx.in_grad(0);
        for (size_t i = 0; i < ga.size(); ++i)
            if ((*pa)[i] > 0.0) ga[i] += og[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
    double acc = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    return finish("sum", {&a}, {1}, {acc}, [](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        auto ga = ctx.in_grad(0);
        double g = ctx.out_grad()[0];
        for (double& v : ga) v += g;
    });
}

Tensor mean(const Tensor& a) {
    double n = static_cast<double>(a.numel());
    double acc = std::accumulate(a.data().begin(), a.data().end(), 0.0) / n;
    return finish("mean", {&a}, {1}, {acc}, [n](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        auto ga = ctx.in_grad(0);
        double g = ctx.out_grad()[0] / n;
        for (double& v : ga) v += g;
    });
}

Tensor max_all(const Tensor& a) {
    if (a.numel() == 0) throw std::invalid_argument("max_all: empty tensor");
    size_t arg = 0;
    for (size_t i = 1; i < a.numel(); ++i)
        if (a.data()[i] > a.data()[arg]) arg = i;
    double v = a.data()[arg];
    return finish("max_all", {&a}, {1}, {v}, [arg](BackCtx& ctx) {
        if (ctx.wants(0)) ctx.in_grad(0)[arg] += ctx.out_grad()[0];
    });
}

// ---------------------------------------------------------------------------
// Row-structured ops
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& a, const Tensor* logit_bias) {
    require_matrix("softmax_rows", a);
    size_t m = a.rows(), n = a.cols();
    if (logit_bias) {
        require_vector("softmax_rows bias", *logit_bias);
        if (logit_bias->numel() != n) shape_error("softmax_rows bias", a, *logit_bias);
    }
    std::vector<double> out(m * n);
    for (size_t i = 0; i < m; ++i) {
        double hi = -1e300;
        for (size_t j = 0; j < n; ++j) {
            double z = a.data()[i * n + j] + (logit_bias ? logit_bias->data()[j] : 0.0);
            out[i * n + j] = z;
            hi = std::max(hi, z);
        }
        double denom = 0.0;
        for (size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(out[i * n + j] - hi);
            denom += out[i * n + j];
        }
        for (size_t j = 0; j < n; ++j) out[i * n + j] /= denom;
    }
    auto po = std::make_shared<std::vector<double>>(out);
    BackFn back = [po, m, n](BackCtx& ctx) {
        auto og = ctx.out_grad();
        std::vector<double> dx(m * n);
        for (size_t i = 0; i < m; ++i) {
            double inner = 0.0;
            for (size_t j = 0; j < n; ++j) inner += og[i * n + j] * (*po)[i * n + j];
            for (size_t j = 0; j < n; ++j)
                dx[i * n + j] = (*po)[i * n + j] * (og[i * n + j] - inner);
        }
        if (ctx.wants(0)) axpy(ctx.in_grad(0), 1.0, dx);
        if (ctx.wants(1)) {  // bias sees the column sums of dx
            auto gb = ctx.in_grad(1);
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) gb[j] += dx[i * n + j];
        }
    };
    if (logit_bias) return finish("softmax_rows", {&a, logit_bias}, {m, n}, std::move(out), back);
    Tensor none;  // keeps the two-slot backward layout
    return finish("softmax_rows", {&a, &none}, {m, n}, std::move(out), back);
}

Tensor masked_logsumexp_rows(const Tensor& a, const Tensor& mask) {
    require_matrix("masked_logsumexp_rows", a);
    if (mask.shape() != a.shape()) shape_error("masked_logsumexp_rows", a, mask);
    if (mask.requires_grad()) {
        throw std::invalid_argument("masked_logsumexp_rows: mask must be constant");
    }
    size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m);
    for (size_t i = 0; i < m; ++i) {
        double hi = -1e300;
        bool any = false;
        for (size_t j = 0; j < n; ++j) {
            if (mask.data()[i * n + j] > 0.0) {
                any = true;
                hi = std::max(hi, a.data()[i * n + j]);
            }
        }
        if (!any) {
            throw std::invalid_argument("masked_logsumexp_rows: row " + std::to_string(i) +
                                        " selects no entries");
        }
        double acc = 0.0;
        for (size_t j = 0; j < n; ++j) {
            if (mask.data()[i * n + j] > 0.0) acc += std::exp(a.data()[i * n + j] - hi);
        }
        out[i] = hi + std::log(acc);
    }
    auto pa = std::make_shared<std::vector<double>>(a.data());
    auto pm = std::make_shared<std::vector<double>>(mask.data());
    auto po = std::make_shared<std::vector<double>>(out);
    return finish("masked_logsumexp_rows", {&a}, {m}, std::move(out),
                  [pa, pm, po, m, n](BackCtx& ctx) {
                      if (!ctx.wants(0)) return;
                      auto og = ctx.out_grad();
                      auto ga = ctx.in_grad(0);
                      for (size_t i = 0; i < m; ++i) {
                          for (size_t j = 0; j < n; ++j) {
                              if ((*pm)[i * n + j] > 0.0)
                                  ga[i * n + j] += og[i] * std::exp((*pa)[i * n + j] - (*po)[i]);
                          }
                      }
                  });
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    require_matrix("layer_norm_rows", a);
    require_vector("layer_norm_rows gain", gain);
    require_vector("layer_norm_rows bias", bias);
    size_t m = a.rows(), n = a.cols();
    if (gain.numel() != n) shape_error("layer_norm_rows gain", a, gain);
    if (bias.numel() != n) shape_error("layer_norm_rows bias", a, bias);
    std::vector<double> out(m * n);
    auto xhat = std::make_shared<std::vector<double>>(m * n);
    auto inv_sigma = std::make_shared<std::vector<double>>(m);
    for (size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (size_t j = 0; j < n; ++j) mu += a.data()[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (size_t j = 0; j < n; ++j) {
            double d = a.data()[i * n + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[i] = is;
        for (size_t j = 0; j < n; ++j) {
            double xh = (a.data()[i * n + j] - mu) * is;
            (*xhat)[i * n + j] = xh;
            out[i * n + j] = gain.data()[j] * xh + bias.data()[j];
        }
    }
    auto pg = std::make_shared<std::vector<double>>(gain.data());
    return finish("layer_norm_rows", {&a, &gain, &bias}, {m, n}, std::move(out),
                  [xhat, inv_sigma, pg, m, n](BackCtx& ctx) {
                      auto og = ctx.out_grad();
                      if (ctx.wants(0)) {
                          auto ga = ctx.in_grad(0);
                          for (size_t i = 0; i < m; ++i) {
                              double mean_dy = 0.0, mean_dyxh = 0.0;
                              for (size_t j = 0; j < n; ++j) {
                                  double dy = og[i * n + j] * (*pg)[j];
                                  mean_dy += dy;
                                  mean_dyxh += dy * (*xhat)[i * n + j];
                              }
                              mean_dy /= static_cast<double>(n);
                              mean_dyxh /= static_cast<double>(n);
                              for (size_t j = 0; j < n; ++j) {
                                  double dy = og[i * n + j] * (*pg)[j];
                                  ga[i * n + j] += (*inv_sigma)[i] *
                                                   (dy - mean_dy - (*xhat)[i * n + j] * mean_dyxh);
                              }
                          }
                      }
                      if (ctx.wants(1)) {
                          auto gg = ctx.in_grad(1);
                          for (size_t i = 0; i < m; ++i)
                              for (size_t j = 0; j < n; ++j)
                                  gg[j] += og[i * n + j] * (*xhat)[i * n + j];
                      }
                      if (ctx.wants(2)) {
                          auto gb = ctx.in_grad(2);
                          for (size_t i = 0; i < m; ++i)
                              for (size_t j = 0; j < n; ++j) gb[j] += og[i * n + j];
                      }
                  });
}

Tensor normalize_rows(const Tensor& a) {
    require_matrix("normalize_rows", a);
    size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    auto norms = std::make_shared<std::vector<double>>(m);
    for (size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < n; ++j) s += a.data()[i * n + j] * a.data()[i * n + j];
        double nrm = std::sqrt(s);
        if (nrm == 0.0) {
            throw std::invalid_argument("normalize_rows: row " + std::to_string(i) +
                                        " has zero norm");
        }
        (*norms)[i] = nrm;
        for (size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] / nrm;
    }
    auto po = std::make_shared<std::vector<double>>(out);
    return finish("normalize_rows", {&a}, {m, n}, std::move(out), [po, norms, m, n](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        auto og = ctx.out_grad();
        auto ga = ctx.in_grad(0);
        for (size_t i = 0; i < m; ++i) {
            double inner = 0.0;
            for (size_t j = 0; j < n; ++j) inner += og[i * n + j] * (*po)[i * n + j];
            for (size_t j = 0; j < n; ++j)
                ga[i * n + j] += (og[i * n + j] - (*po)[i * n + j] * inner) / (*norms)[i];
        }
    });
}

Tensor slice_rows(const Tensor& a, size_t r0, size_t r1) {
    size_t m = a.rows(), n = a.cols();
    if (r0 >= r1 || r1 > m) {
        throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + ", " +
                                    std::to_string(r1) + ") out of " + std::to_string(m) +
                                    " rows");
    }
    std::vector<double> out(a.data().begin() + static_cast<long>(r0 * n),
                            a.data().begin() + static_cast<long>(r1 * n));
    std::vector<size_t> shape =
        a.rank() == 1 ? std::vector<size_t>{r1 - r0} : std::vector<size_t>{r1 - r0, n};
    return finish("slice_rows", {&a}, std::move(shape), std::move(out), [r0, n](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        auto og = ctx.out_grad();
        auto ga = ctx.in_grad(0);
        for (size_t i = 0; i < og.size(); ++i) ga[r0 * n + i] += og[i];
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    size_t n = parts[0].cols();
    size_t total = 0;
    Graph* g = nullptr;
    std::vector<int> ids(parts.size(), -1);
    for (size_t k = 0; k < parts.size(); ++k) {
        if (parts[k].cols() != n) shape_error("concat_rows", parts[0], parts[k]);
        total += parts[k].rows();
        if (parts[k].requires_grad()) {
            if (g && g != parts[k].graph())
                throw std::invalid_argument("concat_rows: operands belong to different graphs");
            g = parts[k].graph();
            ids[k] = parts[k].node();
        }
    }
    std::vector<double> out;
    out.reserve(total * n);
    std::vector<size_t> offsets(parts.size());
    for (size_t k = 0; k < parts.size(); ++k) {
        offsets[k] = out.size();
        out.insert(out.end(), parts[k].data().begin(), parts[k].data().end());
    }
    Tensor t({total, n}, std::move(out));
    if (!g) return t;
    std::vector<size_t> sizes(parts.size());
    for (size_t k = 0; k < parts.size(); ++k) sizes[k] = parts[k].numel();
    return g->record("concat_rows", std::move(ids), std::move(t),
                     [offsets, sizes](BackCtx& ctx) {
                         auto og = ctx.out_grad();
                         for (size_t k = 0; k < sizes.size(); ++k) {
                             if (!ctx.wants(k)) continue;
                             auto gk = ctx.in_grad(k);
                             for (size_t i = 0; i < sizes[k]; ++i) gk[i] += og[offsets[k] + i];
                         }
                     });
}

Tensor stack_scalars(size_t rows, size_t cols, std::span<const Tensor> scalars) {
    if (scalars.size() != rows * cols) {
        throw std::invalid_argument("stack_scalars: expected " + std::to_string(rows * cols) +
                                    " scalars, got " + std::to_string(scalars.size()));
    }
    std::vector<double> out(rows * cols);
    Graph* g = nullptr;
    std::vector<int> ids(scalars.size(), -1);
    for (size_t k = 0; k < scalars.size(); ++k) {
        if (scalars[k].numel() != 1) {
            throw std::invalid_argument("stack_scalars: element " + std::to_string(k) +
                                        " has shape " + shape_str(scalars[k].shape()));
        }
        out[k] = scalars[k].data()[0];
        if (scalars[k].requires_grad()) {
            if (g && g != scalars[k].graph())
                throw std::invalid_argument("stack_scalars: operands belong to different graphs");
            g = scalars[k].graph();
            ids[k] = scalars[k].node();
        }
    }
    check_finite(out, "stack_scalars");
    Tensor t({rows, cols}, std::move(out));
    if (!g) return t;
    size_t count = scalars.size();
    return g->record("stack_scalars", std::move(ids), std::move(t), [count](BackCtx& ctx) {
        auto og = ctx.out_grad();
        for (size_t k = 0; k < count; ++k) {
            if (ctx.wants(k)) ctx.in_grad(k)[0] += og[k];
        }
    });
}

// ---------------------------------------------------------------------------
// Vector ops
// ---------------------------------------------------------------------------

Tensor dot(const Tensor& x, const Tensor& y) {
    require_vector("dot", x);
    require_vector("dot", y);
    if (x.numel() != y.numel()) shape_error("dot", x, y);
    double acc = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) acc += x.data()[i] * y.data()[i];
    auto px = std::make_shared<std::vector<double>>(x.data());
    auto py = std::make_shared<std::vector<double>>(y.data());
    return finish("dot", {&x, &y}, {1}, {acc}, [px, py](BackCtx& ctx) {
        double g = ctx.out_grad()[0];
        if (ctx.wants(0)) axpy(ctx.in_grad(0), g, *py);
        if (ctx.wants(1)) axpy(ctx.in_grad(1), g, *px);
    });
}

Tensor norm2(const Tensor& x) {
    require_vector("norm2", x);
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    double nrm = std::sqrt(s);
    auto px = std::make_shared<std::vector<double>>(x.data());
    return finish("norm2", {&x}, {1}, {nrm}, [px, nrm](BackCtx& ctx) {
        if (!ctx.wants(0)) return;
        if (nrm == 0.0) throw NumericError("norm2: gradient undefined at the zero vector");
        double g = ctx.out_grad()[0] / nrm;
        axpy(ctx.in_grad(0), g, *px);
    });
}

Tensor cosine_sim(const Tensor& x, const Tensor& y) {
    require_vector("cosine_sim", x);
    require_vector("cosine_sim", y);
    if (x.numel() != y.numel()) shape_error("cosine_sim", x, y);
    auto sq = [](const Tensor& t) {
        double s = 0.0;
        for (double v : t.data()) s += v * v;
        return s;
    };
    if (sq(x) == 0.0 || sq(y) == 0.0) {
        throw std::invalid_argument("cosine_sim: zero-norm input");
    }
    return div(dot(x, y), mul(norm2(x), norm2(y)));
}

Tensor huber(const Tensor& a, const Tensor& b, double delta) {
    if (a.numel() != 1 || b.numel() != 1) {
        throw std::invalid_argument("huber: expects scalars, got shapes " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    }
    if (delta <= 0.0) throw std::invalid_argument("huber: delta must be > 0");
    double e = a.data()[0] - b.data()[0];
    double v = std::abs(e) <= delta ? 0.5 * e * e : delta * (std::abs(e) - 0.5 * delta);
    double de = std::abs(e) <= delta ? e : delta * (e > 0.0 ? 1.0 : -1.0);
    return finish("huber", {&a, &b}, {1}, {v}, [de](BackCtx& ctx) {
        double g = ctx.out_grad()[0];
        if (ctx.wants(0)) ctx.in_grad(0)[0] += g * de;
        if (ctx.wants(1)) ctx.in_grad(1)[0] -= g * de;
    });
}

}  // namespace prvr
