#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dgrcl/common.hpp"

namespace dgrcl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

enum class OpKind {
    leaf,
    matmul,
    add,
    subtract,
    hadamard,
    scalar_mul,
    relu,
    tanh,
    sigmoid,
    softmax_rows,
    log,
    exp,
    sum,
    mean,
    concat_rows,
    transpose,
    l2_normalize_rows,
};

class Tape;

// Dense row-major float64 tensor. Data is shared between copies; the grad
// buffer exists only for tape leaves and is filled by Tape::backward.
class Tensor {
public:
    Tensor() : data_(std::make_shared<std::vector<double>>()) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {}

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
        if (shape_numel(shape_) != values.size())
            throw ShapeMismatch("tensor: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape_));
        data_ = std::make_shared<std::vector<double>>(std::move(values));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.raw()[i * n + i] = 1.0;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_->size(); }
    std::size_t ndim() const { return shape_.size(); }

    std::size_t rows() const {
        if (shape_.size() != 2) throw ShapeMismatch("rows(): tensor is not 2-D");
        return shape_[0];
    }
    std::size_t cols() const {
        if (shape_.size() != 2) throw ShapeMismatch("cols(): tensor is not 2-D");
        return shape_[1];
    }

    std::span<const double> data() const { return {data_->data(), data_->size()}; }
    std::vector<double>& raw() { return *data_; }
    const std::vector<double>& raw() const { return *data_; }

    double& at(std::size_t i, std::size_t j) { return (*data_)[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return (*data_)[i * cols() + j]; }
    double& operator[](std::size_t i) { return (*data_)[i]; }
    double operator[](std::size_t i) const { return (*data_)[i]; }

    double value() const {
        if (size() != 1) throw NotScalar("value(): tensor has " + std::to_string(size()) + " elements");
        return (*data_)[0];
    }

    bool has_grad() const { return grad_ != nullptr; }
    std::span<const double> grad() const {
        if (!grad_) throw DetachedTensor("grad(): tensor has no gradient buffer");
        return {grad_->data(), grad_->size()};
    }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
    }

    Tape* tape() const { return tape_; }
    int node() const { return node_; }
    bool attached() const { return tape_ != nullptr; }

    // Value-only copy with no tape linkage.
    Tensor detached() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    friend class Tape;
    friend Tensor apply_op(OpKind, const Tensor&, const Tensor*, double);

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<std::vector<double>> grad_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

// Reverse-mode tape. Records are appended in execution order, which is a
// topological order of the computation; backward replays them once in
// reverse. One tape per training context; not shared across threads.
class Tape {
public:
    // Registers a variable. The returned tensor shares the argument's data
    // and gradient buffers, so backward() fills the caller-visible grad.
    Tensor leaf(Tensor& t) {
        if (!t.grad_) t.grad_ = std::make_shared<std::vector<double>>(t.size(), 0.0);
        Tensor out = t;
        out.tape_ = this;
        out.node_ = static_cast<int>(nodes_.size());
        Node n;
        n.kind = OpKind::leaf;
        n.out = t.data_;
        n.out_shape = t.shape_;
        n.leaf_grad = t.grad_;
        nodes_.push_back(std::move(n));
        return out;
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    void backward(const Tensor& loss) {
        if (loss.tape_ != this || loss.node_ < 0)
            throw DetachedTensor("backward: loss has no record on this tape");
        if (loss.size() != 1) throw NotScalar("backward: loss is not scalar");

        for (auto& n : nodes_) n.grad.assign(shape_numel(n.out_shape), 0.0);
        nodes_[static_cast<std::size_t>(loss.node_)].grad[0] = 1.0;

        for (int i = loss.node_; i >= 0; --i) propagate(nodes_[static_cast<std::size_t>(i)]);

        for (auto& n : nodes_) {
            if (n.kind == OpKind::leaf) {
                auto& g = *n.leaf_grad;
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
            }
            n.grad.clear();
        }
    }

private:
    friend Tensor apply_op(OpKind, const Tensor&, const Tensor*, double);

    struct Node {
        OpKind kind = OpKind::leaf;
        int in0 = -1, in1 = -1;
        std::shared_ptr<const std::vector<double>> val0, val1;
        Shape shape0, shape1;
        std::shared_ptr<std::vector<double>> out;
        Shape out_shape;
        double scalar = 0.0;
        std::vector<double> grad;
        std::shared_ptr<std::vector<double>> leaf_grad;
    };

    std::vector<Node> nodes_;

    int record(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size() - 1);
    }

    void add_into(int node_id, const std::vector<double>& contrib) {
        if (node_id < 0) return;
        auto& g = nodes_[static_cast<std::size_t>(node_id)].grad;
        for (std::size_t k = 0; k < contrib.size(); ++k) g[k] += contrib[k];
    }

    void propagate(Node& n);
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NonFinite(std::string(op) + ": input contains NaN/Inf");
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
}

inline void check_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw ShapeMismatch(std::string(op) + ": tensor is not 2-D");
}

// out[m,n] = a[m,k] * b[k,n]
inline void matmul_values(const std::vector<double>& a, std::size_t m, std::size_t k,
                          const std::vector<double>& b, std::size_t n,
                          std::vector<double>& out) {
    out.assign(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &b[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
}

}  // namespace detail

// Single entry point for primitive records. `b` is null for unary ops.
inline Tensor apply_op(OpKind kind, const Tensor& a, const Tensor* b, double scalar = 0.0) {
    using detail::check_2d;
    using detail::check_finite;
    using detail::check_same_shape;

    check_finite(a, "forward");
    if (b) check_finite(*b, "forward");

    Tape* tape = a.tape();
    if (b && b->tape()) {
        if (tape && b->tape() != tape)
            throw DetachedTensor("forward: operands belong to different tapes");
        tape = b->tape();
    }

    Shape out_shape;
    const auto& av = a.raw();
    std::vector<double> out;

    switch (kind) {
        case OpKind::matmul: {
            check_2d(a, "matmul");
            check_2d(*b, "matmul");
            if (a.cols() != b->rows())
                throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b->shape()));
            out_shape = {a.rows(), b->cols()};
            detail::matmul_values(av, a.rows(), a.cols(), b->raw(), b->cols(), out);
            break;
        }
        case OpKind::add:
        case OpKind::subtract:
        case OpKind::hadamard: {
            check_same_shape(a, *b, "elementwise");
            const auto& bv = b->raw();
            out.resize(av.size());
            out_shape = a.shape();
            if (kind == OpKind::add)
                for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
            else if (kind == OpKind::subtract)
                for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
            else
                for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
            break;
        }
        case OpKind::scalar_mul: {
            out.resize(av.size());
            out_shape = a.shape();
            for (std::size_t i = 0; i < av.size(); ++i) out[i] = scalar * av[i];
            break;
        }
        case OpKind::relu: {
            out.resize(av.size());
            out_shape = a.shape();
            for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
            break;
        }
        case OpKind::tanh: {
            out.resize(av.size());
            out_shape = a.shape();
            for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
            break;
        }
        case OpKind::sigmoid: {
            out.resize(av.size());
            out_shape = a.shape();
            for (std::size_t i = 0; i < av.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-av[i]));
            break;
        }
        case OpKind::softmax_rows: {
            check_2d(a, "softmax_rows");
            out.resize(av.size());
            out_shape = a.shape();
            const std::size_t r = a.rows(), c = a.cols();
            for (std::size_t i = 0; i < r; ++i) {
                double mx = av[i * c];
                for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, av[i * c + j]);
                double denom = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    out[i * c + j] = std::exp(av[i * c + j] - mx);
                    denom += out[i * c + j];
                }
                for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= denom;
            }
            break;
        }
        case OpKind::log: {
            out.resize(av.size());
            out_shape = a.shape();
            for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::log(av[i]);
            break;
        }
        case OpKind::exp: {
            out.resize(av.size());
            out_shape = a.shape();
            for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
            break;
        }
        case OpKind::sum:
        case OpKind::mean: {
            out_shape = {1};
            double s = 0.0;
            for (double v : av) s += v;
            if (kind == OpKind::mean && !av.empty()) s /= static_cast<double>(av.size());
            out.assign(1, s);
            break;
        }
        case OpKind::concat_rows: {
            check_2d(a, "concat_rows");
            check_2d(*b, "concat_rows");
            if (a.cols() != b->cols())
                throw ShapeMismatch("concat_rows: column counts differ");
            out_shape = {a.rows() + b->rows(), a.cols()};
            out = av;
            out.insert(out.end(), b->raw().begin(), b->raw().end());
            break;
        }
        case OpKind::transpose: {
            check_2d(a, "transpose");
            const std::size_t r = a.rows(), c = a.cols();
            out_shape = {c, r};
            out.resize(av.size());
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
            break;
        }
        case OpKind::l2_normalize_rows: {
            check_2d(a, "l2_normalize_rows");
            const std::size_t r = a.rows(), c = a.cols();
            out.resize(av.size());
            out_shape = a.shape();
            for (std::size_t i = 0; i < r; ++i) {
                double sq = 0.0;
                for (std::size_t j = 0; j < c; ++j) sq += av[i * c + j] * av[i * c + j];
                const double nrm = std::sqrt(sq);
                if (nrm == 0.0) {
                    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = 0.0;
                } else {
                    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] / nrm;
                }
            }
            break;
        }
        case OpKind::leaf:
            throw ShapeMismatch("forward: leaf is not an operation");
    }

    Tensor result(out_shape, std::move(out));
    if (tape) {
        Tape::Node n;
        n.kind = kind;
        n.in0 = a.node();
        n.val0 = a.data_;
        n.shape0 = a.shape();
        if (b) {
            n.in1 = b->node();
            n.val1 = b->data_;
            n.shape1 = b->shape();
        }
        n.out = result.data_;
        n.out_shape = result.shape_;
        n.scalar = scalar;
        result.tape_ = tape;
        result.node_ = tape->record(std::move(n));
    }
    return result;
}

inline void Tape::propagate(Node& n) {
    const auto& g = n.grad;
    switch (n.kind) {
        case OpKind::leaf:
            break;
        case OpKind::matmul: {
            const std::size_t m = n.shape0[0], k = n.shape0[1], c = n.shape1[1];
            if (n.in0 >= 0) {
                // dA = dC * B^T
                std::vector<double> da(m * k, 0.0);
                const auto& bv = *n.val1;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < c; ++j) {
                        const double gv = g[i * c + j];
                        if (gv == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p) da[i * k + p] += gv * bv[p * c + j];
                    }
                add_into(n.in0, da);
            }
            if (n.in1 >= 0) {
                // dB = A^T * dC
                std::vector<double> db(k * c, 0.0);
                const auto& avv = *n.val0;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double avp = avv[i * k + p];
                        if (avp == 0.0) continue;
                        for (std::size_t j = 0; j < c; ++j) db[p * c + j] += avp * g[i * c + j];
                    }
                add_into(n.in1, db);
            }
            break;
        }
        case OpKind::add: {
            add_into(n.in0, g);
            add_into(n.in1, g);
            break;
        }
        case OpKind::subtract: {
            add_into(n.in0, g);
            if (n.in1 >= 0) {
                std::vector<double> neg(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                add_into(n.in1, neg);
            }
            break;
        }
        case OpKind::hadamard: {
            if (n.in0 >= 0) {
                std::vector<double> da(g.size());
                const auto& bv = *n.val1;
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * bv[i];
                add_into(n.in0, da);
            }
            if (n.in1 >= 0) {
                std::vector<double> db(g.size());
                const auto& avv = *n.val0;
                for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * avv[i];
                add_into(n.in1, db);
            }
            break;
        }
        case OpKind::scalar_mul: {
            if (n.in0 >= 0) {
                std::vector<double> da(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = n.scalar * g[i];
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::relu: {
            if (n.in0 >= 0) {
                std::vector<double> da(g.size());
                const auto& x = *n.val0;
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = x[i] > 0.0 ? g[i] : 0.0;
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::tanh: {
            if (n.in0 >= 0) {
                std::vector<double> da(g.size());
                const auto& y = *n.out;
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * (1.0 - y[i] * y[i]);
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::sigmoid: {
            if (n.in0 >= 0) {
                std::vector<double> da(g.size());
                const auto& y = *n.out;
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * y[i] * (1.0 - y[i]);
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::softmax_rows: {
            if (n.in0 >= 0) {
                const std::size_t r = n.out_shape[0], c = n.out_shape[1];
                const auto& y = *n.out;
                std::vector<double> da(g.size());
                for (std::size_t i = 0; i < r; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                    for (std::size_t j = 0; j < c; ++j)
                        da[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                }
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::log: {
            if (n.in0 >= 0) {
                std::vector<double> da(g.size());
                const auto& x = *n.val0;
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] / x[i];
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::exp: {
            if (n.in0 >= 0) {
                std::vector<double> da(g.size());
                const auto& y = *n.out;
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * y[i];
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::sum: {
            if (n.in0 >= 0) {
                std::vector<double> da(shape_numel(n.shape0), g[0]);
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::mean: {
            if (n.in0 >= 0) {
                const std::size_t cnt = shape_numel(n.shape0);
                std::vector<double> da(cnt, g[0] / static_cast<double>(cnt));
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::concat_rows: {
            const std::size_t n0 = shape_numel(n.shape0);
            if (n.in0 >= 0)
                add_into(n.in0, std::vector<double>(g.begin(), g.begin() + static_cast<long>(n0)));
            if (n.in1 >= 0)
                add_into(n.in1, std::vector<double>(g.begin() + static_cast<long>(n0), g.end()));
            break;
        }
        case OpKind::transpose: {
            if (n.in0 >= 0) {
                const std::size_t r = n.shape0[0], c = n.shape0[1];
                std::vector<double> da(r * c);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) da[i * c + j] = g[j * r + i];
                add_into(n.in0, da);
            }
            break;
        }
        case OpKind::l2_normalize_rows: {
            if (n.in0 >= 0) {
                const std::size_t r = n.shape0[0], c = n.shape0[1];
                const auto& x = *n.val0;
                const auto& y = *n.out;
                std::vector<double> da(r * c, 0.0);
                for (std::size_t i = 0; i < r; ++i) {
                    double sq = 0.0;
                    for (std::size_t j = 0; j < c; ++j) sq += x[i * c + j] * x[i * c + j];
                    const double nrm = std::sqrt(sq);
                    if (nrm == 0.0) continue;  // zero rows stay zero; subgradient 0
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                    for (std::size_t j = 0; j < c; ++j)
                        da[i * c + j] = (g[i * c + j] - y[i * c + j] * dot) / nrm;
                }
                add_into(n.in0, da);
            }
            break;
        }
    }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) { return apply_op(OpKind::matmul, a, &b); }
inline Tensor add(const Tensor& a, const Tensor& b) { return apply_op(OpKind::add, a, &b); }
inline Tensor subtract(const Tensor& a, const Tensor& b) { return apply_op(OpKind::subtract, a, &b); }
inline Tensor hadamard(const Tensor& a, const Tensor& b) { return apply_op(OpKind::hadamard, a, &b); }
inline Tensor scalar_mul(const Tensor& a, double s) { return apply_op(OpKind::scalar_mul, a, nullptr, s); }
inline Tensor relu(const Tensor& a) { return apply_op(OpKind::relu, a, nullptr); }
inline Tensor tanh(const Tensor& a) { return apply_op(OpKind::tanh, a, nullptr); }
inline Tensor sigmoid(const Tensor& a) { return apply_op(OpKind::sigmoid, a, nullptr); }
inline Tensor softmax_rows(const Tensor& a) { return apply_op(OpKind::softmax_rows, a, nullptr); }
inline Tensor log(const Tensor& a) { return apply_op(OpKind::log, a, nullptr); }
inline Tensor exp(const Tensor& a) { return apply_op(OpKind::exp, a, nullptr); }
inline Tensor sum(const Tensor& a) { return apply_op(OpKind::sum, a, nullptr); }
inline Tensor mean(const Tensor& a) { return apply_op(OpKind::mean, a, nullptr); }
inline Tensor concat_rows(const Tensor& a, const Tensor& b) { return apply_op(OpKind::concat_rows, a, &b); }
inline Tensor transpose(const Tensor& a) { return apply_op(OpKind::transpose, a, nullptr); }
inline Tensor l2_normalize_rows(const Tensor& a) { return apply_op(OpKind::l2_normalize_rows, a, nullptr); }

// Generic dispatcher over the primitive set. `scalar` is consumed only by
// scalar_mul.
inline Tensor forward(OpKind kind, const std::vector<Tensor>& operands, double scalar = 0.0) {
    const bool binary = kind == OpKind::matmul || kind == OpKind::add ||
                        kind == OpKind::subtract || kind == OpKind::hadamard ||
                        kind == OpKind::concat_rows;
    if (binary) {
        if (operands.size() != 2) throw ShapeMismatch("forward: op requires 2 operands");
        return apply_op(kind, operands[0], &operands[1], scalar);
    }
    if (operands.size() != 1) throw ShapeMismatch("forward: op requires 1 operand");
    return apply_op(kind, operands[0], nullptr, scalar);
}

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).
// `f` must be a deterministic scalar-valued function of x.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                const Tensor& x, double eps) {
    Tape tape;
    Tensor var = x.detached();
    Tensor leaf = tape.leaf(var);
    Tensor loss = f(leaf);
    if (loss.size() != 1) throw NotScalar("finite_diff_check: f is not scalar-valued");
    tape.backward(loss);
    std::vector<double> analytic(var.grad().begin(), var.grad().end());

    double max_err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor hi = x.detached();
        Tensor lo = x.detached();
        hi[i] += eps;
        lo[i] -= eps;
        const double fp = f(hi).value();
        const double fm = f(lo).value();
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NonFinite("finite_diff_check: f(x +/- eps) is not finite");
        const double numeric = (fp - fm) / (2.0 * eps);
        const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace dgrcl
