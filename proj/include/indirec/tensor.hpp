// Dense 64-bit float tensor with tape-based reverse-mode autodiff.
//
// Tensors are shared handles onto tape nodes; every differentiable op records
// its inputs and a pull-back closure, and backward() replays the tape in
// reverse topological order. Values are plain data, safe to move across
// threads; a single tape is built and consumed per training step.

#pragma once

#include "indirec/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace indirec {

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // same length as values when requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(const TensorNode&)> backprop;  // pulls this->grad into parents
};

inline thread_local int no_grad_depth = 0;

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

}  // namespace detail

/// Whether ops currently record tape nodes (see NoGradGuard).
inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Scoped switch that disables tape recording, for inference and sampling.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad = false) {
        if (detail::shape_numel(shape) != values.size()) {
            throw std::invalid_argument("Tensor: shape " + detail::shape_str(shape) +
                                        " does not match " + std::to_string(values.size()) +
                                        " values");
        }
        node_ = std::make_shared<detail::TensorNode>();
        node_->shape = std::move(shape);
        node_->values = std::move(values);
        node_->requires_grad = requires_grad;
        if (requires_grad) node_->grad.assign(node_->values.size(), 0.0);
    }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        std::size_t n = detail::shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(std::vector<std::size_t> shape, double v, bool requires_grad = false) {
        std::size_t n = detail::shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1, 1}, {v}, requires_grad);
    }

    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        std::size_t n = detail::shape_numel(shape);
        std::vector<double> v(n);
        for (double& x : v) x = stddev * rng.normal();
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    /// Truncated normal: resample until within two standard deviations.
    static Tensor trunc_normal(std::vector<std::size_t> shape, Rng& rng, double stddev,
                               bool requires_grad = false) {
        std::size_t n = detail::shape_numel(shape);
        std::vector<double> v(n);
        for (double& x : v) {
            double z = rng.normal();
            while (std::abs(z) > 2.0) z = rng.normal();
            x = stddev * z;
        }
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t size() const { return node_->values.size(); }

    /// Rows = product of all leading dims; cols = last dim. Last-axis ops
    /// treat any tensor as a (rows x cols) matrix.
    std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

    bool is_matrix() const { return node_->shape.size() == 2; }

    double value() const {
        if (size() != 1) {
            throw std::invalid_argument("Tensor::value: tensor " + detail::shape_str(shape()) +
                                        " is not scalar");
        }
        return node_->values[0];
    }

    double at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }

    bool requires_grad() const { return node_ && node_->requires_grad; }

    std::vector<double>& grad() {
        if (!requires_grad()) throw std::runtime_error("Tensor::grad: tensor has no gradient slot");
        return node_->grad;
    }
    const std::vector<double>& grad() const {
        if (!requires_grad()) throw std::runtime_error("Tensor::grad: tensor has no gradient slot");
        return node_->grad;
    }

    void zero_grad() {
        if (requires_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Value copy cut off from the tape.
    Tensor detached() const { return Tensor(node_->shape, node_->values, false); }

    const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline Tensor make_result(std::vector<std::size_t> shape, std::vector<double> values,
                          std::vector<Tensor> inputs,
                          std::function<void(const TensorNode&)> backprop) {
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const Tensor& t : inputs) needs_grad |= t.requires_grad();
    }
    Tensor out(std::move(shape), std::move(values), needs_grad);
    if (needs_grad) {
        for (const Tensor& t : inputs) out.node()->parents.push_back(t.node());
        out.node()->backprop = std::move(backprop);
    }
    return out;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

// Accumulate into a node's grad buffer if it participates in the tape.
inline void accum(const std::shared_ptr<TensorNode>& n, std::size_t i, double g) {
    if (n->requires_grad) n->grad[i] += g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

/// Elementwise a + b. When b is a single row (1-D of length a.cols(), or
/// 1 x cols), it broadcasts over every row of a.
inline Tensor add(const Tensor& a, const Tensor& b) {
    const std::size_t rows = a.rows(), cols = a.cols();
    const bool broadcast = b.shape() != a.shape();
    if (broadcast && !(b.size() == cols && b.rows() == 1)) {
        throw std::invalid_argument("add: shape mismatch " + detail::shape_str(a.shape()) +
                                    " vs " + detail::shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = a.values()[r * cols + c] + b.values()[broadcast ? c : r * cols + c];
    auto an = a.node(); auto bn = b.node();
    return detail::make_result(a.shape(), std::move(out), {a, b},
        [an, bn, rows, cols, broadcast](const detail::TensorNode& n) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const double g = n.grad[r * cols + c];
                    detail::accum(an, r * cols + c, g);
                    detail::accum(bn, broadcast ? c : r * cols + c, g);
                }
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    auto an = a.node(); auto bn = b.node();
    return detail::make_result(a.shape(), std::move(out), {a, b},
        [an, bn](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                detail::accum(an, i, n.grad[i]);
                detail::accum(bn, i, -n.grad[i]);
            }
        });
}

/// Elementwise a * b. Same row-broadcast rule as add (used for layer-norm
/// gains).
inline Tensor mul(const Tensor& a, const Tensor& b) {
    const std::size_t rows = a.rows(), cols = a.cols();
    const bool broadcast = b.shape() != a.shape();
    if (broadcast && !(b.size() == cols && b.rows() == 1)) {
        throw std::invalid_argument("mul: shape mismatch " + detail::shape_str(a.shape()) +
                                    " vs " + detail::shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = a.values()[r * cols + c] * b.values()[broadcast ? c : r * cols + c];
    auto an = a.node(); auto bn = b.node();
    return detail::make_result(a.shape(), std::move(out), {a, b},
        [an, bn, rows, cols, broadcast](const detail::TensorNode& n) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t ai = r * cols + c;
                    const std::size_t bi = broadcast ? c : ai;
                    const double g = n.grad[ai];
                    detail::accum(an, ai, g * bn->values[bi]);
                    detail::accum(bn, bi, g * an->values[ai]);
                }
        });
}

inline Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = factor * a.values()[i];
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a},
        [an, factor](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                detail::accum(an, i, factor * n.grad[i]);
        });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (!a.is_matrix() || !b.is_matrix() || a.shape()[1] != b.shape()[0]) {
        throw std::invalid_argument("matmul: incompatible shapes " +
                                    detail::shape_str(a.shape()) + " and " +
                                    detail::shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
    std::vector<double> out(m * p, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
            const double x = av[i * k + t];
            for (std::size_t j = 0; j < p; ++j) out[i * p + j] += x * bv[t * p + j];
        }
    auto an = a.node(); auto bn = b.node();
    return detail::make_result({m, p}, std::move(out), {a, b},
        [an, bn, m, k, p](const detail::TensorNode& n) {
            // dA = G B^T, dB = A^T G
            if (an->requires_grad) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < p; ++j) {
                        const double g = n.grad[i * p + j];
                        for (std::size_t t = 0; t < k; ++t)
                            an->grad[i * k + t] += g * bn->values[t * p + j];
                    }
            }
            if (bn->requires_grad) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        const double x = an->values[i * k + t];
                        for (std::size_t j = 0; j < p; ++j)
                            bn->grad[t * p + j] += x * n.grad[i * p + j];
                    }
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    if (!a.is_matrix())
        throw std::invalid_argument("transpose: expected matrix, got " +
                                    detail::shape_str(a.shape()));
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.values()[i * c + j];
    auto an = a.node();
    return detail::make_result({c, r}, std::move(out), {a},
        [an, r, c](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    detail::accum(an, i * c + j, n.grad[j * r + i]);
        });
}

/// Row gather: out[i] = table[ids[i]]. Gradient scatters rows back into the
/// table, so shared embedding matrices accumulate from every lookup.
inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    if (!table.is_matrix())
        throw std::invalid_argument("embedding_lookup: expected matrix table, got " +
                                    detail::shape_str(table.shape()));
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    std::vector<double> out(ids.size() * d);
    std::vector<int> idv(ids.begin(), ids.end());
    for (std::size_t i = 0; i < idv.size(); ++i) {
        const int id = idv[i];
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                        " out of range for table " +
                                        detail::shape_str(table.shape()));
        }
        std::copy_n(table.values().begin() + static_cast<std::size_t>(id) * d, d,
                    out.begin() + i * d);
    }
    auto tn = table.node();
    return detail::make_result({idv.size(), d}, std::move(out), {table},
        [tn, idv, d](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < idv.size(); ++i)
                for (std::size_t j = 0; j < d; ++j)
                    detail::accum(tn, static_cast<std::size_t>(idv[i]) * d + j,
                                  n.grad[i * d + j]);
        });
}

// ---------------------------------------------------------------------------
// Last-axis normalizations and reductions
// ---------------------------------------------------------------------------

/// Softmax over the last axis, max-shifted for stability.
inline Tensor softmax(const Tensor& a) {
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double* y = out.data() + r * cols;
        const double mx = *std::max_element(x, x + cols);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) sum += (y[c] = std::exp(x[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) y[c] /= sum;
    }
    auto an = a.node();
    Tensor result = detail::make_result(a.shape(), std::move(out), {a}, nullptr);
    if (result.requires_grad()) {
        auto rn = result.node();
        rn->backprop = [an, rn, rows, cols](const detail::TensorNode& n) {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = rn->values.data() + r * cols;
                const double* g = n.grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
                for (std::size_t c = 0; c < cols; ++c)
                    detail::accum(an, r * cols + c, y[c] * (g[c] - dot));
            }
        };
    }
    return result;
}

/// Normalize each row to zero mean, unit variance (epsilon-stabilized).
/// Affine gain/bias are applied separately via mul/add broadcasts.
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<double> out(a.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += x[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
        var /= static_cast<double>(cols);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (x[c] - mean) * inv_std[r];
    }
    auto an = a.node();
    Tensor result = detail::make_result(a.shape(), std::move(out), {a}, nullptr);
    if (result.requires_grad()) {
        auto rn = result.node();
        rn->backprop = [an, rn, rows, cols, inv_std](const detail::TensorNode& n) {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = rn->values.data() + r * cols;
                const double* g = n.grad.data() + r * cols;
                double g_mean = 0.0, gy_mean = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    g_mean += g[c];
                    gy_mean += g[c] * y[c];
                }
                g_mean /= static_cast<double>(cols);
                gy_mean /= static_cast<double>(cols);
                for (std::size_t c = 0; c < cols; ++c)
                    detail::accum(an, r * cols + c,
                                  inv_std[r] * (g[c] - g_mean - y[c] * gy_mean));
            }
        };
    }
    return result;
}

/// log(sum(exp(x))) over the last axis, shape (r x c) -> (r x 1).
inline Tensor logsumexp(const Tensor& a) {
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        const double mx = *std::max_element(x, x + cols);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) sum += std::exp(x[c] - mx);
        out[r] = mx + std::log(sum);
    }
    auto an = a.node();
    Tensor result = detail::make_result({rows, 1}, std::move(out), {a}, nullptr);
    if (result.requires_grad()) {
        auto rn = result.node();
        rn->backprop = [an, rn, rows, cols](const detail::TensorNode& n) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    detail::accum(an, r * cols + c,
                                  n.grad[r] * std::exp(an->values[r * cols + c] - rn->values[r]));
        };
    }
    return result;
}

inline Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
    auto an = a.node();
    return detail::make_result({1, 1}, {s}, {a},
        [an](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < an->values.size(); ++i)
                detail::accum(an, i, n.grad[0]);
        });
}

inline Tensor mean(const Tensor& a) {
    const double inv_n = 1.0 / static_cast<double>(a.size());
    double s = std::accumulate(a.values().begin(), a.values().end(), 0.0) * inv_n;
    auto an = a.node();
    return detail::make_result({1, 1}, {s}, {a},
        [an, inv_n](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < an->values.size(); ++i)
                detail::accum(an, i, inv_n * n.grad[0]);
        });
}

/// Mean of squared entries, the core of the diffusion MSE.
inline Tensor mean_square(const Tensor& a) {
    const double inv_n = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (double x : a.values()) s += x * x;
    s *= inv_n;
    auto an = a.node();
    return detail::make_result({1, 1}, {s}, {a},
        [an, inv_n](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < an->values.size(); ++i)
                detail::accum(an, i, 2.0 * inv_n * an->values[i] * n.grad[0]);
        });
}

// ---------------------------------------------------------------------------
// Nonlinearities and dropout
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a},
        [an](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                if (an->values[i] > 0.0) detail::accum(an, i, n.grad[i]);
        });
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.values()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a},
        [an](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                const double x = an->values[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                detail::accum(an, i, n.grad[i] * (cdf + x * pdf));
            }
        });
}

/// Inverted dropout: train mode scales kept entries by 1/(1-rate) so eval
/// mode is the identity (and records no tape node).
inline Tensor dropout(const Tensor& a, double rate, Rng& rng, bool train) {
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    if (!train || rate == 0.0) return a;
    const double keep = 1.0 - rate;
    std::vector<double> mask(a.size());
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
        out[i] = a.values()[i] * mask[i];
    }
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a},
        [an, mask](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                detail::accum(an, i, n.grad[i] * mask[i]);
        });
}

// ---------------------------------------------------------------------------
// Shape surgery: slicing, concatenation, broadcasting rows
// ---------------------------------------------------------------------------

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    if (!a.is_matrix() || begin >= end || end > a.shape()[0])
        throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + ", " +
                                    std::to_string(end) + ") invalid for " +
                                    detail::shape_str(a.shape()));
    const std::size_t cols = a.shape()[1];
    std::vector<double> out(a.values().begin() + begin * cols, a.values().begin() + end * cols);
    auto an = a.node();
    return detail::make_result({end - begin, cols}, std::move(out), {a},
        [an, begin, cols](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                detail::accum(an, begin * cols + i, n.grad[i]);
        });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    if (!a.is_matrix() || begin >= end || end > a.shape()[1])
        throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + ", " +
                                    std::to_string(end) + ") invalid for " +
                                    detail::shape_str(a.shape()));
    const std::size_t rows = a.shape()[0], cols = a.shape()[1], width = end - begin;
    std::vector<double> out(rows * width);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(a.values().begin() + r * cols + begin, width, out.begin() + r * width);
    auto an = a.node();
    return detail::make_result({rows, width}, std::move(out), {a},
        [an, begin, rows, cols, width](const detail::TensorNode& n) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < width; ++c)
                    detail::accum(an, r * cols + begin + c, n.grad[r * width + c]);
        });
}

/// Concatenate matrices along the last axis (equal row counts).
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t rows = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rows() != rows)
            throw std::invalid_argument("concat_cols: row mismatch " +
                                        detail::shape_str(parts[0].shape()) + " vs " +
                                        detail::shape_str(p.shape()));
        total += p.cols();
    }
    std::vector<double> out(rows * total);
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(p.values().begin() + r * w, w, out.begin() + r * total + offset);
        offset += w;
    }
    std::vector<std::shared_ptr<detail::TensorNode>> nodes;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.cols());
    }
    return detail::make_result({rows, total}, std::move(out), parts,
        [nodes, widths, rows, total](const detail::TensorNode& n) {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                const std::size_t w = widths[k];
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < w; ++c)
                        detail::accum(nodes[k], r * w + c, n.grad[r * total + offset + c]);
                offset += w;
            }
        });
}

/// Stack matrices along the first axis (equal column counts).
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t cols = parts[0].cols();
    std::size_t total_rows = 0;
    for (const Tensor& p : parts) {
        if (p.cols() != cols)
            throw std::invalid_argument("concat_rows: column mismatch " +
                                        detail::shape_str(parts[0].shape()) + " vs " +
                                        detail::shape_str(p.shape()));
        total_rows += p.rows();
    }
    std::vector<double> out;
    out.reserve(total_rows * cols);
    for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    std::vector<std::shared_ptr<detail::TensorNode>> nodes;
    std::vector<std::size_t> sizes;
    for (const Tensor& p : parts) {
        nodes.push_back(p.node());
        sizes.push_back(p.size());
    }
    return detail::make_result({total_rows, cols}, std::move(out), parts,
        [nodes, sizes](const detail::TensorNode& n) {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                for (std::size_t i = 0; i < sizes[k]; ++i)
                    detail::accum(nodes[k], i, n.grad[offset + i]);
                offset += sizes[k];
            }
        });
}

/// Broadcast a single row to r identical rows; gradient sums back over rows.
inline Tensor repeat_rows(const Tensor& row, std::size_t r) {
    if (row.rows() != 1)
        throw std::invalid_argument("repeat_rows: expected single row, got " +
                                    detail::shape_str(row.shape()));
    const std::size_t cols = row.cols();
    std::vector<double> out(r * cols);
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(row.values().begin(), cols, out.begin() + i * cols);
    auto rn = row.node();
    return detail::make_result({r, cols}, std::move(out), {row},
        [rn, r, cols](const detail::TensorNode& n) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t c = 0; c < cols; ++c)
                    detail::accum(rn, c, n.grad[i * cols + c]);
        });
}

/// Extract a single entry as a 1x1 scalar tensor.
inline Tensor pick(const Tensor& a, std::size_t r, std::size_t c) {
    if (r >= a.rows() || c >= a.cols())
        throw std::invalid_argument("pick: index (" + std::to_string(r) + ", " +
                                    std::to_string(c) + ") out of range for " +
                                    detail::shape_str(a.shape()));
    const std::size_t idx = r * a.cols() + c;
    auto an = a.node();
    return detail::make_result({1, 1}, {a.values()[idx]}, {a},
        [an, idx](const detail::TensorNode& n) { detail::accum(an, idx, n.grad[0]); });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss: seeds d(loss)/d(loss) = 1 and
/// accumulates gradients into every requires_grad node on the tape.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    detail::shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw std::invalid_argument("backward: loss does not require grad (empty tape)");

    // Iterative post-order DFS over grad-requiring parents.
    std::vector<detail::TensorNode*> order;
    std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
    std::vector<detail::TensorNode*> seen;
    auto mark = [&seen](detail::TensorNode* n) {
        if (std::find(seen.begin(), seen.end(), n) != seen.end()) return false;
        seen.push_back(n);
        return true;
    };
    // A pointer-set would be asymptotically better; tapes here are small
    // enough that the linear scan has never shown up in profiles.
    if (mark(loss.node().get())) stack.emplace_back(loss.node().get(), 0);
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        bool descended = false;
        while (child < node->parents.size()) {
            detail::TensorNode* p = node->parents[child++].get();
            if (p->requires_grad && mark(p)) {
                stack.emplace_back(p, 0);
                descended = true;
                break;
            }
        }
        if (!descended && (stack.back().second >= stack.back().first->parents.size())) {
            order.push_back(stack.back().first);
            stack.pop_back();
        }
    }

    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace indirec
