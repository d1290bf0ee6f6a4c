#pragma once

#include <dpl/tape.hpp>
#include <dpl/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

// Differentiable operations over Tape-recorded Vars. Every op computes its output eagerly,
// then records a closure that accumulates input gradients during Tape::backward.

namespace dpl {

using Mask = std::vector<std::uint8_t>;

namespace detail {

inline void accumulate(Tensor& dst, const Tensor& src)
{
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i)
        d[i] += s[i];
}

inline bool is_scalar(const Tensor& t) { return t.rank() == 0; }

inline void require_rank(const Var& v, std::size_t rank, const char* op)
{
    if (v.value().rank() != rank)
        throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got "
                             + shape_str(v.shape()));
}

enum class Binary { add, sub, mul, div };

inline double apply(Binary k, double a, double b)
{
    switch (k) {
    case Binary::add: return a + b;
    case Binary::sub: return a - b;
    case Binary::mul: return a * b;
    case Binary::div: return a / b;
    }
    return 0.0;
}

// Partial derivatives of apply(k, a, b) with respect to a and b.
inline double d_lhs(Binary k, double, double b)
{
    switch (k) {
    case Binary::add:
    case Binary::sub: return 1.0;
    case Binary::mul: return b;
    case Binary::div: return 1.0 / b;
    }
    return 0.0;
}

inline double d_rhs(Binary k, double a, double b)
{
    switch (k) {
    case Binary::add: return 1.0;
    case Binary::sub: return -1.0;
    case Binary::mul: return a;
    case Binary::div: return -a / (b * b);
    }
    return 0.0;
}

inline Var binary(const Var& a, const Var& b, Binary kind, const char* name)
{
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const bool a_scalar = is_scalar(av) && !is_scalar(bv);
    const bool b_scalar = is_scalar(bv) && !is_scalar(av);
    if (!a_scalar && !b_scalar && av.shape() != bv.shape())
        throw DimensionError(std::string(name) + " shape mismatch " + shape_str(av.shape()) + " vs "
                             + shape_str(bv.shape()));
    Tensor out(a_scalar ? bv.shape() : av.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i)
        out[i] = apply(kind, av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(ib);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad(ia);
            for (std::size_t i = 0; i < n; ++i)
                ga[a_scalar ? 0 : i] += g[i] * d_lhs(kind, x[a_scalar ? 0 : i], y[b_scalar ? 0 : i]);
        }
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad(ib);
            for (std::size_t i = 0; i < n; ++i)
                gb[b_scalar ? 0 : i] += g[i] * d_rhs(kind, x[a_scalar ? 0 : i], y[b_scalar ? 0 : i]);
        }
    });
}

template <class F, class DF>
Var unary(const Var& x, F f, DF df)
{
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = f(xv[i]);
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& in = t.value(ix);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i] * df(in[i], y[i]);
    });
}

} // namespace detail

// ---------------------------------------------------------------------------------------------
// Elementwise

/// Elementwise sum; either operand may be a rank-0 scalar that broadcasts.
inline Var add(const Var& a, const Var& b) { return detail::binary(a, b, detail::Binary::add, "add"); }
inline Var sub(const Var& a, const Var& b) { return detail::binary(a, b, detail::Binary::sub, "sub"); }
inline Var mul(const Var& a, const Var& b) { return detail::binary(a, b, detail::Binary::mul, "mul"); }
inline Var div(const Var& a, const Var& b) { return detail::binary(a, b, detail::Binary::div, "div"); }

inline Var scale(const Var& x, double s)
{
    return detail::unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& x, double s)
{
    return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }

inline Var exp(const Var& x)
{
    return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(const Var& x)
{
    return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var sqrt(const Var& x)
{
    return detail::unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Var square(const Var& x)
{
    return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var relu(const Var& x)
{
    // NaN passes through.
    return detail::unary(x, [](double v) { return v > 0.0 || std::isnan(v) ? v : 0.0; },
                         [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// max(x, floor) elementwise; the gradient is zero where the floor is active.
inline Var clamp_min(const Var& x, double floor)
{
    return detail::unary(x, [floor](double v) { return v > floor ? v : floor; },
                         [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

/// Cut the gradient path: a constant copy on the same tape.
inline Var detach(const Var& x) { return x.tape().constant(x.value()); }

inline Var reshape(const Var& x, Shape shape)
{
    Tensor out = x.value().reshaped(std::move(shape));
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
        detail::accumulate(t.grad(ix), t.grad(self).reshaped(t.value(ix).shape()));
    });
}

// ---------------------------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x)
{
    double s = 0.0;
    for (double v : x.value().data())
        s += v;
    const std::size_t ix = x.id();
    return x.tape().record(Tensor::scalar(s), {x}, [ix](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        for (double& v : t.grad(ix).data())
            v += g;
    });
}

inline Var mean(const Var& x)
{
    if (x.value().size() == 0)
        throw ContractError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Sum over one axis; the axis is removed from the result shape.
inline Var sum_axis(const Var& x, std::size_t axis)
{
    const Shape& s = x.shape();
    if (axis >= s.size())
        throw DimensionError("sum_axis axis out of range for " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i)
        outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i)
        inner *= s[i];
    const std::size_t len = s[axis];
    Shape os = s;
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor out(os);
    const Tensor& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
            for (std::size_t i = 0; i < inner; ++i)
                out[o * inner + i] += xv[(o * len + k) * inner + i];
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < len; ++k)
                for (std::size_t i = 0; i < inner; ++i)
                    gx[(o * len + k) * inner + i] += g[o * inner + i];
    });
}

inline Var mean_axis(const Var& x, std::size_t axis)
{
    const std::size_t len = x.value().dim(axis);
    if (len == 0)
        throw ContractError("mean_axis over an empty axis");
    return scale(sum_axis(x, axis), 1.0 / static_cast<double>(len));
}

// ---------------------------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b)
{
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw DimensionError("matmul inner dimension mismatch " + shape_str(a.shape()) + " . "
                             + shape_str(b.shape()));
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j)
                out[i * n + j] += aip * bv[p * n + j];
        }
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& A = t.value(ia);
        const Tensor& B = t.value(ib);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad(ia); // g . B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        acc += g[i * n + j] * B[p * n + j];
                    ga[i * k + p] += acc;
                }
        }
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad(ib); // A^T . g
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A[i * k + p];
                    for (std::size_t j = 0; j < n; ++j)
                        gb[p * n + j] += aip * g[i * n + j];
                }
        }
    });
}

inline Var transpose(const Var& x)
{
    detail::require_rank(x, 2, "transpose");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    const Tensor& xv = x.value();
    Tensor out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out[j * r + i] = xv[i * c + j];
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                gx[i * c + j] += g[j * r + i];
    });
}

// ---------------------------------------------------------------------------------------------
// Softmax family (last axis)

inline Tensor softmax_values(const Tensor& x)
{
    if (x.rank() == 0 || x.shape().back() == 0)
        throw DimensionError("softmax needs a non-empty last dimension");
    const std::size_t c = x.shape().back();
    const std::size_t rows = x.size() / c;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * c;
        double* o = out.data().data() + r * c;
        const double mx = *std::max_element(in, in + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j)
            z += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < c; ++j)
            o[j] /= z;
    }
    return out;
}

inline Var softmax(const Var& x)
{
    Tensor out = softmax_values(x.value());
    const std::size_t c = x.shape().back();
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < y.size() / c; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j)
                dot += g[r * c + j] * y[r * c + j];
            for (std::size_t j = 0; j < c; ++j)
                gx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
        }
    });
}

inline Var log_softmax(const Var& x)
{
    const Tensor& xv = x.value();
    if (xv.rank() == 0 || xv.shape().back() == 0)
        throw DimensionError("log_softmax needs a non-empty last dimension");
    const std::size_t c = xv.shape().back();
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < xv.size() / c; ++r) {
        const double* in = xv.data().data() + r * c;
        const double mx = *std::max_element(in, in + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j)
            z += std::exp(in[j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j)
            out[r * c + j] = in[j] - lse;
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < y.size() / c; ++r) {
            double gs = 0.0;
            for (std::size_t j = 0; j < c; ++j)
                gs += g[r * c + j];
            for (std::size_t j = 0; j < c; ++j)
                gx[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * gs;
        }
    });
}

/// Per-row cross-entropy -log softmax(x_r)[labels_r]. When the labeled logit is the row maximum the
/// value is evaluated with log1p, so tiny losses keep full relative precision.
inline Var cross_entropy_rows(const Var& x, std::vector<std::size_t> labels)
{
    detail::require_rank(x, 2, "cross_entropy_rows");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (labels.size() != rows)
        throw DimensionError("cross_entropy_rows label count mismatch");
    const Tensor& xv = x.value();
    Tensor out(Shape{rows});
    Tensor probs(Shape{rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t y = labels[r];
        if (y >= cols)
            throw ContractError("label " + std::to_string(y) + " out of range for " + std::to_string(cols) + " classes");
        const double* in = xv.data().data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j)
            z += std::exp(in[j] - mx);
        for (std::size_t j = 0; j < cols; ++j)
            probs(r, j) = std::exp(in[j] - mx) / z;
        if (in[y] == mx) {
            double rest = 0.0;
            for (std::size_t j = 0; j < cols; ++j)
                if (j != y)
                    rest += std::exp(in[j] - mx);
            out[r] = std::log1p(rest);
        } else {
            out[r] = (mx - in[y]) + std::log(z);
        }
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=, labels = std::move(labels)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j)
                gx[r * cols + j] += g[r] * (probs(r, j) - (j == labels[r] ? 1.0 : 0.0));
    });
}

/// Row-wise log-sum-exp over the entries selected by `mask` (row-major, same size as x).
/// Every row must select at least one entry.
inline Var logsumexp_masked(const Var& x, const Mask& mask)
{
    detail::require_rank(x, 2, "logsumexp_masked");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (mask.size() != rows * cols)
        throw DimensionError("logsumexp_masked mask size mismatch");
    const Tensor& xv = x.value();
    Tensor out(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < cols; ++j)
            if (mask[r * cols + j])
                mx = std::max(mx, xv[r * cols + j]);
        if (mx == -std::numeric_limits<double>::infinity())
            throw ContractError("logsumexp_masked: row " + std::to_string(r) + " selects no entries");
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j)
            if (mask[r * cols + j])
                z += std::exp(xv[r * cols + j] - mx);
        out[r] = mx + std::log(z);
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        const Tensor& in = t.value(ix);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j)
                if (mask[r * cols + j])
                    gx[r * cols + j] += g[r] * std::exp(in[r * cols + j] - y[r]);
    });
}

// ---------------------------------------------------------------------------------------------
// Cosine geometry

/// Scale each row of a matrix to unit Euclidean norm.
inline Var l2_normalize_rows(const Var& x)
{
    detail::require_rank(x, 2, "l2_normalize_rows");
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    const Tensor& xv = x.value();
    Tensor out(x.shape());
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            s += xv[r * d + j] * xv[r * d + j];
        norms[r] = std::sqrt(s);
        if (!(norms[r] > 0.0))
            throw DegenerateInputError("zero-norm vector in cosine similarity (row " + std::to_string(r) + ")");
        for (std::size_t j = 0; j < d; ++j)
            out[r * d + j] = xv[r * d + j] / norms[r];
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j)
                dot += y[r * d + j] * g[r * d + j];
            for (std::size_t j = 0; j < d; ++j)
                gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
        }
    });
}

/// Pairwise cosine similarities: result[i][j] = cos(a_i, b_j).
inline Var cosine_matrix(const Var& a, const Var& b)
{
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

/// Cosine similarity of two vectors, differentiable through both.
inline Var cosine_similarity(const Var& a, const Var& b)
{
    detail::require_rank(a, 1, "cosine_similarity");
    detail::require_rank(b, 1, "cosine_similarity");
    if (a.shape() != b.shape())
        throw DimensionError("cosine_similarity length mismatch");
    const std::size_t d = a.shape()[0];
    return reshape(cosine_matrix(reshape(a, {1, d}), reshape(b, {1, d})), Shape{});
}

// ---------------------------------------------------------------------------------------------
// Row selection

/// Rows at `idx` along axis 0 (indices may repeat).
inline Var gather_rows(const Var& x, std::vector<std::size_t> idx)
{
    Tensor out = gather_rows(x.value(), idx);
    const std::size_t stride = x.shape()[0] ? x.value().size() / x.shape()[0] : 0;
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=, idx = std::move(idx)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < stride; ++j)
                gx[idx[r] * stride + j] += g[r * stride + j];
    });
}

/// Concatenate along axis 0.
inline Var concat_rows(const std::vector<Var>& parts)
{
    if (parts.empty())
        throw ContractError("concat_rows needs at least one Var");
    std::vector<Tensor> values;
    values.reserve(parts.size());
    for (const Var& p : parts)
        values.push_back(p.value());
    Tensor out = concat_rows(std::span<const Tensor>(values));
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        ids.push_back(p.id());
        offsets.push_back(off);
        off += p.value().size();
    }
    return parts.front().tape().record(std::move(out), parts, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k]))
                continue;
            Tensor& gp = t.grad(ids[k]);
            for (std::size_t j = 0; j < gp.size(); ++j)
                gp[j] += g[offsets[k] + j];
        }
    });
}

// ---------------------------------------------------------------------------------------------
// Convolutional layers (NCHW)

/// Direct 2-D convolution, stride 1, symmetric zero padding `pad`.
/// x: N x Cin x H x W, weight: Cout x Cin x K x K, bias: Cout.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t pad)
{
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(weight, 4, "conv2d weight");
    detail::require_rank(bias, 1, "conv2d bias");
    const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const std::size_t cout = weight.shape()[0], k = weight.shape()[2];
    if (weight.shape()[1] != cin || weight.shape()[3] != k || bias.shape()[0] != cout)
        throw DimensionError("conv2d parameter shapes " + shape_str(weight.shape()) + ", " + shape_str(bias.shape())
                             + " incompatible with input " + shape_str(x.shape()));
    if (h + 2 * pad < k || w + 2 * pad < k)
        throw DimensionError("conv2d kernel larger than padded input");
    const std::size_t oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
    const auto sp = static_cast<std::ptrdiff_t>(pad);

    // Valid output column range for a kernel column offset kw.
    auto col_range = [=](std::size_t kw, std::size_t& lo, std::size_t& hi) {
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kw) - sp;
        lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -shift));
        hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow),
                                                               static_cast<std::ptrdiff_t>(w) - shift));
    };

    const Tensor& X = x.value();
    const Tensor& Wt = weight.value();
    const Tensor& B = bias.value();
    Tensor out(Shape{n, cout, oh, ow});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
            double* o = &out(b, co, 0, 0);
            std::fill(o, o + oh * ow, B[co]);
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double* in = &X(b, ci, 0, 0);
                for (std::size_t kh = 0; kh < k; ++kh)
                    for (std::size_t kw = 0; kw < k; ++kw) {
                        const double wv = Wt(co, ci, kh, kw);
                        std::size_t lo, hi;
                        col_range(kw, lo, hi);
                        for (std::size_t r = 0; r < oh; ++r) {
                            const std::ptrdiff_t ir = static_cast<std::ptrdiff_t>(r + kh) - sp;
                            if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(h))
                                continue;
                            const double* irow = in + static_cast<std::size_t>(ir) * w + kw - pad;
                            double* orow = o + r * ow;
                            for (std::size_t c = lo; c < hi; ++c)
                                orow[c] += wv * irow[c];
                        }
                    }
            }
        }

    const std::size_t ixd = x.id(), iw = weight.id(), ib = bias.id();
    return x.tape().record(std::move(out), {x, weight, bias}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& X = t.value(ixd);
        const Tensor& Wt = t.value(iw);
        const bool gx_on = t.requires_grad(ixd), gw_on = t.requires_grad(iw);
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad(ib);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t co = 0; co < cout; ++co) {
                    const double* gr = &g(b, co, 0, 0);
                    double s = 0.0;
                    for (std::size_t i = 0; i < oh * ow; ++i)
                        s += gr[i];
                    gb[co] += s;
                }
        }
        if (!gx_on && !gw_on)
            return;
        Tensor* gx = gx_on ? &t.grad(ixd) : nullptr;
        Tensor* gw = gw_on ? &t.grad(iw) : nullptr;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t co = 0; co < cout; ++co) {
                const double* gr = &g(b, co, 0, 0);
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* in = &X(b, ci, 0, 0);
                    double* gin = gx ? &(*gx)(b, ci, 0, 0) : nullptr;
                    for (std::size_t kh = 0; kh < k; ++kh)
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const double wv = Wt(co, ci, kh, kw);
                            std::size_t lo, hi;
                            col_range(kw, lo, hi);
                            double acc = 0.0;
                            for (std::size_t r = 0; r < oh; ++r) {
                                const std::ptrdiff_t ir = static_cast<std::ptrdiff_t>(r + kh) - sp;
                                if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(h))
                                    continue;
                                const std::size_t base = static_cast<std::size_t>(ir) * w + kw - pad;
                                const double* grow = gr + r * ow;
                                if (gw) {
                                    const double* irow = in + base;
                                    for (std::size_t c = lo; c < hi; ++c)
                                        acc += grow[c] * irow[c];
                                }
                                if (gin) {
                                    double* girow = gin + base;
                                    for (std::size_t c = lo; c < hi; ++c)
                                        girow[c] += wv * grow[c];
                                }
                            }
                            if (gw)
                                (*gw)(co, ci, kh, kw) += acc;
                        }
                }
            }
    });
}

/// Mean over H and W: N x C x H x W -> N x C.
inline Var global_avg_pool(const Var& x)
{
    detail::require_rank(x, 4, "global_avg_pool");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (hw == 0)
        throw DimensionError("global_avg_pool over empty spatial extent");
    const Tensor& X = x.value();
    Tensor out(Shape{n, c});
    for (std::size_t i = 0; i < n * c; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j)
            s += X[i * hw + j];
        out[i] = s / static_cast<double>(hw);
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t i = 0; i < n * c; ++i) {
            const double v = g[i] / static_cast<double>(hw);
            for (std::size_t j = 0; j < hw; ++j)
                gx[i * hw + j] += v;
        }
    });
}

/// Per-channel y = scale[c] * x + shift[c] over N x C x H x W.
inline Var channel_affine(const Var& x, const Var& scale_c, const Var& shift_c)
{
    detail::require_rank(x, 4, "channel_affine");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (scale_c.shape() != Shape{c} || shift_c.shape() != Shape{c})
        throw DimensionError("channel_affine parameter length must equal channel count " + std::to_string(c));
    const Tensor& X = x.value();
    const Tensor& S = scale_c.value();
    const Tensor& B = shift_c.value();
    Tensor out(x.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j)
                out[base + j] = S[ch] * X[base + j] + B[ch];
        }
    const std::size_t ix = x.id(), is = scale_c.id(), ish = shift_c.id();
    return x.tape().record(std::move(out), {x, scale_c, shift_c}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& X = t.value(ix);
        const Tensor& S = t.value(is);
        const bool gx_on = t.requires_grad(ix), gs_on = t.requires_grad(is), gb_on = t.requires_grad(ish);
        Tensor* gx = gx_on ? &t.grad(ix) : nullptr;
        Tensor* gs = gs_on ? &t.grad(is) : nullptr;
        Tensor* gb = gb_on ? &t.grad(ish) : nullptr;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t base = (b * c + ch) * hw;
                double ss = 0.0, sb = 0.0;
                for (std::size_t j = 0; j < hw; ++j) {
                    const double gv = g[base + j];
                    if (gx)
                        (*gx)[base + j] += gv * S[ch];
                    ss += gv * X[base + j];
                    sb += gv;
                }
                if (gs)
                    (*gs)[ch] += ss;
                if (gb)
                    (*gb)[ch] += sb;
            }
    });
}

/// Per-channel statistics over N, H and W of an NCHW tensor (population variance).
struct BatchMoments {
    Tensor mean;
    Tensor var;
};

inline BatchMoments batch_moments(const Tensor& x)
{
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const double m = static_cast<double>(n * hw);
    BatchMoments out{Tensor(Shape{c}), Tensor(Shape{c})};
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t j = 0; j < hw; ++j)
                s += x[(b * c + ch) * hw + j];
        const double mu = s / m;
        double v = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t j = 0; j < hw; ++j) {
                const double d = x[(b * c + ch) * hw + j] - mu;
                v += d * d;
            }
        out.mean[ch] = mu;
        out.var[ch] = v / m;
    }
    return out;
}

/// Standardize each channel with the current batch's statistics: (x - mu_c) / sqrt(var_c + eps).
/// The statistics are differentiated through.
inline Var batch_standardize(const Var& x, double eps, BatchMoments* moments_out = nullptr)
{
    detail::require_rank(x, 4, "batch_standardize");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (n * hw == 0)
        throw DimensionError("batch_standardize on empty batch");
    BatchMoments mom = batch_moments(x.value());
    std::vector<double> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch)
        inv_std[ch] = 1.0 / std::sqrt(mom.var[ch] + eps);
    const Tensor& X = x.value();
    Tensor out(x.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j)
                out[base + j] = (X[base + j] - mom.mean[ch]) * inv_std[ch];
        }
    if (moments_out)
        *moments_out = mom;
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad(ix);
        const double m = static_cast<double>(n * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double gsum = 0.0, gy = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t j = 0; j < hw; ++j) {
                    const std::size_t i = (b * c + ch) * hw + j;
                    gsum += g[i];
                    gy += g[i] * y[i];
                }
            const double gm = gsum / m, gym = gy / m;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t j = 0; j < hw; ++j) {
                    const std::size_t i = (b * c + ch) * hw + j;
                    gx[i] += inv_std[ch] * (g[i] - gm - y[i] * gym);
                }
        }
    });
}

/// Standardize channels with fixed (non-differentiated) statistics, using the same arithmetic as
/// batch_standardize so identical statistics give identical outputs.
inline Var standardize_with(const Var& x, const Tensor& mean_c, const Tensor& var_c, double eps)
{
    detail::require_rank(x, 4, "standardize_with");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (mean_c.shape() != Shape{c} || var_c.shape() != Shape{c})
        throw DimensionError("standardize_with statistics length must equal channel count");
    std::vector<double> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch)
        inv_std[ch] = 1.0 / std::sqrt(var_c[ch] + eps);
    const Tensor& X = x.value();
    Tensor out(x.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j)
                out[base + j] = (X[base + j] - mean_c[ch]) * inv_std[ch];
        }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t base = (b * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j)
                    gx[base + j] += g[base + j] * inv_std[ch];
            }
    });
}

/// Per-sample, per-channel spatial mean: N x C x H x W -> N x C.
inline Var spatial_mean(const Var& x) { return global_avg_pool(x); }

/// Per-sample, per-channel spatial standard deviation (population form): N x C x H x W -> N x C.
/// The gradient of a zero deviation is taken as zero.
inline Var spatial_std(const Var& x)
{
    detail::require_rank(x, 4, "spatial_std");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (hw == 0)
        throw DimensionError("spatial_std over empty spatial extent");
    const Tensor& X = x.value();
    Tensor out(Shape{n, c});
    std::vector<double> mu(n * c);
    for (std::size_t i = 0; i < n * c; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j)
            s += X[i * hw + j];
        mu[i] = s / static_cast<double>(hw);
        double v = 0.0;
        for (std::size_t j = 0; j < hw; ++j) {
            const double d = X[i * hw + j] - mu[i];
            v += d * d;
        }
        out[i] = std::sqrt(v / static_cast<double>(hw));
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& sd = t.value(self);
        const Tensor& X = t.value(ix);
        Tensor& gx = t.grad(ix);
        for (std::size_t i = 0; i < n * c; ++i) {
            if (!(sd[i] > 0.0))
                continue;
            const double k = g[i] / (static_cast<double>(hw) * sd[i]);
            for (std::size_t j = 0; j < hw; ++j)
                gx[i * hw + j] += k * (X[i * hw + j] - mu[i]);
        }
    });
}

/// Repeat an N x C tensor over an H x W grid: N x C -> N x C x H x W.
inline Var broadcast_spatial(const Var& x, std::size_t h, std::size_t w)
{
    detail::require_rank(x, 2, "broadcast_spatial");
    const std::size_t nc = x.value().size(), hw = h * w;
    Tensor out(Shape{x.shape()[0], x.shape()[1], h, w});
    const Tensor& X = x.value();
    for (std::size_t i = 0; i < nc; ++i)
        std::fill(out.data().begin() + static_cast<std::ptrdiff_t>(i * hw),
                  out.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * hw), X[i]);
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t i = 0; i < nc; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < hw; ++j)
                s += g[i * hw + j];
            gx[i] += s;
        }
    });
}

} // namespace dpl
