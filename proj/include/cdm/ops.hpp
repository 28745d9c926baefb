#pragma once

// Differentiable tensor operations. Forward values are computed identically
// whether or not a GradientTape is active; recording is a side effect.
//
// Broadcast rule (binary ops): operands must have the same rank, and each
// axis extent must either match or be 1 on exactly the operand being
// broadcast along that axis. There is no rank promotion and no general
// NumPy-style broadcasting. Backward reduces (sums) the gradient over the
// broadcast axes.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>

#include "cdm/tensor.hpp"

namespace cdm {

namespace detail {

inline void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                  const float* a, int lda, const float* b, int ldb, float beta,
                  float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

// Pads a shape with leading unit axes to rank 4 (loop machinery only; the
// user-facing rule requires equal ranks).
inline std::array<int, 4> pad4(const Shape& s) {
    std::array<int, 4> r{1, 1, 1, 1};
    const int off = 4 - static_cast<int>(s.size());
    for (size_t i = 0; i < s.size(); ++i) r[off + i] = s[i];
    return r;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    if (a.size() > 4)
        throw std::invalid_argument(std::string(op) + ": rank > 4 unsupported");
    Shape out(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i]) out[i] = a[i];
        else if (a[i] == 1) out[i] = b[i];
        else if (b[i] == 1) out[i] = a[i];
        else
            throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                                        " differ outside the unit-axis broadcast rule");
    }
    return out;
}

template <typename F>
inline Tensor broadcast_apply(const Tensor& a, const Tensor& b, const char* op, F f) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
    Tensor out(out_shape);
    if (a.shape() == b.shape()) {
        const float* pa = a.data();
        const float* pb = b.data();
        float* po = out.data();
        const int64_t n = out.size();
        for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    const auto sa = pad4(a.shape());
    const auto sb = pad4(b.shape());
    const auto so = pad4(out_shape);
    int64_t stride_a[4], stride_b[4];
    int64_t acc_a = 1, acc_b = 1;
    for (int i = 3; i >= 0; --i) {
        stride_a[i] = (sa[i] == 1) ? 0 : acc_a;
        stride_b[i] = (sb[i] == 1) ? 0 : acc_b;
        acc_a *= sa[i];
        acc_b *= sb[i];
    }
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t idx = 0;
    for (int i0 = 0; i0 < so[0]; ++i0)
        for (int i1 = 0; i1 < so[1]; ++i1)
            for (int i2 = 0; i2 < so[2]; ++i2) {
                const float* ra = pa + i0 * stride_a[0] + i1 * stride_a[1] + i2 * stride_a[2];
                const float* rb = pb + i0 * stride_b[0] + i1 * stride_b[1] + i2 * stride_b[2];
                if (stride_a[3] && stride_b[3]) {
                    for (int i3 = 0; i3 < so[3]; ++i3) po[idx++] = f(ra[i3], rb[i3]);
                } else if (stride_a[3]) {
                    const float vb = rb[0];
                    for (int i3 = 0; i3 < so[3]; ++i3) po[idx++] = f(ra[i3], vb);
                } else if (stride_b[3]) {
                    const float va = ra[0];
                    for (int i3 = 0; i3 < so[3]; ++i3) po[idx++] = f(va, rb[i3]);
                } else {
                    po[idx++] = f(ra[0], rb[0]);
                }
            }
    return out;
}

// Sums `g` over the axes that were broadcast to reach `g.shape()` from
// `target`, producing a tensor of shape `target`.
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor out(target);
    const auto sg = pad4(g.shape());
    const auto st = pad4(target);
    int64_t stride_t[4];
    int64_t acc = 1;
    for (int i = 3; i >= 0; --i) {
        stride_t[i] = (st[i] == 1) ? 0 : acc;
        acc *= st[i];
    }
    const float* pg = g.data();
    float* po = out.data();
    int64_t idx = 0;
    for (int i0 = 0; i0 < sg[0]; ++i0)
        for (int i1 = 0; i1 < sg[1]; ++i1)
            for (int i2 = 0; i2 < sg[2]; ++i2) {
                float* rt = po + i0 * stride_t[0] + i1 * stride_t[1] + i2 * stride_t[2];
                const float* rg = pg + idx;
                if (stride_t[3]) {
                    for (int i3 = 0; i3 < sg[3]; ++i3) rt[i3] += rg[i3];
                } else {
                    double s = 0.0;
                    for (int i3 = 0; i3 < sg[3]; ++i3) s += rg[i3];
                    rt[0] += static_cast<float>(s);
                }
                idx += sg[3];
            }
    return out;
}

template <typename FwdF, typename BwdF>
inline Tensor unary_op(const Tensor& x, FwdF f, BwdF df_from_x) {
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&x}, [x, df_from_x](const Tensor& g, std::span<const bool>) {
            Tensor gx(x.shape());
            const float* pg = g.data();
            const float* pxx = x.data();
            float* pgx = gx.data();
            for (int64_t i = 0; i < gx.size(); ++i) pgx[i] = pg[i] * df_from_x(pxx[i]);
            return std::vector<Tensor>{gx};
        });
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (add / sub / mul) with unit-axis broadcasting.

namespace detail {

enum class BinOp { Add, Sub, Mul };

inline Tensor binary(BinOp op, const Tensor& a, const Tensor& b, const char* name) {
    Tensor out;
    switch (op) {
        case BinOp::Add: out = broadcast_apply(a, b, name, [](float x, float y) { return x + y; }); break;
        case BinOp::Sub: out = broadcast_apply(a, b, name, [](float x, float y) { return x - y; }); break;
        case BinOp::Mul: out = broadcast_apply(a, b, name, [](float x, float y) { return x * y; }); break;
    }
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&a, &b}, [op, a, b](const Tensor& g, std::span<const bool> needs) {
            std::vector<Tensor> grads(2);
            if (needs[0]) {
                Tensor ga = (op == BinOp::Mul) ? broadcast_apply(g, b, "mul_bwd", [](float x, float y) { return x * y; }) : g;
                grads[0] = reduce_to(ga, a.shape());
            }
            if (needs[1]) {
                Tensor gb;
                switch (op) {
                    case BinOp::Add: gb = g; break;
                    case BinOp::Sub: gb = broadcast_apply(g, g, "neg", [](float x, float) { return -x; }); break;
                    case BinOp::Mul: gb = broadcast_apply(g, a, "mul_bwd", [](float x, float y) { return x * y; }); break;
                }
                grads[1] = reduce_to(gb, b.shape());
            }
            return grads;
        });
    }
    return out;
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinOp::Add, a, b, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinOp::Sub, a, b, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinOp::Mul, a, b, "mul"); }

// x * s and x + s for scalar constants.
inline Tensor scale(const Tensor& x, float s) {
    return detail::unary_op(x, [s](float v) { return v * s; }, [s](float) { return s; });
}

inline Tensor offset(const Tensor& x, float s) {
    return detail::unary_op(x, [s](float v) { return v + s; }, [](float) { return 1.0f; });
}

// ---------------------------------------------------------------------------
// Matrix multiply [m,k] x [k,n] -> [m,n].

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1];
    const int kb = b.shape()[0], n = b.shape()[1];
    if (k != kb)
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out({m, n});
    detail::sgemm(false, false, m, n, k, 1.0f, a.data(), k, b.data(), n, 0.0f, out.data(), n);
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&a, &b}, [a, b, m, n, k](const Tensor& g, std::span<const bool> needs) {
            std::vector<Tensor> grads(2);
            if (needs[0]) { // dA = g . B^T
                Tensor ga({m, k});
                detail::sgemm(false, true, m, k, n, 1.0f, g.data(), n, b.data(), n, 0.0f, ga.data(), k);
                grads[0] = ga;
            }
            if (needs[1]) { // dB = A^T . g
                Tensor gb({k, n});
                detail::sgemm(true, false, k, n, m, 1.0f, a.data(), k, g.data(), n, 0.0f, gb.data(), n);
                grads[1] = gb;
            }
            return grads;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// 2D cross-correlation with zero padding. x:[b,c,h,w], w:[o,c,kh,kw].

namespace detail {

struct ConvDims {
    int b, c, h, w, o, kh, kw, oh, ow, stride, pad;
    int64_t col_rows() const { return static_cast<int64_t>(c) * kh * kw; }
    int64_t out_pixels() const { return static_cast<int64_t>(oh) * ow; }
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4)
        throw std::invalid_argument("conv2d: x and kernel must be rank 4");
    ConvDims d;
    d.b = x.shape()[0]; d.c = x.shape()[1]; d.h = x.shape()[2]; d.w = x.shape()[3];
    d.o = w.shape()[0]; d.kh = w.shape()[2]; d.kw = w.shape()[3];
    d.stride = stride; d.pad = pad;
    if (w.shape()[1] != d.c)
        throw std::invalid_argument("conv2d: kernel channels " + std::to_string(w.shape()[1]) + " != input channels " + std::to_string(d.c));
    if (d.kh % 2 == 0 || d.kw % 2 == 0) throw std::invalid_argument("conv2d: kernel extents must be odd");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.kh > d.h + 2 * pad || d.kw > d.w + 2 * pad || d.oh <= 0 || d.ow <= 0)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    return d;
}

// col layout: [c*kh*kw, oh*ow], row index ((c*kh)+ki)*kw+kj to match the
// kernel's flat layout.
inline void im2col(const float* x, const ConvDims& d, float* col) {
    const int64_t np = d.out_pixels();
    for (int c = 0; c < d.c; ++c) {
        const float* xc = x + static_cast<int64_t>(c) * d.h * d.w;
        for (int ki = 0; ki < d.kh; ++ki)
            for (int kj = 0; kj < d.kw; ++kj) {
                float* row = col + ((static_cast<int64_t>(c) * d.kh + ki) * d.kw + kj) * np;
                int64_t p = 0;
                for (int i = 0; i < d.oh; ++i) {
                    const int yi = i * d.stride - d.pad + ki;
                    if (yi < 0 || yi >= d.h) {
                        for (int j = 0; j < d.ow; ++j) row[p++] = 0.0f;
                        continue;
                    }
                    const float* xr = xc + static_cast<int64_t>(yi) * d.w;
                    for (int j = 0; j < d.ow; ++j) {
                        const int xj = j * d.stride - d.pad + kj;
                        row[p++] = (xj >= 0 && xj < d.w) ? xr[xj] : 0.0f;
                    }
                }
            }
    }
}

inline void col2im_add(const float* col, const ConvDims& d, float* x) {
    const int64_t np = d.out_pixels();
    for (int c = 0; c < d.c; ++c) {
        float* xc = x + static_cast<int64_t>(c) * d.h * d.w;
        for (int ki = 0; ki < d.kh; ++ki)
            for (int kj = 0; kj < d.kw; ++kj) {
                const float* row = col + ((static_cast<int64_t>(c) * d.kh + ki) * d.kw + kj) * np;
                int64_t p = 0;
                for (int i = 0; i < d.oh; ++i) {
                    const int yi = i * d.stride - d.pad + ki;
                    if (yi < 0 || yi >= d.h) {
                        p += d.ow;
                        continue;
                    }
                    float* xr = xc + static_cast<int64_t>(yi) * d.w;
                    for (int j = 0; j < d.ow; ++j) {
                        const int xj = j * d.stride - d.pad + kj;
                        if (xj >= 0 && xj < d.w) xr[xj] += row[p];
                        ++p;
                    }
                }
            }
    }
}

inline std::vector<float>& conv_scratch() {
    static thread_local std::vector<float> buf;
    return buf;
}

} // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int pad = 0) {
    const auto d = detail::conv_dims(x, w, stride, pad);
    Tensor out({d.b, d.o, d.oh, d.ow});
    const int64_t K = d.col_rows();
    const int64_t np = d.out_pixels();
    auto& col = detail::conv_scratch();
    col.resize(static_cast<size_t>(K * np));
    const int64_t x_stride = static_cast<int64_t>(d.c) * d.h * d.w;
    const int64_t o_stride = static_cast<int64_t>(d.o) * np;
    for (int s = 0; s < d.b; ++s) {
        detail::im2col(x.data() + s * x_stride, d, col.data());
        detail::sgemm(false, false, d.o, static_cast<int>(np), static_cast<int>(K), 1.0f,
                      w.data(), static_cast<int>(K), col.data(), static_cast<int>(np), 0.0f,
                      out.data() + s * o_stride, static_cast<int>(np));
    }
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&x, &w}, [x, w, d](const Tensor& g, std::span<const bool> needs) {
            const int64_t K = d.col_rows();
            const int64_t np = d.out_pixels();
            const int64_t x_stride = static_cast<int64_t>(d.c) * d.h * d.w;
            const int64_t o_stride = static_cast<int64_t>(d.o) * np;
            std::vector<Tensor> grads(2);
            std::vector<float> col(static_cast<size_t>(K * np));
            if (needs[1]) {
                Tensor gw(w.shape()); // zero-initialized; accumulate over batch
                for (int s = 0; s < d.b; ++s) {
                    detail::im2col(x.data() + s * x_stride, d, col.data());
                    detail::sgemm(false, true, d.o, static_cast<int>(K), static_cast<int>(np), 1.0f,
                                  g.data() + s * o_stride, static_cast<int>(np), col.data(), static_cast<int>(np),
                                  1.0f, gw.data(), static_cast<int>(K));
                }
                grads[1] = gw;
            }
            if (needs[0]) {
                Tensor gx(x.shape());
                for (int s = 0; s < d.b; ++s) {
                    detail::sgemm(true, false, static_cast<int>(K), static_cast<int>(np), d.o, 1.0f,
                                  w.data(), static_cast<int>(K), g.data() + s * o_stride, static_cast<int>(np),
                                  0.0f, col.data(), static_cast<int>(np));
                    detail::col2im_add(col.data(), d, gx.data() + s * x_stride);
                }
                grads[0] = gx;
            }
            return grads;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise unaries.

inline Tensor relu(const Tensor& x) {
    return detail::unary_op(x, [](float v) { return v > 0.0f ? v : 0.0f; },
                            [](float v) { return v > 0.0f ? 1.0f : 0.0f; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
                            [](float v) {
                                const float s = 1.0f / (1.0f + std::exp(-v));
                                return s * (1.0f - s);
                            });
}

inline Tensor silu(const Tensor& x) {
    return detail::unary_op(x, [](float v) { return v / (1.0f + std::exp(-v)); },
                            [](float v) {
                                const float s = 1.0f / (1.0f + std::exp(-v));
                                return s * (1.0f + v * (1.0f - s));
                            });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary_op(x, [](float v) { return std::exp(v); },
                            [](float v) { return std::exp(v); });
}

inline Tensor abs(const Tensor& x) {
    return detail::unary_op(x, [](float v) { return std::fabs(v); },
                            [](float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

inline Tensor sqrt(const Tensor& x) {
    const float* p = x.data();
    for (int64_t i = 0; i < x.size(); ++i)
        if (p[i] < 0.0f) throw std::domain_error("sqrt: negative entry at index " + std::to_string(i));
    return detail::unary_op(x, [](float v) { return std::sqrt(v); },
                            [](float v) { return 0.5f / std::sqrt(std::max(v, 1e-12f)); });
}

inline Tensor pow(const Tensor& x, float p) {
    if (p != std::round(p)) {
        const float* px = x.data();
        for (int64_t i = 0; i < x.size(); ++i)
            if (px[i] < 0.0f) throw std::domain_error("pow: negative base with non-integer exponent");
    }
    return detail::unary_op(x, [p](float v) { return std::pow(v, p); },
                            [p](float v) { return p * std::pow(v, p - 1.0f); });
}

// Gradient passes through unclamped entries and is zero where the value was
// clamped.
inline Tensor clamp(const Tensor& x, float lo, float hi) {
    return detail::unary_op(x, [lo, hi](float v) { return std::min(std::max(v, lo), hi); },
                            [lo, hi](float v) { return (v >= lo && v <= hi) ? 1.0f : 0.0f; });
}

// ---------------------------------------------------------------------------
// Reductions (full reduce to a [1] scalar). Accumulation in double.

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    const float* p = x.data();
    for (int64_t i = 0; i < x.size(); ++i) s += p[i];
    Tensor out = Tensor::scalar(static_cast<float>(s));
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&x}, [x](const Tensor& g, std::span<const bool>) {
            return std::vector<Tensor>{Tensor::full(x.shape(), g.item())};
        });
    }
    return out;
}

inline Tensor mean(const Tensor& x) {
    double s = 0.0;
    const float* p = x.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) s += p[i];
    Tensor out = Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&x}, [x, n](const Tensor& g, std::span<const bool>) {
            return std::vector<Tensor>{Tensor::full(x.shape(), g.item() / static_cast<float>(n))};
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Group normalization over [b, C, *spatial] with per-channel affine.

inline Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    if (x.rank() < 2) throw std::invalid_argument("group_norm: input must have rank >= 2");
    const int b = x.shape()[0];
    const int c = x.shape()[1];
    if (groups < 1 || c % groups != 0)
        throw std::invalid_argument("group_norm: group count " + std::to_string(groups) + " does not divide channels " + std::to_string(c));
    if (gamma.size() != c || beta.size() != c)
        throw std::invalid_argument("group_norm: affine parameters must have one entry per channel");
    int64_t spatial = 1;
    for (int i = 2; i < x.rank(); ++i) spatial *= x.shape()[i];
    const int cpg = c / groups;
    const int64_t group_elems = cpg * spatial;

    Tensor out(x.shape());
    Tensor xhat(x.shape());
    std::vector<float> inv_std(static_cast<size_t>(b) * groups);
    const float* px = x.data();
    const float* pg = gamma.data();
    const float* pb = beta.data();
    float* po = out.data();
    float* ph = xhat.data();
    for (int s = 0; s < b; ++s)
        for (int g = 0; g < groups; ++g) {
            const int64_t base = (static_cast<int64_t>(s) * c + static_cast<int64_t>(g) * cpg) * spatial;
            double su = 0.0, sq = 0.0;
            for (int64_t i = 0; i < group_elems; ++i) {
                const double v = px[base + i];
                su += v;
                sq += v * v;
            }
            const double mu = su / static_cast<double>(group_elems);
            const double var = std::max(sq / static_cast<double>(group_elems) - mu * mu, 0.0);
            const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
            inv_std[static_cast<size_t>(s) * groups + g] = istd;
            for (int ch = 0; ch < cpg; ++ch) {
                const int cc = g * cpg + ch;
                const int64_t row = base + static_cast<int64_t>(ch) * spatial;
                for (int64_t i = 0; i < spatial; ++i) {
                    const float h = (px[row + i] - static_cast<float>(mu)) * istd;
                    ph[row + i] = h;
                    po[row + i] = h * pg[cc] + pb[cc];
                }
            }
        }

    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&x, &gamma, &beta},
                     [xhat, gamma, inv_std = std::move(inv_std), b, c, groups, cpg, spatial, group_elems](
                         const Tensor& gout, std::span<const bool> needs) {
            std::vector<Tensor> grads(3);
            const float* ph = xhat.data();
            const float* pgo = gout.data();
            if (needs[1] || needs[2]) {
                Tensor ggamma({c});
                Tensor gbeta({c});
                for (int cc = 0; cc < c; ++cc) {
                    double sg = 0.0, sb = 0.0;
                    for (int s = 0; s < b; ++s) {
                        const int64_t row = (static_cast<int64_t>(s) * c + cc) * spatial;
                        for (int64_t i = 0; i < spatial; ++i) {
                            sg += static_cast<double>(pgo[row + i]) * ph[row + i];
                            sb += pgo[row + i];
                        }
                    }
                    ggamma.data()[cc] = static_cast<float>(sg);
                    gbeta.data()[cc] = static_cast<float>(sb);
                }
                grads[1] = ggamma;
                grads[2] = gbeta;
            }
            if (needs[0]) {
                Tensor gx(xhat.shape());
                float* pgx = gx.data();
                const float* pgm = gamma.data();
                for (int s = 0; s < b; ++s)
                    for (int g = 0; g < groups; ++g) {
                        const int64_t base = (static_cast<int64_t>(s) * c + static_cast<int64_t>(g) * cpg) * spatial;
                        const float istd = inv_std[static_cast<size_t>(s) * groups + g];
                        double sum_dh = 0.0, sum_dh_h = 0.0;
                        for (int ch = 0; ch < cpg; ++ch) {
                            const int cc = g * cpg + ch;
                            const int64_t row = base + static_cast<int64_t>(ch) * spatial;
                            for (int64_t i = 0; i < spatial; ++i) {
                                const double dh = static_cast<double>(pgo[row + i]) * pgm[cc];
                                sum_dh += dh;
                                sum_dh_h += dh * ph[row + i];
                            }
                        }
                        const float mean_dh = static_cast<float>(sum_dh / static_cast<double>(group_elems));
                        const float mean_dh_h = static_cast<float>(sum_dh_h / static_cast<double>(group_elems));
                        for (int ch = 0; ch < cpg; ++ch) {
                            const int cc = g * cpg + ch;
                            const int64_t row = base + static_cast<int64_t>(ch) * spatial;
                            for (int64_t i = 0; i < spatial; ++i) {
                                const float dh = pgo[row + i] * pgm[cc];
                                pgx[row + i] = istd * (dh - mean_dh - ph[row + i] * mean_dh_h);
                            }
                        }
                    }
                grads[0] = gx;
            }
            return grads;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling and resampling.

inline Tensor avg_pool(const Tensor& x, int k, int stride) {
    if (x.rank() != 4) throw std::invalid_argument("avg_pool: input must be [b,c,h,w]");
    const int b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (k < 1 || stride < 1 || k > h || k > w) throw std::invalid_argument("avg_pool: bad window/stride");
    const int oh = (h - k) / stride + 1;
    const int ow = (w - k) / stride + 1;
    Tensor out({b, c, oh, ow});
    const float* px = x.data();
    float* po = out.data();
    const float inv = 1.0f / static_cast<float>(k * k);
    int64_t idx = 0;
    for (int64_t ch = 0; ch < static_cast<int64_t>(b) * c; ++ch) {
        const float* plane = px + ch * h * w;
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                double s = 0.0;
                for (int ki = 0; ki < k; ++ki)
                    for (int kj = 0; kj < k; ++kj) s += plane[(i * stride + ki) * w + j * stride + kj];
                po[idx++] = static_cast<float>(s) * inv;
            }
    }
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&x}, [shape = x.shape(), k, stride, oh, ow, inv](const Tensor& g, std::span<const bool>) {
            const int b = shape[0], c = shape[1], h = shape[2], w = shape[3];
            Tensor gx(shape);
            float* pgx = gx.data();
            const float* pg = g.data();
            int64_t idx = 0;
            for (int64_t ch = 0; ch < static_cast<int64_t>(b) * c; ++ch) {
                float* plane = pgx + ch * h * w;
                for (int i = 0; i < oh; ++i)
                    for (int j = 0; j < ow; ++j) {
                        const float v = pg[idx++] * inv;
                        for (int ki = 0; ki < k; ++ki)
                            for (int kj = 0; kj < k; ++kj) plane[(i * stride + ki) * w + j * stride + kj] += v;
                    }
            }
            return std::vector<Tensor>{gx};
        });
    }
    return out;
}

// [b,c,h,w] -> [b,c]; the predictor head's channel-wise pooling.
inline Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: input must be [b,c,h,w]");
    const int b = x.shape()[0], c = x.shape()[1];
    const int64_t hw = static_cast<int64_t>(x.shape()[2]) * x.shape()[3];
    Tensor out({b, c});
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < static_cast<int64_t>(b) * c; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < hw; ++j) s += px[i * hw + j];
        po[i] = static_cast<float>(s / static_cast<double>(hw));
    }
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&x}, [shape = x.shape(), hw](const Tensor& g, std::span<const bool>) {
            Tensor gx(shape);
            const float* pg = g.data();
            float* pgx = gx.data();
            const float inv = 1.0f / static_cast<float>(hw);
            for (int64_t i = 0; i < g.size(); ++i) {
                const float v = pg[i] * inv;
                for (int64_t j = 0; j < hw; ++j) pgx[i * hw + j] = v;
            }
            return std::vector<Tensor>{gx};
        });
    }
    return out;
}

// Nearest-neighbor 2x upsampling of [b,c,h,w].
inline Tensor upsample2x(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("upsample2x: input must be [b,c,h,w]");
    const int b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    Tensor out({b, c, 2 * h, 2 * w});
    const float* px = x.data();
    float* po = out.data();
    for (int64_t ch = 0; ch < static_cast<int64_t>(b) * c; ++ch) {
        const float* src = px + ch * h * w;
        float* dst = po + ch * 4 * h * w;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const float v = src[i * w + j];
                float* q = dst + (2 * i) * 2 * w + 2 * j;
                q[0] = v;
                q[1] = v;
                q[2 * w] = v;
                q[2 * w + 1] = v;
            }
    }
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&x}, [shape = x.shape()](const Tensor& g, std::span<const bool>) {
            const int b = shape[0], c = shape[1], h = shape[2], w = shape[3];
            Tensor gx(shape);
            const float* pg = g.data();
            float* pgx = gx.data();
            for (int64_t ch = 0; ch < static_cast<int64_t>(b) * c; ++ch) {
                const float* src = pg + ch * 4 * h * w;
                float* dst = pgx + ch * h * w;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const float* q = src + (2 * i) * 2 * w + 2 * j;
                        dst[i * w + j] = q[0] + q[1] + q[2 * w] + q[2 * w + 1];
                    }
            }
            return std::vector<Tensor>{gx};
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops.

inline Tensor reshape(const Tensor& x, Shape shape) {
    Tensor out = x.reshaped_view(std::move(shape));
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&x}, [in_shape = x.shape()](const Tensor& g, std::span<const bool>) {
            return std::vector<Tensor>{g.reshaped_view(in_shape)};
        });
    }
    return out;
}

// Concatenation along axis 1 (channels). Shapes must match on every other
// axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 2)
        throw std::invalid_argument("concat_channels: rank mismatch");
    for (int i = 0; i < a.rank(); ++i)
        if (i != 1 && a.shape()[i] != b.shape()[i])
            throw std::invalid_argument("concat_channels: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ off the channel axis");
    Shape out_shape = a.shape();
    out_shape[1] += b.shape()[1];
    Tensor out(out_shape);
    const int outer = a.shape()[0];
    int64_t inner = 1;
    for (int i = 2; i < a.rank(); ++i) inner *= a.shape()[i];
    const int64_t block_a = a.shape()[1] * inner;
    const int64_t block_b = b.shape()[1] * inner;
    for (int s = 0; s < outer; ++s) {
        std::memcpy(out.data() + s * (block_a + block_b), a.data() + s * block_a, block_a * sizeof(float));
        std::memcpy(out.data() + s * (block_a + block_b) + block_a, b.data() + s * block_b, block_b * sizeof(float));
    }
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&a, &b}, [sa = a.shape(), sb = b.shape(), outer, block_a, block_b](const Tensor& g, std::span<const bool> needs) {
            std::vector<Tensor> grads(2);
            if (needs[0]) {
                Tensor ga(sa);
                for (int s = 0; s < outer; ++s)
                    std::memcpy(ga.data() + s * block_a, g.data() + s * (block_a + block_b), block_a * sizeof(float));
                grads[0] = ga;
            }
            if (needs[1]) {
                Tensor gb(sb);
                for (int s = 0; s < outer; ++s)
                    std::memcpy(gb.data() + s * block_b, g.data() + s * (block_a + block_b) + block_a, block_b * sizeof(float));
                grads[1] = gb;
            }
            return grads;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses.

inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean(mul(d, d));
}

inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
    return mean(abs(sub(a, b)));
}

// Numerically stable binary cross-entropy on logits, mean-reduced.
// Targets are constants (not differentiated).
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape())
        throw std::invalid_argument("bce_with_logits: shape mismatch");
    const float* px = logits.data();
    const float* py = targets.data();
    const int64_t n = logits.size();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double x = px[i];
        s += std::max(x, 0.0) - x * py[i] + std::log1p(std::exp(-std::fabs(x)));
    }
    Tensor out = Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
    if (GradientTape* tape = GradientTape::active()) {
        tape->record(out, {&logits}, [logits, targets, n](const Tensor& g, std::span<const bool>) {
            Tensor gx(logits.shape());
            const float* px = logits.data();
            const float* py = targets.data();
            float* pg = gx.data();
            const float go = g.item() / static_cast<float>(n);
            for (int64_t i = 0; i < n; ++i) {
                const float sgm = 1.0f / (1.0f + std::exp(-px[i]));
                pg[i] = go * (sgm - py[i]);
            }
            return std::vector<Tensor>{gx};
        });
    }
    return out;
}

} // namespace cdm
