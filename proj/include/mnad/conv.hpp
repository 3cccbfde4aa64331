#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mnad/ops.hpp"

namespace mnad {

namespace detail {

inline int64_t conv_out_extent(int64_t in, int64_t kernel, int64_t stride, int64_t pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// Output-column range [lo, hi) for which in = out*stride - pad + k stays inside
// [0, in_extent).
inline void valid_out_range(int64_t out_extent, int64_t in_extent, int64_t stride, int64_t pad,
                            int64_t k, int64_t& lo, int64_t& hi) {
    // out*stride >= pad - k
    int64_t num = pad - k;
    lo = num <= 0 ? 0 : (num + stride - 1) / stride;
    // out*stride <= in_extent - 1 + pad - k
    num = in_extent - 1 + pad - k;
    hi = num < 0 ? 0 : num / stride + 1;
    if (lo > out_extent)
        lo = out_extent;
    if (hi > out_extent)
        hi = out_extent;
}

template <typename T>
std::function<void()> conv2d_pull(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                                  const Tensor<T>& out, int64_t stride, int64_t pad);

} // namespace detail

/// 2-D convolution, NCHW input, [Cout,Cin,kh,kw] weight, per-channel bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride,
                 int64_t pad) {
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
        throw ShapeError("conv2d: incompatible input " + shape_str(x.shape()) + " and weight " +
                         shape_str(w.shape()));
    if (bias.rank() != 1 || bias.dim(0) != w.dim(0))
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
    if (stride < 1 || pad < 0)
        throw ShapeError("conv2d: bad stride/pad " + std::to_string(stride) + "/" +
                         std::to_string(pad));
    const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
    const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = detail::conv_out_extent(h, kh, stride, pad);
    const int64_t wo = detail::conv_out_extent(ww, kw, stride, pad);
    if (ho < 1 || wo < 1)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " too large for input " +
                         shape_str(x.shape()));

    Tensor<T> out(Shape{n, co, ho, wo});
    const T* px = x.ptr();
    const T* pw = w.ptr();
    const T* pbias = bias.ptr();
    T* po = out.mutable_ptr();

    if (kh == 3 && kw == 3 && stride == 1 && pad == 1 && wo >= 2) {
        // Stencil path: all nine taps fold into one pass per output row.
        // Out-of-range rows read from a zero row instead of branching.
        std::vector<T> acc(static_cast<size_t>(wo));
        const std::vector<T> zrow(static_cast<size_t>(ww), T(0));
        for (int64_t ni = 0; ni < n; ++ni) {
            for (int64_t c = 0; c < co; ++c) {
                T* oplane = po + (ni * co + c) * ho * wo;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    std::fill(acc.begin(), acc.end(), pbias[c]);
                    for (int64_t ic = 0; ic < ci; ++ic) {
                        const T* iplane = px + (ni * ci + ic) * h * ww;
                        const T* w9 = pw + (c * ci + ic) * 9;
                        const T* a = oy > 0 ? iplane + (oy - 1) * ww : zrow.data();
                        const T* b = iplane + oy * ww;
                        const T* d = oy + 1 < h ? iplane + (oy + 1) * ww : zrow.data();
                        const T w00 = w9[0], w01 = w9[1], w02 = w9[2];
                        const T w10 = w9[3], w11 = w9[4], w12 = w9[5];
                        const T w20 = w9[6], w21 = w9[7], w22 = w9[8];
                        acc[0] += w01 * a[0] + w02 * a[1] + w11 * b[0] + w12 * b[1] +
                                  w21 * d[0] + w22 * d[1];
                        T* ap = acc.data();
                        for (int64_t ox = 1; ox < wo - 1; ++ox)
                            ap[ox] += w00 * a[ox - 1] + w01 * a[ox] + w02 * a[ox + 1] +
                                      w10 * b[ox - 1] + w11 * b[ox] + w12 * b[ox + 1] +
                                      w20 * d[ox - 1] + w21 * d[ox] + w22 * d[ox + 1];
                        acc[static_cast<size_t>(wo - 1)] +=
                            w00 * a[wo - 2] + w01 * a[wo - 1] + w10 * b[wo - 2] +
                            w11 * b[wo - 1] + w20 * d[wo - 2] + w21 * d[wo - 1];
                    }
                    std::copy(acc.begin(), acc.end(), oplane + oy * wo);
                }
            }
        }
        detail::record_if_needed<T>(
            "conv2d", out,
            x.requires_grad() || w.requires_grad() || bias.requires_grad(),
            detail::conv2d_pull(x, w, bias, out, stride, pad));
        return out;
    }

    // Row accumulator: one output row stays hot while every tap feeds it.
    std::vector<T> acc(static_cast<size_t>(wo));
    // Stride 2 reads every other input column, which blocks vectorization;
    // pre-splitting each plane into even/odd columns makes the inner loops
    // contiguous on both sides.
    const bool poly = stride == 2;
    const int64_t we = (ww + 1) / 2, wd = ww / 2;
    std::vector<T> xeven, xodd;
    if (poly) {
        xeven.resize(static_cast<size_t>(ci * h * we));
        xodd.resize(static_cast<size_t>(ci * h * wd));
    }
    for (int64_t ni = 0; ni < n; ++ni) {
        if (poly) {
            for (int64_t ic = 0; ic < ci; ++ic)
                for (int64_t iy = 0; iy < h; ++iy) {
                    const T* irow = px + ((ni * ci + ic) * h + iy) * ww;
                    T* er = xeven.data() + (ic * h + iy) * we;
                    T* dr = xodd.data() + (ic * h + iy) * wd;
                    for (int64_t j = 0; j < we; ++j)
                        er[j] = irow[2 * j];
                    for (int64_t j = 0; j < wd; ++j)
                        dr[j] = irow[2 * j + 1];
                }
        }
        for (int64_t c = 0; c < co; ++c) {
            T* oplane = po + (ni * co + c) * ho * wo;
            for (int64_t oy = 0; oy < ho; ++oy) {
                std::fill(acc.begin(), acc.end(), pbias[c]);
                for (int64_t y = 0; y < kh; ++y) {
                    const int64_t iy = oy * stride - pad + y;
                    if (iy < 0 || iy >= h)
                        continue;
                    for (int64_t ic = 0; ic < ci; ++ic) {
                        const T* wrow = pw + ((c * ci + ic) * kh + y) * kw;
                        if (poly) {
                            for (int64_t xk = 0; xk < kw; ++xk) {
                                const T wv = wrow[xk];
                                // in-column 2*ox + t with t = xk - pad
                                const int64_t t = xk - pad;
                                const int64_t r = ((t % 2) + 2) % 2;
                                const int64_t offq = (t - r) / 2;
                                const int64_t wr = r ? wd : we;
                                const T* src =
                                    (r ? xodd.data() : xeven.data()) + (ic * h + iy) * wr + offq;
                                const int64_t lo = std::max<int64_t>(0, -offq);
                                const int64_t hi = std::min(wo, wr - offq);
                                for (int64_t ox = lo; ox < hi; ++ox)
                                    acc[static_cast<size_t>(ox)] += wv * src[ox];
                            }
                        } else {
                            const T* irow = px + ((ni * ci + ic) * h + iy) * ww;
                            for (int64_t xk = 0; xk < kw; ++xk) {
                                const T wv = wrow[xk];
                                int64_t wlo, whi;
                                detail::valid_out_range(wo, ww, stride, pad, xk, wlo, whi);
                                const T* ir = irow - pad + xk;
                                for (int64_t ox = wlo; ox < whi; ++ox)
                                    acc[static_cast<size_t>(ox)] += wv * ir[ox * stride];
                            }
                        }
                    }
                }
                std::copy(acc.begin(), acc.end(), oplane + oy * wo);
            }
        }
    }

    detail::record_if_needed<T>(
        "conv2d", out,
        x.requires_grad() || w.requires_grad() || bias.requires_grad(),
        detail::conv2d_pull(x, w, bias, out, stride, pad));
    return out;
}

namespace detail {

template <typename T>
std::function<void()> conv2d_pull(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                                  const Tensor<T>& out, int64_t stride, int64_t pad) {
    return [x, w, bias, out, stride, pad]() {
        const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
        const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
        const int64_t ho = out.dim(2), wo = out.dim(3);
        const auto& g = out.grad();
            if (x.requires_grad()) {
                auto& gx = x.grad_buffer();
                const T* pw2 = w.ptr();
                for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t c = 0; c < co; ++c) {
                        const T* gplane = g.data() + (ni * co + c) * ho * wo;
                        for (int64_t ic = 0; ic < ci; ++ic) {
                            T* xplane = gx.data() + (ni * ci + ic) * h * ww;
                            const T* wplane = pw2 + (c * ci + ic) * kh * kw;
                            for (int64_t y = 0; y < kh; ++y)
                                for (int64_t xk = 0; xk < kw; ++xk) {
                                    const T wv = wplane[y * kw + xk];
                                    int64_t wlo, whi;
                                    detail::valid_out_range(wo, ww, stride, pad, xk, wlo, whi);
                                    for (int64_t oy = 0; oy < ho; ++oy) {
                                        const int64_t iy = oy * stride - pad + y;
                                        if (iy < 0 || iy >= h)
                                            continue;
                                        T* xrow = xplane + iy * ww - pad + xk;
                                        const T* grow = gplane + oy * wo;
                                        for (int64_t ox = wlo; ox < whi; ++ox)
                                            xrow[ox * stride] += wv * grow[ox];
                                    }
                                }
                        }
                    }
            }
            if (w.requires_grad()) {
                auto& gw = w.grad_buffer();
                const T* px2 = x.ptr();
                for (int64_t c = 0; c < co; ++c)
                    for (int64_t ic = 0; ic < ci; ++ic)
                        for (int64_t y = 0; y < kh; ++y)
                            for (int64_t xk = 0; xk < kw; ++xk) {
                                T acc = 0;
                                int64_t wlo, whi;
                                detail::valid_out_range(wo, ww, stride, pad, xk, wlo, whi);
                                for (int64_t ni = 0; ni < n; ++ni) {
                                    const T* gplane = g.data() + (ni * co + c) * ho * wo;
                                    const T* iplane = px2 + (ni * ci + ic) * h * ww;
                                    for (int64_t oy = 0; oy < ho; ++oy) {
                                        const int64_t iy = oy * stride - pad + y;
                                        if (iy < 0 || iy >= h)
                                            continue;
                                        const T* irow = iplane + iy * ww - pad + xk;
                                        const T* grow = gplane + oy * wo;
                                        for (int64_t ox = wlo; ox < whi; ++ox)
                                            acc += grow[ox] * irow[ox * stride];
                                    }
                                }
                                gw[static_cast<size_t>(((c * ci + ic) * kh + y) * kw + xk)] +=
                                    acc;
                            }
            }
            if (bias.requires_grad()) {
                auto& gb = bias.grad_buffer();
                for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t c = 0; c < co; ++c) {
                        const T* gplane = g.data() + (ni * co + c) * ho * wo;
                        T acc = 0;
                        for (int64_t i = 0; i < ho * wo; ++i)
                            acc += gplane[i];
                        gb[static_cast<size_t>(c)] += acc;
                    }
            }
    };
}

} // namespace detail

/// Transposed 2-D convolution (fractionally strided), weight [Cin,Cout,kh,kw].
/// Output extent = (in-1)*stride - 2*pad + kernel.
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                            int64_t stride, int64_t pad) {
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(0))
        throw ShapeError("transposed_conv2d: incompatible input " + shape_str(x.shape()) +
                         " and weight " + shape_str(w.shape()));
    if (bias.rank() != 1 || bias.dim(0) != w.dim(1))
        throw ShapeError("transposed_conv2d: bias " + shape_str(bias.shape()) +
                         " does not match weight " + shape_str(w.shape()));
    if (stride < 1 || pad < 0)
        throw ShapeError("transposed_conv2d: bad stride/pad " + std::to_string(stride) + "/" +
                         std::to_string(pad));
    const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
    const int64_t co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = (h - 1) * stride - 2 * pad + kh;
    const int64_t wo = (ww - 1) * stride - 2 * pad + kw;
    if (ho < 1 || wo < 1)
        throw ShapeError("transposed_conv2d: degenerate output for input " +
                         shape_str(x.shape()) + " and weight " + shape_str(w.shape()));

    Tensor<T> out(Shape{n, co, ho, wo});
    const T* px = x.ptr();
    const T* pw = w.ptr();
    const T* pbias = bias.ptr();
    T* po = out.mutable_ptr();
    // Gather per output row: every contribution to one row accumulates in
    // row-sized buffers before moving on. For stride 2 the row is split by
    // output-column parity so both sides of the inner loop are contiguous.
    const bool poly = stride == 2;
    const int64_t n0 = (wo + 1) / 2, n1 = wo / 2;
    std::vector<T> acc(static_cast<size_t>(wo));
    std::vector<T> acc0(static_cast<size_t>(n0)), acc1(static_cast<size_t>(n1));
    for (int64_t ni = 0; ni < n; ++ni) {
        for (int64_t c = 0; c < co; ++c) {
            T* oplane = po + (ni * co + c) * ho * wo;
            for (int64_t oy = 0; oy < ho; ++oy) {
                if (poly) {
                    std::fill(acc0.begin(), acc0.end(), pbias[c]);
                    std::fill(acc1.begin(), acc1.end(), pbias[c]);
                } else {
                    std::fill(acc.begin(), acc.end(), pbias[c]);
                }
                for (int64_t y = 0; y < kh; ++y) {
                    const int64_t num = oy + pad - y;
                    if (num % stride != 0 || num < 0)
                        continue;
                    const int64_t iy = num / stride;
                    if (iy >= h)
                        continue;
                    for (int64_t ic = 0; ic < ci; ++ic) {
                        const T* irow = px + ((ni * ci + ic) * h + iy) * ww;
                        const T* wrow = pw + ((ic * co + c) * kh + y) * kw;
                        for (int64_t xk = 0; xk < kw; ++xk) {
                            const T wv = wrow[xk];
                            if (poly) {
                                // columns 2j + r receive input column j + off
                                const int64_t r = (((xk - pad) % 2) + 2) % 2;
                                const int64_t off = (r + pad - xk) / 2;
                                T* ar = r ? acc1.data() : acc0.data();
                                const int64_t nr = r ? n1 : n0;
                                const int64_t jlo = std::max<int64_t>(0, -off);
                                const int64_t jhi = std::min(nr, ww - off);
                                const T* ir = irow + off;
                                for (int64_t j = jlo; j < jhi; ++j)
                                    ar[j] += wv * ir[j];
                            } else {
                                int64_t ilo, ihi;
                                detail::valid_out_range(ww, wo, stride, pad, xk, ilo, ihi);
                                T* arow = acc.data() - pad + xk;
                                for (int64_t ix = ilo; ix < ihi; ++ix)
                                    arow[ix * stride] += wv * irow[ix];
                            }
                        }
                    }
                }
                T* orow = oplane + oy * wo;
                if (poly) {
                    for (int64_t j = 0; j < n0; ++j)
                        orow[2 * j] = acc0[static_cast<size_t>(j)];
                    for (int64_t j = 0; j < n1; ++j)
                        orow[2 * j + 1] = acc1[static_cast<size_t>(j)];
                } else {
                    std::copy(acc.begin(), acc.end(), orow);
                }
            }
        }
    }

    detail::record_if_needed<T>(
        "transposed_conv2d", out,
        x.requires_grad() || w.requires_grad() || bias.requires_grad(),
        [x, w, bias, out, stride, pad, n, ci, h, ww, co, kh, kw, ho, wo]() mutable {
            const auto& g = out.grad();
            if (x.requires_grad()) {
                auto& gx = x.grad_buffer();
                const T* pw2 = w.ptr();
                for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t ic = 0; ic < ci; ++ic) {
                        T* xplane = gx.data() + (ni * ci + ic) * h * ww;
                        for (int64_t c = 0; c < co; ++c) {
                            const T* gplane = g.data() + (ni * co + c) * ho * wo;
                            const T* wplane = pw2 + (ic * co + c) * kh * kw;
                            for (int64_t y = 0; y < kh; ++y)
                                for (int64_t xk = 0; xk < kw; ++xk) {
                                    const T wv = wplane[y * kw + xk];
                                    int64_t ilo, ihi;
                                    detail::valid_out_range(ww, wo, stride, pad, xk, ilo, ihi);
                                    for (int64_t iy = 0; iy < h; ++iy) {
                                        const int64_t oy = iy * stride - pad + y;
                                        if (oy < 0 || oy >= ho)
                                            continue;
                                        T* xrow = xplane + iy * ww;
                                        const T* grow = gplane + oy * wo - pad + xk;
                                        for (int64_t ix = ilo; ix < ihi; ++ix)
                                            xrow[ix] += wv * grow[ix * stride];
                                    }
                                }
                        }
                    }
            }
            if (w.requires_grad()) {
                auto& gw = w.grad_buffer();
                const T* px2 = x.ptr();
                for (int64_t ic = 0; ic < ci; ++ic)
                    for (int64_t c = 0; c < co; ++c)
                        for (int64_t y = 0; y < kh; ++y)
                            for (int64_t xk = 0; xk < kw; ++xk) {
                                T acc = 0;
                                int64_t ilo, ihi;
                                detail::valid_out_range(ww, wo, stride, pad, xk, ilo, ihi);
                                for (int64_t ni = 0; ni < n; ++ni) {
                                    const T* iplane = px2 + (ni * ci + ic) * h * ww;
                                    const T* gplane = g.data() + (ni * co + c) * ho * wo;
                                    for (int64_t iy = 0; iy < h; ++iy) {
                                        const int64_t oy = iy * stride - pad + y;
                                        if (oy < 0 || oy >= ho)
                                            continue;
                                        const T* irow = iplane + iy * ww;
                                        const T* grow = gplane + oy * wo - pad + xk;
                                        for (int64_t ix = ilo; ix < ihi; ++ix)
                                            acc += irow[ix] * grow[ix * stride];
                                    }
                                }
                                gw[static_cast<size_t>(((ic * co + c) * kh + y) * kw + xk)] +=
                                    acc;
                            }
            }
            if (bias.requires_grad()) {
                auto& gb = bias.grad_buffer();
                for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t c = 0; c < co; ++c) {
                        const T* gplane = g.data() + (ni * co + c) * ho * wo;
                        T acc = 0;
                        for (int64_t i = 0; i < ho * wo; ++i)
                            acc += gplane[i];
                        gb[static_cast<size_t>(c)] += acc;
                    }
            }
        });
    return out;
}

/// Spatial batch normalization over (N,H,W) per channel.
///
/// train=true normalizes with batch statistics and, when update_running is
/// set, folds them into the running buffers with the given momentum.
/// train=false normalizes with the running buffers. Running buffers are plain
/// state, never differentiated.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                      T momentum = T(0.1), T eps = T(1e-5), bool update_running = true) {
    if (x.rank() != 4)
        throw ShapeError("batchnorm2d: expected NCHW, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} ||
        running_mean.shape() != Shape{c} || running_var.shape() != Shape{c})
        throw ShapeError("batchnorm2d: parameter shapes do not match channel count " +
                         std::to_string(c) + " of " + shape_str(x.shape()));

    const int64_t m = n * hw;
    std::vector<T> mean_c(static_cast<size_t>(c)), var_c(static_cast<size_t>(c));
    const T* px = x.ptr();
    if (train) {
        for (int64_t ch = 0; ch < c; ++ch) {
            T acc = 0;
            for (int64_t ni = 0; ni < n; ++ni) {
                const T* plane = px + (ni * c + ch) * hw;
                for (int64_t i = 0; i < hw; ++i)
                    acc += plane[i];
            }
            const T mu = acc / static_cast<T>(m);
            T vacc = 0;
            for (int64_t ni = 0; ni < n; ++ni) {
                const T* plane = px + (ni * c + ch) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    const T d = plane[i] - mu;
                    vacc += d * d;
                }
            }
            mean_c[static_cast<size_t>(ch)] = mu;
            var_c[static_cast<size_t>(ch)] = vacc / static_cast<T>(m);
        }
        if (update_running) {
            T* rm = running_mean.mutable_ptr();
            T* rv = running_var.mutable_ptr();
            for (int64_t ch = 0; ch < c; ++ch) {
                rm[ch] = (T(1) - momentum) * rm[ch] + momentum * mean_c[static_cast<size_t>(ch)];
                rv[ch] = (T(1) - momentum) * rv[ch] + momentum * var_c[static_cast<size_t>(ch)];
            }
        }
    } else {
        std::copy(running_mean.ptr(), running_mean.ptr() + c, mean_c.begin());
        std::copy(running_var.ptr(), running_var.ptr() + c, var_c.begin());
    }

    std::vector<T> inv_std(static_cast<size_t>(c));
    for (int64_t ch = 0; ch < c; ++ch)
        inv_std[static_cast<size_t>(ch)] = T(1) / std::sqrt(var_c[static_cast<size_t>(ch)] + eps);

    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());   // kept for the backward pass
    T* po = out.mutable_ptr();
    T* ph = xhat.mutable_ptr();
    const T* pg = gamma.ptr();
    const T* pb = beta.ptr();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T mu = mean_c[static_cast<size_t>(ch)];
            const T is = inv_std[static_cast<size_t>(ch)];
            const T gv = pg[ch], bv = pb[ch];
            const T* iplane = px + (ni * c + ch) * hw;
            T* hplane = ph + (ni * c + ch) * hw;
            T* oplane = po + (ni * c + ch) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                const T h = (iplane[i] - mu) * is;
                hplane[i] = h;
                oplane[i] = gv * h + bv;
            }
        }

    detail::record_if_needed<T>(
        "batchnorm2d", out,
        x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
        [x, gamma, beta, out, xhat, inv_std, train, n, c, hw]() mutable {
            const auto& g = out.grad();
            const T* ph2 = xhat.ptr();
            const T* pg2 = gamma.ptr();
            const int64_t m = n * hw;
            for (int64_t ch = 0; ch < c; ++ch) {
                T sum_g = 0, sum_gh = 0;
                for (int64_t ni = 0; ni < n; ++ni) {
                    const int64_t base = (ni * c + ch) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        sum_g += g[static_cast<size_t>(base + i)];
                        sum_gh += g[static_cast<size_t>(base + i)] * ph2[base + i];
                    }
                }
                if (gamma.requires_grad())
                    gamma.grad_buffer()[static_cast<size_t>(ch)] += sum_gh;
                if (beta.requires_grad())
                    beta.grad_buffer()[static_cast<size_t>(ch)] += sum_g;
                if (x.requires_grad()) {
                    auto& gx = x.grad_buffer();
                    const T is = inv_std[static_cast<size_t>(ch)];
                    const T gv = pg2[ch];
                    if (train) {
                        const T mg = sum_g / static_cast<T>(m);
                        const T mgh = sum_gh / static_cast<T>(m);
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const int64_t base = (ni * c + ch) * hw;
                            for (int64_t i = 0; i < hw; ++i)
                                gx[static_cast<size_t>(base + i)] +=
                                    gv * is *
                                    (g[static_cast<size_t>(base + i)] - mg -
                                     ph2[base + i] * mgh);
                        }
                    } else {
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const int64_t base = (ni * c + ch) * hw;
                            for (int64_t i = 0; i < hw; ++i)
                                gx[static_cast<size_t>(base + i)] +=
                                    gv * is * g[static_cast<size_t>(base + i)];
                        }
                    }
                }
            }
        });
    return out;
}

} // namespace mnad
