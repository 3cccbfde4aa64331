#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "mnad/tape.hpp"
#include "mnad/tensor.hpp"

namespace mnad {

namespace detail {

template <typename T>
void record_if_needed(const char* kind, Tensor<T>& out, bool needs_grad,
                      std::function<void()> pull) {
    Tape<T>* tape = active_tape<T>();
    if (!tape || !needs_grad)
        return;
    out.set_requires_grad(true);
    tape->record(out, kind, std::move(pull));
}

template <typename T>
void check_same_shape(const char* kind, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(kind) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

// Splits a shape at `axis` into (outer, extent, inner) for lane iteration.
struct AxisSplit {
    int64_t outer, extent, inner;
};

template <typename T>
AxisSplit split_axis(const char* kind, const Tensor<T>& x, int64_t axis) {
    if (axis < 0 || axis >= x.rank())
        throw ShapeError(std::string(kind) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(x.shape()));
    AxisSplit s{1, x.dim(axis), 1};
    for (int64_t i = 0; i < axis; ++i)
        s.outer *= x.dim(i);
    for (int64_t i = axis + 1; i < x.rank(); ++i)
        s.inner *= x.dim(i);
    return s;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("add", a, b);
    Tensor<T> out(a.shape());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < out.size(); ++i)
        po[i] = pa[i] + pb[i];
    detail::record_if_needed<T>("add", out, a.requires_grad() || b.requires_grad(),
                                [a, b, out]() mutable {
                                    const auto& g = out.grad();
                                    if (a.requires_grad())
                                        a.accumulate_grad(g);
                                    if (b.requires_grad())
                                        b.accumulate_grad(g);
                                });
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("sub", a, b);
    Tensor<T> out(a.shape());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < out.size(); ++i)
        po[i] = pa[i] - pb[i];
    detail::record_if_needed<T>("sub", out, a.requires_grad() || b.requires_grad(),
                                [a, b, out]() mutable {
                                    const auto& g = out.grad();
                                    if (a.requires_grad())
                                        a.accumulate_grad(g);
                                    if (b.requires_grad()) {
                                        auto& gb = b.grad_buffer();
                                        for (size_t i = 0; i < gb.size(); ++i)
                                            gb[i] -= g[i];
                                    }
                                });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("mul", a, b);
    Tensor<T> out(a.shape());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < out.size(); ++i)
        po[i] = pa[i] * pb[i];
    detail::record_if_needed<T>("mul", out, a.requires_grad() || b.requires_grad(),
                                [a, b, out]() mutable {
                                    const auto& g = out.grad();
                                    if (a.requires_grad()) {
                                        auto& ga = a.grad_buffer();
                                        const T* pb2 = b.ptr();
                                        for (size_t i = 0; i < ga.size(); ++i)
                                            ga[i] += g[i] * pb2[i];
                                    }
                                    if (b.requires_grad()) {
                                        auto& gb = b.grad_buffer();
                                        const T* pa2 = a.ptr();
                                        for (size_t i = 0; i < gb.size(); ++i)
                                            gb[i] += g[i] * pa2[i];
                                    }
                                });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < out.size(); ++i)
        po[i] = factor * px[i];
    detail::record_if_needed<T>("scale", out, x.requires_grad(), [x, out, factor]() mutable {
        const auto& g = out.grad();
        auto& gx = x.grad_buffer();
        for (size_t i = 0; i < gx.size(); ++i)
            gx[i] += factor * g[i];
    });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < out.size(); ++i)
        po[i] = px[i] > T(0) ? px[i] : T(0);
    detail::record_if_needed<T>("relu", out, x.requires_grad(), [x, out]() mutable {
        const auto& g = out.grad();
        auto& gx = x.grad_buffer();
        const T* px2 = x.ptr();
        // subgradient at 0 is 0
        for (size_t i = 0; i < gx.size(); ++i)
            gx[i] += px2[i] > T(0) ? g[i] : T(0);
    });
    return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < out.size(); ++i)
        po[i] = std::tanh(px[i]);
    detail::record_if_needed<T>("tanh", out, x.requires_grad(), [x, out]() mutable {
        const auto& g = out.grad();
        auto& gx = x.grad_buffer();
        const T* py = out.ptr();
        for (size_t i = 0; i < gx.size(); ++i)
            gx[i] += g[i] * (T(1) - py[i] * py[i]);
    });
    return out;
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < out.size(); ++i) {
        if (px[i] < T(0))
            throw NumericError("sqrt: negative input " + std::to_string(px[i]));
        po[i] = std::sqrt(px[i]);
    }
    detail::record_if_needed<T>("sqrt", out, x.requires_grad(), [x, out]() mutable {
        const auto& g = out.grad();
        auto& gx = x.grad_buffer();
        const T* py = out.ptr();
        // subgradient at 0 is 0 so a query sitting exactly on an item is inert
        for (size_t i = 0; i < gx.size(); ++i)
            gx[i] += py[i] > T(0) ? g[i] * T(0.5) / py[i] : T(0);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out(Shape{m, n});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t kk = 0; kk < k; ++kk) {
            const T av = pa[i * k + kk];
            const T* brow = pb + kk * n;
            T* orow = po + i * n;
            for (int64_t j = 0; j < n; ++j)
                orow[j] += av * brow[j];
        }
    }
    detail::record_if_needed<T>("matmul", out, a.requires_grad() || b.requires_grad(),
                                [a, b, out, m, k, n]() mutable {
                                    const auto& g = out.grad();
                                    if (a.requires_grad()) {
                                        auto& ga = a.grad_buffer();
                                        const T* pb2 = b.ptr();
                                        for (int64_t i = 0; i < m; ++i)
                                            for (int64_t kk = 0; kk < k; ++kk) {
                                                T acc = 0;
                                                for (int64_t j = 0; j < n; ++j)
                                                    acc += g[i * n + j] * pb2[kk * n + j];
                                                ga[i * k + kk] += acc;
                                            }
                                    }
                                    if (b.requires_grad()) {
                                        auto& gb = b.grad_buffer();
                                        const T* pa2 = a.ptr();
                                        for (int64_t kk = 0; kk < k; ++kk)
                                            for (int64_t i = 0; i < m; ++i) {
                                                const T av = pa2[i * k + kk];
                                                for (int64_t j = 0; j < n; ++j)
                                                    gb[kk * n + j] += av * g[i * n + j];
                                            }
                                    }
                                });
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2)
        throw ShapeError("transpose: expected rank-2, got " + shape_str(x.shape()));
    const int64_t r = x.dim(0), c = x.dim(1);
    Tensor<T> out(Shape{c, r});
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
            po[j * r + i] = px[i * c + j];
    detail::record_if_needed<T>("transpose", out, x.requires_grad(), [x, out, r, c]() mutable {
        const auto& g = out.grad();
        auto& gx = x.grad_buffer();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
                gx[i * c + j] += g[j * r + i];
    });
    return out;
}

/// out[:, j] = x[:, indices[j]]; duplicate indices accumulate in the VJP.
template <typename T>
Tensor<T> gather_cols(const Tensor<T>& x, const std::vector<int64_t>& indices) {
    if (x.rank() != 2)
        throw ShapeError("gather_cols: expected rank-2, got " + shape_str(x.shape()));
    const int64_t r = x.dim(0), c = x.dim(1);
    for (int64_t idx : indices)
        if (idx < 0 || idx >= c)
            throw ShapeError("gather_cols: index " + std::to_string(idx) +
                             " out of range for " + shape_str(x.shape()));
    const int64_t n = static_cast<int64_t>(indices.size());
    Tensor<T> out(Shape{r, n});
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n; ++j)
            po[i * n + j] = px[i * c + indices[static_cast<size_t>(j)]];
    detail::record_if_needed<T>("gather_cols", out, x.requires_grad(),
                                [x, out, indices, r, c, n]() mutable {
                                    const auto& g = out.grad();
                                    auto& gx = x.grad_buffer();
                                    for (int64_t i = 0; i < r; ++i)
                                        for (int64_t j = 0; j < n; ++j)
                                            gx[i * c + indices[static_cast<size_t>(j)]] +=
                                                g[i * n + j];
                                });
    return out;
}

// ---------------------------------------------------------------------------
// Axis ops

template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& x, int64_t axis) {
    auto sp = detail::split_axis("softmax_axis", x, axis);
    if (sp.extent == 0)
        throw ShapeError("softmax_axis: empty axis " + std::to_string(axis) + " in " +
                         shape_str(x.shape()));
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    const int64_t stride = sp.inner;
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
            const int64_t base = o * sp.extent * sp.inner + in;
            T mx = px[base];
            for (int64_t e = 1; e < sp.extent; ++e)
                mx = std::max(mx, px[base + e * stride]);
            T denom = 0;
            for (int64_t e = 0; e < sp.extent; ++e) {
                const T v = std::exp(px[base + e * stride] - mx);
                po[base + e * stride] = v;
                denom += v;
            }
            for (int64_t e = 0; e < sp.extent; ++e)
                po[base + e * stride] /= denom;
        }
    }
    detail::record_if_needed<T>("softmax_axis", out, x.requires_grad(), [x, out, sp]() mutable {
        const auto& g = out.grad();
        auto& gx = x.grad_buffer();
        const T* py = out.ptr();
        const int64_t stride = sp.inner;
        for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t in = 0; in < sp.inner; ++in) {
                const int64_t base = o * sp.extent * sp.inner + in;
                T dot = 0;
                for (int64_t e = 0; e < sp.extent; ++e)
                    dot += g[base + e * stride] * py[base + e * stride];
                for (int64_t e = 0; e < sp.extent; ++e)
                    gx[base + e * stride] +=
                        py[base + e * stride] * (g[base + e * stride] - dot);
            }
        }
    });
    return out;
}

/// Unit-normalizes lanes along `axis`. An all-zero lane stays zero and
/// contributes no gradient.
template <typename T>
Tensor<T> l2_normalize_axis(const Tensor<T>& x, int64_t axis) {
    auto sp = detail::split_axis("l2_normalize_axis", x, axis);
    if (sp.extent == 0)
        throw ShapeError("l2_normalize_axis: empty axis " + std::to_string(axis) + " in " +
                         shape_str(x.shape()));
    Tensor<T> out(x.shape());
    std::vector<T> norms(static_cast<size_t>(sp.outer * sp.inner), T(0));
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    const int64_t stride = sp.inner;
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
            const int64_t base = o * sp.extent * sp.inner + in;
            T ss = 0;
            for (int64_t e = 0; e < sp.extent; ++e) {
                const T v = px[base + e * stride];
                ss += v * v;
            }
            const T norm = std::sqrt(ss);
            norms[static_cast<size_t>(o * sp.inner + in)] = norm;
            if (norm > T(0))
                for (int64_t e = 0; e < sp.extent; ++e)
                    po[base + e * stride] = px[base + e * stride] / norm;
        }
    }
    detail::record_if_needed<T>("l2_normalize_axis", out, x.requires_grad(),
                                [x, out, sp, norms]() mutable {
                                    const auto& g = out.grad();
                                    auto& gx = x.grad_buffer();
                                    const T* py = out.ptr();
                                    const int64_t stride = sp.inner;
                                    for (int64_t o = 0; o < sp.outer; ++o) {
                                        for (int64_t in = 0; in < sp.inner; ++in) {
                                            const T norm =
                                                norms[static_cast<size_t>(o * sp.inner + in)];
                                            if (norm <= T(0))
                                                continue;
                                            const int64_t base = o * sp.extent * sp.inner + in;
                                            T dot = 0;
                                            for (int64_t e = 0; e < sp.extent; ++e)
                                                dot += g[base + e * stride] * py[base + e * stride];
                                            for (int64_t e = 0; e < sp.extent; ++e)
                                                gx[base + e * stride] +=
                                                    (g[base + e * stride] -
                                                     py[base + e * stride] * dot) /
                                                    norm;
                                        }
                                    }
                                });
    return out;
}

template <typename T>
Tensor<T> concat_axis(const Tensor<T>& a, const Tensor<T>& b, int64_t axis) {
    if (a.rank() != b.rank())
        throw ShapeError("concat_axis: rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    auto sa = detail::split_axis("concat_axis", a, axis);
    auto sb = detail::split_axis("concat_axis", b, axis);
    for (int64_t i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw ShapeError("concat_axis: shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ outside axis " +
                             std::to_string(axis));
    Shape oshape = a.shape();
    oshape[static_cast<size_t>(axis)] = sa.extent + sb.extent;
    Tensor<T> out(oshape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.mutable_ptr();
    const int64_t block_a = sa.extent * sa.inner;
    const int64_t block_b = sb.extent * sb.inner;
    for (int64_t o = 0; o < sa.outer; ++o) {
        std::memcpy(po + o * (block_a + block_b), pa + o * block_a,
                    static_cast<size_t>(block_a) * sizeof(T));
        std::memcpy(po + o * (block_a + block_b) + block_a, pb + o * block_b,
                    static_cast<size_t>(block_b) * sizeof(T));
    }
    detail::record_if_needed<T>(
        "concat_axis", out, a.requires_grad() || b.requires_grad(),
        [a, b, out, sa, block_a, block_b]() mutable {
            const auto& g = out.grad();
            for (int64_t o = 0; o < sa.outer; ++o) {
                const T* gslab = g.data() + o * (block_a + block_b);
                if (a.requires_grad()) {
                    auto& ga = a.grad_buffer();
                    for (int64_t i = 0; i < block_a; ++i)
                        ga[static_cast<size_t>(o * block_a + i)] += gslab[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad_buffer();
                    for (int64_t i = 0; i < block_b; ++i)
                        gb[static_cast<size_t>(o * block_b + i)] += gslab[block_a + i];
                }
            }
        });
    return out;
}

template <typename T>
Tensor<T> slice_axis(const Tensor<T>& x, int64_t axis, int64_t start, int64_t len) {
    auto sp = detail::split_axis("slice_axis", x, axis);
    if (start < 0 || len < 0 || start + len > sp.extent)
        throw ShapeError("slice_axis: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") invalid for extent " +
                         std::to_string(sp.extent) + " of " + shape_str(x.shape()));
    Shape oshape = x.shape();
    oshape[static_cast<size_t>(axis)] = len;
    Tensor<T> out(oshape);
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    const int64_t in_block = sp.extent * sp.inner;
    const int64_t out_block = len * sp.inner;
    for (int64_t o = 0; o < sp.outer; ++o)
        std::memcpy(po + o * out_block, px + o * in_block + start * sp.inner,
                    static_cast<size_t>(out_block) * sizeof(T));
    detail::record_if_needed<T>("slice_axis", out, x.requires_grad(),
                                [x, out, sp, start, in_block, out_block]() mutable {
                                    const auto& g = out.grad();
                                    auto& gx = x.grad_buffer();
                                    for (int64_t o = 0; o < sp.outer; ++o)
                                        for (int64_t i = 0; i < out_block; ++i)
                                            gx[static_cast<size_t>(o * in_block +
                                                                   start * sp.inner + i)] +=
                                                g[static_cast<size_t>(o * out_block + i)];
                                });
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    Tensor<T> out(new_shape, x.data());
    detail::record_if_needed<T>("reshape", out, x.requires_grad(), [x, out]() mutable {
        x.accumulate_grad(out.grad());
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    Tensor<T> out(Shape{});
    T acc = 0;
    const T* px = x.ptr();
    for (int64_t i = 0; i < x.size(); ++i)
        acc += px[i];
    out.mutable_ptr()[0] = acc;
    detail::record_if_needed<T>("sum", out, x.requires_grad(), [x, out]() mutable {
        const T g0 = out.grad()[0];
        auto& gx = x.grad_buffer();
        for (size_t i = 0; i < gx.size(); ++i)
            gx[i] += g0;
    });
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.size() == 0)
        throw ShapeError("mean: empty tensor " + shape_str(x.shape()));
    Tensor<T> out(Shape{});
    T acc = 0;
    const T* px = x.ptr();
    for (int64_t i = 0; i < x.size(); ++i)
        acc += px[i];
    const T inv_n = T(1) / static_cast<T>(x.size());
    out.mutable_ptr()[0] = acc * inv_n;
    detail::record_if_needed<T>("mean", out, x.requires_grad(), [x, out, inv_n]() mutable {
        const T g0 = out.grad()[0] * inv_n;
        auto& gx = x.grad_buffer();
        for (size_t i = 0; i < gx.size(); ++i)
            gx[i] += g0;
    });
    return out;
}

/// Reduces one axis away (output rank = input rank - 1).
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int64_t axis) {
    auto sp = detail::split_axis("sum_axis", x, axis);
    Shape oshape;
    for (int64_t i = 0; i < x.rank(); ++i)
        if (i != axis)
            oshape.push_back(x.dim(i));
    Tensor<T> out(oshape);
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    const int64_t stride = sp.inner;
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
            const int64_t base = o * sp.extent * sp.inner + in;
            T acc = 0;
            for (int64_t e = 0; e < sp.extent; ++e)
                acc += px[base + e * stride];
            po[o * sp.inner + in] = acc;
        }
    }
    detail::record_if_needed<T>("sum_axis", out, x.requires_grad(), [x, out, sp]() mutable {
        const auto& g = out.grad();
        auto& gx = x.grad_buffer();
        const int64_t stride = sp.inner;
        for (int64_t o = 0; o < sp.outer; ++o)
            for (int64_t in = 0; in < sp.inner; ++in) {
                const T gv = g[static_cast<size_t>(o * sp.inner + in)];
                const int64_t base = o * sp.extent * sp.inner + in;
                for (int64_t e = 0; e < sp.extent; ++e)
                    gx[static_cast<size_t>(base + e * stride)] += gv;
            }
    });
    return out;
}

template <typename T>
Tensor<T> sq_l2_distance(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("sq_l2_distance", a, b);
    Tensor<T> out(Shape{});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const T d = pa[i] - pb[i];
        acc += d * d;
    }
    out.mutable_ptr()[0] = acc;
    detail::record_if_needed<T>("sq_l2_distance", out,
                                a.requires_grad() || b.requires_grad(), [a, b, out]() mutable {
                                    const T g0 = out.grad()[0];
                                    const T* pa2 = a.ptr();
                                    const T* pb2 = b.ptr();
                                    if (a.requires_grad()) {
                                        auto& ga = a.grad_buffer();
                                        for (size_t i = 0; i < ga.size(); ++i)
                                            ga[i] += T(2) * (pa2[i] - pb2[i]) * g0;
                                    }
                                    if (b.requires_grad()) {
                                        auto& gb = b.grad_buffer();
                                        for (size_t i = 0; i < gb.size(); ++i)
                                            gb[i] -= T(2) * (pa2[i] - pb2[i]) * g0;
                                    }
                                });
    return out;
}

// ---------------------------------------------------------------------------
// Layout bridges between NCHW maps and per-location column matrices

/// [N,C,H,W] -> [C, N*H*W]; column n*H*W + h*W + w holds the channel vector
/// at one spatial location.
template <typename T>
Tensor<T> as_channel_matrix(const Tensor<T>& x) {
    if (x.rank() != 4)
        throw ShapeError("as_channel_matrix: expected NCHW, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out(Shape{c, n * hw});
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            const T* src = px + (ni * c + ci) * hw;
            T* dst = po + ci * (n * hw) + ni * hw;
            std::memcpy(dst, src, static_cast<size_t>(hw) * sizeof(T));
        }
    detail::record_if_needed<T>("as_channel_matrix", out, x.requires_grad(),
                                [x, out, n, c, hw]() mutable {
                                    const auto& g = out.grad();
                                    auto& gx = x.grad_buffer();
                                    for (int64_t ni = 0; ni < n; ++ni)
                                        for (int64_t ci = 0; ci < c; ++ci)
                                            for (int64_t p = 0; p < hw; ++p)
                                                gx[static_cast<size_t>((ni * c + ci) * hw + p)] +=
                                                    g[static_cast<size_t>(ci * (n * hw) +
                                                                          ni * hw + p)];
                                });
    return out;
}

/// Inverse of as_channel_matrix.
template <typename T>
Tensor<T> from_channel_matrix(const Tensor<T>& x, int64_t n, int64_t h, int64_t w) {
    if (x.rank() != 2 || x.dim(1) != n * h * w)
        throw ShapeError("from_channel_matrix: cannot view " + shape_str(x.shape()) + " as n=" +
                         std::to_string(n) + " h=" + std::to_string(h) + " w=" +
                         std::to_string(w));
    const int64_t c = x.dim(0), hw = h * w;
    Tensor<T> out(Shape{n, c, h, w});
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci)
            std::memcpy(po + (ni * c + ci) * hw, px + ci * (n * hw) + ni * hw,
                        static_cast<size_t>(hw) * sizeof(T));
    detail::record_if_needed<T>("from_channel_matrix", out, x.requires_grad(),
                                [x, out, n, c, hw]() mutable {
                                    const auto& g = out.grad();
                                    auto& gx = x.grad_buffer();
                                    for (int64_t ni = 0; ni < n; ++ni)
                                        for (int64_t ci = 0; ci < c; ++ci)
                                            for (int64_t p = 0; p < hw; ++p)
                                                gx[static_cast<size_t>(ci * (n * hw) + ni * hw +
                                                                       p)] +=
                                                    g[static_cast<size_t>((ni * c + ci) * hw +
                                                                          p)];
                                });
    return out;
}

} // namespace mnad
