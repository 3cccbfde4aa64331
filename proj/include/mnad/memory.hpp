#pragma once

#include <cmath>
#include <vector>

#include "mnad/ops.hpp"
#include "mnad/rng.hpp"

namespace mnad::memory {

/// M prototype items, one per row of a [M, C] tensor, each unit L2 norm.
/// Items change only through update(); they are constants to the tape unless
/// trainable is set.
template <typename T>
struct MemoryBank {
    Tensor<T> items;
    bool trainable = false;

    int64_t num_items() const { return items.dim(0); }
    int64_t channels() const { return items.dim(1); }
};

template <typename T>
MemoryBank<T> make_bank(int64_t m, int64_t c, SplitMix64& rng) {
    if (m < 2)
        throw ConfigError("memory bank needs at least 2 items, got " + std::to_string(m));
    if (c < 1)
        throw ConfigError("memory item dimension must be positive, got " + std::to_string(c));
    MemoryBank<T> bank;
    bank.items = Tensor<T>(Shape{m, c});
    T* p = bank.items.mutable_ptr();
    for (int64_t i = 0; i < m; ++i) {
        // Gaussian draw then renormalize: uniform direction on the sphere.
        T norm2 = 0;
        for (int64_t j = 0; j < c; ++j) {
            const T v = static_cast<T>(rng.normal());
            p[i * c + j] = v;
            norm2 += v * v;
        }
        const T inv = T(1) / std::sqrt(norm2);
        for (int64_t j = 0; j < c; ++j)
            p[i * c + j] *= inv;
    }
    return bank;
}

template <typename T>
void renormalize_items(MemoryBank<T>& bank) {
    T* p = bank.items.mutable_ptr();
    const int64_t m = bank.num_items(), c = bank.channels();
    for (int64_t i = 0; i < m; ++i) {
        T norm2 = 0;
        for (int64_t j = 0; j < c; ++j)
            norm2 += p[i * c + j] * p[i * c + j];
        if (norm2 == T(0))
            continue;
        const T inv = T(1) / std::sqrt(norm2);
        for (int64_t j = 0; j < c; ++j)
            p[i * c + j] *= inv;
    }
}

template <typename T>
struct ReadResult {
    Tensor<T> read;      // [K, C] convex combinations of items
    Tensor<T> weights;   // [K, M], each row sums to 1
};

/// Soft read: per query, softmax over item similarities, then the weighted
/// average of items. Differentiable w.r.t. queries; items enter the tape only
/// when the bank is trainable.
template <typename T>
ReadResult<T> read(const Tensor<T>& queries_kc, const MemoryBank<T>& bank) {
    if (queries_kc.rank() != 2 || queries_kc.dim(1) != bank.channels())
        throw ShapeError("memory read: queries " + shape_str(queries_kc.shape()) +
                         " incompatible with items " + shape_str(bank.items.shape()));
    Tensor<T> sims = matmul(queries_kc, transpose(bank.items));
    Tensor<T> w = softmax_axis(sims, 1);
    Tensor<T> rd = matmul(w, bank.items);
    return { rd, w };
}

struct Assignment {
    std::vector<int64_t> nearest;                // per query
    std::vector<int64_t> second;                 // per query, nearest excluded
    std::vector<std::vector<int64_t>> sets;      // per item, assigned query indices
};

/// Hard assignment by item similarity (argmax of q·p, equivalently of the
/// read weights). Ties break to the lowest item index.
template <typename T>
Assignment assign(const Tensor<T>& queries_kc, const MemoryBank<T>& bank) {
    if (queries_kc.rank() != 2 || queries_kc.dim(1) != bank.channels())
        throw ShapeError("memory assign: queries " + shape_str(queries_kc.shape()) +
                         " incompatible with items " + shape_str(bank.items.shape()));
    const int64_t k = queries_kc.dim(0), c = bank.channels(), m = bank.num_items();
    const T* q = queries_kc.ptr();
    const T* p = bank.items.ptr();
    Assignment out;
    out.nearest.resize(static_cast<size_t>(k));
    out.second.resize(static_cast<size_t>(k));
    out.sets.assign(static_cast<size_t>(m), {});
    for (int64_t i = 0; i < k; ++i) {
        int64_t best = 0, runner = -1;
        T best_s = 0, runner_s = 0;
        for (int64_t j = 0; j < m; ++j) {
            T s = 0;
            for (int64_t d = 0; d < c; ++d)
                s += q[i * c + d] * p[j * c + d];
            if (j == 0 || s > best_s) {
                // The demoted best has the lowest index seen so far, so it
                // wins runner-up ties.
                if (j != 0 && (runner < 0 || best_s >= runner_s)) {
                    runner = best;
                    runner_s = best_s;
                }
                best = j;
                best_s = s;
            } else if (runner < 0 || s > runner_s) {
                runner = j;
                runner_s = s;
            }
        }
        out.nearest[static_cast<size_t>(i)] = best;
        out.second[static_cast<size_t>(i)] = runner;
        out.sets[static_cast<size_t>(best)].push_back(i);
    }
    return out;
}

/// Per-item softmax of similarities over all K queries: rows sum to 1.
/// Returned as [M, K]; pure, never taped.
template <typename T>
Tensor<T> update_weights(const Tensor<T>& queries_kc, const MemoryBank<T>& bank) {
    const int64_t k = queries_kc.dim(0), c = bank.channels(), m = bank.num_items();
    const T* q = queries_kc.ptr();
    const T* p = bank.items.ptr();
    Tensor<T> v(Shape{m, k});
    T* pv = v.mutable_ptr();
    std::vector<T> sims(static_cast<size_t>(k));
    for (int64_t j = 0; j < m; ++j) {
        T mx = 0;
        for (int64_t i = 0; i < k; ++i) {
            T s = 0;
            for (int64_t d = 0; d < c; ++d)
                s += q[i * c + d] * p[j * c + d];
            sims[static_cast<size_t>(i)] = s;
            if (i == 0 || s > mx)
                mx = s;
        }
        T denom = 0;
        for (int64_t i = 0; i < k; ++i) {
            const T e = std::exp(sims[static_cast<size_t>(i)] - mx);
            pv[j * k + i] = e;
            denom += e;
        }
        for (int64_t i = 0; i < k; ++i)
            pv[j * k + i] /= denom;
    }
    return v;
}

/// Hard-assignment item update: each item absorbs its assigned queries,
/// weighted by the per-item softmax renormalized so the strongest assigned
/// query carries weight 1, then the item is renormalized to unit length.
/// Items with no assigned query are untouched. State mutation, not taped.
template <typename T>
void update(MemoryBank<T>& bank, const Tensor<T>& queries_kc) {
    const Assignment asg = assign(queries_kc, bank);
    const Tensor<T> v = update_weights(queries_kc, bank);
    const int64_t k = queries_kc.dim(0), c = bank.channels(), m = bank.num_items();
    const T* q = queries_kc.ptr();
    const T* pv = v.ptr();
    T* p = bank.items.mutable_ptr();
    for (int64_t j = 0; j < m; ++j) {
        const auto& set = asg.sets[static_cast<size_t>(j)];
        if (set.empty())
            continue;
        T vmax = 0;
        for (int64_t i : set)
            vmax = std::max(vmax, pv[j * k + i]);
        std::vector<T> acc(p + j * c, p + (j + 1) * c);
        for (int64_t i : set) {
            const T wgt = pv[j * k + i] / vmax;
            for (int64_t d = 0; d < c; ++d)
                acc[static_cast<size_t>(d)] += wgt * q[i * c + d];
        }
        T norm2 = 0;
        for (int64_t d = 0; d < c; ++d)
            norm2 += acc[static_cast<size_t>(d)] * acc[static_cast<size_t>(d)];
        if (norm2 == T(0))
            continue;   // degenerate cancellation: keep the previous item
        const T inv = T(1) / std::sqrt(norm2);
        for (int64_t d = 0; d < c; ++d)
            p[j * c + d] = acc[static_cast<size_t>(d)] * inv;
    }
}

/// Error-weighted reconstruction error between a frame pair on the [0,1]
/// scale. Per-pixel error is the L2 norm across channels; weights are the
/// normalized (1 - exp(-e)) map. Identical frames score 0.
template <typename T>
T regular_score(const Tensor<T>& recon01, const Tensor<T>& target01) {
    if (recon01.shape() != target01.shape())
        throw ShapeError("regular_score: shape mismatch " + shape_str(recon01.shape()) +
                         " vs " + shape_str(target01.shape()));
    if (recon01.rank() != 2 && recon01.rank() != 3)
        throw ShapeError("regular_score: expected [H,W] or [C,H,W], got " +
                         shape_str(recon01.shape()));
    const int64_t c = recon01.rank() == 3 ? recon01.dim(0) : 1;
    const int64_t pix = recon01.size() / c;
    const T* a = recon01.ptr();
    const T* b = target01.ptr();
    std::vector<T> err(static_cast<size_t>(pix));
    T denom = 0;
    for (int64_t i = 0; i < pix; ++i) {
        T s = 0;
        for (int64_t ch = 0; ch < c; ++ch) {
            const T d = a[ch * pix + i] - b[ch * pix + i];
            s += d * d;
        }
        const T e = std::sqrt(s);
        err[static_cast<size_t>(i)] = e;
        denom += T(1) - std::exp(-e);
    }
    if (denom == T(0))
        return T(0);
    T score = 0;
    for (int64_t i = 0; i < pix; ++i) {
        const T e = err[static_cast<size_t>(i)];
        score += (T(1) - std::exp(-e)) / denom * e;
    }
    return score;
}

enum class Phase { train, test };

/// Test-time gate: frames whose regular score exceeds gamma are treated as
/// abnormal and skipped. Training always updates. Returns whether the update
/// was applied.
template <typename T>
bool gated_update(MemoryBank<T>& bank, const Tensor<T>& queries_kc, T regular, T gamma,
                  Phase phase) {
    if (!(gamma > T(0)))
        throw ConfigError("gated_update: gamma must be positive");
    if (phase == Phase::test && regular > gamma)
        return false;
    update(bank, queries_kc);
    return true;
}

/// Smallest pairwise distance between items; how spread out the bank is.
template <typename T>
T min_pairwise_distance(const MemoryBank<T>& bank) {
    const int64_t m = bank.num_items(), c = bank.channels();
    const T* p = bank.items.ptr();
    T best = 0;
    bool first = true;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = i + 1; j < m; ++j) {
            T s = 0;
            for (int64_t d = 0; d < c; ++d) {
                const T diff = p[i * c + d] - p[j * c + d];
                s += diff * diff;
            }
            const T dist = std::sqrt(s);
            if (first || dist < best) {
                best = dist;
                first = false;
            }
        }
    return best;
}

} // namespace mnad::memory
