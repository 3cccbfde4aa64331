#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "mnad/memory.hpp"
#include "mnad/tensor.hpp"

namespace mnad::scoring {

inline constexpr const char* kTraceHeader =
    "video_id,frame_index,psnr_db,dist,g_psnr,g_dist,score,label,gate_flag";

inline constexpr double kPsnrCap = 100.0;

/// Model range [-1,1] to image range [0,1].
template <typename T>
Tensor<T> remap01(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* p = x.ptr();
    T* q = out.mutable_ptr();
    for (int64_t i = 0; i < x.size(); ++i)
        q[i] = (p[i] + T(1)) / T(2);
    return out;
}

/// Peak signal-to-noise ratio with peak 1.0 on [0,1] frames. Identical frames
/// clamp to 100 dB instead of infinity.
template <typename T>
T psnr(const Tensor<T>& recon01, const Tensor<T>& target01) {
    if (recon01.shape() != target01.shape())
        throw ShapeError("psnr: shape mismatch " + shape_str(recon01.shape()) + " vs " +
                         shape_str(target01.shape()));
    const T* a = recon01.ptr();
    const T* b = target01.ptr();
    T mse = 0;
    for (int64_t i = 0; i < recon01.size(); ++i) {
        const T d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<T>(recon01.size());
    if (mse == T(0))
        return T(kPsnrCap);
    return std::min(T(kPsnrCap), T(10) * std::log10(T(1) / mse));
}

/// Mean distance from each query to its most similar item.
template <typename T>
T distance_score(const Tensor<T>& queries_kc, const memory::MemoryBank<T>& bank) {
    const memory::Assignment asg = memory::assign(queries_kc, bank);
    const int64_t k = queries_kc.dim(0), c = bank.channels();
    const T* q = queries_kc.ptr();
    const T* p = bank.items.ptr();
    T acc = 0;
    for (int64_t i = 0; i < k; ++i) {
        const int64_t j = asg.nearest[static_cast<size_t>(i)];
        T s = 0;
        for (int64_t d = 0; d < c; ++d) {
            const T diff = q[i * c + d] - p[j * c + d];
            s += diff * diff;
        }
        acc += std::sqrt(s);
    }
    return acc / static_cast<T>(k);
}

/// (x - min) / (max - min) over the scope; a constant scope maps to all zeros.
template <typename T>
std::vector<T> minmax_normalize(const std::vector<T>& values) {
    if (values.empty())
        throw DataError("minmax_normalize: empty scope");
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const T lo = *lo_it, hi = *hi_it;
    std::vector<T> out(values.size(), T(0));
    if (hi == lo)
        return out;
    for (size_t i = 0; i < values.size(); ++i)
        out[i] = (values[i] - lo) / (hi - lo);
    return out;
}

/// Fused abnormality over one normalization scope: high when PSNR is low
/// relative to the scope or the queries sit far from the bank. The PSNR term
/// is the min-max normalization of the negated sequence, which equals
/// 1 - g(psnr) except in the degenerate constant case, where both terms are 0.
template <typename T>
std::vector<T> abnormality_score(const std::vector<T>& psnr_seq, const std::vector<T>& dist_seq,
                                 T lambda) {
    if (psnr_seq.size() != dist_seq.size())
        throw ShapeError("abnormality_score: sequence lengths differ: " +
                         std::to_string(psnr_seq.size()) + " vs " +
                         std::to_string(dist_seq.size()));
    if (lambda < T(0) || lambda > T(1))
        throw ConfigError("abnormality_score: lambda must lie in [0,1]");
    std::vector<T> neg(psnr_seq.size());
    for (size_t i = 0; i < psnr_seq.size(); ++i)
        neg[i] = -psnr_seq[i];
    const std::vector<T> inv_p = minmax_normalize(neg);
    const std::vector<T> g_d = minmax_normalize(dist_seq);
    std::vector<T> s(psnr_seq.size());
    for (size_t i = 0; i < s.size(); ++i)
        s[i] = lambda * inv_p[i] + (T(1) - lambda) * g_d[i];
    return s;
}

/// Probability that a random abnormal frame outscores a random normal one,
/// ties counting one half; computed from average ranks.
template <typename T>
double roc_auc(const std::vector<T>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ShapeError("roc_auc: scores and labels differ in length");
    size_t n_pos = 0, n_neg = 0;
    for (int l : labels) {
        if (l == 1)
            ++n_pos;
        else if (l == 0)
            ++n_neg;
        else
            throw DataError("roc_auc: labels must be 0 or 1, got " + std::to_string(l));
    }
    if (n_pos == 0 || n_neg == 0)
        throw DataError("roc_auc: needs both classes, got " + std::to_string(n_pos) +
                        " abnormal / " + std::to_string(n_neg) + " normal frames");
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a] != scores[b])
            return scores[a] < scores[b];
        return a < b;   // stable total order for determinism
    });
    double pos_rank_sum = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]])
            ++j;
        // 1-based ranks i+1..j share the average rank.
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (size_t t = i; t < j; ++t)
            if (labels[order[t]] == 1)
                pos_rank_sum += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (pos_rank_sum - np * (np + 1) / 2) / (np * nn);
}

template <typename T>
struct TraceRow {
    std::string video_id;
    int64_t frame_index = 0;
    T psnr_db = 0;
    T dist = 0;
    T g_psnr = 0;
    T g_dist = 0;
    T score = 0;
    int label = 0;
    int gate_flag = 1;   // 1 = memory updated, 0 = skipped as abnormal
};

namespace detail_fmt {

inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace detail_fmt

template <typename T>
void write_trace_row(std::ostream& os, const TraceRow<T>& r) {
    os << r.video_id << ',' << r.frame_index << ',' << detail_fmt::num(r.psnr_db) << ','
       << detail_fmt::num(r.dist) << ',' << detail_fmt::num(r.g_psnr) << ','
       << detail_fmt::num(r.g_dist) << ',' << detail_fmt::num(r.score) << ',' << r.label << ','
       << r.gate_flag << '\n';
}

template <typename T>
void write_trace_csv(std::ostream& os, const std::vector<TraceRow<T>>& rows) {
    os << kTraceHeader << '\n';
    for (const auto& r : rows)
        write_trace_row(os, r);
}

/// Streaming form of min-max normalization over the frames seen so far.
template <typename T>
struct RunningMinMax {
    bool seen = false;
    T lo = 0, hi = 0;

    T normalize(T x) {
        if (!seen) {
            seen = true;
            lo = hi = x;
        } else {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        return hi == lo ? T(0) : (x - lo) / (hi - lo);
    }
};

} // namespace mnad::scoring
