#pragma once

#include <vector>

#include "mnad/memory.hpp"
#include "mnad/ops.hpp"

namespace mnad::losses {

template <typename T>
struct LossWeights {
    T lambda_c = T(0.01);
    T lambda_s = T(0.01);
    T alpha = T(1);

    void validate() const {
        if (lambda_c < T(0) || lambda_s < T(0))
            throw ConfigError("loss weights must be non-negative");
        if (!(alpha > T(0)))
            throw ConfigError("separateness margin must be positive");
    }
};

template <typename T>
struct LossBreakdown {
    T rec = 0;
    T compact = 0;
    T separate = 0;
    T total = 0;
};

namespace detail_loss {

// Per-query L2 distance to the item selected for it: [K] tensor, on the tape.
template <typename T>
Tensor<T> selected_item_distances(const Tensor<T>& queries_kc, const Tensor<T>& items,
                                  const std::vector<int64_t>& index_per_query) {
    if (static_cast<int64_t>(index_per_query.size()) != queries_kc.dim(0))
        throw ShapeError("loss: index count " + std::to_string(index_per_query.size()) +
                         " does not match query count " + std::to_string(queries_kc.dim(0)));
    Tensor<T> picked_ck = gather_cols(transpose(items), index_per_query);   // [C, K]
    Tensor<T> diff = sub(queries_kc, transpose(picked_ck));                 // [K, C]
    Tensor<T> sq = mul(diff, diff);
    return sqrt(sum_axis(sq, 1));                                           // [K]
}

} // namespace detail_loss

/// Mean over the batch of the per-frame L2 distance between output and target.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& output, const Tensor<T>& target) {
    detail::check_same_shape("reconstruction_loss", output, target);
    if (output.rank() < 2)
        throw ShapeError("reconstruction_loss: expected a batched tensor, got " +
                         shape_str(output.shape()));
    const int64_t n = output.dim(0);
    Tensor<T> diff = sub(output, target);
    Tensor<T> flat = reshape(diff, Shape{n, output.size() / n});
    Tensor<T> sq = mul(flat, flat);
    Tensor<T> norms = sqrt(sum_axis(sq, 1));   // [N]
    return mean(norms);
}

/// Pulls each query toward its nearest item: distances summed over queries,
/// averaged over the batch. Gradients reach the queries; items are constants
/// unless the bank is trainable.
template <typename T>
Tensor<T> compactness_loss(const Tensor<T>& queries_kc, const memory::MemoryBank<T>& bank,
                           const std::vector<int64_t>& nearest, int64_t batch_n) {
    if (batch_n < 1)
        throw ConfigError("compactness_loss: batch size must be positive");
    Tensor<T> d = detail_loss::selected_item_distances(queries_kc, bank.items, nearest);
    return scale(sum(d), T(1) / static_cast<T>(batch_n));
}

/// Triplet-style hinge pushing the second-nearest item at least alpha further
/// away than the nearest one; summed over queries, averaged over the batch.
template <typename T>
Tensor<T> separateness_loss(const Tensor<T>& queries_kc, const memory::MemoryBank<T>& bank,
                            const std::vector<int64_t>& nearest,
                            const std::vector<int64_t>& second, T alpha, int64_t batch_n) {
    if (bank.num_items() < 2)
        throw ConfigError("separateness_loss: needs at least 2 items");
    if (batch_n < 1)
        throw ConfigError("separateness_loss: batch size must be positive");
    if (!(alpha > T(0)))
        throw ConfigError("separateness_loss: margin must be positive");
    Tensor<T> dp = detail_loss::selected_item_distances(queries_kc, bank.items, nearest);
    Tensor<T> dn = detail_loss::selected_item_distances(queries_kc, bank.items, second);
    Tensor<T> margin(Shape{dp.dim(0)}, alpha);
    Tensor<T> hinge = relu(add(sub(dp, dn), margin));
    return scale(sum(hinge), T(1) / static_cast<T>(batch_n));
}

/// Weighted sum of the three objectives, still on the tape.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& rec, const Tensor<T>& compact, const Tensor<T>& separate,
                     const LossWeights<T>& w) {
    w.validate();
    return add(rec, add(scale(compact, w.lambda_c), scale(separate, w.lambda_s)));
}

} // namespace mnad::losses
