#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mnad/errors.hpp"
#include "mnad/tensor.hpp"

namespace mnad {

/// First/second moment buffers for one parameter tensor.
template <typename T>
struct AdamSlot {
    std::vector<T> m;
    std::vector<T> v;
};

template <typename T>
struct AdamState {
    int64_t step = 0;
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    std::vector<AdamSlot<T>> slots;

    void ensure_slots(const std::vector<Tensor<T>>& params) {
        if (slots.size() == params.size())
            return;
        if (!slots.empty())
            throw ConfigError("adam: parameter count changed after state was created");
        slots.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            slots[i].m.assign(static_cast<size_t>(params[i].size()), T(0));
            slots[i].v.assign(static_cast<size_t>(params[i].size()), T(0));
        }
    }
};

/// One Adam update over all parameters. Parameters without an accumulated
/// gradient this step are left untouched. Throws on non-finite gradients.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, T lr) {
    state.ensure_slots(params);
    state.step += 1;
    const T b1 = state.beta1, b2 = state.beta2;
    const T bc1 = T(1) - std::pow(b1, static_cast<T>(state.step));
    const T bc2 = T(1) - std::pow(b2, static_cast<T>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.has_grad())
            continue;
        const auto& g = p.grad();
        auto& slot = state.slots[i];
        if (slot.m.size() != g.size())
            throw ConfigError("adam: parameter " + std::to_string(i) +
                              " changed size after state was created");
        T* pd = p.mutable_ptr();
        for (size_t j = 0; j < g.size(); ++j) {
            if (!std::isfinite(g[j]))
                throw NumericError("adam: non-finite gradient in parameter " +
                                   std::to_string(i));
            slot.m[j] = b1 * slot.m[j] + (T(1) - b1) * g[j];
            slot.v[j] = b2 * slot.v[j] + (T(1) - b2) * g[j] * g[j];
            const T mhat = slot.m[j] / bc1;
            const T vhat = slot.v[j] / bc2;
            pd[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

/// Cosine annealing from lr0 at step 0 down to 0 at step == total_steps.
template <typename T>
T cosine_lr(T lr0, int64_t step, int64_t total_steps) {
    if (total_steps <= 0)
        throw ConfigError("cosine_lr: total_steps must be positive, got " +
                          std::to_string(total_steps));
    if (step < 0 || step > total_steps)
        throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
    const T frac = static_cast<T>(step) / static_cast<T>(total_steps);
    return T(0.5) * lr0 * (T(1) + std::cos(T(M_PI) * frac));
}

} // namespace mnad
