#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mnad/tape.hpp"
#include "mnad/tensor.hpp"

namespace mnad {

template <typename T>
struct GradCheckResult {
    T max_abs_err = 0;   // max over inputs/elements of |analytic - numeric| / max(1, |analytic|)
    bool ok = false;
};

/// Compares tape gradients of a scalar-valued function against central
/// differences. `fn` must rebuild the graph from the given inputs on every
/// call and return a scalar tensor.
template <typename T>
GradCheckResult<T> finite_diff_check(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& fn,
    std::vector<Tensor<T>> inputs, T step, T tol) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.clear_grad();   // stale grads from earlier checks must not leak in
    }

    Tape<T> tape;
    std::vector<std::vector<T>> analytic;
    {
        TapeScope<T> scope(tape);
        Tensor<T> loss = fn(inputs);
        if (loss.size() != 1)
            throw ShapeError("finite_diff_check: function must return a scalar, got " +
                             shape_str(loss.shape()));
        tape.backward(Tensor<T>(Shape{}, T(1)));
        for (auto& in : inputs) {
            if (!in.has_grad())
                throw NumericError("finite_diff_check: input received no gradient");
            analytic.push_back(in.grad());
        }
    }

    GradCheckResult<T> res;
    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        auto& in = inputs[ii];
        in.set_requires_grad(false);
        T* p = in.mutable_ptr();
        for (int64_t j = 0; j < in.size(); ++j) {
            const T saved = p[j];
            p[j] = saved + step;
            const T up = fn(inputs).item();
            p[j] = saved - step;
            const T down = fn(inputs).item();
            p[j] = saved;
            const T numeric = (up - down) / (2 * step);
            const T a = analytic[ii][static_cast<size_t>(j)];
            if (!std::isfinite(numeric) || !std::isfinite(a))
                throw NumericError("finite_diff_check: non-finite gradient encountered");
            const T denom = std::max(T(1), std::abs(a));
            const T err = std::abs(a - numeric) / denom;
            if (err > res.max_abs_err)
                res.max_abs_err = err;
        }
        in.set_requires_grad(true);
    }
    res.ok = res.max_abs_err <= tol;
    return res;
}

} // namespace mnad
