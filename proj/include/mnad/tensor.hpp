#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "mnad/errors.hpp"
#include "mnad/rng.hpp"

namespace mnad {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s)
        n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i)
        os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;   // empty until backward touches it
    bool requires_grad = false;
};

/// Dense row-major array with an optional gradient buffer.
///
/// Value-semantic handle: copies share the underlying impl, so a tensor
/// captured by a backward closure sees gradients accumulated later. Ops
/// allocate fresh outputs; nothing mutates a tensor that an op has produced
/// (the optimizer and batchnorm running buffers are the deliberate
/// out-of-band exceptions).
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorImpl<T>>()) {
        for (int64_t d : shape)
            if (d < 0)
                throw ShapeError("tensor: negative extent in " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<TensorImpl<T>>()) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

    static Tensor uniform(Shape shape, SplitMix64& rng, T lo, T hi) {
        Tensor t(std::move(shape));
        for (T& x : t.raw())
            x = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t dim(int64_t i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

    const std::vector<T>& data() const { return impl_->data; }
    const T* ptr() const { return impl_->data.data(); }

    /// Mutable access; reserved for initialization, optimizer steps and
    /// batchnorm running buffers.
    std::vector<T>& raw() { return impl_->data; }
    T* mutable_ptr() { return impl_->data.data(); }

    T item() const {
        if (size() != 1)
            throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (!has_grad())
            throw Error("grad: no gradient populated for tensor " + shape_str(shape()));
        return impl_->grad;
    }

    /// Grad mutators are const: the tensor is a shared handle and backward
    /// closures write through captured copies.
    std::vector<T>& grad_buffer() const {
        if (impl_->grad.empty())
            impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }

    void accumulate_grad(const std::vector<T>& g) const {
        auto& buf = grad_buffer();
        for (size_t i = 0; i < buf.size(); ++i)
            buf[i] += g[i];
    }

    void clear_grad() const { impl_->grad.clear(); }

    bool all_finite() const {
        for (T x : impl_->data)
            if (!std::isfinite(x))
                return false;
        return true;
    }

    /// Deep copy (fresh impl, grad not copied).
    Tensor clone() const {
        Tensor t(impl_->shape, impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape();
}

} // namespace mnad
