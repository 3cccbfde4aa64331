#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mnad/tensor.hpp"

namespace mnad {

/// Ordered record of executed ops for reverse-mode differentiation.
///
/// Ops push a closure that reads the output's gradient and accumulates
/// vector-Jacobian products into their inputs. backward() replays the
/// records once, in reverse execution order; a record whose output never
/// received a gradient is skipped (its branch does not reach the seed).
template <typename T>
class Tape {
public:
    struct Record {
        Tensor<T> output;
        std::function<void()> pull;
        const char* kind;
    };

    void record(Tensor<T> output, const char* kind, std::function<void()> pull) {
        records_.push_back(Record{std::move(output), std::move(pull), kind});
    }

    bool empty() const { return records_.empty(); }
    size_t size() const { return records_.size(); }

    const Tensor<T>& last_output() const {
        if (records_.empty())
            throw Error("tape: no recorded ops");
        return records_.back().output;
    }

    /// Seeds the final output with `seed` and pulls gradients back through
    /// every recorded op.
    void backward(const Tensor<T>& seed) {
        if (records_.empty())
            throw Error("backward: tape is empty (no forward pass recorded)");
        Tensor<T> out = records_.back().output;
        if (seed.shape() != out.shape())
            throw ShapeError("backward: seed shape " + shape_str(seed.shape()) +
                             " does not match output shape " + shape_str(out.shape()));
        out.accumulate_grad(seed.data());
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!it->output.has_grad())
                continue;
            it->pull();
        }
    }

    void clear() { records_.clear(); }

private:
    std::vector<Record> records_;
};

namespace detail {
template <typename T>
inline Tape<T>*& active_tape_slot() {
    thread_local Tape<T>* tape = nullptr;
    return tape;
}
} // namespace detail

template <typename T>
Tape<T>* active_tape() {
    return detail::active_tape_slot<T>();
}

/// RAII activation of a tape; ops record themselves while one is active.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(detail::active_tape_slot<T>()) {
        detail::active_tape_slot<T>() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot<T>() = prev_; }

    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

/// Temporarily disables recording (evaluation, finite differences).
template <typename T>
class NoTapeScope {
public:
    NoTapeScope() : prev_(detail::active_tape_slot<T>()) { detail::active_tape_slot<T>() = nullptr; }
    ~NoTapeScope() { detail::active_tape_slot<T>() = prev_; }

    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    Tape<T>* prev_;
};

} // namespace mnad
