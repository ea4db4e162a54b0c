// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over a linear tape.
//
// Every operation appends one node holding its output value. When the tape
// records and at least one input needs a gradient, the node also keeps a
// closure that maps the output gradient onto the input gradients. backward()
// walks the nodes in exact reverse execution order; gradients accumulate
// additively, so a value consumed twice receives the sum of both paths.

#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "rbdc/errors.hpp"
#include "rbdc/tensor.hpp"

namespace rbdc {

struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;

    bool valid() const noexcept { return id != npos; }
};

template <typename T>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

    explicit Tape(bool record = true) : record_(record) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) noexcept = default;
    Tape& operator=(Tape&&) noexcept = default;

    bool recording() const noexcept { return record_; }

    Var constant(Tensor<T> value) { return append(std::move(value), false, nullptr); }
    Var parameter(Tensor<T> value) { return append(std::move(value), true, nullptr); }

    // Appends the result of an operation. The closure is dropped when no input needs a gradient.
    Var push(Tensor<T> value, std::initializer_list<Var> inputs, Backward fn) {
        bool needs = false;
        for (Var v : inputs)
            if (v.valid() && nodes_.at(v.id).requires_grad) needs = true;
        return append(std::move(value), needs, (record_ && needs) ? std::move(fn) : nullptr);
    }

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return v.valid() && nodes_.at(v.id).requires_grad; }

    // Gradient of the last backward() loss with respect to v; zeros if v did not influence it.
    Tensor<T> grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (!consumed_) throw StateError("gradient requested before backward()");
        if (n.grad.empty()) return Tensor<T>::zeros(n.value.shape());
        return n.grad;
    }

    // Mutable gradient buffer used by backward closures; allocated on first use.
    Tensor<T>& grad_buffer(Var v) {
        Node& n = nodes_.at(v.id);
        if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
        return n.grad;
    }

    void accumulate(Var v, const Tensor<T>& g) {
        if (!requires_grad(v)) return;
        Tensor<T>& buf = grad_buffer(v);
        if (buf.shape() != g.shape())
            throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                             shape_str(buf.shape()));
        auto dst = buf.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }

    void backward(Var loss) {
        if (consumed_) throw StateError("tape already consumed by a previous backward()");
        if (!record_) throw StateError("backward() on a tape that did not record operations");
        const Tensor<T>& lv = value(loss);
        if (lv.size() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(lv.shape()));
        consumed_ = true;
        if (!nodes_[loss.id].requires_grad) return;
        grad_buffer(loss).fill(T{1});
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            // The closure may touch other nodes' buffers; keep a stable copy of this one.
            const Tensor<T> g = n.grad;
            n.backward(*this, g);
        }
    }

    bool consumed() const noexcept { return consumed_; }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var append(Tensor<T> value, bool requires_grad, Backward fn) {
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(fn)});
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool record_ = true;
    bool consumed_ = false;
};

} // namespace rbdc
