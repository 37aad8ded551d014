// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/errors.hpp"
#include "loraforge/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

namespace loraforge {

template <typename Scalar>
class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
public:
    Var() = default;

    const Matrix<Scalar>& value() const { return tape_->value(id_); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    bool requires_grad() const { return tape_->requires_grad(id_); }
    Tape<Scalar>* tape() const { return tape_; }
    std::size_t id() const { return id_; }

private:
    friend class Tape<Scalar>;
    Var(Tape<Scalar>* t, std::size_t id) : tape_(t), id_(id) {}

    Tape<Scalar>* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Dynamically recorded reverse-mode tape over a closed op set. A tape built
// with record=false only evaluates values and keeps no backward closures.
template <typename Scalar>
class Tape {
public:
    using Mat = Matrix<Scalar>;
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

    Var<Scalar> constant(Mat value) { return push(std::move(value), false, {}); }

    // Leaf whose gradient is retained on the tape (read it back with grad_of).
    Var<Scalar> input(Mat value) { return push(std::move(value), record_, {}); }

    // Leaf bound to a parameter. Its value is referenced, not copied; the
    // gradient flows into p.grad only when p is trainable.
    Var<Scalar> param(Parameter<Scalar>& p) {
        const bool rg = record_ && p.trainable;
        nodes_.push_back(Node{});
        Node& n = nodes_.back();
        n.ref = &p.value;
        n.requires_grad = rg;
        if (rg) {
            Parameter<Scalar>* target = &p;
            n.backward = [target](Tape& t, std::size_t self) { target->grad += t.grad(self); };
        }
        return Var<Scalar>(this, nodes_.size() - 1);
    }

    Var<Scalar> param(const Parameter<Scalar>& p) {
        nodes_.push_back(Node{});
        nodes_.back().ref = &p.value;
        return Var<Scalar>(this, nodes_.size() - 1);
    }

    // Record a result node. The backward closure reads grad(self) and
    // accumulates into the grads of its inputs.
    Var<Scalar> push(Mat value, bool requires_grad, BackwardFn fn) {
        nodes_.push_back(Node{});
        Node& n = nodes_.back();
        n.value = std::move(value);
        n.requires_grad = requires_grad && record_;
        if (n.requires_grad) n.backward = std::move(fn);
        return Var<Scalar>(this, nodes_.size() - 1);
    }

    const Mat& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.ref ? *n.ref : n.value;
    }

    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Gradient buffer of a node, zero-allocated on first access.
    Mat& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) {
            const Mat& v = value(id);
            n.grad = Mat::Zero(v.rows(), v.cols());
        }
        return n.grad;
    }

    const Mat& grad_of(const Var<Scalar>& v) { return grad(v.id()); }

    void backward(const Var<Scalar>& root) {
        if (root.tape() != this) throw ContractError("backward: root belongs to another tape");
        const Mat& rv = value(root.id());
        if (rv.rows() != 1 || rv.cols() != 1)
            throw ContractError("backward: root must be a scalar, got " + std::to_string(rv.rows()) + "x" +
                                std::to_string(rv.cols()));
        if (!requires_grad(root.id())) return;
        grad(root.id()).setOnes();
        for (std::size_t i = root.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
            n.backward(*this, i);
        }
    }

private:
    struct Node {
        Mat value;
        const Mat* ref = nullptr;
        Mat grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    std::deque<Node> nodes_;
    bool record_;
};

// Closed op set. Every op checks its shape preconditions and throws
// DimensionError naming the offending shapes.
template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b);
// a * b^T
template <typename S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b);
template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b);
// Adds a 1 x n row to every row of a.
template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row);
template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S>
Var<S> scale(const Var<S>& a, S factor);
template <typename S>
Var<S> relu(const Var<S>& a);
// tanh approximation
template <typename S>
Var<S> gelu(const Var<S>& a);
// Row-wise softmax. With causal set, entry (i, j) with j > i is masked out.
template <typename S>
Var<S> softmax_rows(const Var<S>& a, bool causal);
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5));
// out.row(i) = table.row(ids[i])
template <typename S>
Var<S> embedding(const Var<S>& table, std::span<const int> ids);
// Mean over rows with mask[i] set of -log softmax(logits.row(i))[targets[i]].
// Returns a 1x1 node. Throws ContractError when no row is selected.
template <typename S>
Var<S> cross_entropy(const Var<S>& logits, std::span<const int> targets, const std::vector<bool>& mask);
template <typename S>
Var<S> sum(const Var<S>& a);
template <typename S>
Var<S> slice_cols(const Var<S>& a, Eigen::Index start, Eigen::Index count);
template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts);
// sum_t coeffs(row, t) * terms[t]
template <typename S>
Var<S> weighted_sum(const Var<S>& coeffs, Eigen::Index row, std::span<const Var<S>> terms);

template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
    return add(a, b);
}

}  // namespace loraforge
