#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tsflow/tensor.hpp"

namespace tsflow {

template <typename Real>
struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Receives d(loss)/d(value) and pushes contributions into parents.
    std::function<void(const Tensor<Real>&)> backward_fn;

    void accumulate(const Tensor<Real>& g);
    void accumulate(Tensor<Real>&& g);
};

/// Handle to a value in the recorded computation graph. Copies share the node.
template <typename Real>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<Real> value, bool requires_grad = false);

    const Tensor<Real>& value() const { return node_->value; }
    /// Direct mutation is reserved for optimizers and loaders acting on leaves.
    Tensor<Real>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    const Tensor<Real>& grad() const { return node_->grad; }
    const std::shared_ptr<Node<Real>>& node() const { return node_; }

    /// Wires a freshly computed value to its inputs. The backward closure is
    /// only retained when some input requires gradients and recording is on.
    static Var make(Tensor<Real> value, std::vector<Var> inputs,
                    std::function<void(const Tensor<Real>&)> backward_fn);

private:
    std::shared_ptr<Node<Real>> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
    static bool recording();

private:
    bool previous_;
};

/// Reverse-mode pass: returns d(loss)/d(p) for every p, shaped like p.
/// Parameters unreachable from the loss get zero gradients.
template <typename Real>
std::vector<Tensor<Real>> grad(const Var<Real>& loss, std::span<const Var<Real>> params);

extern template class Var<float>;
extern template class Var<double>;

}  // namespace tsflow
