#include "tsflow/autograd.hpp"

#include <unordered_set>

namespace tsflow {

namespace {
thread_local bool g_recording = true;
}

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }
bool NoGradGuard::recording() { return g_recording; }

template <typename Real>
void Node<Real>::accumulate(const Tensor<Real>& g) {
    if (g.shape() != value.shape()) throw_shape_mismatch("gradient accumulation", value.shape(), g.shape());
    if (grad.empty()) {
        grad = g;
        return;
    }
    auto dst = grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename Real>
void Node<Real>::accumulate(Tensor<Real>&& g) {
    if (g.shape() != value.shape()) throw_shape_mismatch("gradient accumulation", value.shape(), g.shape());
    if (grad.empty()) {
        grad = std::move(g);
        return;
    }
    auto dst = grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename Real>
Var<Real>::Var(Tensor<Real> value, bool requires_grad) : node_(std::make_shared<Node<Real>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

template <typename Real>
Var<Real> Var<Real>::make(Tensor<Real> value, std::vector<Var> inputs,
                          std::function<void(const Tensor<Real>&)> backward_fn) {
    Var out(std::move(value), false);
    if (!g_recording) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
}

template <typename Real>
std::vector<Tensor<Real>> grad(const Var<Real>& loss, std::span<const Var<Real>> params) {
    if (loss.numel() != 1) throw ShapeError("grad: loss must be scalar, got shape " + shape_str(loss.shape()));

    using NodePtr = Node<Real>*;
    // Iterative post-order DFS: topo holds nodes with all parents before children.
    std::vector<NodePtr> topo;
    std::unordered_set<NodePtr> seen;
    if (loss.requires_grad()) {
        std::vector<std::pair<NodePtr, std::size_t>> stack;
        stack.emplace_back(loss.node().get(), 0);
        seen.insert(loss.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                NodePtr p = node->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                topo.push_back(node);
                stack.pop_back();
            }
        }
    }
    for (auto* n : topo) n->grad = Tensor<Real>();
    for (const auto& p : params) p.node()->grad = Tensor<Real>();

    if (!topo.empty()) {
        topo.back()->grad = Tensor<Real>(loss.shape(), Real(1));
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            NodePtr n = *it;
            if (n->backward_fn && !n->grad.empty()) {
                n->backward_fn(n->grad);
                n->grad = Tensor<Real>();  // interior gradients are no longer needed
            }
        }
    }

    std::vector<Tensor<Real>> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        auto& node = *p.node();
        if (node.grad.empty())
            out.emplace_back(node.value.shape(), Real(0));
        else
            out.push_back(std::move(node.grad));
        node.grad = Tensor<Real>();
    }
    return out;
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template std::vector<Tensor<float>> grad(const Var<float>&, std::span<const Var<float>>);
template std::vector<Tensor<double>> grad(const Var<double>&, std::span<const Var<double>>);

}  // namespace tsflow
