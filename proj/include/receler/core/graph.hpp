#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "receler/core/tensor.hpp"

namespace receler {

// Reverse-mode autodiff on a tape of eagerly evaluated nodes.
//
// Ops compute values immediately. While the owning Graph is recording,
// nodes that require gradients are appended to the tape together with a
// backward closure; Graph::backward walks the tape in reverse. With
// recording off (sampling, evaluation) nodes carry only their value and
// are freed as soon as the last handle drops.

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first contribution
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;

    void accum_grad(const Tensor& delta) {
        if (!requires_grad) return;
        if (grad.empty())
            grad = delta;
        else
            grad += delta;
    }
    void ensure_grad_alloc() {
        if (grad.empty()) grad = Tensor::zeros(value.shape());
    }
};

class Graph;

class Var {
public:
    Var() = default;
    Var(std::shared_ptr<Node> n, Graph* g) : node_(std::move(n)), graph_(g) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    size_t size() const { return node_->value.size(); }

    Node* node() const { return node_.get(); }
    std::shared_ptr<Node> node_ptr() const { return node_; }
    Graph* graph() const { return graph_; }

private:
    std::shared_ptr<Node> node_;
    Graph* graph_ = nullptr;
};

class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    Var leaf(Tensor value, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->requires_grad = recording_ && requires_grad;
        if (n->requires_grad) tape_.push_back(n);
        return Var(n, this);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // Registers an op node. `parents` are kept alive for the backward pass
    // only when a gradient will actually flow.
    Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node*)> make_backward) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        bool needs = false;
        if (recording_)
            for (const auto& p : parents)
                if (p.requires_grad()) needs = true;
        n->requires_grad = needs;
        if (needs) {
            n->parents.reserve(parents.size());
            for (auto& p : parents) n->parents.push_back(p.node_ptr());
            make_backward(n.get());
            tape_.push_back(n);
        }
        return Var(n, this);
    }

    // Backpropagate from a scalar loss through every recorded node.
    void backward(const Var& loss) {
        if (!loss.defined() || !loss.requires_grad())
            throw std::logic_error("backward() on a value with no gradient path");
        if (loss.size() != 1)
            throw std::logic_error("backward() expects a scalar loss, got shape " + shape_str(loss.shape()));
        loss.node()->grad = Tensor::full(loss.shape(), 1.0);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
            Node* n = it->get();
            if (n->grad.empty()) continue;  // not on the path from the loss
            if (n->backward_fn) n->backward_fn();
        }
    }

    void clear() { tape_.clear(); }
    size_t tape_size() const { return tape_.size(); }

private:
    bool recording_;
    std::vector<std::shared_ptr<Node>> tape_;
};

// A NoGrad scope: ops built inside compute values only.
class NoGradScope {
public:
    explicit NoGradScope(Graph& g) : g_(g), prev_(g.recording()) { g_.set_recording(false); }
    ~NoGradScope() { g_.set_recording(prev_); }

private:
    Graph& g_;
    bool prev_;
};

}  // namespace receler
