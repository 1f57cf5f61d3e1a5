#pragma once

#include <cstring>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "receler/core/graph.hpp"
#include "receler/core/rng.hpp"
#include "receler/core/tensor.hpp"

namespace receler {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;     // empty until something backpropagates into it
    Tensor adam_m;   // optimizer state, lazily allocated
    Tensor adam_v;

    void zero_grad() {
        if (!grad.empty()) grad.fill(0.0);
    }
};

// Named parameter registry. Iteration order is insertion order, which makes
// hashing and checkpoint layout stable.
class ParamStore {
public:
    Parameter& add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
        auto p = std::make_shared<Parameter>();
        p->name = name;
        p->value = std::move(init);
        index_[name] = list_.size();
        list_.push_back(std::move(p));
        return *list_.back();
    }

    Parameter& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return *list_[it->second];
    }
    const Parameter& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return *list_[it->second];
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<std::shared_ptr<Parameter>>& list() { return list_; }
    const std::vector<std::shared_ptr<Parameter>>& list() const { return list_; }

    size_t total_count() const {
        size_t n = 0;
        for (const auto& p : list_) n += p->value.size();
        return n;
    }

    void zero_grads() {
        for (auto& p : list_) p->zero_grad();
    }

    // Content hash over names and exact value bits; used for freeze checks
    // and checkpoint compatibility.
    uint64_t value_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : list_) {
            h = fnv1a64(p->name, h);
            const auto& v = p->value.raw();
            const char* bytes = reinterpret_cast<const char*>(v.data());
            h = fnv1a64(std::string_view(bytes, v.size() * sizeof(double)), h);
        }
        return h;
    }

private:
    std::vector<std::shared_ptr<Parameter>> list_;
    std::map<std::string, size_t> index_;
};

// Enter a parameter into a graph as a differentiable leaf whose gradient is
// written back to the Parameter on backward.
inline Var param_var(Graph& g, Parameter& p, bool trainable = true) {
    Var v = g.leaf(p.value, g.recording() && trainable);
    if (v.requires_grad()) {
        Node* n = v.node();
        Parameter* pp = &p;
        n->backward_fn = [n, pp] {
            if (pp->grad.empty()) pp->grad = Tensor::zeros(pp->value.shape());
            pp->grad += n->grad;
        };
    }
    return v;
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Skips parameters whose gradient was never
// touched this step.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int64_t steps_taken() const { return t_; }

    void step(const std::vector<std::shared_ptr<Parameter>>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (const auto& sp : params) {
            Parameter& p = *sp;
            if (p.grad.empty()) continue;
            if (p.adam_m.empty()) {
                p.adam_m = Tensor::zeros(p.value.shape());
                p.adam_v = Tensor::zeros(p.value.shape());
            }
            double* w = p.value.data();
            const double* g = p.grad.data();
            double* m = p.adam_m.data();
            double* v = p.adam_v.data();
            const int64_t n = static_cast<int64_t>(p.value.size());
            for (int64_t i = 0; i < n; ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                w[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
    }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace receler
