#pragma once

// Tape-based reverse-mode differentiation. Nodes are appended in evaluation
// order, so walking the tape backwards is a valid topological order.

#include <vipcnn/tensor.hpp>

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace vipcnn::nn {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> velocity; // momentum buffer

    Parameter(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), velocity(value.shape())
    {
    }

    void zero_grad() { grad.fill(T(0)); }
};

// Named parameters with stable addresses. An alias resolves to another
// parameter, which is how subject/object weight tying is expressed.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& create(const std::string& name, Tensor<T> value)
    {
        if (params_.count(name) || aliases_.count(name)) throw ConfigError("duplicate parameter " + name);
        auto p = std::make_unique<Parameter<T>>(name, std::move(value));
        auto& ref = *p;
        params_.emplace(name, std::move(p));
        return ref;
    }

    void alias(const std::string& name, const std::string& target)
    {
        if (params_.count(name)) throw ConfigError("alias shadows parameter " + name);
        if (!params_.count(target)) throw ConfigError("alias target missing: " + target);
        aliases_[name] = target;
    }

    bool contains(const std::string& name) const { return params_.count(name) || aliases_.count(name); }

    Parameter<T>& get(const std::string& name)
    {
        auto a = aliases_.find(name);
        const std::string& key = a == aliases_.end() ? name : a->second;
        auto it = params_.find(key);
        if (it == params_.end()) throw ConfigError("unknown parameter " + name);
        return *it->second;
    }
    const Parameter<T>& get(const std::string& name) const { return const_cast<ParameterStore*>(this)->get(name); }

    // Canonical (non-alias) parameters in name order.
    std::vector<Parameter<T>*> all()
    {
        std::vector<Parameter<T>*> out;
        for (auto& [k, p] : params_) out.push_back(p.get());
        return out;
    }
    std::vector<const Parameter<T>*> all() const
    {
        std::vector<const Parameter<T>*> out;
        for (auto& [k, p] : params_) out.push_back(p.get());
        return out;
    }

    const std::map<std::string, std::string>& aliases() const { return aliases_; }

    void zero_grad()
    {
        for (auto& [k, p] : params_) p->zero_grad();
    }

    std::size_t count_values() const
    {
        std::size_t n = 0;
        for (auto& [k, p] : params_) n += p->value.size();
        return n;
    }

    // Copy with a different scalar type (e.g. float weights -> double checks).
    template <typename U>
    ParameterStore<U> cast() const
    {
        ParameterStore<U> out;
        for (auto& [k, p] : params_) out.create(k, p->value.template cast<U>());
        for (auto& [a, t] : aliases_) out.alias(a, t);
        return out;
    }

private:
    std::map<std::string, std::unique_ptr<Parameter<T>>> params_;
    std::map<std::string, std::string> aliases_;
};

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
    bool needs_grad() const { return tape->needs_grad(*this); }
};

template <typename T>
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }

    // Leaf whose gradient is kept on the tape (used by gradient checks on inputs).
    Var<T> input(Tensor<T> v) { return push(std::move(v), true, {}); }

    // Leaf bound to a parameter; a parameter used twice maps to one node, so
    // tied uses accumulate into a single gradient.
    Var<T> param(Parameter<T>& p)
    {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return {this, it->second};
        auto v = push(p.value, !frozen_(p), {});
        nodes_[v.id].param = &p;
        param_nodes_.emplace(&p, v.id);
        return v;
    }

    Var<T> push(Tensor<T> value, bool needs_grad, Backward bw)
    {
        nodes_.push_back(Node{std::move(value), {}, std::move(bw), nullptr, needs_grad});
        return {this, nodes_.size() - 1};
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    // Gradient buffer of a node, allocated on first touch.
    Tensor<T>& grad(std::size_t id)
    {
        auto& n = nodes_[id];
        if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }
    Tensor<T>& grad(Var<T> v) { return grad(v.id); }
    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    // Backpropagate from a scalar; parameter gradients are added to
    // Parameter::grad.
    void backward(Var<T> loss)
    {
        if (value(loss).size() != 1) throw InputError("backward requires a scalar output");
        grad(loss)[0] = T(1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.grad.empty() || !n.needs_grad) continue;
            if (n.backward) n.backward(*this, i);
        }
        for (auto& n : nodes_)
            if (n.param && !n.grad.empty() && n.needs_grad) n.param->grad += n.grad;
    }

    void set_frozen(std::function<bool(const Parameter<T>&)> pred) { frozen_ = std::move(pred); }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        Backward backward;
        Parameter<T>* param = nullptr;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
    std::function<bool(const Parameter<T>&)> frozen_ = [](const Parameter<T>&) { return false; };
};

} // namespace vipcnn::nn
