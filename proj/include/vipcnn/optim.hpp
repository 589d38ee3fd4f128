#pragma once

#include <vipcnn/autograd.hpp>

#include <string>
#include <vector>

namespace vipcnn::nn {

// Classical momentum SGD: v <- m*v - lr*(g + wd*w); w <- w + v.
struct Sgd {
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0;
    // Parameter-name prefixes that are never updated.
    std::vector<std::string> frozen;

    template <typename T>
    bool is_frozen(const Parameter<T>& p) const
    {
        for (const auto& f : frozen)
            if (!f.empty() && p.name.compare(0, f.size(), f) == 0) return true;
        return false;
    }

    template <typename T>
    void step(Parameter<T>& p) const
    {
        if (is_frozen(p)) return;
        const T m = T(momentum), l = T(lr), wd = T(weight_decay);
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            p.velocity[i] = m * p.velocity[i] - l * (p.grad[i] + wd * p.value[i]);
            p.value[i] += p.velocity[i];
        }
    }

    template <typename T>
    void step(ParameterStore<T>& store) const
    {
        for (auto* p : store.all()) step(*p);
    }
};

} // namespace vipcnn::nn
