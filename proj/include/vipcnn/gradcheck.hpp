#pragma once

// Central finite-difference check of Tape gradients (use with double).

#include <vipcnn/autograd.hpp>
#include <vipcnn/rng.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace vipcnn::nn {

struct GradCheckOptions {
    double epsilon = 1e-5;
    // Denominator floor: error = |a - n| / max(|a|, |n|, floor).
    double floor = 1e-6;
    // Coordinates sampled per parameter (0 = all).
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0;
    std::string worst; // "name[index]"
    std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric, double floor)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// `build` records a scalar loss on the tape it is given; it is re-run for
// every perturbation.
template <typename Build>
GradCheckResult grad_check(Build&& build, std::span<Parameter<double>* const> params, GradCheckOptions opt = {})
{
    auto eval = [&]() {
        Tape<double> tape;
        Var<double> out = build(tape);
        if (out.value().size() != 1) throw InputError("grad_check: output is not a scalar");
        return out.value()[0];
    };

    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape;
        Var<double> out = build(tape);
        if (out.value().size() != 1) throw InputError("grad_check: output is not a scalar");
        tape.backward(out);
    }
    std::vector<Tensor<double>> analytic;
    for (auto* p : params) analytic.push_back(p->grad);

    Rng rng(opt.seed);
    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = *params[pi];
        std::vector<std::size_t> coords(p.value.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opt.max_coords && coords.size() > opt.max_coords) {
            rng.shuffle(coords.begin(), coords.end());
            coords.resize(opt.max_coords);
            std::sort(coords.begin(), coords.end());
        }
        for (auto i : coords) {
            const double orig = p.value[i];
            p.value[i] = orig + opt.epsilon;
            const double up = eval();
            p.value[i] = orig - opt.epsilon;
            const double down = eval();
            p.value[i] = orig;
            const double numeric = (up - down) / (2 * opt.epsilon);
            const double err = relative_error(analytic[pi][i], numeric, opt.floor);
            ++res.checked;
            if (err > res.max_rel_error || res.worst.empty()) {
                res.max_rel_error = std::max(res.max_rel_error, err);
                if (err >= res.max_rel_error) res.worst = p.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

template <typename Build>
GradCheckResult grad_check(Build&& build, std::initializer_list<Parameter<double>*> params, GradCheckOptions opt = {})
{
    std::vector<Parameter<double>*> v(params);
    return grad_check(std::forward<Build>(build), std::span<Parameter<double>* const>(v), opt);
}

} // namespace vipcnn::nn
