// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "patchar/autodiff.hpp"
#include "patchar/optim.hpp"
#include "patchar/rng.hpp"

namespace patchar {

/// Scalar function of one tensor, expressed on a graph.
template <class T>
using GraphFn = std::function<typename Graph<T>::Var(Graph<T>&, typename Graph<T>::Var)>;

struct GradCheckResult {
    double max_rel_error = 0;
    double max_abs_error = 0;
    std::size_t worst_index = 0;
};

/// Compares the reverse-mode gradient of f at theta with central differences
/// (f(theta+h e_i) - f(theta-h e_i)) / 2h, coordinate by coordinate.
/// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
/// coordinates whose true gradient is ~0 from dividing by rounding noise.
template <class T>
GradCheckResult grad_check(const GraphFn<T>& f, const Tensor<T>& theta, T h = T(1e-5), double floor = 1e-6) {
    Parameter<T> p(theta);
    {
        Graph<T> g(true);
        auto loss = f(g, g.param(p));
        g.backward(loss);
    }
    const Tensor<T> analytic = p.grad;

    auto eval = [&](const Tensor<T>& at) {
        Parameter<T> q(at);
        Graph<T> g(false);
        return static_cast<double>(g.value(f(g, g.param(q))).data[0]);
    };

    GradCheckResult res;
    Tensor<T> probe = theta;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        probe.data[i] = theta.data[i] + h;
        const double fp = eval(probe);
        probe.data[i] = theta.data[i] - h;
        const double fm = eval(probe);
        probe.data[i] = theta.data[i];
        const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
        const double a = static_cast<double>(analytic.data[i]);
        const double abs_err = std::abs(a - numeric);
        const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_index = i;
        }
        res.max_abs_error = std::max(res.max_abs_error, abs_err);
    }
    return res;
}

/// Same comparison for a loss built from a parameter store: gradients from
/// one reverse sweep against central differences of the stored values.
/// At most `coords_per_param` coordinates per tensor are probed, chosen with
/// `rng` (all coordinates when the tensor is small enough).
template <class T>
GradCheckResult grad_check_params(ParamStore<T>& store,
                                  const std::function<typename Graph<T>::Var(Graph<T>&)>& loss_fn,
                                  CounterRng& rng, std::size_t coords_per_param = 6, T h = T(1e-5),
                                  double floor = 1e-6) {
    store.zero_grad();
    {
        Graph<T> g(true);
        g.backward(loss_fn(g));
    }
    auto eval = [&] {
        Graph<T> g(false);
        return static_cast<double>(g.value(loss_fn(g)).data[0]);
    };
    GradCheckResult res;
    std::size_t flat = 0;
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& p = store.at(i);
        const Tensor<T> analytic = p.grad;
        std::vector<std::size_t> coords;
        if (p.value.size() <= coords_per_param) {
            for (std::size_t k = 0; k < p.value.size(); ++k) coords.push_back(k);
        } else {
            for (std::size_t k = 0; k < coords_per_param; ++k) coords.push_back(rng.below(p.value.size()));
        }
        for (auto k : coords) {
            const T orig = p.value.data[k];
            p.value.data[k] = orig + h;
            const double fp = eval();
            p.value.data[k] = orig - h;
            const double fm = eval();
            p.value.data[k] = orig;
            const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
            const double a = static_cast<double>(analytic.data[k]);
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_index = flat + k;
            }
            res.max_abs_error = std::max(res.max_abs_error, abs_err);
        }
        flat += p.value.size();
    }
    store.zero_grad();
    return res;
}

}  // namespace patchar
