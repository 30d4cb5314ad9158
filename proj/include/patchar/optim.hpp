// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "patchar/autodiff.hpp"
#include "patchar/errors.hpp"

namespace patchar {

/// Named parameters (insertion order preserved) plus Adam moments.
template <class T>
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;
    ParamStore(ParamStore&&) = default;
    ParamStore& operator=(ParamStore&&) = default;

    Parameter<T>& add(const std::string& name, Tensor<T> init) {
        if (index_.count(name)) throw StateError("duplicate parameter name '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.push_back(std::make_unique<Entry>(name, Parameter<T>(std::move(init))));
        return entries_.back()->param;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<T>& operator[](const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return entries_[it->second]->param;
    }
    const Parameter<T>& operator[](const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return entries_[it->second]->param;
    }

    std::size_t size() const { return entries_.size(); }
    const std::string& name(std::size_t i) const { return entries_[i]->name; }
    Parameter<T>& at(std::size_t i) { return entries_[i]->param; }
    const Parameter<T>& at(std::size_t i) const { return entries_[i]->param; }

    std::size_t num_scalars() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e->param.value.size();
        return n;
    }

    std::size_t step_count() const { return steps_; }

    void zero_grad() {
        for (auto& e : entries_) e->param.zero_grad();
    }

    void scale_grad(T s) {
        for (auto& e : entries_)
            for (auto& g : e->param.grad.data) g *= s;
    }

    /// Bias-corrected Adam update of every parameter; gradients are zeroed afterwards.
    void adam_step(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
        ++steps_;
        const T c1 = T(1) - std::pow(beta1, static_cast<T>(steps_));
        const T c2 = T(1) - std::pow(beta2, static_cast<T>(steps_));
        for (auto& e : entries_) {
            auto& p = e->param;
            if (e->m.size() != p.value.size()) {
                e->m.assign(p.value.size(), T(0));
                e->v.assign(p.value.size(), T(0));
            }
            if (p.grad.size() != p.value.size()) p.grad = Tensor<T>(p.value.shape);
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const T g = p.grad.data[i];
                e->m[i] = beta1 * e->m[i] + (T(1) - beta1) * g;
                e->v[i] = beta2 * e->v[i] + (T(1) - beta2) * g * g;
                const T mhat = e->m[i] / c1;
                const T vhat = e->v[i] / c2;
                p.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
            p.zero_grad();
        }
    }

private:
    struct Entry {
        Entry(std::string n, Parameter<T> p) : name(std::move(n)), param(std::move(p)) {}
        std::string name;
        Parameter<T> param;
        std::vector<T> m, v;
    };

    std::vector<std::unique_ptr<Entry>> entries_;  // stable addresses for graph leaves
    std::map<std::string, std::size_t> index_;
    std::size_t steps_ = 0;
};

}  // namespace patchar
