// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Randomized finite-difference sweeps over every differentiable op and over
// the full patch loss of a tiny decoder. Shared by the test suite, the
// acceptance binary and the `gradcheck` command.

#include <algorithm>
#include <array>
#include <functional>
#include <string>
#include <vector>

#include "patchar/adc.hpp"
#include "patchar/decoder.hpp"
#include "patchar/gradcheck.hpp"

namespace patchar {

struct OpCheck {
    std::string op;
    std::size_t cases = 0;
    double max_rel_error = 0;
};

namespace detail {

template <class T>
std::size_t dim(CounterRng& rng, std::size_t lo, std::size_t hi) {
    return lo + rng.below(hi - lo + 1);
}

/// Fixed random row/column weights turning a matrix into a scalar:
/// u^T Y w, so every output entry gets its own (nonzero) sensitivity.
template <class T>
struct Scalarizer {
    Tensor<T> u, w;
    Scalarizer(const Shape& s, CounterRng& rng)
        : u(randn<T>({1, s[0]}, T(1), rng)), w(randn<T>({s.size() > 1 ? s[1] : 1, 1}, T(1), rng)) {}
    typename Graph<T>::Var operator()(Graph<T>& g, typename Graph<T>::Var y) const {
        return g.sum(g.matmul(g.matmul(g.constant(u), y), g.constant(w)));
    }
};

/// Checks df/dX_i for every input i of a multi-input op, the others held
/// constant. `build` maps the input vars to the op's output.
template <class T>
double check_inputs(const std::vector<Tensor<T>>& inputs, const std::vector<bool>& differentiable,
                    const std::function<typename Graph<T>::Var(Graph<T>&, std::vector<typename Graph<T>::Var>&)>& build,
                    CounterRng& rng, bool scalar_output = false) {
    Shape out_shape;
    {
        Graph<T> g(false);
        std::vector<typename Graph<T>::Var> vars;
        for (const auto& t : inputs) vars.push_back(g.constant(t));
        out_shape = g.value(build(g, vars)).shape;
    }
    const Scalarizer<T> sc(out_shape, rng);
    double worst = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!differentiable[i]) continue;
        GraphFn<T> f = [&](Graph<T>& g, typename Graph<T>::Var theta) {
            std::vector<typename Graph<T>::Var> vars;
            for (std::size_t j = 0; j < inputs.size(); ++j) vars.push_back(j == i ? theta : g.constant(inputs[j]));
            auto y = build(g, vars);
            if (scalar_output) return y;
            return sc(g, y);
        };
        worst = std::max(worst, grad_check<T>(f, inputs[i]).max_rel_error);
    }
    return worst;
}

}  // namespace detail

/// Runs `cases` random instances of each op and reports the worst relative
/// error per op.
template <class T>
std::vector<OpCheck> check_ops(std::size_t cases, std::uint64_t seed) {
    using Var = typename Graph<T>::Var;
    using detail::dim;
    CounterRng rng(seed, 0x6f7073ULL);
    std::vector<OpCheck> out;
    auto run = [&](const std::string& name, const std::function<double()>& one) {
        OpCheck c{name, cases, 0};
        for (std::size_t i = 0; i < cases; ++i) c.max_rel_error = std::max(c.max_rel_error, one());
        out.push_back(c);
    };
    auto rnd = [&](Shape s) { return randn<T>(std::move(s), T(1), rng); };

    run("matmul", [&] {
        const auto n = dim<T>(rng, 1, 5), k = dim<T>(rng, 1, 5), m = dim<T>(rng, 1, 5);
        return detail::check_inputs<T>({rnd({n, k}), rnd({k, m})}, {true, true},
                                       [](Graph<T>& g, std::vector<Var>& v) { return g.matmul(v[0], v[1]); }, rng);
    });
    run("add", [&] {
        const auto n = dim<T>(rng, 1, 5), m = dim<T>(rng, 1, 5);
        return detail::check_inputs<T>({rnd({n, m}), rnd({n, m})}, {true, true},
                                       [](Graph<T>& g, std::vector<Var>& v) { return g.add(v[0], v[1]); }, rng);
    });
    run("add_row", [&] {
        const auto n = dim<T>(rng, 1, 5), m = dim<T>(rng, 1, 5);
        return detail::check_inputs<T>({rnd({n, m}), rnd({m})}, {true, true},
                                       [](Graph<T>& g, std::vector<Var>& v) { return g.add_row(v[0], v[1]); }, rng);
    });
    run("scale", [&] {
        const auto n = dim<T>(rng, 1, 5), m = dim<T>(rng, 1, 5);
        const T s = static_cast<T>(rng.normal());
        return detail::check_inputs<T>({rnd({n, m})}, {true},
                                       [s](Graph<T>& g, std::vector<Var>& v) { return g.scale(v[0], s); }, rng);
    });
    run("sum", [&] {
        const auto n = dim<T>(rng, 1, 5), m = dim<T>(rng, 1, 5);
        return detail::check_inputs<T>({rnd({n, m})}, {true},
                                       [](Graph<T>& g, std::vector<Var>& v) { return g.sum(v[0]); }, rng, true);
    });
    run("layer_norm", [&] {
        const auto n = dim<T>(rng, 1, 4), m = dim<T>(rng, 2, 8);
        return detail::check_inputs<T>(
            {rnd({n, m}), rnd({m}), rnd({m})}, {true, true, true},
            [](Graph<T>& g, std::vector<Var>& v) { return g.layer_norm(v[0], v[1], v[2]); }, rng);
    });
    run("gelu", [&] {
        const auto n = dim<T>(rng, 1, 5), m = dim<T>(rng, 1, 5);
        return detail::check_inputs<T>({rnd({n, m})}, {true},
                                       [](Graph<T>& g, std::vector<Var>& v) { return g.gelu(v[0]); }, rng);
    });
    run("gather_rows", [&] {
        const auto rows = dim<T>(rng, 1, 6), m = dim<T>(rng, 1, 5), k = dim<T>(rng, 1, 8);
        std::vector<std::size_t> ids(k);
        for (auto& i : ids) i = rng.below(rows);
        return detail::check_inputs<T>({rnd({rows, m})}, {true},
                                       [ids](Graph<T>& g, std::vector<Var>& v) { return g.gather_rows(v[0], ids); },
                                       rng);
    });
    run("concat_rows", [&] {
        const auto parts = dim<T>(rng, 1, 3), m = dim<T>(rng, 1, 4);
        std::vector<Tensor<T>> in;
        for (std::size_t i = 0; i < parts; ++i) in.push_back(rnd({dim<T>(rng, 1, 3), m}));
        return detail::check_inputs<T>(in, std::vector<bool>(parts, true),
                                       [](Graph<T>& g, std::vector<Var>& v) { return g.concat_rows(v); }, rng);
    });
    run("head_sums", [&] {
        const auto k = dim<T>(rng, 1, 5), heads = dim<T>(rng, 1, 3), dh = dim<T>(rng, 1, 3);
        return detail::check_inputs<T>(
            {rnd({k, heads * dh})}, {true},
            [heads](Graph<T>& g, std::vector<Var>& v) { return g.head_sums(v[0], heads); }, rng);
    });
    run("attention", [&] {
        const auto nq = dim<T>(rng, 1, 4), nk = dim<T>(rng, 1, 6), heads = dim<T>(rng, 1, 2), dh = dim<T>(rng, 1, 4);
        const std::size_t d = heads * dh;
        AttentionMask mask = AttentionMask::all(nq, nk);
        for (std::size_t i = 0; i < nq; ++i) {
            const auto keep = rng.below(nk);
            for (std::size_t j = 0; j < nk; ++j)
                if (j != keep && rng.below(3) == 0) mask.set(i, j, false);
        }
        const bool with_bias = rng.below(2) == 1;
        std::vector<Tensor<T>> in{rnd({nq, d}), rnd({nk, d}), rnd({nk, d})};
        if (with_bias) in.push_back(rnd({nk, heads}));
        return detail::check_inputs<T>(in, std::vector<bool>(in.size(), true),
                                       [heads, mask, with_bias](Graph<T>& g, std::vector<Var>& v) {
                                           return with_bias ? g.attention(v[0], v[1], v[2], heads, mask, v[3])
                                                            : g.attention(v[0], v[1], v[2], heads, mask);
                                       },
                                       rng);
    });
    run("softmax_ce", [&] {
        const auto n = dim<T>(rng, 1, 5), m = dim<T>(rng, 2, 8);
        std::vector<std::uint32_t> targets(n);
        for (auto& t : targets) t = static_cast<std::uint32_t>(rng.below(m));
        std::vector<std::uint8_t> rows(n, 1);
        for (auto& r : rows) r = rng.below(3) != 0;
        rows[rng.below(n)] = 1;
        return detail::check_inputs<T>(
            {rnd({n, m})}, {true},
            [targets, rows](Graph<T>& g, std::vector<Var>& v) { return g.softmax_ce(v[0], targets, rows); }, rng,
            true);
    });
    return out;
}

/// Tiny decoder configuration used for the full patch-loss check.
inline ModelConfig selfcheck_config(CounterRng& rng) {
    ModelConfig mc;
    mc.layers = 2;
    mc.d = 8;
    mc.heads = 2;
    mc.m_side = 2;
    mc.vocab = 6;
    mc.extent = {1, 1, 0};
    mc.rpe_table = reachable_offsets(PlanSet::all(), mc.extent);
    mc.rpe_feed = rng.below(2) ? RpeFeed::Post : RpeFeed::Pre;
    mc.local_mode = std::array{LocalMode::AR, LocalMode::NAR, LocalMode::PNAR}[rng.below(3)];
    mc.caches_enabled = rng.below(4) != 0;
    if (rng.below(2)) {
        mc.text_vocab = 5;
        mc.text_len = 3;
    }
    mc.init_std = 0.5;  // large enough that every path carries gradient
    return mc;
}

/// Finite-difference check of the teacher-forced patch loss with respect to
/// every parameter tensor (a few sampled coordinates each). Each case draws
/// a fresh configuration, context and text.
template <class T>
OpCheck check_patch_loss(std::size_t cases, std::uint64_t seed, std::size_t coords_per_param = 3) {
    CounterRng rng(seed, 0x706c6f7373ULL);
    OpCheck res{"patch_loss", cases, 0};
    for (std::size_t c = 0; c < cases; ++c) {
        const auto mc = selfcheck_config(rng);
        Model<T> model(mc, rng.next_u64());
        const std::size_t M = mc.tokens_per_patch(), n_ctx = rng.below(4);

        std::vector<LayerCache<T>> ctx(n_ctx);
        for (auto& cache : ctx)
            for (std::uint32_t l = 0; l < mc.layers; ++l) cache.layers.push_back(randn<T>({M, mc.d}, T(1), rng));
        std::vector<const LayerCache<T>*> ptrs;
        for (auto& cache : ctx) ptrs.push_back(&cache);
        std::vector<std::size_t> e_ids(1 + n_ctx);
        for (auto& e : e_ids) e = rng.below(mc.rpe_table.size());

        std::vector<TokenId> tokens(M), input(M);
        for (auto& t : tokens) t = static_cast<TokenId>(rng.below(mc.vocab));
        if (mc.local_mode == LocalMode::AR) {
            input = shifted_input(tokens, mc.bop());
        } else {
            for (std::size_t m = 0; m < M; ++m) input[m] = rng.below(2) ? mc.mask_token() : tokens[m];
        }
        std::vector<TokenId> text;
        if (mc.has_text())
            for (std::size_t i = 0, n = 1 + rng.below(mc.text_len); i < n; ++i)
                text.push_back(static_cast<TokenId>(1 + rng.below(mc.text_vocab - 1)));

        const std::vector<std::uint32_t> targets(tokens.begin(), tokens.end());
        std::function<typename Graph<T>::Var(Graph<T>&)> loss = [&](Graph<T>& g) {
            auto y = model.encode_text(g, text);
            auto fwd = model.forward(g, input, ptrs, e_ids, mc.has_text() ? &y : nullptr);
            return g.softmax_ce(fwd.logits, targets);
        };
        res.max_rel_error =
            std::max(res.max_rel_error, grad_check_params<T>(model.params(), loss, rng, coords_per_param).max_rel_error);
    }
    return res;
}

}  // namespace patchar
