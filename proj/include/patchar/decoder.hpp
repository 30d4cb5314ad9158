// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// The patch-step network. One call embeds a patch's M input tokens, runs L
// pre-norm blocks whose self-attention sees [current patch; context patches]
// (context K/V taken from the matching slot of each context LayerCache), an
// optional text cross-attention and a GELU FFN, and returns next-token logits
// together with the patch's own LayerCache.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchar/adc.hpp"
#include "patchar/autodiff.hpp"
#include "patchar/checkpoint.hpp"
#include "patchar/errors.hpp"
#include "patchar/extent.hpp"
#include "patchar/grid.hpp"
#include "patchar/optim.hpp"
#include "patchar/rng.hpp"

namespace patchar {

enum class RpeFeed { Pre, Post };
enum class LocalMode { AR, NAR, PNAR };

inline std::string_view to_string(RpeFeed f) { return f == RpeFeed::Pre ? "pre" : "post"; }
inline std::string_view to_string(LocalMode m) {
    switch (m) {
        case LocalMode::AR: return "ar";
        case LocalMode::NAR: return "nar";
        case LocalMode::PNAR: return "pnar";
    }
    return "?";
}
inline RpeFeed parse_rpe_feed(std::string_view s) {
    if (s == "pre") return RpeFeed::Pre;
    if (s == "post") return RpeFeed::Post;
    throw UsageError("unknown rpe feed '" + std::string(s) + "'");
}
inline LocalMode parse_local_mode(std::string_view s) {
    if (s == "ar") return LocalMode::AR;
    if (s == "nar") return LocalMode::NAR;
    if (s == "pnar") return LocalMode::PNAR;
    throw UsageError("unknown decoder mode '" + std::string(s) + "'");
}

struct ModelConfig {
    std::uint32_t layers = 2;
    std::uint32_t d = 32;
    std::uint32_t heads = 4;
    std::uint32_t m_side = 4;
    std::uint32_t vocab = 64;
    std::uint32_t text_vocab = 0;
    std::uint32_t text_len = 0;  // 0 disables cross-attention
    RpeTable rpe_table;
    Extent extent{2, 2, 0};  // context extent the RPE table was derived for
    RpeFeed rpe_feed = RpeFeed::Pre;
    LocalMode local_mode = LocalMode::AR;
    bool caches_enabled = true;
    bool rpe_every_layer = true;
    std::uint32_t pnar_rounds = 8;
    double init_std = 0.02;

    std::size_t tokens_per_patch() const { return std::size_t{m_side} * m_side; }
    TokenId bop() const { return vocab; }
    TokenId mask_token() const { return vocab + 1; }
    bool has_text() const { return text_len > 0; }

    void validate() const {
        if (layers < 1 || d < 1 || heads < 1 || d % heads) throw ConfigError("model: d must be divisible by heads");
        if (m_side < 1 || vocab < 2) throw ConfigError("model: bad patch geometry");
        if (has_text() && text_vocab < 1) throw ConfigError("model: text_vocab required with text_len > 0");
        if (pnar_rounds < 1) throw ConfigError("model: pnar_rounds must be >= 1");
        if (rpe_table.size() < 1) throw ConfigError("model: empty RPE table");
        extent.validate();
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    nlohmann::json offs = nlohmann::json::array();
    for (const auto& o : c.rpe_table.offsets()) offs.push_back({o.d_row, o.d_col, o.d_frame});
    j = {{"layers", c.layers},
         {"d", c.d},
         {"heads", c.heads},
         {"m_side", c.m_side},
         {"vocab", c.vocab},
         {"text_vocab", c.text_vocab},
         {"text_len", c.text_len},
         {"rpe_offsets", offs},
         {"extent", {c.extent.e_w, c.extent.e_h, c.extent.e_f}},
         {"rpe_feed", std::string(to_string(c.rpe_feed))},
         {"local_mode", std::string(to_string(c.local_mode))},
         {"caches_enabled", c.caches_enabled},
         {"rpe_every_layer", c.rpe_every_layer},
         {"pnar_rounds", c.pnar_rounds},
         {"init_std", c.init_std}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig def;
    c.layers = j.value("layers", def.layers);
    c.d = j.value("d", def.d);
    c.heads = j.value("heads", def.heads);
    c.m_side = j.value("m_side", def.m_side);
    c.vocab = j.value("vocab", def.vocab);
    c.text_vocab = j.value("text_vocab", def.text_vocab);
    c.text_len = j.value("text_len", def.text_len);
    std::vector<RelOffset> offs;
    if (j.contains("rpe_offsets"))
        for (const auto& o : j.at("rpe_offsets")) offs.push_back({o.at(0).get<int>(), o.at(1).get<int>(), o.at(2).get<int>()});
    c.rpe_table = RpeTable(std::move(offs));
    if (j.contains("extent")) {
        const auto& e = j.at("extent");
        c.extent = {e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<int>()};
    }
    c.rpe_feed = parse_rpe_feed(j.value("rpe_feed", std::string("pre")));
    c.local_mode = parse_local_mode(j.value("local_mode", std::string("ar")));
    c.caches_enabled = j.value("caches_enabled", def.caches_enabled);
    c.rpe_every_layer = j.value("rpe_every_layer", def.rpe_every_layer);
    c.pnar_rounds = j.value("pnar_rounds", def.pnar_rounds);
    c.init_std = j.value("init_std", def.init_std);
}

/// a_n: slot 0 holds the patch's input embeddings, slot l the output of block l
/// (l = 1..L-1). Slot l is exactly the input of block l+1.
template <class T>
struct LayerCache {
    PatchCoord coord;
    std::vector<Tensor<T>> layers;  // L tensors of M x d

    bool all_finite() const {
        for (const auto& t : layers)
            if (!t.all_finite()) return false;
        return true;
    }
};

/// Where the relative position embedding entered one block's self-attention.
enum class RpeStage { None, KeysBeforeScores, ScoreBiasAfterScores };

/// Optional instrumentation filled by Model::forward.
struct ForwardTrace {
    std::vector<std::size_t> context_slot;  // per block; SIZE_MAX when no context
    std::vector<RpeStage> rpe_stage;        // per block
    std::size_t key_rows = 0;               // (1 + N^c) * M
};

struct Sampler {
    enum class Kind { Greedy, TopK } kind = Kind::Greedy;
    std::size_t k = 1;
    double temperature = 1.0;

    static Sampler greedy() { return {}; }
    static Sampler topk(std::size_t k, double temperature) { return {Kind::TopK, k, temperature}; }
};

/// Greedy: argmax with lowest-id tie-break. Top-k: categorical over the k
/// largest logits (ties by id) at the given temperature.
template <class T>
TokenId sample_token(std::span<const T> logits, const Sampler& s, CounterRng& rng) {
    if (logits.empty()) throw ShapeError("sample_token: empty logits");
    if (s.kind == Sampler::Kind::Greedy) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = i;
        return static_cast<TokenId>(best);
    }
    if (s.k < 1 || !(s.temperature > 0)) throw UsageError("sample_token: need k >= 1 and temperature > 0");
    std::vector<std::size_t> idx(logits.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto k = std::min(s.k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
    const double top = static_cast<double>(logits[idx[0]]);
    std::vector<double> w(k);
    double z = 0;
    for (std::size_t i = 0; i < k; ++i) {
        w[i] = std::exp((static_cast<double>(logits[idx[i]]) - top) / s.temperature);
        z += w[i];
    }
    double u = rng.uniform() * z;
    for (std::size_t i = 0; i < k; ++i) {
        if (u < w[i]) return static_cast<TokenId>(idx[i]);
        u -= w[i];
    }
    return static_cast<TokenId>(idx[k - 1]);
}

/// Caption padding id; never attended.
inline constexpr TokenId kTextPad = 0;

template <class T>
class Model {
public:
    using G = Graph<T>;
    using Var = typename G::Var;

    struct Output {
        Var logits;  // M x vocab
        LayerCache<T> cache;
    };

    Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        CounterRng rng(seed, 0x6d6f64656cULL);
        const auto d = std::size_t{cfg_.d};
        const T s = static_cast<T>(cfg_.init_std);
        auto ones = [](std::size_t n) { return Tensor<T>({n}, T(1)); };
        auto zeros = [](std::size_t n) { return Tensor<T>({n}, T(0)); };
        p_.add("tok_emb", randn<T>({std::size_t{cfg_.vocab} + 2, d}, s, rng));
        p_.add("loc_emb", randn<T>({cfg_.tokens_per_patch(), d}, s, rng));
        p_.add("rpe", randn<T>({cfg_.rpe_table.size(), d}, s, rng));
        for (std::uint32_t l = 0; l < cfg_.layers; ++l) {
            const auto pre = "layer" + std::to_string(l) + ".";
            p_.add(pre + "ln1.g", ones(d));
            p_.add(pre + "ln1.b", zeros(d));
            for (auto w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) p_.add(pre + w, randn<T>({d, d}, s, rng));
            if (cfg_.has_text()) {
                p_.add(pre + "ln2.g", ones(d));
                p_.add(pre + "ln2.b", zeros(d));
                for (auto w : {"xattn.wq", "xattn.wk", "xattn.wv", "xattn.wo"}) p_.add(pre + w, randn<T>({d, d}, s, rng));
            }
            p_.add(pre + "ln3.g", ones(d));
            p_.add(pre + "ln3.b", zeros(d));
            p_.add(pre + "ffn.w1", randn<T>({d, 4 * d}, s, rng));
            p_.add(pre + "ffn.b1", zeros(4 * d));
            p_.add(pre + "ffn.w2", randn<T>({4 * d, d}, s, rng));
            p_.add(pre + "ffn.b2", zeros(d));
        }
        p_.add("lnf.g", ones(d));
        p_.add("lnf.b", zeros(d));
        p_.add("head.w", randn<T>({d, std::size_t{cfg_.vocab}}, s, rng));
        p_.add("head.b", zeros(cfg_.vocab));
        if (cfg_.has_text()) {
            p_.add("text.tok_emb", randn<T>({std::size_t{cfg_.text_vocab}, d}, s, rng));
            p_.add("text.pos_emb", randn<T>({std::size_t{cfg_.text_len}, d}, s, rng));
            p_.add("text.ln1.g", ones(d));
            p_.add("text.ln1.b", zeros(d));
            for (auto w : {"text.attn.wq", "text.attn.wk", "text.attn.wv", "text.attn.wo"})
                p_.add(w, randn<T>({d, d}, s, rng));
            p_.add("text.lnf.g", ones(d));
            p_.add("text.lnf.b", zeros(d));
        }
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return p_; }
    const ParamStore<T>& params() const { return p_; }

    /// y' for a caption: token + position embeddings, one bidirectional
    /// self-attention block, final layer norm. Padding ids are dropped, so they
    /// take no part in either attention; an empty or all-padding text gives nullopt.
    std::optional<Var> encode_text(G& g, const std::vector<TokenId>& text) {
        if (!cfg_.has_text()) {
            if (text.empty()) return std::nullopt;
            throw UsageError("model was built without text cross-attention");
        }
        if (text.size() > cfg_.text_len) throw RangeError("text longer than the configured text length");
        for (auto t : text)
            if (t >= cfg_.text_vocab) throw RangeError("text token outside text vocabulary");
        std::vector<std::size_t> ids, pos;
        for (std::size_t i = 0; i < text.size(); ++i)
            if (text[i] != kTextPad) {
                ids.push_back(text[i]);
                pos.push_back(i);
            }
        if (ids.empty()) return std::nullopt;
        auto h = g.add(g.gather_rows(P(g, "text.tok_emb"), ids), g.gather_rows(P(g, "text.pos_emb"), pos));
        auto n = g.layer_norm(h, P(g, "text.ln1.g"), P(g, "text.ln1.b"));
        auto q = g.matmul(n, P(g, "text.attn.wq"));
        auto k = g.matmul(n, P(g, "text.attn.wk"));
        auto v = g.matmul(n, P(g, "text.attn.wv"));
        auto a = g.attention(q, k, v, cfg_.heads, AttentionMask::all(ids.size(), ids.size()));
        h = g.add(h, g.matmul(a, P(g, "text.attn.wo")));
        return g.layer_norm(h, P(g, "text.lnf.g"), P(g, "text.lnf.b"));
    }

    /// One pass of the patch network.
    ///  inputs   M input ids (BOP-shifted tokens, or MASK for the parallel modes)
    ///  context  LayerCaches of the selected context patches
    ///  e_ids    RPE ids: self first, then one per context patch
    ///  text     y' from encode_text; required (possibly empty) when the model has cross-attention
    Output forward(G& g, std::span<const TokenId> inputs, const std::vector<const LayerCache<T>*>& context,
                   std::span<const std::size_t> e_ids, const std::optional<Var>* text = nullptr,
                   ForwardTrace* trace = nullptr) {
        const std::size_t M = cfg_.tokens_per_patch(), d = cfg_.d, L = cfg_.layers;
        if (inputs.size() != M) throw ConfigError("patch input must hold exactly M ids");
        if (e_ids.size() != 1 + context.size()) throw ConfigError("need one RPE id per patch in [current; context]");
        for (auto t : inputs)
            if (t > cfg_.mask_token()) throw RangeError("input token outside embedding table");
        for (auto id : e_ids)
            if (id >= cfg_.rpe_table.size()) throw RangeError("RPE id outside table");
        for (const auto* c : context)
            if (!c || c->layers.size() != L || c->layers[0].shape != Shape{M, d})
                throw ConfigError("context cache shape does not match the model");
        if (cfg_.has_text() && text == nullptr) throw UsageError("cross-attention requires encoded text (may be empty)");
        if (!cfg_.has_text() && text != nullptr && text->has_value())
            throw UsageError("model was built without text cross-attention");
        if (trace) *trace = ForwardTrace{};

        std::vector<std::size_t> ids(inputs.begin(), inputs.end());
        Var x = g.add(g.gather_rows(P(g, "tok_emb"), ids), P(g, "loc_emb"));

        Output out;
        out.cache.layers.reserve(L);
        out.cache.layers.push_back(g.value(x));

        // RPE rows broadcast over each patch's M keys.
        std::vector<std::size_t> key_rpe;
        key_rpe.reserve(e_ids.size() * M);
        for (auto id : e_ids) key_rpe.insert(key_rpe.end(), M, id);

        const std::size_t k_len = (1 + context.size()) * M;
        AttentionMask mask = AttentionMask::all(M, k_len);
        if (cfg_.local_mode == LocalMode::AR)
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = i + 1; j < M; ++j) mask.set(i, j, false);
        if (trace) trace->key_rows = k_len;

        for (std::size_t l = 0; l < L; ++l) {
            const auto pre = "layer" + std::to_string(l) + ".";
            const auto g1 = P(g, pre + "ln1.g"), b1 = P(g, pre + "ln1.b");
            Var h = g.layer_norm(x, g1, b1);
            const std::size_t slot = cfg_.caches_enabled ? l : 0;
            std::vector<Var> src{h};
            for (const auto* c : context) src.push_back(g.layer_norm(g.constant(c->layers[slot]), g1, b1));
            Var kv_src = context.empty() ? h : g.concat_rows(src);

            Var q = g.matmul(h, P(g, pre + "attn.wq"));
            Var k = g.matmul(kv_src, P(g, pre + "attn.wk"));
            Var v = g.matmul(kv_src, P(g, pre + "attn.wv"));
            std::optional<Var> bias;
            RpeStage stage = RpeStage::None;
            if (cfg_.rpe_every_layer || l == 0) {
                Var e = g.gather_rows(P(g, "rpe"), key_rpe);
                if (cfg_.rpe_feed == RpeFeed::Pre) {
                    k = g.add(k, e);
                    stage = RpeStage::KeysBeforeScores;
                } else {
                    bias = g.head_sums(e, cfg_.heads);
                    stage = RpeStage::ScoreBiasAfterScores;
                }
            }
            if (trace) {
                trace->context_slot.push_back(context.empty() ? SIZE_MAX : slot);
                trace->rpe_stage.push_back(stage);
            }
            Var a = g.attention(q, k, v, cfg_.heads, mask, bias);
            x = g.add(x, g.matmul(a, P(g, pre + "attn.wo")));

            if (cfg_.has_text() && text->has_value()) {
                const Var y = **text;
                const auto t_len = g.value(y).rows();
                Var h2 = g.layer_norm(x, P(g, pre + "ln2.g"), P(g, pre + "ln2.b"));
                Var cq = g.matmul(h2, P(g, pre + "xattn.wq"));
                Var ck = g.matmul(y, P(g, pre + "xattn.wk"));
                Var cv = g.matmul(y, P(g, pre + "xattn.wv"));
                Var ca = g.attention(cq, ck, cv, cfg_.heads, AttentionMask::all(M, t_len));
                x = g.add(x, g.matmul(ca, P(g, pre + "xattn.wo")));
            }

            Var h3 = g.layer_norm(x, P(g, pre + "ln3.g"), P(g, pre + "ln3.b"));
            Var f = g.gelu(g.add_row(g.matmul(h3, P(g, pre + "ffn.w1")), P(g, pre + "ffn.b1")));
            f = g.add_row(g.matmul(f, P(g, pre + "ffn.w2")), P(g, pre + "ffn.b2"));
            x = g.add(x, f);
            if (l + 1 < L) out.cache.layers.push_back(g.value(x));
        }
        Var hf = g.layer_norm(x, P(g, "lnf.g"), P(g, "lnf.b"));
        out.logits = g.add_row(g.matmul(hf, P(g, "head.w")), P(g, "head.b"));
        return out;
    }

    void save(const std::string& prefix) const {
        save_params(prefix, p_);
        nlohmann::json j = cfg_;
        j["dtype"] = dtype_name<T>();
        detail::write_json(prefix + ".config.json", j);
    }

    static ModelConfig load_config(const std::string& prefix) {
        return detail::read_json(prefix + ".config.json").template get<ModelConfig>();
    }

    static Model load(const std::string& prefix) {
        Model m(load_config(prefix), 0);
        load_params(prefix, m.p_);
        return m;
    }

private:
    Var P(G& g, const std::string& name) { return g.param(p_[name]); }

    ModelConfig cfg_;
    ParamStore<T> p_;
};

/// Teacher-forced input for AR decoding: BOP followed by tokens[0..M-2].
inline std::vector<TokenId> shifted_input(std::span<const TokenId> tokens, TokenId bop) {
    std::vector<TokenId> in(tokens.size(), bop);
    for (std::size_t i = 1; i < tokens.size(); ++i) in[i] = tokens[i - 1];
    return in;
}

/// Result of decoding one patch with the model's local mode.
template <class T>
struct LocalDecodeResult {
    std::vector<TokenId> tokens;
    LayerCache<T> cache;  // from the last forward pass
    std::size_t passes = 0;
};

/// Decodes the M tokens of one patch (no gradients).
///  AR    M passes, each conditioned on the tokens sampled so far
///  NAR   one pass over an all-MASK input
///  PNAR  R mask-predict rounds; after round r, floor(M*r/R) tokens are
///        fixed, picking the most confident masked slots (ties by position)
template <class T>
LocalDecodeResult<T> local_decode(Model<T>& model, const std::vector<const LayerCache<T>*>& context,
                                  std::span<const std::size_t> e_ids, const std::vector<TokenId>& text,
                                  const Sampler& sampler, CounterRng& rng) {
    const auto& cfg = model.config();
    const std::size_t M = cfg.tokens_per_patch(), V = cfg.vocab;
    LocalDecodeResult<T> res;

    auto pass = [&](std::span<const TokenId> in) {
        Graph<T> g(false);
        auto y = model.encode_text(g, text);
        auto out = model.forward(g, in, context, e_ids, cfg.has_text() ? &y : nullptr);
        ++res.passes;
        res.cache = std::move(out.cache);
        return g.value(out.logits);
    };
    auto row = [&](const Tensor<T>& logits, std::size_t i) { return std::span<const T>(&logits.data[i * V], V); };

    switch (cfg.local_mode) {
        case LocalMode::AR: {
            res.tokens.assign(M, 0);
            std::vector<TokenId> in(M, cfg.bop());
            for (std::size_t m = 0; m < M; ++m) {
                const auto logits = pass(in);
                res.tokens[m] = sample_token<T>(row(logits, m), sampler, rng);
                if (m + 1 < M) in[m + 1] = res.tokens[m];
            }
            break;
        }
        case LocalMode::NAR: {
            const std::vector<TokenId> in(M, cfg.mask_token());
            const auto logits = pass(in);
            res.tokens.resize(M);
            for (std::size_t m = 0; m < M; ++m) res.tokens[m] = sample_token<T>(row(logits, m), sampler, rng);
            break;
        }
        case LocalMode::PNAR: {
            const std::size_t R = cfg.pnar_rounds;
            std::vector<TokenId> in(M, cfg.mask_token());
            std::vector<bool> fixed(M, false);
            std::size_t n_fixed = 0;
            for (std::size_t r = 1; r <= R; ++r) {
                const auto logits = pass(in);
                struct Cand {
                    double conf;
                    std::size_t pos;
                    TokenId tok;
                };
                std::vector<Cand> cands;
                for (std::size_t m = 0; m < M; ++m) {
                    if (fixed[m]) continue;
                    const auto lr = row(logits, m);
                    const auto tok = sample_token<T>(lr, sampler, rng);
                    double mx = static_cast<double>(lr[0]), z = 0;
                    for (auto v : lr) mx = std::max(mx, static_cast<double>(v));
                    for (auto v : lr) z += std::exp(static_cast<double>(v) - mx);
                    cands.push_back({1.0 / z, m, tok});  // max softmax probability
                }
                std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                    return a.conf > b.conf || (a.conf == b.conf && a.pos < b.pos);
                });
                const std::size_t target = r == R ? M : (M * r) / R;
                for (std::size_t i = 0; n_fixed < target && i < cands.size(); ++i, ++n_fixed) {
                    fixed[cands[i].pos] = true;
                    in[cands[i].pos] = cands[i].tok;
                }
            }
            res.tokens.assign(in.begin(), in.end());
            break;
        }
    }
    return res;
}

}  // namespace patchar
