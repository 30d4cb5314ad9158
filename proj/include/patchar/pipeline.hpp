// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Training (per-patch or accumulated optimisation over randomly ordered
// canvases) and inference (condition pre-caching, then patch-by-patch
// generation) on top of the plan, pool and decoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "patchar/adc.hpp"
#include "patchar/decoder.hpp"
#include "patchar/errors.hpp"
#include "patchar/grid.hpp"
#include "patchar/ncp.hpp"
#include "patchar/rng.hpp"

namespace patchar {

enum class LossMode { Patch, Accumulated };

inline LossMode parse_loss_mode(std::string_view s) {
    if (s == "patch") return LossMode::Patch;
    if (s == "accumulated") return LossMode::Accumulated;
    throw UsageError("unknown loss mode '" + std::string(s) + "'");
}
inline std::string_view to_string(LossMode m) { return m == LossMode::Patch ? "patch" : "accumulated"; }

struct TrainConfig {
    std::size_t epochs = 1;
    std::size_t batch_size = 8;
    std::size_t total_steps = 0;  // optimizer steps planned; drives warmup (0 = no warmup)
    double lr = 1e-3;
    double warmup_frac = 0.05;
    LossMode loss_mode = LossMode::Patch;
    std::vector<ScanOrder> orders{ScanOrder::Omega, ScanOrder::OmegaStar, ScanOrder::Zeta, ScanOrder::ZetaStar};
    Extent extent{2, 2, 0};
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (warmup_frac < 0 || warmup_frac > 1) throw ConfigError("warmup fraction must lie in [0,1]");
        if (orders.empty()) throw ConfigError("at least one training order is required");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        extent.validate();
    }
};

/// One training/eval instance: a token grid and its (possibly empty) caption.
struct Sample {
    TokenGrid grid;
    std::vector<TokenId> caption;
};

enum class PipelineEvent { Select, Emb, Forward, Add, Remove };

inline std::string_view to_string(PipelineEvent e) {
    switch (e) {
        case PipelineEvent::Select: return "select";
        case PipelineEvent::Emb: return "emb";
        case PipelineEvent::Forward: return "forward";
        case PipelineEvent::Add: return "add";
        case PipelineEvent::Remove: return "remove";
    }
    return "?";
}

using EventSink = std::function<void(PipelineEvent, std::size_t step)>;

template <class T>
using CachePool = ContextPool<LayerCache<T>>;

/// Input ids and loss rows for a teacher-forced pass under the model's local mode.
struct TeacherInput {
    std::vector<TokenId> input;
    std::vector<std::uint8_t> loss_rows;
};

/// AR: BOP-shifted tokens. NAR: all MASK. PNAR: a random non-empty subset is
/// masked and only those rows are scored; with rng == nullptr every slot is
/// masked (deterministic evaluation).
inline TeacherInput teacher_input(const ModelConfig& cfg, std::span<const TokenId> tokens, CounterRng* rng) {
    const std::size_t M = tokens.size();
    TeacherInput t;
    switch (cfg.local_mode) {
        case LocalMode::AR:
            t.input = shifted_input(tokens, cfg.bop());
            t.loss_rows.assign(M, 1);
            break;
        case LocalMode::NAR:
            t.input.assign(M, cfg.mask_token());
            t.loss_rows.assign(M, 1);
            break;
        case LocalMode::PNAR: {
            t.input.assign(tokens.begin(), tokens.end());
            t.loss_rows.assign(M, 0);
            std::vector<std::size_t> order(M);
            for (std::size_t i = 0; i < M; ++i) order[i] = i;
            std::size_t n_mask = M;
            if (rng) {
                n_mask = 1 + rng->below(M);
                for (std::size_t i = M; i-- > 1;) std::swap(order[i], order[rng->below(i + 1)]);
            }
            for (std::size_t i = 0; i < n_mask; ++i) {
                t.input[order[i]] = cfg.mask_token();
                t.loss_rows[order[i]] = 1;
            }
            break;
        }
    }
    return t;
}

/// Input used when ingesting known tokens (condition pre-caching): the
/// teacher-forced AR input, or the plain tokens for the parallel modes.
inline std::vector<TokenId> condition_input(const ModelConfig& cfg, std::span<const TokenId> tokens) {
    if (cfg.local_mode == LocalMode::AR) return shifted_input(tokens, cfg.bop());
    return {tokens.begin(), tokens.end()};
}

namespace detail {

template <class T>
std::vector<const LayerCache<T>*> payloads(const std::vector<typename CachePool<T>::Selected>& sel) {
    std::vector<const LayerCache<T>*> out;
    out.reserve(sel.size());
    for (const auto& s : sel) out.push_back(s.payload);
    return out;
}

inline std::vector<PatchCoord> coords(const auto& sel) {
    std::vector<PatchCoord> out;
    out.reserve(sel.size());
    for (const auto& s : sel) out.push_back(s.coord);
    return out;
}

inline void emit(const EventSink* sink, PipelineEvent e, std::size_t step) {
    if (sink && *sink) (*sink)(e, step);
}

}  // namespace detail

template <class T>
class Trainer {
public:
    Trainer(Model<T>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)), rng_(cfg_.seed, 0x747261696eULL) {
        cfg_.validate();
    }

    const TrainConfig& config() const { return cfg_; }
    std::size_t optimizer_steps() const { return steps_; }

    /// Linear warmup over warmup_frac * total_steps, then constant.
    double lr_at(std::size_t step) const {
        const double warm = std::floor(cfg_.warmup_frac * static_cast<double>(cfg_.total_steps));
        if (warm < 1) return cfg_.lr;
        return cfg_.lr * std::min(1.0, static_cast<double>(step + 1) / warm);
    }

    /// Trains on independent sequences with isolated pools. Patch mode steps
    /// the optimizer after every plan position (gradients averaged over the
    /// batch); accumulated mode steps once after the whole canvas. Returns
    /// per-sample, per-patch mean token cross-entropy.
    std::vector<std::vector<double>> train_batch(const std::vector<const Sample*>& batch,
                                                 const EventSink* sink = nullptr) {
        if (batch.empty()) return {};
        const auto& mc = model_.config();
        const GridDims dims = batch[0]->grid.dims();
        for (const auto* s : batch) {
            if (!(s->grid.dims() == dims)) throw ConfigError("batch grids must share dimensions");
            if (s->grid.dims().m_side != mc.m_side || s->grid.dims().vocab != mc.vocab)
                throw ConfigError("grid geometry does not match the model");
        }
        const std::size_t B = batch.size(), N = dims.num_patches();

        std::vector<CachePool<T>> pools;
        pools.reserve(B);
        for (std::size_t b = 0; b < B; ++b) {
            const auto order = cfg_.orders[rng_.below(cfg_.orders.size())];
            pools.emplace_back(split_base(dims, order), cfg_.extent);
        }
        std::vector<std::vector<double>> losses(B, std::vector<double>(N));
        const T weight = cfg_.loss_mode == LossMode::Patch ? T(1) / static_cast<T>(B)
                                                           : T(1) / static_cast<T>(B * N);
        model_.params().zero_grad();
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t b = 0; b < B; ++b) {
                auto& pool = pools[b];
                const auto coord = pool.next();
                const auto sel = pool.select(coord);
                detail::emit(sink, PipelineEvent::Select, n);
                const auto e_ids = emb_assign(pool.plan(), n, detail::coords(sel), mc.rpe_table);
                detail::emit(sink, PipelineEvent::Emb, n);

                const auto tokens = batch[b]->grid.patch(coord);
                const auto ti = teacher_input(mc, tokens, &rng_);
                std::vector<std::uint32_t> targets(tokens.begin(), tokens.end());
                Graph<T> g(true);
                auto y = model_.encode_text(g, batch[b]->caption);
                auto out = model_.forward(g, ti.input, detail::payloads<T>(sel), e_ids, mc.has_text() ? &y : nullptr);
                auto loss = g.softmax_ce(out.logits, targets, ti.loss_rows);
                g.backward(g.scale(loss, weight));
                detail::emit(sink, PipelineEvent::Forward, n);
                losses[b][n] = static_cast<double>(g.value(loss).data[0]);

                out.cache.coord = coord;
                pool.add(coord, std::move(out.cache));
                detail::emit(sink, PipelineEvent::Add, n);
                pool.remove();
                detail::emit(sink, PipelineEvent::Remove, n);
            }
            if (cfg_.loss_mode == LossMode::Patch) step();
        }
        if (cfg_.loss_mode == LossMode::Accumulated) step();
        return losses;
    }

    std::vector<double> train_sample(const Sample& s, const EventSink* sink = nullptr) {
        return train_batch({&s}, sink).front();
    }

private:
    void step() {
        model_.params().adam_step(static_cast<T>(lr_at(steps_)), static_cast<T>(cfg_.beta1), static_cast<T>(cfg_.beta2),
                                  static_cast<T>(cfg_.eps));
        ++steps_;
    }

    Model<T>& model_;
    TrainConfig cfg_;
    CounterRng rng_;
    std::size_t steps_ = 0;
};

/// Teacher-forced per-patch losses of one sample along a plan (no gradients).
template <class T>
std::vector<double> patch_losses(Model<T>& model, const Sample& s, const OrderPlan& plan, const Extent& extent) {
    const auto& mc = model.config();
    CachePool<T> pool(plan, extent);
    std::vector<double> out;
    out.reserve(plan.size());
    for (std::size_t n = 0; n < plan.size(); ++n) {
        const auto coord = pool.next();
        const auto sel = pool.select(coord);
        const auto e_ids = emb_assign(plan, n, detail::coords(sel), mc.rpe_table);
        const auto tokens = s.grid.patch(coord);
        const auto ti = teacher_input(mc, tokens, nullptr);
        Graph<T> g(false);
        auto y = model.encode_text(g, s.caption);
        auto fwd = model.forward(g, ti.input, detail::payloads<T>(sel), e_ids, mc.has_text() ? &y : nullptr);
        auto loss = g.softmax_ce(fwd.logits, std::vector<std::uint32_t>(tokens.begin(), tokens.end()), ti.loss_rows);
        out.push_back(static_cast<double>(g.value(loss).data[0]));
        fwd.cache.coord = coord;
        pool.add(coord, std::move(fwd.cache));
        pool.remove();
    }
    return out;
}

/// Mean per-token cross-entropy over every patch of every sample, teacher
/// forced along the given order with the model's extent.
template <class T>
double eval_heldout(Model<T>& model, const std::vector<Sample>& data, ScanOrder order = ScanOrder::Omega) {
    double total = 0;
    std::size_t count = 0;
    for (const auto& s : data) {
        for (double l : patch_losses(model, s, split_base(s.grid.dims(), order), model.config().extent)) {
            total += l;
            ++count;
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

enum class Task { Uncond, T2I, Outpaint, Animate, T2V };

inline std::string_view to_string(Task t) {
    switch (t) {
        case Task::Uncond: return "uncond";
        case Task::T2I: return "t2i";
        case Task::Outpaint: return "outpaint";
        case Task::Animate: return "animate";
        case Task::T2V: return "t2v";
    }
    return "?";
}

struct GenRequest {
    Task task = Task::Uncond;
    GridDims dims;                     // target canvas
    std::optional<TokenGrid> condition;
    PatchCoord placement{};            // top-left patch of the condition (outpainting)
    std::optional<std::vector<TokenId>> text;
    Sampler sampler;
    std::uint64_t seed = 0;
    ScanOrder order = ScanOrder::Omega;
    std::optional<Extent> extent;      // defaults to the model's extent
};

/// Per-step instrumentation of a generation run (condition steps included).
struct GenStep {
    std::size_t step = 0;
    PatchCoord coord;
    bool condition = false;
    std::size_t n_context = 0;
    std::size_t attended_tokens = 0;
    std::size_t pool_size = 0;  // after add, before remove
    std::size_t evictions = 0;
    std::size_t passes = 0;
};

struct GenStats {
    std::vector<GenStep> steps;
    std::size_t peak_pool = 0;
};

/// Builds the plan a request is generated along.
inline OrderPlan plan_for(const GenRequest& req) {
    const auto& d = req.dims;
    d.validate();
    const bool needs_cond = req.task == Task::Outpaint || req.task == Task::Animate;
    const bool needs_text = req.task == Task::T2I || req.task == Task::T2V;
    if (needs_cond != req.condition.has_value())
        throw UsageError(std::string(to_string(req.task)) + (needs_cond ? " needs" : " takes no") + " condition image");
    if (needs_text != req.text.has_value())
        throw UsageError(std::string(to_string(req.task)) + (needs_text ? " needs" : " takes no") + " text");
    if (req.condition && !req.condition->dims().same_layout(d))
        throw GeometryError("condition grid has a different patch size or vocabulary");
    switch (req.task) {
        case Task::Uncond:
        case Task::T2I:
        case Task::T2V: return split_base(d, req.order);
        case Task::Outpaint: {
            const auto& c = req.condition->dims();
            if (c.f != 1 || d.f != 1) throw GeometryError("outpainting works on single images");
            return split_outpaint(d, {req.placement.row, req.placement.col, static_cast<std::int32_t>(c.h_p),
                                      static_cast<std::int32_t>(c.w_p)});
        }
        case Task::Animate: {
            const auto& c = req.condition->dims();
            if (c.f != 1 || c.h_p != d.h_p || c.w_p != d.w_p)
                throw GeometryError("animation condition must be one frame of the target size");
            return split_animate(d, req.order);
        }
    }
    throw UsageError("unknown task");
}

/// Ingests the plan's condition prefix teacher-forced (no sampling, no loss),
/// populating the pool. `canvas` must already hold the condition tokens.
template <class T>
void precache_condition(Model<T>& model, CachePool<T>& pool, const TokenGrid& canvas, std::size_t k,
                        const std::vector<TokenId>& text, GenStats* stats = nullptr, const EventSink* sink = nullptr) {
    const auto& mc = model.config();
    if (k != pool.plan().prefix_len || pool.cursor() != 0)
        throw SequencingError("condition pre-caching must cover exactly the plan prefix of a fresh pool");
    for (std::size_t n = 0; n < k; ++n) {
        const auto coord = pool.next();
        const auto sel = pool.select(coord);
        detail::emit(sink, PipelineEvent::Select, n);
        const auto e_ids = emb_assign(pool.plan(), n, detail::coords(sel), mc.rpe_table);
        detail::emit(sink, PipelineEvent::Emb, n);
        const auto input = condition_input(mc, canvas.patch(coord));
        Graph<T> g(false);
        auto y = model.encode_text(g, text);
        auto out = model.forward(g, input, detail::payloads<T>(sel), e_ids, mc.has_text() ? &y : nullptr);
        detail::emit(sink, PipelineEvent::Forward, n);
        out.cache.coord = coord;
        pool.add(coord, std::move(out.cache));
        detail::emit(sink, PipelineEvent::Add, n);
        const auto size = pool.size();
        const auto ev = pool.remove();
        detail::emit(sink, PipelineEvent::Remove, n);
        if (stats)
            stats->steps.push_back(
                {n, coord, true, sel.size(), sel.size() * mc.tokens_per_patch(), size, ev.size(), 1});
    }
}

/// Generates a full token grid for the request. Condition patches are copied
/// verbatim; every other patch is decoded with the model's local mode.
template <class T>
TokenGrid generate(Model<T>& model, const GenRequest& req, GenStats* stats = nullptr, const EventSink* sink = nullptr) {
    const auto& mc = model.config();
    if (req.dims.m_side != mc.m_side || req.dims.vocab != mc.vocab)
        throw ConfigError("target grid geometry does not match the model");
    if (req.text && !req.text->empty() && !mc.has_text())
        throw UsageError("text given to a model without cross-attention");
    const auto plan = plan_for(req);
    const Extent extent = req.extent.value_or(mc.extent);
    const std::vector<TokenId> text = req.text.value_or(std::vector<TokenId>{});

    TokenGrid canvas(req.dims);
    if (req.condition) {
        const auto& c = *req.condition;
        const auto& cd = c.dims();
        for (std::uint32_t r = 0; r < cd.h_p; ++r)
            for (std::uint32_t col = 0; col < cd.w_p; ++col) {
                const PatchCoord src{static_cast<std::int32_t>(r), static_cast<std::int32_t>(col), 0};
                PatchCoord dst = src;
                if (req.task == Task::Outpaint) {
                    dst.row += req.placement.row;
                    dst.col += req.placement.col;
                }
                canvas.set_patch(dst, c.patch(src));
            }
    }

    CachePool<T> pool(plan, extent);
    if (stats) *stats = GenStats{};
    precache_condition(model, pool, canvas, plan.prefix_len, text, stats, sink);

    CounterRng base(req.seed, 0x67656eULL);
    for (std::size_t n = plan.prefix_len; n < plan.size(); ++n) {
        const auto coord = pool.next();
        const auto sel = pool.select(coord);
        detail::emit(sink, PipelineEvent::Select, n);
        const auto e_ids = emb_assign(plan, n, detail::coords(sel), mc.rpe_table);
        detail::emit(sink, PipelineEvent::Emb, n);
        auto rng = base.fork(n);
        auto dec = local_decode(model, detail::payloads<T>(sel), e_ids, text, req.sampler, rng);
        detail::emit(sink, PipelineEvent::Forward, n);
        canvas.set_patch(coord, dec.tokens);
        dec.cache.coord = coord;
        pool.add(coord, std::move(dec.cache));
        detail::emit(sink, PipelineEvent::Add, n);
        const auto size = pool.size();
        const auto ev = pool.remove();
        detail::emit(sink, PipelineEvent::Remove, n);
        if (stats)
            stats->steps.push_back(
                {n, coord, false, sel.size(), sel.size() * mc.tokens_per_patch(), size, ev.size(), dec.passes});
    }
    if (stats) stats->peak_pool = pool.peak_size();
    return canvas;
}

}  // namespace patchar
