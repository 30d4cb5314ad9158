// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "patchar/adc.hpp"
#include "patchar/errors.hpp"
#include "patchar/extent.hpp"
#include "patchar/grid.hpp"

namespace patchar {

/// Last plan step at which the patch at each step can still be selected as
/// context: the latest later patch whose extent box covers it, or its own step.
inline std::vector<std::size_t> compute_last_use(const OrderPlan& plan, const Extent& e) {
    const auto& d = plan.dims;
    const auto steps = plan.step_table();
    std::vector<std::size_t> last(plan.sequence.size());
    for (std::size_t s = 0; s < plan.sequence.size(); ++s) {
        const auto& c = plan.sequence[s];
        std::size_t best = s;
        for (std::int32_t df = 0; df <= e.e_f; ++df)
            for (std::int32_t dr = -e.e_h; dr <= e.e_h; ++dr)
                for (std::int32_t dc = -e.e_w; dc <= e.e_w; ++dc) {
                    const PatchCoord user{c.row + dr, c.col + dc, c.frame + df};
                    if (!contains(d, user)) continue;
                    best = std::max(best, steps[linear_index(user, d)]);
                }
        last[s] = best;
    }
    return last;
}

/// Nearby context pool. Holds one payload (normally a LayerCache) per
/// generated patch and evicts it once no later patch can select it.
///
/// Invariants between calls: every entry was added at a step < cursor(), and
/// after remove() no entry has last_use < cursor().
template <class Payload>
class ContextPool {
public:
    struct Selected {
        PatchCoord coord;
        std::size_t step;
        const Payload* payload;
    };

    ContextPool(OrderPlan plan, Extent extent) : plan_(std::move(plan)), extent_(extent) {
        extent_.validate();
        if (!plan_.is_permutation()) throw ConfigError("context pool needs a plan covering every patch once");
        last_use_ = compute_last_use(plan_, extent_);
    }

    const OrderPlan& plan() const { return plan_; }
    const Extent& extent() const { return extent_; }
    std::size_t cursor() const { return cursor_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t peak_size() const { return peak_; }
    std::size_t total_evictions() const { return evictions_; }
    bool done() const { return cursor_ == plan_.sequence.size(); }

    const PatchCoord& next() const {
        if (done()) throw SequencingError("plan exhausted");
        return plan_.sequence[cursor_];
    }

    std::size_t last_use(std::size_t step) const { return last_use_.at(step); }
    const std::vector<std::size_t>& last_use_table() const { return last_use_; }

    bool holds(const PatchCoord& c) const {
        for (const auto& [step, entry] : entries_)
            if (entry.coord == c) return true;
        return false;
    }

    /// Cached patches inside the extent box of c, ascending by plan step.
    std::vector<Selected> select(const PatchCoord& c) const {
        if (done() || !(plan_.sequence[cursor_] == c))
            throw SequencingError("select called out of plan order");
        std::vector<Selected> out;
        for (const auto& [step, entry] : entries_)
            if (within_extent(c, entry.coord, extent_)) out.push_back({entry.coord, step, &entry.payload});
        return out;
    }

    void add(const PatchCoord& c, Payload payload) {
        if (done()) throw SequencingError("add beyond the end of the plan");
        for (const auto& [step, entry] : entries_)
            if (entry.coord == c) throw StateError("patch already cached");
        if (!(plan_.sequence[cursor_] == c)) throw SequencingError("add called for a patch other than the current one");
        entries_.emplace(cursor_, Entry{c, std::move(payload)});
        ++cursor_;
        peak_ = std::max(peak_, entries_.size());
    }

    /// Evicts every entry that no patch at or after cursor() can select.
    std::vector<PatchCoord> remove() {
        std::vector<PatchCoord> evicted;
        for (auto it = entries_.begin(); it != entries_.end();) {
            if (last_use_[it->first] < cursor_) {
                evicted.push_back(it->second.coord);
                it = entries_.erase(it);
            } else {
                ++it;
            }
        }
        evictions_ += evicted.size();
        return evicted;
    }

private:
    struct Entry {
        PatchCoord coord;
        Payload payload;
    };

    OrderPlan plan_;
    Extent extent_;
    std::vector<std::size_t> last_use_;
    std::map<std::size_t, Entry> entries_;  // keyed by plan step
    std::size_t cursor_ = 0;
    std::size_t peak_ = 0;
    std::size_t evictions_ = 0;
};

/// Per-step cost record of a pool walk (no model attached).
struct PoolStep {
    std::size_t step = 0;
    std::size_t n_context = 0;
    std::size_t attended_tokens = 0;  // context tokens attended by one query: n_context * M
    std::size_t pool_size = 0;        // after add, before remove
    std::size_t evictions = 0;
};

/// Walks a plan through a payload-free pool. With use_pool == false every
/// earlier patch is context and nothing is evicted (full-history reference).
inline std::vector<PoolStep> simulate_pool(const OrderPlan& plan, const Extent& extent, bool use_pool = true) {
    struct Empty {};
    const auto m = plan.dims.tokens_per_patch();
    std::vector<PoolStep> out;
    out.reserve(plan.size());
    if (!use_pool) {
        for (std::size_t s = 0; s < plan.size(); ++s) out.push_back({s, s, s * m, s + 1, 0});
        return out;
    }
    ContextPool<Empty> pool(plan, extent);
    for (std::size_t s = 0; s < plan.size(); ++s) {
        const auto& c = plan.sequence[s];
        const auto ctx = pool.select(c);
        pool.add(c, Empty{});
        const auto size_after_add = pool.size();
        const auto evicted = pool.remove();
        out.push_back({s, ctx.size(), ctx.size() * m, size_after_add, evicted.size()});
    }
    return out;
}

}  // namespace patchar
