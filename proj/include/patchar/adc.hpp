// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Arbitrary-direction order planning and order-aware relative position ids.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "patchar/errors.hpp"
#include "patchar/extent.hpp"
#include "patchar/grid.hpp"

namespace patchar {

/// The four base scan orders. Frames are always visited in ascending order.
enum class ScanOrder {
    Omega,      // rows top-to-bottom, each row left-to-right
    OmegaStar,  // rows top-to-bottom, each row right-to-left
    Zeta,       // columns left-to-right, each column top-to-bottom
    ZetaStar,   // columns left-to-right, each column bottom-to-top
};

inline constexpr ScanOrder kAllScanOrders[] = {ScanOrder::Omega, ScanOrder::OmegaStar, ScanOrder::Zeta,
                                               ScanOrder::ZetaStar};

inline std::string_view to_string(ScanOrder o) {
    switch (o) {
        case ScanOrder::Omega: return "omega";
        case ScanOrder::OmegaStar: return "omega_star";
        case ScanOrder::Zeta: return "zeta";
        case ScanOrder::ZetaStar: return "zeta_star";
    }
    return "?";
}

inline ScanOrder parse_scan_order(std::string_view s) {
    for (auto o : kAllScanOrders)
        if (to_string(o) == s) return o;
    throw UsageError("unknown scan order '" + std::string(s) + "'");
}

/// A total generation order over every patch of a grid. The first
/// `prefix_len` entries are condition patches (teacher-forced, never sampled).
struct OrderPlan {
    GridDims dims;
    std::vector<PatchCoord> sequence;
    std::size_t prefix_len = 0;

    std::size_t size() const { return sequence.size(); }

    /// step_of()[linear_index(c)] = position of c in `sequence`.
    std::vector<std::size_t> step_table() const {
        std::vector<std::size_t> steps(dims.num_patches(), SIZE_MAX);
        for (std::size_t s = 0; s < sequence.size(); ++s) steps[linear_index(sequence[s], dims)] = s;
        return steps;
    }

    bool is_permutation() const {
        if (sequence.size() != dims.num_patches()) return false;
        std::vector<bool> seen(dims.num_patches(), false);
        for (const auto& c : sequence) {
            if (!contains(dims, c)) return false;
            auto i = linear_index(c, dims);
            if (seen[i]) return false;
            seen[i] = true;
        }
        return true;
    }
};

namespace detail {

inline void append_frame(std::vector<PatchCoord>& out, const GridDims& d, ScanOrder order, std::int32_t frame) {
    const auto h = static_cast<std::int32_t>(d.h_p);
    const auto w = static_cast<std::int32_t>(d.w_p);
    switch (order) {
        case ScanOrder::Omega:
            for (std::int32_t r = 0; r < h; ++r)
                for (std::int32_t c = 0; c < w; ++c) out.push_back({r, c, frame});
            break;
        case ScanOrder::OmegaStar:
            for (std::int32_t r = 0; r < h; ++r)
                for (std::int32_t c = w - 1; c >= 0; --c) out.push_back({r, c, frame});
            break;
        case ScanOrder::Zeta:
            for (std::int32_t c = 0; c < w; ++c)
                for (std::int32_t r = 0; r < h; ++r) out.push_back({r, c, frame});
            break;
        case ScanOrder::ZetaStar:
            for (std::int32_t c = 0; c < w; ++c)
                for (std::int32_t r = h - 1; r >= 0; --r) out.push_back({r, c, frame});
            break;
    }
}

}  // namespace detail

inline OrderPlan split_base(const GridDims& d, ScanOrder order) {
    d.validate();
    OrderPlan plan{d, {}, 0};
    plan.sequence.reserve(d.num_patches());
    for (std::int32_t fr = 0; fr < static_cast<std::int32_t>(d.f); ++fr) detail::append_frame(plan.sequence, d, order, fr);
    return plan;
}

/// Base order whose whole first frame is a condition prefix (image animation).
inline OrderPlan split_animate(const GridDims& d, ScanOrder order) {
    auto plan = split_base(d, order);
    if (d.f < 2) throw GeometryError("animation needs at least two frames");
    plan.prefix_len = d.patches_per_frame();
    return plan;
}

/// Axis-aligned rectangle of patches on one frame.
struct PatchRect {
    std::int32_t row0 = 0;
    std::int32_t col0 = 0;
    std::int32_t rows = 1;
    std::int32_t cols = 1;

    std::size_t area() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
    bool contains(const PatchCoord& c) const {
        return c.row >= row0 && c.row < row0 + rows && c.col >= col0 && c.col < col0 + cols;
    }
};

/// Outpainting order: the condition rectangle first (omega order), then
/// rectangular rings of growing radius around it. Each ring is emitted as the
/// row above, the row below (both left-to-right), the column on the left and
/// the column on the right (both top-to-bottom), clipped to the canvas.
inline OrderPlan split_outpaint(const GridDims& d, const PatchRect& cond) {
    d.validate();
    const auto h = static_cast<std::int32_t>(d.h_p);
    const auto w = static_cast<std::int32_t>(d.w_p);
    if (d.f != 1) throw GeometryError("outpainting plans are single-frame");
    if (cond.rows < 1 || cond.cols < 1 || cond.row0 < 0 || cond.col0 < 0 || cond.row0 + cond.rows > h ||
        cond.col0 + cond.cols > w)
        throw GeometryError("condition rectangle not contained in the canvas");

    OrderPlan plan{d, {}, cond.area()};
    plan.sequence.reserve(d.num_patches());
    for (std::int32_t r = cond.row0; r < cond.row0 + cond.rows; ++r)
        for (std::int32_t c = cond.col0; c < cond.col0 + cond.cols; ++c) plan.sequence.push_back({r, c, 0});

    const std::int32_t r_lo = cond.row0, r_hi = cond.row0 + cond.rows - 1;
    const std::int32_t c_lo = cond.col0, c_hi = cond.col0 + cond.cols - 1;
    const std::int32_t rings = std::max({r_lo, h - 1 - r_hi, c_lo, w - 1 - c_hi});
    for (std::int32_t k = 1; k <= rings; ++k) {
        const std::int32_t top = r_lo - k, bottom = r_hi + k, left = c_lo - k, right = c_hi + k;
        const std::int32_t cl = std::max(left, 0), cr = std::min(right, w - 1);
        if (top >= 0)
            for (std::int32_t c = cl; c <= cr; ++c) plan.sequence.push_back({top, c, 0});
        if (bottom < h)
            for (std::int32_t c = cl; c <= cr; ++c) plan.sequence.push_back({bottom, c, 0});
        const std::int32_t rt = std::max(top + 1, 0), rb = std::min(bottom - 1, h - 1);
        if (left >= 0)
            for (std::int32_t r = rt; r <= rb; ++r) plan.sequence.push_back({r, left, 0});
        if (right < w)
            for (std::int32_t r = rt; r <= rb; ++r) plan.sequence.push_back({r, right, 0});
    }
    return plan;
}

/// Position of a context patch relative to the patch being generated.
/// d_row/d_col are context minus current; d_frame is current minus context.
struct RelOffset {
    std::int32_t d_row = 0;
    std::int32_t d_col = 0;
    std::int32_t d_frame = 0;

    bool operator==(const RelOffset&) const = default;
    auto operator<=>(const RelOffset&) const = default;
};

inline RelOffset offset_between(const PatchCoord& current, const PatchCoord& context) {
    return {context.row - current.row, context.col - current.col, current.frame - context.frame};
}

/// Dense embedding ids for every relative offset a supported plan can produce.
class RpeTable {
public:
    RpeTable() : RpeTable(std::vector<RelOffset>{}) {}

    /// Offsets are sorted and deduplicated; the self offset is always present.
    explicit RpeTable(std::vector<RelOffset> offsets) {
        offsets.push_back({0, 0, 0});
        std::sort(offsets.begin(), offsets.end());
        offsets.erase(std::unique(offsets.begin(), offsets.end()), offsets.end());
        offsets_ = std::move(offsets);
        for (std::size_t i = 0; i < offsets_.size(); ++i) ids_.emplace(offsets_[i], i);
    }

    std::size_t size() const { return offsets_.size(); }
    const std::vector<RelOffset>& offsets() const { return offsets_; }
    bool contains(const RelOffset& o) const { return ids_.count(o) != 0; }
    std::size_t self_id() const { return ids_.at({0, 0, 0}); }

    std::size_t id_of(const RelOffset& o) const {
        auto it = ids_.find(o);
        if (it == ids_.end())
            throw MissingOffsetError("relative offset (" + std::to_string(o.d_row) + "," + std::to_string(o.d_col) +
                                     "," + std::to_string(o.d_frame) + ") has no embedding id");
        return it->second;
    }

    bool operator==(const RpeTable& o) const { return offsets_ == o.offsets_; }

private:
    std::vector<RelOffset> offsets_;
    std::map<RelOffset, std::size_t> ids_;
};

/// Which plan families a model is expected to run under.
struct PlanSet {
    bool omega = true;
    bool omega_star = false;
    bool zeta = false;
    bool zeta_star = false;
    bool ring_outpaint = false;

    static PlanSet all() { return {true, true, true, true, true}; }
    static PlanSet only(ScanOrder o) {
        PlanSet s{false, false, false, false, false};
        s.enable(o);
        return s;
    }
    void enable(ScanOrder o) {
        switch (o) {
            case ScanOrder::Omega: omega = true; break;
            case ScanOrder::OmegaStar: omega_star = true; break;
            case ScanOrder::Zeta: zeta = true; break;
            case ScanOrder::ZetaStar: zeta_star = true; break;
        }
    }
    bool has(ScanOrder o) const {
        switch (o) {
            case ScanOrder::Omega: return omega;
            case ScanOrder::OmegaStar: return omega_star;
            case ScanOrder::Zeta: return zeta;
            case ScanOrder::ZetaStar: return zeta_star;
        }
        return false;
    }
};

namespace detail {

inline void collect_offsets(const OrderPlan& plan, const Extent& e, std::set<RelOffset>& out) {
    for (std::size_t s = 0; s < plan.sequence.size(); ++s)
        for (std::size_t t = 0; t < s; ++t)
            if (within_extent(plan.sequence[s], plan.sequence[t], e))
                out.insert(offset_between(plan.sequence[s], plan.sequence[t]));
}

}  // namespace detail

/// Offsets that some supported plan actually selects as context, found by
/// simulating every plan on a probe grid large enough to realise all of them.
inline RpeTable reachable_offsets(const PlanSet& plans, const Extent& e) {
    e.validate();
    GridDims probe{static_cast<std::uint32_t>(2 * e.e_h + 3), static_cast<std::uint32_t>(2 * e.e_w + 3),
                   static_cast<std::uint32_t>(e.e_f + 2), 1, 2};
    std::set<RelOffset> found;
    for (auto o : kAllScanOrders)
        if (plans.has(o)) detail::collect_offsets(split_base(probe, o), e, found);
    if (plans.ring_outpaint) {
        GridDims flat = probe;
        flat.f = 1;
        const auto h = static_cast<std::int32_t>(flat.h_p), w = static_cast<std::int32_t>(flat.w_p);
        for (std::int32_t r0 = 0; r0 < h; ++r0)
            for (std::int32_t c0 = 0; c0 < w; ++c0)
                for (std::int32_t rows = 1; r0 + rows <= h; ++rows)
                    for (std::int32_t cols = 1; c0 + cols <= w; ++cols)
                        detail::collect_offsets(split_outpaint(flat, {r0, c0, rows, cols}), e, found);
    }
    return RpeTable({found.begin(), found.end()});
}

/// Embedding ids for [current; context...]: self id first, then one id per
/// context patch in the order given.
inline std::vector<std::size_t> emb_assign(const OrderPlan& plan, std::size_t step,
                                           const std::vector<PatchCoord>& context, const RpeTable& table) {
    if (step >= plan.sequence.size()) throw SequencingError("emb_assign: step beyond plan");
    const auto& cur = plan.sequence[step];
    std::vector<std::size_t> ids;
    ids.reserve(1 + context.size());
    ids.push_back(table.self_id());
    for (const auto& c : context) ids.push_back(table.id_of(offset_between(cur, c)));
    return ids;
}

/// 1-based generation index of every patch, one block of rows per frame.
inline std::string render_plan_text(const OrderPlan& plan) {
    const auto steps = plan.step_table();
    const auto& d = plan.dims;
    const auto width = std::to_string(plan.sequence.size()).size();
    std::ostringstream os;
    for (std::uint32_t fr = 0; fr < d.f; ++fr) {
        if (d.f > 1) os << "frame " << fr << "\n";
        for (std::uint32_t r = 0; r < d.h_p; ++r) {
            for (std::uint32_t c = 0; c < d.w_p; ++c) {
                auto s = std::to_string(steps[linear_index({static_cast<std::int32_t>(r), static_cast<std::int32_t>(c),
                                                            static_cast<std::int32_t>(fr)},
                                                           d)] +
                                        1);
                if (c) os << ' ';
                os << std::string(width - s.size(), ' ') << s;
            }
            os << '\n';
        }
    }
    return os.str();
}

}  // namespace patchar
