// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "patchar/adc.hpp"
#include "patchar/ncp.hpp"
#include "patchar/rng.hpp"

using namespace patchar;

namespace {

std::vector<PatchCoord> flat(std::initializer_list<std::pair<int, int>> rc) {
    std::vector<PatchCoord> out;
    for (auto [r, c] : rc) out.push_back({r, c, 0});
    return out;
}

int chebyshev(const PatchCoord& a, const PatchCoord& b) {
    return std::max(std::abs(a.row - b.row), std::abs(a.col - b.col));
}

}  // namespace

TEST(SplitBase, TwoByTwoOrders) {
    GridDims d{2, 2, 1};
    EXPECT_EQ(split_base(d, ScanOrder::Omega).sequence, flat({{0, 0}, {0, 1}, {1, 0}, {1, 1}}));
    EXPECT_EQ(split_base(d, ScanOrder::OmegaStar).sequence, flat({{0, 1}, {0, 0}, {1, 1}, {1, 0}}));
    EXPECT_EQ(split_base(d, ScanOrder::Zeta).sequence, flat({{0, 0}, {1, 0}, {0, 1}, {1, 1}}));
    EXPECT_EQ(split_base(d, ScanOrder::ZetaStar).sequence, flat({{1, 0}, {0, 0}, {1, 1}, {0, 1}}));
}

TEST(SplitBase, SinglePatch) {
    for (auto o : kAllScanOrders) {
        const auto p = split_base(GridDims{1, 1, 1}, o);
        EXPECT_EQ(p.sequence, flat({{0, 0}}));
        EXPECT_EQ(p.prefix_len, 0u);
    }
}

TEST(SplitBase, PermutationExhaustive) {
    for (std::uint32_t h = 1; h <= 5; ++h)
        for (std::uint32_t w = 1; w <= 5; ++w)
            for (std::uint32_t f = 1; f <= 3; ++f)
                for (auto o : kAllScanOrders) {
                    const auto p = split_base(GridDims{h, w, f}, o);
                    ASSERT_TRUE(p.is_permutation());
                    for (std::size_t s = 1; s < p.size(); ++s) ASSERT_LE(p.sequence[s - 1].frame, p.sequence[s].frame);
                }
}

TEST(SplitBase, MirrorSymmetry) {
    for (std::uint32_t h = 1; h <= 5; ++h)
        for (std::uint32_t w = 1; w <= 5; ++w) {
            GridDims d{h, w, 2};
            const auto om = split_base(d, ScanOrder::Omega), oms = split_base(d, ScanOrder::OmegaStar);
            const auto ze = split_base(d, ScanOrder::Zeta), zes = split_base(d, ScanOrder::ZetaStar);
            for (std::size_t s = 0; s < om.size(); ++s) {
                auto m = om.sequence[s];
                m.col = static_cast<std::int32_t>(w) - 1 - m.col;
                // Mirroring columns reverses the within-row sweep but keeps row order.
                const auto& o = oms.sequence[s];
                ASSERT_EQ(o.row, m.row);
                ASSERT_EQ(o.frame, m.frame);
                ASSERT_EQ(o.col, m.col);
                auto z = ze.sequence[s];
                z.row = static_cast<std::int32_t>(h) - 1 - z.row;
                ASSERT_EQ(zes.sequence[s], z);
            }
        }
}

TEST(ScanOrderNames, RoundTrip) {
    for (auto o : kAllScanOrders) EXPECT_EQ(parse_scan_order(to_string(o)), o);
    EXPECT_THROW(parse_scan_order("diagonal"), UsageError);
}

TEST(SplitOutpaint, CenterOfThreeByThree) {
    const auto p = split_outpaint(GridDims{3, 3, 1}, {1, 1, 1, 1});
    EXPECT_EQ(p.prefix_len, 1u);
    EXPECT_EQ(p.sequence, flat({{1, 1}, {0, 0}, {0, 1}, {0, 2}, {2, 0}, {2, 1}, {2, 2}, {1, 0}, {1, 2}}));
}

TEST(SplitOutpaint, FullConditionLeavesNothing) {
    const auto p = split_outpaint(GridDims{4, 4, 1}, {0, 0, 4, 4});
    EXPECT_EQ(p.prefix_len, 16u);
    EXPECT_EQ(p.size(), 16u);
    EXPECT_TRUE(p.is_permutation());
}

TEST(SplitOutpaint, RightExtendIsColumnSweep) {
    // Condition flush against the left edge: growth proceeds column by column to the right.
    const auto p = split_outpaint(GridDims{2, 4, 1}, {0, 0, 2, 1});
    EXPECT_EQ(p.sequence, flat({{0, 0}, {1, 0}, {0, 1}, {1, 1}, {0, 2}, {1, 2}, {0, 3}, {1, 3}}));
}

TEST(SplitOutpaint, RejectsBadRectangles) {
    GridDims d{3, 3, 1};
    EXPECT_THROW(split_outpaint(d, {2, 2, 2, 1}), GeometryError);
    EXPECT_THROW(split_outpaint(d, {0, 0, 0, 1}), GeometryError);
    EXPECT_THROW(split_outpaint(d, {-1, 0, 1, 1}), GeometryError);
    EXPECT_THROW(split_outpaint(GridDims{3, 3, 2}, {0, 0, 1, 1}), GeometryError);
}

TEST(SplitOutpaint, RandomRectanglesAreConnectedPermutations) {
    CounterRng rng(21);
    for (int trial = 0; trial < 500; ++trial) {
        const auto h = static_cast<std::uint32_t>(1 + rng.below(7)), w = static_cast<std::uint32_t>(1 + rng.below(7));
        const auto r0 = static_cast<std::int32_t>(rng.below(h)), c0 = static_cast<std::int32_t>(rng.below(w));
        const auto rows = static_cast<std::int32_t>(1 + rng.below(h - r0)), cols = static_cast<std::int32_t>(1 + rng.below(w - c0));
        const PatchRect rect{r0, c0, rows, cols};
        const auto p = split_outpaint(GridDims{h, w, 1}, rect);
        ASSERT_TRUE(p.is_permutation());
        ASSERT_EQ(p.prefix_len, rect.area());
        ASSERT_EQ(p.size() - p.prefix_len, std::size_t{h} * w - rect.area());
        for (std::size_t s = 0; s < p.prefix_len; ++s) ASSERT_TRUE(rect.contains(p.sequence[s]));
        for (std::size_t s = p.prefix_len; s < p.size(); ++s) {
            bool adjacent = false;
            for (std::size_t t = 0; t < s && !adjacent; ++t) adjacent = chebyshev(p.sequence[s], p.sequence[t]) <= 1;
            ASSERT_TRUE(adjacent) << "trial " << trial << " step " << s;
        }
    }
}

TEST(RpeTable, SortedDenseAndSelfPresent) {
    RpeTable t({{0, -1, 0}, {-1, 0, 0}, {0, -1, 0}});
    EXPECT_EQ(t.size(), 3u);
    EXPECT_TRUE(t.contains({0, 0, 0}));
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t.id_of(t.offsets()[i]), i);
    EXPECT_THROW(t.id_of({5, 5, 0}), MissingOffsetError);
}

TEST(ReachableOffsets, OmegaExtentOne) {
    const auto t = reachable_offsets(PlanSet::only(ScanOrder::Omega), {1, 1, 0});
    const std::vector<RelOffset> expect{{-1, -1, 0}, {-1, 0, 0}, {-1, 1, 0}, {0, -1, 0}, {0, 0, 0}};
    EXPECT_EQ(t.offsets(), expect);
}

TEST(ReachableOffsets, ZeroExtentIsSelfOnly) {
    EXPECT_EQ(reachable_offsets(PlanSet::all(), {0, 0, 0}).offsets(), (std::vector<RelOffset>{{0, 0, 0}}));
}

TEST(ReachableOffsets, OmegaWithOneFrame) {
    const auto t = reachable_offsets(PlanSet::only(ScanOrder::Omega), {1, 1, 1});
    EXPECT_EQ(t.size(), 14u);
    for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) EXPECT_TRUE(t.contains({dr, dc, 1}));
}

TEST(ReachableOffsets, MonotoneInExtent) {
    const std::vector<PlanSet> sets{PlanSet::only(ScanOrder::Omega), PlanSet::only(ScanOrder::ZetaStar), PlanSet::all()};
    for (const auto& ps : sets)
        for (int w = 0; w <= 2; ++w)
            for (int h = 0; h <= 2; ++h)
                for (int f = 0; f <= 1; ++f) {
                    const auto base = reachable_offsets(ps, {w, h, f});
                    for (const Extent bigger : {Extent{w + 1, h, f}, Extent{w, h + 1, f}, Extent{w, h, f + 1}}) {
                        const auto big = reachable_offsets(ps, bigger);
                        for (const auto& o : base.offsets()) ASSERT_TRUE(big.contains(o));
                    }
                }
}

TEST(EmbAssign, FirstStepIsSelfOnly) {
    const auto t = reachable_offsets(PlanSet::all(), {1, 1, 0});
    const auto p = split_base(GridDims{3, 3, 1}, ScanOrder::Zeta);
    EXPECT_EQ(emb_assign(p, 0, {}, t), (std::vector<std::size_t>{t.self_id()}));
}

TEST(EmbAssign, CentreOfOmegaThreeByThree) {
    const auto t = reachable_offsets(PlanSet::only(ScanOrder::Omega), {1, 1, 0});
    const auto p = split_base(GridDims{3, 3, 1}, ScanOrder::Omega);
    const auto ctx = flat({{0, 0}, {0, 1}, {0, 2}, {1, 0}});
    const auto ids = emb_assign(p, 4, ctx, t);
    EXPECT_EQ(ids, (std::vector<std::size_t>{t.id_of({0, 0, 0}), t.id_of({-1, -1, 0}), t.id_of({-1, 0, 0}),
                                             t.id_of({-1, 1, 0}), t.id_of({0, -1, 0})}));
}

TEST(EmbAssign, VideoCentreSeesThirteenPatches) {
    // 3x3 per frame, omega, extent (1,1,1): the 14th patch is the centre of frame 2.
    const Extent e{1, 1, 1};
    const auto t = reachable_offsets(PlanSet::only(ScanOrder::Omega), e);
    const auto p = split_base(GridDims{3, 3, 2}, ScanOrder::Omega);
    ASSERT_EQ(p.sequence[13], (PatchCoord{1, 1, 1}));
    ContextPool<int> pool(p, e);
    for (std::size_t s = 0; s < 13; ++s) {
        pool.select(pool.next());
        pool.add(pool.next(), 0);
        pool.remove();
    }
    const auto sel = pool.select(pool.next());
    ASSERT_EQ(sel.size(), 13u);
    std::vector<PatchCoord> ctx;
    for (std::size_t i = 0; i < sel.size(); ++i) {
        EXPECT_EQ(sel[i].step, i);
        ctx.push_back(sel[i].coord);
    }
    const auto ids = emb_assign(p, 13, ctx, t);
    ASSERT_EQ(ids.size(), 14u);
    EXPECT_EQ(ids[0], t.self_id());
    for (std::size_t i = 0; i < ctx.size(); ++i) EXPECT_EQ(ids[i + 1], t.id_of(offset_between({1, 1, 1}, ctx[i])));
}

TEST(EmbAssign, FuzzNeverMissesAnOffset) {
    CounterRng rng(99);
    const Extent e{2, 2, 1};
    const auto t = reachable_offsets(PlanSet::all(), e);
    for (int trial = 0; trial < 1000; ++trial) {
        GridDims d{static_cast<std::uint32_t>(1 + rng.below(6)), static_cast<std::uint32_t>(1 + rng.below(6)),
                   static_cast<std::uint32_t>(1 + rng.below(3))};
        OrderPlan p;
        if (d.f == 1 && rng.below(2)) {
            const auto r0 = static_cast<std::int32_t>(rng.below(d.h_p)), c0 = static_cast<std::int32_t>(rng.below(d.w_p));
            p = split_outpaint(d, {r0, c0, static_cast<std::int32_t>(1 + rng.below(d.h_p - r0)),
                                   static_cast<std::int32_t>(1 + rng.below(d.w_p - c0))});
        } else {
            p = split_base(d, kAllScanOrders[rng.below(4)]);
        }
        const auto step = rng.below(p.size());
        std::vector<PatchCoord> ctx;
        for (std::size_t s = 0; s < step; ++s)
            if (within_extent(p.sequence[step], p.sequence[s], e)) ctx.push_back(p.sequence[s]);
        ASSERT_NO_THROW(emb_assign(p, step, ctx, t));
    }
}

TEST(RenderPlan, OmegaThreeByThree) {
    EXPECT_EQ(render_plan_text(split_base(GridDims{3, 3, 1}, ScanOrder::Omega)), "1 2 3\n4 5 6\n7 8 9\n");
}

TEST(RenderPlan, FramesAndPadding) {
    const auto text = render_plan_text(split_base(GridDims{2, 3, 2}, ScanOrder::Zeta));
    EXPECT_EQ(text, "frame 0\n 1  3  5\n 2  4  6\nframe 1\n 7  9 11\n 8 10 12\n");
}

TEST(SplitAnimate, FirstFrameIsPrefix) {
    const auto p = split_animate(GridDims{2, 3, 3}, ScanOrder::Omega);
    EXPECT_EQ(p.prefix_len, 6u);
    for (std::size_t s = 0; s < 6; ++s) EXPECT_EQ(p.sequence[s].frame, 0);
    EXPECT_THROW(split_animate(GridDims{2, 3, 1}, ScanOrder::Omega), GeometryError);
}
