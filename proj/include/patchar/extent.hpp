// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdlib>

#include "patchar/errors.hpp"
#include "patchar/grid.hpp"

namespace patchar {

/// Context neighbourhood in patches (width, height) and frames.
struct Extent {
    std::int32_t e_w = 0;
    std::int32_t e_h = 0;
    std::int32_t e_f = 0;

    void validate() const {
        if (e_w < 0 || e_h < 0 || e_f < 0) throw ConfigError("extent components must be >= 0");
    }
    bool operator==(const Extent&) const = default;
};

/// Box test used by NCP selection: one-sided in time (context frame <= current frame).
inline bool within_extent(const PatchCoord& current, const PatchCoord& context, const Extent& e) {
    const auto df = current.frame - context.frame;
    return std::abs(current.row - context.row) <= e.e_h && std::abs(current.col - context.col) <= e.e_w &&
           df >= 0 && df <= e.e_f;
}

}  // namespace patchar
