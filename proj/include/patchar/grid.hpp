// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "patchar/errors.hpp"

namespace patchar {

using TokenId = std::uint32_t;

/// Patch-grid geometry of a canvas (or video) in patch units.
struct GridDims {
    std::uint32_t h_p = 1;     // patch rows
    std::uint32_t w_p = 1;     // patch cols
    std::uint32_t f = 1;       // frames, 1 for images
    std::uint32_t m_side = 4;  // tokens per patch side
    std::uint32_t vocab = 64;  // visual codebook size

    std::size_t tokens_per_patch() const { return std::size_t{m_side} * m_side; }
    std::size_t patches_per_frame() const { return std::size_t{h_p} * w_p; }
    std::size_t num_patches() const { return patches_per_frame() * f; }
    std::size_t canvas_rows() const { return std::size_t{h_p} * m_side; }
    std::size_t canvas_cols() const { return std::size_t{w_p} * m_side; }

    void validate() const {
        if (h_p < 1 || w_p < 1 || f < 1 || m_side < 1 || vocab < 2)
            throw ConfigError("grid dims must satisfy h_p,w_p,f,m_side >= 1 and vocab >= 2");
    }

    bool same_layout(const GridDims& o) const { return m_side == o.m_side && vocab == o.vocab; }
    bool operator==(const GridDims&) const = default;
};

struct PatchCoord {
    std::int32_t row = 0;
    std::int32_t col = 0;
    std::int32_t frame = 0;

    bool operator==(const PatchCoord&) const = default;
    auto operator<=>(const PatchCoord&) const = default;
};

inline bool contains(const GridDims& d, const PatchCoord& c) {
    return c.row >= 0 && c.col >= 0 && c.frame >= 0 && c.row < static_cast<std::int32_t>(d.h_p) &&
           c.col < static_cast<std::int32_t>(d.w_p) && c.frame < static_cast<std::int32_t>(d.f);
}

/// Storage index: frame-major, then row-major, then column.
inline std::size_t linear_index(const PatchCoord& c, const GridDims& d) {
    if (!contains(d, c))
        throw RangeError("patch coordinate (" + std::to_string(c.row) + "," + std::to_string(c.col) + "," +
                         std::to_string(c.frame) + ") outside grid");
    return (static_cast<std::size_t>(c.frame) * d.h_p + static_cast<std::size_t>(c.row)) * d.w_p +
           static_cast<std::size_t>(c.col);
}

inline PatchCoord coord_of(std::size_t index, const GridDims& d) {
    if (index >= d.num_patches()) throw RangeError("patch index out of range");
    const auto per_frame = d.patches_per_frame();
    const auto frame = index / per_frame;
    const auto rem = index % per_frame;
    return {static_cast<std::int32_t>(rem / d.w_p), static_cast<std::int32_t>(rem % d.w_p),
            static_cast<std::int32_t>(frame)};
}

/// Position of one visual token on its frame canvas, in token units.
struct TokenPos {
    std::size_t frame = 0;
    std::size_t y = 0;
    std::size_t x = 0;
    bool operator==(const TokenPos&) const = default;
};

/// Tokens inside a patch are laid out row-major over m_side x m_side.
inline TokenPos token_slot(const PatchCoord& c, std::size_t local, const GridDims& d) {
    if (local >= d.tokens_per_patch()) throw RangeError("local token index out of range");
    if (!contains(d, c)) throw RangeError("patch coordinate outside grid");
    return {static_cast<std::size_t>(c.frame), static_cast<std::size_t>(c.row) * d.m_side + local / d.m_side,
            static_cast<std::size_t>(c.col) * d.m_side + local % d.m_side};
}

/// Inverse of token_slot: (patch, local token) owning a canvas position.
inline std::pair<PatchCoord, std::size_t> patch_of_slot(const TokenPos& p, const GridDims& d) {
    if (p.frame >= d.f || p.y >= d.canvas_rows() || p.x >= d.canvas_cols())
        throw RangeError("canvas position out of range");
    PatchCoord c{static_cast<std::int32_t>(p.y / d.m_side), static_cast<std::int32_t>(p.x / d.m_side),
                 static_cast<std::int32_t>(p.frame)};
    return {c, (p.y % d.m_side) * d.m_side + p.x % d.m_side};
}

/// Discrete tokens of a whole canvas/video, stored patch by patch in linear_index order.
class TokenGrid {
public:
    TokenGrid() = default;
    explicit TokenGrid(const GridDims& dims, TokenId fill = 0) : dims_(dims) {
        dims_.validate();
        if (fill >= dims_.vocab) throw RangeError("fill token outside vocab");
        tokens_.assign(dims_.num_patches() * dims_.tokens_per_patch(), fill);
    }

    const GridDims& dims() const { return dims_; }
    const std::vector<TokenId>& tokens() const { return tokens_; }

    std::span<const TokenId> patch(const PatchCoord& c) const {
        const auto m = dims_.tokens_per_patch();
        return {tokens_.data() + linear_index(c, dims_) * m, m};
    }

    void set_patch(const PatchCoord& c, std::span<const TokenId> values) {
        const auto m = dims_.tokens_per_patch();
        if (values.size() != m) throw ShapeError("patch must hold exactly M tokens");
        const auto base = linear_index(c, dims_) * m;
        for (std::size_t i = 0; i < m; ++i) {
            if (values[i] >= dims_.vocab) throw RangeError("token id outside vocab");
            tokens_[base + i] = values[i];
        }
    }

    TokenId at(const TokenPos& p) const {
        const auto [c, local] = patch_of_slot(p, dims_);
        return tokens_[linear_index(c, dims_) * dims_.tokens_per_patch() + local];
    }

    void set(const TokenPos& p, TokenId v) {
        if (v >= dims_.vocab) throw RangeError("token id outside vocab");
        const auto [c, local] = patch_of_slot(p, dims_);
        tokens_[linear_index(c, dims_) * dims_.tokens_per_patch() + local] = v;
    }

    bool operator==(const TokenGrid&) const = default;

private:
    GridDims dims_{};
    std::vector<TokenId> tokens_;
};

// ---------------------------------------------------------------------------
// NWIT token-grid files: "NWIT", u32 version, u32 h_p, w_p, f, m_side, vocab,
// then N*M u16 token ids, all little-endian, in TokenGrid storage order.

inline constexpr std::uint32_t kNwitVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    os.write(b, 2);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("NWIT: truncated header");
    return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 | std::uint32_t{b[3]} << 24;
}

}  // namespace detail

inline void write_nwit(std::ostream& os, const TokenGrid& g) {
    const auto& d = g.dims();
    if (d.vocab > 65536) throw RangeError("NWIT stores u16 token ids; vocab too large");
    os.write("NWIT", 4);
    detail::put_u32(os, kNwitVersion);
    for (auto v : {d.h_p, d.w_p, d.f, d.m_side, d.vocab}) detail::put_u32(os, v);
    for (auto t : g.tokens()) detail::put_u16(os, static_cast<std::uint16_t>(t));
}

inline TokenGrid read_nwit(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "NWIT") throw DataError("NWIT: bad magic");
    if (detail::get_u32(is) != kNwitVersion) throw DataError("NWIT: unsupported version");
    GridDims d;
    d.h_p = detail::get_u32(is);
    d.w_p = detail::get_u32(is);
    d.f = detail::get_u32(is);
    d.m_side = detail::get_u32(is);
    d.vocab = detail::get_u32(is);
    try {
        d.validate();
    } catch (const Error& e) {
        throw DataError(std::string("NWIT: ") + e.what());
    }
    TokenGrid g(d);
    std::vector<TokenId> tokens(d.num_patches() * d.tokens_per_patch());
    for (auto& t : tokens) {
        unsigned char b[2];
        if (!is.read(reinterpret_cast<char*>(b), 2)) throw DataError("NWIT: truncated token payload");
        t = TokenId{b[0]} | TokenId{b[1]} << 8;
        if (t >= d.vocab) throw DataError("NWIT: token id outside vocab");
    }
    const auto m = d.tokens_per_patch();
    for (std::size_t i = 0; i < d.num_patches(); ++i)
        g.set_patch(coord_of(i, d), std::span<const TokenId>(tokens.data() + i * m, m));
    return g;
}

inline void save_nwit(const std::string& path, const TokenGrid& g) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path + " for writing");
    write_nwit(os, g);
}

inline TokenGrid load_nwit(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    return read_nwit(is);
}

}  // namespace patchar
