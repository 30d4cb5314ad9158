// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Deterministic mock visual codec, procedural pattern dataset with toy
// captions, and a strict rule-based pattern classifier.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "patchar/adc.hpp"
#include "patchar/errors.hpp"
#include "patchar/grid.hpp"
#include "patchar/rng.hpp"

namespace patchar {

struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major

    GrayImage() = default;
    GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    bool operator==(const GrayImage&) const = default;
};

/// Procedural codebook of m_pix x m_pix grayscale blocks.
///
/// Block id has level I = (id mod 16) * 17 and pattern (id div 16) mod 4 in
/// {flat, horizontal stripes, vertical stripes, checker}. Marked pixels are
/// shifted by a = 32 * (1 + id div 64): I + a when that fits in 8 bits,
/// I - a otherwise. Ids from 64 on replace the empty flat mark with a single
/// bottom-right pixel so every block in a 256-entry book stays distinct.
class Codebook {
public:
    static constexpr std::uint32_t kMaxVocab = 256;

    explicit Codebook(std::uint32_t vocab = 64, std::uint32_t m_pix = 4) : vocab_(vocab), m_pix_(m_pix) {
        if (vocab < 1 || vocab > kMaxVocab) throw ConfigError("codebook vocab must lie in [1, 256]");
        if (m_pix < 2) throw ConfigError("codebook blocks need at least 2x2 pixels");
        blocks_.reserve(vocab);
        for (std::uint32_t id = 0; id < vocab; ++id) blocks_.push_back(make_block(id));
        auto sorted = blocks_;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw StateError("codebook blocks are not pairwise distinct");
    }

    std::uint32_t vocab() const { return vocab_; }
    std::uint32_t m_pix() const { return m_pix_; }
    const std::vector<std::uint8_t>& block(TokenId id) const {
        if (id >= vocab_) throw RangeError("token id outside codebook");
        return blocks_[id];
    }

    /// Nearest block under squared error; lowest id on ties.
    TokenId nearest(const std::vector<std::uint8_t>& px) const {
        if (px.size() != std::size_t{m_pix_} * m_pix_) throw ShapeError("block has the wrong pixel count");
        TokenId best = 0;
        std::uint64_t best_d = std::numeric_limits<std::uint64_t>::max();
        for (TokenId id = 0; id < vocab_; ++id) {
            std::uint64_t dist = 0;
            for (std::size_t i = 0; i < px.size(); ++i) {
                const auto diff = static_cast<std::int64_t>(px[i]) - blocks_[id][i];
                dist += static_cast<std::uint64_t>(diff * diff);
            }
            if (dist < best_d) {
                best_d = dist;
                best = id;
            }
        }
        return best;
    }

private:
    std::vector<std::uint8_t> make_block(std::uint32_t id) const {
        const int level = static_cast<int>(id % 16) * 17;
        const std::uint32_t pattern = (id / 16) % 4;
        const std::uint32_t group = id / 64;
        const int a = 32 * static_cast<int>(1 + group);
        const int marked = level + a <= 255 ? level + a : level - a;
        std::vector<std::uint8_t> px(std::size_t{m_pix_} * m_pix_);
        for (std::uint32_t y = 0; y < m_pix_; ++y)
            for (std::uint32_t x = 0; x < m_pix_; ++x) {
                bool mark = false;
                switch (pattern) {
                    case 0: mark = group > 0 && y == m_pix_ - 1 && x == m_pix_ - 1; break;
                    case 1: mark = y % 2 == 1; break;
                    case 2: mark = x % 2 == 1; break;
                    case 3: mark = (x + y) % 2 == 1; break;
                }
                px[y * m_pix_ + x] = static_cast<std::uint8_t>(mark ? marked : level);
            }
        return px;
    }

    std::uint32_t vocab_;
    std::uint32_t m_pix_;
    std::vector<std::vector<std::uint8_t>> blocks_;
};

/// Paints frame `frame` of the grid; image is (h_p*m_side*m_pix) rows by
/// (w_p*m_side*m_pix) columns.
inline GrayImage decode_image(const TokenGrid& grid, std::uint32_t frame, const Codebook& book) {
    const auto& d = grid.dims();
    if (frame >= d.f) throw RangeError("frame index outside grid");
    if (d.vocab > book.vocab()) throw ConfigError("grid vocabulary exceeds codebook");
    const std::size_t mp = book.m_pix();
    GrayImage img(d.canvas_cols() * mp, d.canvas_rows() * mp);
    for (std::uint32_t y = 0; y < d.canvas_rows(); ++y)
        for (std::uint32_t x = 0; x < d.canvas_cols(); ++x) {
            const auto& blk = book.block(grid.at({frame, y, x}));
            for (std::size_t py = 0; py < mp; ++py)
                for (std::size_t px = 0; px < mp; ++px) img.at(y * mp + py, x * mp + px) = blk[py * mp + px];
        }
    return img;
}

/// Inverse of decode_image for one frame; dims gives the target layout
/// (f must be 1, h_p/w_p must match the image).
inline TokenGrid encode_image(const GrayImage& img, std::uint32_t m_side, const Codebook& book) {
    const std::size_t unit = std::size_t{m_side} * book.m_pix();
    if (img.width == 0 || img.height == 0 || img.width % unit || img.height % unit)
        throw GeometryError("image dimensions must be positive multiples of m_side*m_pix");
    GridDims d{static_cast<std::uint32_t>(img.height / unit), static_cast<std::uint32_t>(img.width / unit), 1, m_side,
               book.vocab()};
    TokenGrid grid(d);
    const std::size_t mp = book.m_pix();
    std::vector<std::uint8_t> blk(mp * mp);
    for (std::uint32_t y = 0; y < d.canvas_rows(); ++y)
        for (std::uint32_t x = 0; x < d.canvas_cols(); ++x) {
            for (std::size_t py = 0; py < mp; ++py)
                for (std::size_t px = 0; px < mp; ++px) blk[py * mp + px] = img.at(y * mp + py, x * mp + px);
            grid.set({0, y, x}, book.nearest(blk));
        }
    return grid;
}

/// Frames of a grid decoded and stacked top to bottom.
inline GrayImage decode_frames(const TokenGrid& grid, const Codebook& book) {
    GrayImage out;
    for (std::uint32_t f = 0; f < grid.dims().f; ++f) {
        auto img = decode_image(grid, f, book);
        out.width = img.width;
        out.height += img.height;
        out.pixels.insert(out.pixels.end(), img.pixels.begin(), img.pixels.end());
    }
    return out;
}

/// Binary PPM (P6, maxval 255) with the gray value replicated to RGB.
inline void write_ppm(std::ostream& os, const GrayImage& img) {
    os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    std::vector<char> row(img.width * 3);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) row[3 * x] = row[3 * x + 1] = row[3 * x + 2] = static_cast<char>(img.at(y, x));
        os.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw DataError("failed to write PPM");
}

inline void save_ppm(const std::string& path, const GrayImage& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path + " for writing");
    write_ppm(os, img);
}

/// Reads a P6 file written by write_ppm; requires R == G == B per pixel.
inline GrayImage read_ppm(std::istream& is) {
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (!is || magic != "P6" || maxval != 255 || w == 0 || h == 0) throw DataError("not an 8-bit P6 PPM");
    is.get();
    GrayImage img(w, h);
    std::vector<char> row(w * 3);
    for (std::size_t y = 0; y < h; ++y) {
        if (!is.read(row.data(), static_cast<std::streamsize>(row.size()))) throw DataError("truncated PPM");
        for (std::size_t x = 0; x < w; ++x) {
            if (row[3 * x] != row[3 * x + 1] || row[3 * x] != row[3 * x + 2]) throw DataError("PPM is not grayscale");
            img.at(y, x) = static_cast<std::uint8_t>(row[3 * x]);
        }
    }
    return img;
}

/// Generation index of every patch as intensity; cell_px square cells,
/// frames stacked top to bottom. Patches absent from the plan stay black.
inline GrayImage plan_heatmap(const OrderPlan& plan, std::size_t cell_px = 8) {
    const auto& d = plan.dims;
    GrayImage img(d.w_p * cell_px, d.h_p * d.f * cell_px);
    const std::size_t n = plan.sequence.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto& c = plan.sequence[i];
        const auto v = static_cast<std::uint8_t>(n > 1 ? 32 + (223 * i) / (n - 1) : 255);
        const std::size_t y0 = (static_cast<std::size_t>(c.frame) * d.h_p + static_cast<std::size_t>(c.row)) * cell_px;
        const std::size_t x0 = static_cast<std::size_t>(c.col) * cell_px;
        for (std::size_t y = 0; y < cell_px; ++y)
            for (std::size_t x = 0; x < cell_px; ++x) img.at(y0 + y, x0 + x) = v;
    }
    return img;
}

enum class Family { Constant, HStripes, VStripes, Checker, Ramp, Unknown };

inline constexpr std::array<Family, 5> kAllFamilies{Family::Constant, Family::HStripes, Family::VStripes, Family::Checker,
                                                    Family::Ramp};

inline std::string_view to_string(Family f) {
    switch (f) {
        case Family::Constant: return "constant";
        case Family::HStripes: return "h_stripes";
        case Family::VStripes: return "v_stripes";
        case Family::Checker: return "checker";
        case Family::Ramp: return "ramp";
        case Family::Unknown: return "unknown";
    }
    return "?";
}

inline Family parse_family(std::string_view s) {
    for (auto f : kAllFamilies)
        if (to_string(f) == s) return f;
    throw UsageError("unknown pattern family '" + std::string(s) + "'");
}

/// Fixed caption vocabulary; id 0 is padding and never emitted.
inline const std::vector<std::string>& caption_words() {
    static const std::vector<std::string> words{
        "<pad>",  "plain",  "canvas", "horizontal", "vertical", "stripes", "checker", "board",
        "diagonal", "ramp", "period", "two",       "three",    "four",    "of",      "a",
        "image",  "pattern", "tone",  "steps"};
    return words;
}

inline TokenId caption_word_id(std::string_view w) {
    const auto& words = caption_words();
    for (std::size_t i = 1; i < words.size(); ++i)
        if (words[i] == w) return static_cast<TokenId>(i);
    throw UsageError("word '" + std::string(w) + "' is not in the caption vocabulary");
}

inline std::vector<TokenId> tokenize_caption(std::string_view text) {
    std::vector<TokenId> out;
    std::istringstream is{std::string(text)};
    for (std::string w; is >> w;) out.push_back(caption_word_id(w));
    return out;
}

inline std::string caption_text(const std::vector<TokenId>& ids) {
    const auto& words = caption_words();
    std::string out;
    for (auto id : ids) {
        if (id == 0 || id >= words.size()) continue;
        if (!out.empty()) out += ' ';
        out += words[id];
    }
    return out;
}

/// Tokens on canvas coordinates (Y, X), all mod vocab, identical across frames:
///   CONSTANT   base
///   V_STRIPES  base + (X mod period) * delta
///   H_STRIPES  base + (Y mod period) * delta
///   CHECKER    base if Y + X even, else base + delta
///   RAMP       base + (Y + X) * delta
struct PatternSpec {
    Family family = Family::Constant;
    std::uint32_t period = 2;
    TokenId base = 0;
    std::uint32_t delta = 1;

    TokenId token_at(std::uint32_t y, std::uint32_t x, std::uint32_t vocab) const {
        std::uint64_t v = base;
        switch (family) {
            case Family::Constant: break;
            case Family::VStripes: v += std::uint64_t{x % period} * delta; break;
            case Family::HStripes: v += std::uint64_t{y % period} * delta; break;
            case Family::Checker: v += (x + y) % 2 ? delta : 0; break;
            case Family::Ramp: v += (std::uint64_t{x} + y) * delta; break;
            case Family::Unknown: throw UsageError("cannot render an unknown family");
        }
        return static_cast<TokenId>(v % vocab);
    }

    TokenGrid render(const GridDims& d) const {
        d.validate();
        TokenGrid g(d);
        for (std::uint32_t f = 0; f < d.f; ++f)
            for (std::uint32_t y = 0; y < d.canvas_rows(); ++y)
                for (std::uint32_t x = 0; x < d.canvas_cols(); ++x) g.set({f, y, x}, token_at(y, x, d.vocab));
        return g;
    }

    std::vector<TokenId> caption() const {
        auto words = [](std::initializer_list<const char*> ws) {
            std::vector<TokenId> out;
            for (const char* w : ws) out.push_back(caption_word_id(w));
            return out;
        };
        auto period_word = [&]() -> const char* {
            switch (period) {
                case 2: return "two";
                case 3: return "three";
                case 4: return "four";
            }
            throw ConfigError("caption vocabulary names periods 2..4 only");
        };
        switch (family) {
            case Family::Constant: return words({"plain", "canvas"});
            case Family::VStripes: return words({"vertical", "stripes", "period", period_word()});
            case Family::HStripes: return words({"horizontal", "stripes", "period", period_word()});
            case Family::Checker: return words({"checker", "board"});
            case Family::Ramp: return words({"diagonal", "ramp"});
            case Family::Unknown: break;
        }
        throw UsageError("cannot caption an unknown family");
    }
};

/// Weighted mix of families plus the stripe periods to draw from.
struct FamilyMix {
    std::vector<std::pair<Family, double>> weights{{Family::VStripes, 1.0}, {Family::Checker, 1.0}};
    std::vector<std::uint32_t> periods{2};
    std::vector<TokenId> bases;         // empty: any token
    std::vector<std::uint32_t> deltas;  // empty: any step the family allows

    void validate(std::uint32_t vocab) const {
        if (weights.empty()) throw ConfigError("family mix is empty");
        double total = 0;
        for (const auto& [f, w] : weights) {
            if (f == Family::Unknown || !(w >= 0)) throw ConfigError("family mix has an invalid entry");
            total += w;
        }
        if (!(total > 0)) throw ConfigError("family mix weights sum to zero");
        if (periods.empty()) throw ConfigError("no stripe periods configured");
        for (auto p : periods)
            if (p < 2 || p > 4 || p > vocab) throw ConfigError("stripe periods must lie in [2, 4]");
        if (vocab < 3) throw ConfigError("pattern synthesis needs vocab >= 3");
        for (auto b : bases)
            if (b >= vocab) throw ConfigError("palette base outside vocabulary");
        for (auto d : deltas)
            if (d == 0 || d >= vocab) throw ConfigError("palette steps must lie in [1, vocab)");
    }
};

/// Draws pattern parameters so the classifier's distinctness rules hold:
/// stripe values within a period are distinct, checker colours differ, and
/// the ramp step is neither 0 nor vocab/2.
inline PatternSpec sample_pattern(Family f, const FamilyMix& mix, std::uint32_t vocab, CounterRng& rng) {
    PatternSpec s;
    s.family = f;
    s.base = mix.bases.empty() ? static_cast<TokenId>(rng.below(vocab)) : mix.bases[rng.below(mix.bases.size())];
    s.period = mix.periods[rng.below(mix.periods.size())];
    auto ok_delta = [&](std::uint32_t dlt) {
        if (dlt == 0) return false;
        switch (f) {
            case Family::HStripes:
            case Family::VStripes:
                for (std::uint32_t i = 1; i < s.period; ++i)
                    if ((std::uint64_t{i} * dlt) % vocab == 0) return false;
                return true;
            case Family::Ramp: return 2 * dlt != vocab;
            default: return true;
        }
    };
    if (f == Family::Constant) {
        s.delta = 0;
        return s;
    }
    std::vector<std::uint32_t> allowed;
    for (std::uint32_t dlt = 1; dlt < vocab; ++dlt)
        if (ok_delta(dlt) && (mix.deltas.empty() || std::find(mix.deltas.begin(), mix.deltas.end(), dlt) != mix.deltas.end()))
            allowed.push_back(dlt);
    if (allowed.empty()) throw ConfigError("no admissible step for " + std::string(to_string(f)));
    s.delta = allowed[rng.below(allowed.size())];
    return s;
}

struct PatternSample {
    TokenGrid grid;
    std::vector<TokenId> caption;
    PatternSpec spec;
};

inline std::vector<PatternSample> synth_dataset(const FamilyMix& mix, std::size_t count, const GridDims& dims,
                                                std::uint64_t seed) {
    if (count < 1) throw ConfigError("dataset count must be >= 1");
    dims.validate();
    mix.validate(dims.vocab);
    double total = 0;
    for (const auto& [f, w] : mix.weights) total += w;
    CounterRng rng(seed, 0x73796e7468ULL);
    std::vector<PatternSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        double u = rng.uniform() * total;
        Family fam = mix.weights.back().first;
        for (const auto& [f, w] : mix.weights) {
            if (u < w) {
                fam = f;
                break;
            }
            u -= w;
        }
        auto spec = sample_pattern(fam, mix, dims.vocab, rng);
        out.push_back({spec.render(dims), spec.caption(), spec});
    }
    return out;
}

namespace detail {

/// Smallest p in [2, max_p] with seq[i] == seq[i mod p] everywhere and
/// seq[0..p) pairwise distinct.
inline std::optional<std::uint32_t> stripe_period(const std::vector<TokenId>& seq, std::uint32_t max_p) {
    for (std::uint32_t p = 2; p <= max_p; ++p) {
        bool ok = true;
        for (std::size_t i = p; i < seq.size() && ok; ++i) ok = seq[i] == seq[i % p];
        for (std::uint32_t i = 0; i < p && ok; ++i)
            for (std::uint32_t j = i + 1; j < p && ok; ++j) ok = seq[i] != seq[j];
        if (ok) return p;
    }
    return std::nullopt;
}

}  // namespace detail

/// Strict detector; any single deviating token yields Unknown. All frames
/// must be identical.
inline Family classify_pattern(const TokenGrid& g) {
    const auto& d = g.dims();
    const std::uint32_t R = d.canvas_rows(), C = d.canvas_cols(), V = d.vocab;
    for (std::uint32_t f = 1; f < d.f; ++f)
        for (std::uint32_t y = 0; y < R; ++y)
            for (std::uint32_t x = 0; x < C; ++x)
                if (g.at({f, y, x}) != g.at({0, y, x})) return Family::Unknown;
    auto t = [&](std::uint32_t y, std::uint32_t x) { return g.at({0, y, x}); };
    auto all = [&](auto pred) {
        for (std::uint32_t y = 0; y < R; ++y)
            for (std::uint32_t x = 0; x < C; ++x)
                if (!pred(y, x)) return false;
        return true;
    };

    const TokenId t00 = t(0, 0);
    if (all([&](auto y, auto x) { return t(y, x) == t00; })) return Family::Constant;

    if (R >= 2 && C >= 2) {
        const TokenId t01 = t(0, 1);
        if (t01 != t00 && all([&](auto y, auto x) { return t(y, x) == ((x + y) % 2 ? t01 : t00); })) return Family::Checker;
    }

    if (R >= 1 && C >= 4 && all([&](auto y, auto x) { return t(y, x) == t(0, x); })) {
        std::vector<TokenId> row(C);
        for (std::uint32_t x = 0; x < C; ++x) row[x] = t(0, x);
        if (detail::stripe_period(row, std::min<std::uint32_t>(4, C / 2))) return Family::VStripes;
    }
    if (R >= 4 && all([&](auto y, auto x) { return t(y, x) == t(y, 0); })) {
        std::vector<TokenId> col(R);
        for (std::uint32_t y = 0; y < R; ++y) col[y] = t(y, 0);
        if (detail::stripe_period(col, std::min<std::uint32_t>(4, R / 2))) return Family::HStripes;
    }

    if (C >= 2 && R >= 2) {
        const std::uint64_t delta = (std::uint64_t{t(0, 1)} + V - t00) % V;
        if (delta != 0 && 2 * delta != V &&
            all([&](auto y, auto x) { return t(y, x) == (t00 + (std::uint64_t{x} + y) * delta) % V; }))
            return Family::Ramp;
    }
    return Family::Unknown;
}

}  // namespace patchar
