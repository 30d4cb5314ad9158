// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every command resolves a flat JSON configuration
// (config file first, flags on top), runs, and writes a run report that is
// enough to replay it: `patchar <cmd> --config <report>.json`.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "patchar/adc.hpp"
#include "patchar/checkpoint.hpp"
#include "patchar/codec.hpp"
#include "patchar/decoder.hpp"
#include "patchar/errors.hpp"
#include "patchar/grid.hpp"
#include "patchar/ncp.hpp"
#include "patchar/pipeline.hpp"
#include "patchar/selfcheck.hpp"

namespace patchar::cli {

using nlohmann::json;

inline constexpr double kGradTolerance = 1e-4;

/// 0 success, 1 usage or configuration, 2 bad data or geometry, 3 internal
/// invariant violation.
inline int exit_code_for(ErrorKind k) {
    switch (k) {
        case ErrorKind::Usage:
        case ErrorKind::Config: return 1;
        case ErrorKind::Range:
        case ErrorKind::Geometry:
        case ErrorKind::Shape:
        case ErrorKind::Data: return 2;
        case ErrorKind::Sequencing:
        case ErrorKind::State:
        case ErrorKind::MissingOffset:
        case ErrorKind::DegenerateRow: return 3;
    }
    return 3;
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::int64_t to_int(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    std::int64_t v = 0;
    try {
        v = std::stoll(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size()) throw UsageError(what + ": '" + s + "' is not an integer");
    return v;
}

inline std::vector<std::int64_t> int_list(const std::string& s, char sep, std::size_t lo, std::size_t hi,
                                          const std::string& what) {
    const auto parts = split(s, sep);
    if (parts.size() < lo || parts.size() > hi) throw UsageError(what + ": malformed value '" + s + "'");
    std::vector<std::int64_t> out;
    for (const auto& p : parts) out.push_back(to_int(p, what));
    return out;
}

}  // namespace detail

/// "HxW" or "HxWxF" in patches.
inline GridDims parse_grid(const std::string& s, std::uint32_t m_side, std::uint32_t vocab) {
    const auto v = detail::int_list(s, 'x', 2, 3, "--grid");
    for (auto x : v)
        if (x < 1 || x > 4096) throw UsageError("--grid: sizes must lie in [1, 4096]");
    GridDims d{static_cast<std::uint32_t>(v[0]), static_cast<std::uint32_t>(v[1]),
               v.size() == 3 ? static_cast<std::uint32_t>(v[2]) : 1u, m_side, vocab};
    d.validate();
    return d;
}

inline Extent parse_extent(const std::string& s) {
    const auto v = detail::int_list(s, ',', 3, 3, "--extent");
    Extent e{static_cast<std::int32_t>(v[0]), static_cast<std::int32_t>(v[1]), static_cast<std::int32_t>(v[2])};
    if (e.e_w < 0 || e.e_h < 0 || e.e_f < 0) throw UsageError("--extent: components must be >= 0");
    return e;
}

inline PatchCoord parse_place(const std::string& s) {
    const auto v = detail::int_list(s, ',', 2, 2, "--place");
    return {static_cast<std::int32_t>(v[0]), static_cast<std::int32_t>(v[1]), 0};
}

/// Resolved run configuration. Reads fall back to defaults and record them,
/// so the report holds every value the run actually used.
class Settings {
public:
    explicit Settings(json j = json::object()) : j_(std::move(j)) {}

    template <class V>
    V get(const std::string& key, const V& def) {
        if (!j_.contains(key)) j_[key] = def;
        try {
            return j_.at(key).get<V>();
        } catch (const json::exception& e) {
            throw ConfigError("config key '" + key + "': " + e.what());
        }
    }
    bool has(const std::string& key) const { return j_.contains(key); }
    std::string str(const std::string& key, const std::string& def) { return get<std::string>(key, def); }
    const json& raw() const { return j_; }

private:
    json j_;
};

/// Loads a config file: either a flat object or a run report holding one
/// under "config". Dashes in keys are normalized to underscores.
inline json load_config_file(const std::string& path) {
    json j;
    try {
        j = patchar::detail::read_json(path);
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    if (j.is_object() && j.contains("config") && j["config"].is_object()) j = j["config"];
    if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
    json out = json::object();
    for (auto& [k, v] : j.items()) {
        std::string key = k;
        std::replace(key.begin(), key.end(), '-', '_');
        out[key] = v;
    }
    return out;
}

/// Per-run state shared by the commands.
struct Run {
    std::string command;
    Settings cfg;
    json metrics = json::object();
    std::vector<std::string> outputs;
    std::ostream& out;
    std::ostream& err;

    std::string out_prefix() { return cfg.str("out", ""); }
    std::string output(const std::string& suffix) {
        const auto prefix = out_prefix();
        if (prefix.empty()) return {};
        const std::filesystem::path p(prefix + suffix);
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
        outputs.push_back(p.string());
        return p.string();
    }
};

inline std::uint64_t seed_of(Run& r) { return r.cfg.get<std::uint64_t>("seed", 0); }

inline ModelConfig model_config(Run& r, const Extent& extent) {
    ModelConfig mc;
    auto& c = r.cfg;
    mc.layers = c.get<std::uint32_t>("layers", 2);
    mc.d = c.get<std::uint32_t>("d", 64);
    mc.heads = c.get<std::uint32_t>("heads", 4);
    mc.m_side = c.get<std::uint32_t>("m_side", 4);
    mc.vocab = c.get<std::uint32_t>("vocab", 64);
    mc.text_len = c.get<std::uint32_t>("text_len", 0);
    mc.text_vocab = c.get<std::uint32_t>("text_vocab", mc.text_len ? static_cast<std::uint32_t>(caption_words().size()) : 0);
    mc.extent = extent;
    mc.rpe_table = reachable_offsets(PlanSet::all(), extent);
    mc.rpe_feed = parse_rpe_feed(c.str("rpe_feed", "pre"));
    mc.local_mode = parse_local_mode(c.str("mode", "ar"));
    mc.caches_enabled = !c.get<bool>("no_caches", false);
    mc.rpe_every_layer = c.get<bool>("rpe_every_layer", true);
    mc.pnar_rounds = c.get<std::uint32_t>("pnar_rounds", 8);
    mc.init_std = c.get<double>("init_std", 0.02);
    mc.validate();
    return mc;
}

inline FamilyMix family_mix(Run& r, const std::string& bases_key) {
    FamilyMix mix;
    mix.weights.clear();
    for (const auto& f : r.cfg.get<std::vector<std::string>>("families", {"v_stripes", "checker"}))
        mix.weights.push_back({parse_family(f), 1.0});
    mix.periods = r.cfg.get<std::vector<std::uint32_t>>("periods", {2});
    mix.deltas = r.cfg.get<std::vector<std::uint32_t>>("deltas", {});
    mix.bases = r.cfg.get<std::vector<TokenId>>(bases_key, {});
    return mix;
}

/// Token grids from DIR/*.nwit (sorted by name), captions from matching .txt files.
inline std::vector<Sample> read_data_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw DataError("data directory '" + dir + "' does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".nwit") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no .nwit files in '" + dir + "'");
    std::vector<Sample> out;
    for (const auto& f : files) {
        Sample s{load_nwit(f.string()), {}};
        auto txt = f;
        txt.replace_extension(".txt");
        if (fs::exists(txt)) {
            std::ifstream is(txt);
            std::stringstream ss;
            ss << is.rdbuf();
            try {
                s.caption = tokenize_caption(ss.str());
            } catch (const UsageError& e) {
                throw DataError(txt.string() + ": " + e.what());
            }
        }
        if (!out.empty() && !(s.grid.dims() == out.front().grid.dims()))
            throw DataError(f.string() + ": grid dimensions differ from the first file");
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<Sample> synth_samples(Run& r, const GridDims& dims, std::size_t count, std::uint64_t seed,
                                         const std::string& bases_key) {
    std::vector<Sample> out;
    for (auto& p : synth_dataset(family_mix(r, bases_key), count, dims, seed))
        out.push_back({std::move(p.grid), std::move(p.caption)});
    return out;
}

inline void fit_text(std::vector<Sample>& data, const ModelConfig& mc) {
    for (auto& s : data) {
        if (!mc.has_text()) s.caption.clear();
        for (auto id : s.caption)
            if (id >= mc.text_vocab) throw ConfigError("caption word id exceeds the model's text vocabulary");
    }
}

inline std::string checkpoint_dtype(const std::string& prefix) {
    const auto j = patchar::detail::read_json(prefix + ".config.json");
    return j.value("dtype", std::string("f64"));
}

template <class F>
int with_dtype(const std::string& dtype, F&& f) {
    if (dtype == "f64") return f(double{});
    if (dtype == "f32") return f(float{});
    throw ConfigError("dtype must be f64 or f32, got '" + dtype + "'");
}

inline TokenGrid read_condition(Run& r, const std::string& path, const ModelConfig& mc) {
    if (path.empty()) throw UsageError("--input is required");
    if (std::filesystem::path(path).extension() == ".ppm") {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw DataError("cannot open " + path);
        const Codebook book(mc.vocab, r.cfg.get<std::uint32_t>("m_pix", 4));
        return encode_image(read_ppm(is), mc.m_side, book);
    }
    return load_nwit(path);
}

inline Sampler sampler_of(Run& r) {
    const auto kind = r.cfg.str("sampler", "greedy");
    if (kind == "greedy") return Sampler::greedy();
    if (kind == "topk") {
        const auto k = r.cfg.get<std::int64_t>("topk", 8);
        const auto t = r.cfg.get<double>("temperature", 1.0);
        if (k < 1 || !(t > 0)) throw UsageError("--topk must be >= 1 and --temperature > 0");
        return Sampler::topk(static_cast<std::size_t>(k), t);
    }
    throw UsageError("unknown sampler '" + kind + "'");
}

template <class T>
Model<T> load_model(Run& r) {
    const auto ckpt = r.cfg.str("ckpt", "");
    if (ckpt.empty()) throw UsageError("--ckpt is required");
    auto mc = Model<T>::load_config(ckpt);
    if (r.cfg.has("mode")) mc.local_mode = parse_local_mode(r.cfg.str("mode", "ar"));
    if (r.cfg.has("pnar_rounds")) mc.pnar_rounds = r.cfg.get<std::uint32_t>("pnar_rounds", mc.pnar_rounds);
    mc.validate();
    Model<T> m(mc, 0);
    load_params(ckpt, m.params());
    return m;
}

inline void record_stats(Run& r, const GenStats& st) {
    std::size_t passes = 0, max_att = 0, cond = 0;
    for (const auto& s : st.steps) {
        passes += s.passes;
        max_att = std::max(max_att, s.attended_tokens);
        cond += s.condition;
    }
    r.metrics["patches"] = st.steps.size();
    r.metrics["condition_patches"] = cond;
    r.metrics["forward_passes"] = passes;
    r.metrics["max_attended_tokens"] = max_att;
    r.metrics["peak_pool"] = st.peak_pool;
}

inline void write_generation(Run& r, const TokenGrid& g, const ModelConfig& mc) {
    const Codebook book(mc.vocab, r.cfg.get<std::uint32_t>("m_pix", 4));
    if (const auto p = r.output(".nwit"); !p.empty()) save_nwit(p, g);
    if (const auto p = r.output(".ppm"); !p.empty()) save_ppm(p, decode_frames(g, book));
    const auto fam = classify_pattern(g);
    r.metrics["family"] = std::string(to_string(fam));
    r.out << "generated " << g.dims().h_p << "x" << g.dims().w_p << "x" << g.dims().f << " patches, family "
          << to_string(fam) << "\n";
}

// ---------------------------------------------------------------------------
// Commands.

inline int cmd_plan_order(Run& r) {
    const auto order = parse_scan_order(r.cfg.str("order", "omega"));
    const auto dims = parse_grid(r.cfg.str("grid", "3x3"), 1, 2);
    OrderPlan plan;
    const auto target = r.cfg.str("target", "");
    if (target.empty()) {
        plan = split_base(dims, order);
    } else {
        if (dims.f != 1) throw GeometryError("outpaint plans are single-frame");
        const auto t = parse_grid(target, 1, 2);
        const auto at = parse_place(r.cfg.str("place", "0,0"));
        plan = split_outpaint(t, {at.row, at.col, static_cast<std::int32_t>(dims.h_p), static_cast<std::int32_t>(dims.w_p)});
    }
    const auto text = render_plan_text(plan);
    r.out << text;
    if (const auto p = r.output(".txt"); !p.empty()) {
        std::ofstream os(p);
        os << text;
    }
    if (const auto p = r.output(".ppm"); !p.empty()) save_ppm(p, plan_heatmap(plan, r.cfg.get<std::size_t>("cell_px", 8)));
    r.metrics["patches"] = plan.size();
    r.metrics["prefix_len"] = plan.prefix_len;
    return 0;
}

inline int cmd_bench(Run& r) {
    const auto order = parse_scan_order(r.cfg.str("order", "omega"));
    const auto dims = parse_grid(r.cfg.str("grid", "4x32"), r.cfg.get<std::uint32_t>("m_side", 4), 64);
    const auto extent = parse_extent(r.cfg.str("extent", "2,2,0"));
    const bool no_pool = r.cfg.get<bool>("no_pool", false);
    const auto plan = split_base(dims, order);

    auto totals = [&](const std::vector<PoolStep>& steps) {
        std::size_t att = 0, peak = 0;
        for (const auto& s : steps) {
            att += s.attended_tokens;
            peak = std::max(peak, s.pool_size);
        }
        return json{{"attended_tokens_total", att}, {"peak_pool", peak}};
    };
    const auto pooled = simulate_pool(plan, extent, true);
    const auto full = simulate_pool(plan, extent, false);
    r.metrics["ncp"] = totals(pooled);
    r.metrics["full_history"] = totals(full);
    r.metrics["reported"] = no_pool ? "full_history" : "ncp";

    std::ostringstream csv;
    csv << "step,row,col,frame,n_context,attended_tokens,pool_size,evictions\n";
    const auto& steps = no_pool ? full : pooled;
    for (const auto& s : steps) {
        const auto& c = plan.sequence[s.step];
        csv << s.step << ',' << c.row << ',' << c.col << ',' << c.frame << ',' << s.n_context << ','
            << s.attended_tokens << ',' << s.pool_size << ',' << s.evictions << '\n';
    }
    if (const auto p = r.output(".csv"); !p.empty()) {
        std::ofstream os(p);
        os << csv.str();
        r.out << "ncp attended " << r.metrics["ncp"]["attended_tokens_total"] << " vs full history "
              << r.metrics["full_history"]["attended_tokens_total"] << "\n";
    } else {
        r.out << csv.str();
    }
    return 0;
}

inline int cmd_gradcheck(Run& r) {
    const auto cases = r.cfg.get<std::size_t>("cases", 50);
    const auto seed = seed_of(r);
    if (cases < 1) throw UsageError("--cases must be >= 1");
    auto results = check_ops<double>(cases, seed);
    results.push_back(check_patch_loss<double>(cases, seed + 1));
    bool ok = true;
    json per_op = json::object();
    for (const auto& c : results) {
        const bool pass = c.max_rel_error <= kGradTolerance;
        ok = ok && pass;
        per_op[c.op] = c.max_rel_error;
        r.out << std::left << std::setw(12) << c.op << " cases " << c.cases << "  max_rel " << std::scientific
              << std::setprecision(2) << c.max_rel_error << std::defaultfloat << (pass ? "  ok" : "  FAIL") << "\n";
    }
    r.metrics["max_rel_error"] = per_op;
    r.metrics["tolerance"] = kGradTolerance;
    r.metrics["passed"] = ok;
    return ok ? 0 : 3;
}

template <class T>
int train_typed(Run& r) {
    const auto seed = seed_of(r);
    const auto extent = parse_extent(r.cfg.str("extent", "2,2,0"));
    std::vector<Sample> data, heldout;
    const auto dir = r.cfg.str("data", "");
    if (!dir.empty()) {
        data = read_data_dir(dir);
        const auto& d = data.front().grid.dims();
        r.cfg.get<std::uint32_t>("m_side", d.m_side);
        r.cfg.get<std::uint32_t>("vocab", d.vocab);
    }
    const auto mc = model_config(r, extent);
    if (!dir.empty()) {
        const auto& d = data.front().grid.dims();
        if (d.m_side != mc.m_side || d.vocab != mc.vocab) throw ConfigError("data geometry disagrees with the model config");
        const std::size_t n_held = data.size() >= 2 ? std::max<std::size_t>(1, data.size() / 8) : 0;
        heldout.assign(data.end() - static_cast<std::ptrdiff_t>(n_held), data.end());
        if (n_held) data.resize(data.size() - n_held);
        else heldout = data;
    } else {
        const auto dims = parse_grid(r.cfg.str("grid", "2x2"), mc.m_side, mc.vocab);
        data = synth_samples(r, dims, r.cfg.get<std::size_t>("count", 256), seed + 2, "bases");
        heldout = synth_samples(r, dims, r.cfg.get<std::size_t>("heldout", 16), seed + 3, "heldout_bases");
    }
    fit_text(data, mc);
    fit_text(heldout, mc);

    TrainConfig tc;
    tc.batch_size = r.cfg.get<std::size_t>("batch", 32);
    tc.total_steps = r.cfg.get<std::size_t>("steps", 500);
    tc.lr = r.cfg.get<double>("lr", 3e-3);
    tc.warmup_frac = r.cfg.get<double>("warmup", 0.05);
    tc.loss_mode = parse_loss_mode(r.cfg.str("loss", "patch"));
    tc.extent = extent;
    tc.seed = seed + 1;
    if (r.cfg.has("order")) tc.orders = {parse_scan_order(r.cfg.str("order", "omega"))};
    if (tc.total_steps < 1) throw UsageError("--steps must be >= 1");

    Model<T> model(mc, seed);
    const auto order = tc.orders.front();
    const double before = eval_heldout(model, heldout, order);
    Trainer<T> trainer(model, tc);
    CounterRng shuffle(seed, 0x736875666c65ULL);
    std::vector<std::size_t> idx(data.size());
    double last = 0;
    std::size_t epochs = 0;
    while (trainer.optimizer_steps() < tc.total_steps) {
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[shuffle.below(i)]);
        for (std::size_t b = 0; b < idx.size() && trainer.optimizer_steps() < tc.total_steps; b += tc.batch_size) {
            std::vector<const Sample*> batch;
            for (std::size_t i = b; i < std::min(idx.size(), b + tc.batch_size); ++i) batch.push_back(&data[idx[i]]);
            double sum = 0;
            std::size_t n = 0;
            for (const auto& per : trainer.train_batch(batch))
                for (double l : per) sum += l, ++n;
            last = sum / static_cast<double>(n);
        }
        ++epochs;
    }
    const double after = eval_heldout(model, heldout, order);
    if (const auto ckpt = r.cfg.str("ckpt", ""); !ckpt.empty()) {
        const std::filesystem::path p(ckpt);
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
        model.save(ckpt);
        r.outputs.push_back(ckpt + ".config.json");
    }
    r.metrics["optimizer_steps"] = trainer.optimizer_steps();
    r.metrics["epochs"] = epochs;
    r.metrics["train_samples"] = data.size();
    r.metrics["last_batch_ce"] = last;
    r.metrics["heldout_ce_before"] = before;
    r.metrics["heldout_ce"] = after;
    r.metrics["baseline_ce"] = std::log(static_cast<double>(mc.vocab));
    r.out << "steps " << trainer.optimizer_steps() << "  held-out CE " << before << " -> " << after << " nats (ln "
          << mc.vocab << " = " << std::log(static_cast<double>(mc.vocab)) << ")\n";
    return 0;
}

template <class T>
int eval_typed(Run& r) {
    auto model = load_model<T>(r);
    const auto& mc = model.config();
    std::vector<Sample> data;
    if (const auto dir = r.cfg.str("data", ""); !dir.empty()) {
        data = read_data_dir(dir);
    } else {
        const auto dims = parse_grid(r.cfg.str("grid", "2x2"), mc.m_side, mc.vocab);
        data = synth_samples(r, dims, r.cfg.get<std::size_t>("count", 32), seed_of(r) + 3, "bases");
    }
    fit_text(data, mc);
    for (const auto& s : data)
        if (!s.grid.dims().same_layout(GridDims{1, 1, 1, mc.m_side, mc.vocab}))
            throw ConfigError("data geometry disagrees with the checkpoint");
    const double ce = eval_heldout(model, data, parse_scan_order(r.cfg.str("order", "omega")));
    r.metrics["ce"] = ce;
    r.metrics["baseline_ce"] = std::log(static_cast<double>(mc.vocab));
    r.metrics["samples"] = data.size();
    r.out << "CE " << ce << " nats over " << data.size() << " samples (ln " << mc.vocab << " = "
          << std::log(static_cast<double>(mc.vocab)) << ")\n";
    return 0;
}

template <class T>
int generate_typed(Run& r) {
    auto model = load_model<T>(r);
    const auto& mc = model.config();
    GenRequest req;
    req.sampler = sampler_of(r);
    req.seed = seed_of(r);
    req.order = parse_scan_order(r.cfg.str("order", "omega"));
    if (r.cfg.has("extent")) req.extent = parse_extent(r.cfg.str("extent", ""));

    if (r.command == "generate") {
        req.dims = parse_grid(r.cfg.str("grid", "2x2"), mc.m_side, mc.vocab);
        if (r.cfg.has("text")) {
            req.text = tokenize_caption(r.cfg.str("text", ""));
            req.task = req.dims.f > 1 ? Task::T2V : Task::T2I;
        } else {
            req.task = Task::Uncond;
        }
    } else if (r.command == "outpaint") {
        req.task = Task::Outpaint;
        req.condition = read_condition(r, r.cfg.str("input", ""), mc);
        const auto t = parse_grid(r.cfg.str("target", ""), mc.m_side, mc.vocab);
        if (t.f != 1) throw GeometryError("--target must be HxW");
        req.dims = t;
        req.placement = parse_place(r.cfg.str("place", "0,0"));
    } else {
        req.task = Task::Animate;
        req.condition = read_condition(r, r.cfg.str("input", ""), mc);
        const auto& c = req.condition->dims();
        req.dims = parse_grid(r.cfg.str("grid", std::to_string(c.h_p) + "x" + std::to_string(c.w_p) + "x4"), mc.m_side,
                              mc.vocab);
    }
    r.metrics["task"] = std::string(to_string(req.task));
    GenStats stats;
    const auto grid = generate(model, req, &stats);
    record_stats(r, stats);
    write_generation(r, grid, mc);
    return 0;
}

inline int dispatch(Run& r) {
    if (r.command == "plan-order") return cmd_plan_order(r);
    if (r.command == "bench") return cmd_bench(r);
    if (r.command == "gradcheck") return cmd_gradcheck(r);
    if (r.command == "train") return with_dtype(r.cfg.str("dtype", "f64"), [&](auto t) { return train_typed<decltype(t)>(r); });
    const auto ckpt = r.cfg.str("ckpt", "");
    if (ckpt.empty()) throw UsageError("--ckpt is required");
    const auto dtype = checkpoint_dtype(ckpt);
    if (r.command == "eval") return with_dtype(dtype, [&](auto t) { return eval_typed<decltype(t)>(r); });
    return with_dtype(dtype, [&](auto t) { return generate_typed<decltype(t)>(r); });
}

// ---------------------------------------------------------------------------
// Flag table and entry point.

enum class FlagKind { Text, Integer, Real, Switch };

struct FlagSpec {
    const char* name;  // without leading dashes
    FlagKind kind;
    const char* help;
    std::vector<std::string> commands;  // empty: every command
};

inline const std::vector<FlagSpec>& flag_table() {
    using K = FlagKind;
    const std::vector<std::string> gen{"generate", "outpaint", "animate"};
    static const std::vector<FlagSpec> t{
        {"config", K::Text, "JSON config file (flags override it)", {}},
        {"seed", K::Integer, "seed for every random stream", {}},
        {"out", K::Text, "output path prefix", {}},
        {"grid", K::Text, "canvas in patches, HxW or HxWxF", {"train", "generate", "animate", "plan-order", "bench", "eval"}},
        {"order", K::Text, "omega, omega_star, zeta or zeta_star", {"train", "generate", "animate", "plan-order", "bench", "eval"}},
        {"extent", K::Text, "context extent W,H,F", {"train", "generate", "outpaint", "animate", "bench"}},
        {"mode", K::Text, "local decoding: ar, nar or pnar", {"train", "generate", "outpaint", "animate"}},
        {"sampler", K::Text, "greedy or topk", gen},
        {"topk", K::Integer, "k for top-k sampling", gen},
        {"temperature", K::Real, "top-k temperature", gen},
        {"ckpt", K::Text, "checkpoint prefix", {"train", "generate", "outpaint", "animate", "eval"}},
        {"data", K::Text, "directory of .nwit grids with optional .txt captions", {"train", "eval"}},
        {"text", K::Text, "caption for text-conditioned generation", {"generate"}},
        {"place", K::Text, "top-left patch R,C of the condition", {"outpaint", "plan-order"}},
        {"target", K::Text, "outpaint canvas HxW", {"outpaint", "plan-order"}},
        {"input", K::Text, "condition grid (.nwit) or image (.ppm)", {"outpaint", "animate"}},
        {"no-pool", K::Switch, "report the full-history reference", {"bench"}},
        {"no-caches", K::Switch, "context reads token embeddings only", {"train"}},
        {"rpe-feed", K::Text, "relative position feed: pre or post", {"train"}},
        {"loss", K::Text, "patch or accumulated", {"train"}},
        {"steps", K::Integer, "optimizer steps", {"train"}},
        {"batch", K::Integer, "batch size", {"train"}},
        {"lr", K::Real, "peak learning rate", {"train"}},
        {"cases", K::Integer, "random cases per check", {"gradcheck"}},
    };
    return t;
}

inline json flag_value(const FlagSpec& f, const std::string& v) {
    const std::string flag = std::string("--") + f.name;
    switch (f.kind) {
        case FlagKind::Text: return v;
        case FlagKind::Switch: return true;
        case FlagKind::Integer: {
            if (!v.empty() && v[0] == '-') throw UsageError(flag + " must be non-negative");
            std::size_t used = 0;
            std::uint64_t x = 0;
            try {
                x = std::stoull(v, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != v.size()) throw UsageError(flag + ": '" + v + "' is not an integer");
            return x;
        }
        case FlagKind::Real: {
            std::size_t used = 0;
            double x = 0;
            try {
                x = std::stod(v, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != v.size() || !std::isfinite(x)) throw UsageError(flag + ": '" + v + "' is not a number");
            return x;
        }
    }
    return v;
}

/// Report path: <out>.report.json, else ./patchar_<command>_report.json.
inline std::string report_path(const std::string& command, const std::string& out) {
    if (!out.empty()) return out + ".report.json";
    return "patchar_" + (command.empty() ? std::string("none") : command) + "_report.json";
}

inline void write_report(const std::string& path, const json& report, std::ostream& err) {
    try {
        const std::filesystem::path p(path);
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw DataError("cannot write " + path);
        os << report.dump(2) << '\n';
    } catch (const std::exception& e) {
        err << "patchar: run report not written: " << e.what() << "\n";
    }
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    const auto t0 = std::chrono::steady_clock::now();
    CLI::App app{"patchar: patch-wise autoregressive generation with context pooling", "patchar"};
    app.require_subcommand(1, 1);
    app.fallthrough(false);

    const std::vector<std::pair<const char*, const char*>> commands{
        {"train", "train a model on synthetic patterns or a .nwit directory"},
        {"generate", "unconditional, text-to-image or text-to-video generation"},
        {"outpaint", "grow a condition image to a larger canvas"},
        {"animate", "continue a single frame into a video"},
        {"plan-order", "print a generation order as a matrix of step indices"},
        {"bench", "per-step context cost of a plan as CSV"},
        {"gradcheck", "finite-difference checks of every differentiable op"},
        {"eval", "held-out cross-entropy of a checkpoint"}};

    std::map<std::string, std::map<std::string, std::string>> values;
    std::map<std::string, std::map<std::string, bool>> switches;
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        subs[name] = sub;
        for (const auto& f : flag_table()) {
            if (!f.commands.empty() && std::find(f.commands.begin(), f.commands.end(), name) == f.commands.end()) continue;
            const std::string opt = std::string("--") + f.name;
            if (f.kind == FlagKind::Switch)
                sub->add_flag(opt, switches[name][f.name], f.help);
            else
                sub->add_option(opt, values[name][f.name], f.help);
        }
    }

    std::string command;
    std::string out_prefix;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (command.empty() && subs.count(a)) command = a;
        if (a == "--out" && i + 1 < argc) out_prefix = argv[i + 1];
        if (a.rfind("--out=", 0) == 0) out_prefix = a.substr(6);
    }

    json report{{"command", command}, {"argv", json::array()}};
    for (int i = 1; i < argc; ++i) report["argv"].push_back(argv[i]);
    int code = 0;
    std::string error;
    Run r{command, Settings{}, json::object(), {}, out, err};
    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            if (e.get_exit_code() == 0) return app.exit(e, out, err);  // --help
            throw UsageError(e.what());
        }
        for (const auto& [name, sub] : subs)
            if (sub->parsed()) command = name;
        r.command = command;

        json cfg = json::object();
        auto& vals = values[command];
        auto* sub = subs[command];
        if (sub->count("--config")) cfg = load_config_file(vals["config"]);
        for (const auto& f : flag_table()) {
            const std::string opt = std::string("--") + f.name;
            if (std::string(f.name) == "config") continue;
            if (!f.commands.empty() && std::find(f.commands.begin(), f.commands.end(), command) == f.commands.end()) continue;
            if (sub->count(opt) == 0) continue;
            std::string key = f.name;
            std::replace(key.begin(), key.end(), '-', '_');
            cfg[key] = flag_value(f, f.kind == FlagKind::Switch ? std::string() : vals[f.name]);
        }
        r.cfg = Settings(cfg);
        seed_of(r);
        out_prefix = r.out_prefix();
        code = dispatch(r);
    } catch (const Error& e) {
        code = exit_code_for(e.kind());
        error = e.what();
    } catch (const std::filesystem::filesystem_error& e) {
        code = 2;
        error = e.what();
    } catch (const std::exception& e) {
        code = 3;
        error = e.what();
    }
    if (!error.empty()) err << "patchar: " << error << "\n";

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& resolved = r.cfg.raw();
    report["command"] = command;
    report["seed"] = resolved.contains("seed") ? resolved["seed"] : json(nullptr);
    report["config"] = resolved;
    report["config_hash"] = hex64(fnv1a(resolved.dump()));
    report["timing"] = {{"wall_seconds", secs}};
    report["metrics"] = r.metrics;
    report["outputs"] = r.outputs;
    report["exit_code"] = code;
    report["error"] = error.empty() ? json(nullptr) : json(error);
    write_report(report_path(command, out_prefix), report, err);
    return code;
}

}  // namespace patchar::cli
