// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Checkpoints are three files sharing a prefix:
//   <prefix>.manifest.json  {name: {shape, dtype, byte_offset, byte_len}}
//   <prefix>.bin            raw little-endian parameter data
//   <prefix>.config.json    model configuration (written by the decoder)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchar/errors.hpp"
#include "patchar/optim.hpp"

namespace patchar {

template <class T>
constexpr const char* dtype_name() {
    static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>);
    return std::is_same_v<T, double> ? "f64" : "f32";
}

namespace detail {

template <class U, class T>
void put_le(std::vector<char>& out, T v) {
    U bits;
    std::memcpy(&bits, &v, sizeof(U));
    for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

template <class U, class T>
T get_le(const char* p) {
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<U>(static_cast<unsigned char>(p[b])) << (8 * b);
    T v;
    std::memcpy(&v, &bits, sizeof(U));
    return v;
}

template <class T>
using bits_of = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;

inline nlohmann::json read_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path);
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << j.dump(2) << '\n';
}

}  // namespace detail

template <class T>
void save_params(const std::string& prefix, const ParamStore<T>& store) {
    nlohmann::json manifest = nlohmann::json::object();
    std::vector<char> blob;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& p = store.at(i);
        const auto offset = blob.size();
        for (auto v : p.value.data) detail::put_le<detail::bits_of<T>>(blob, v);
        manifest[store.name(i)] = {{"shape", p.value.shape},
                                   {"dtype", dtype_name<T>()},
                                   {"byte_offset", offset},
                                   {"byte_len", blob.size() - offset}};
    }
    detail::write_json(prefix + ".manifest.json", manifest);
    std::ofstream os(prefix + ".bin", std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + prefix + ".bin for writing");
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

/// Loads values into an already-shaped store; every name must be present
/// with the same shape and dtype.
template <class T>
void load_params(const std::string& prefix, ParamStore<T>& store) {
    const auto manifest = detail::read_json(prefix + ".manifest.json");
    std::ifstream is(prefix + ".bin", std::ios::binary);
    if (!is) throw DataError("cannot open " + prefix + ".bin");
    const std::vector<char> blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (manifest.size() != store.size()) throw ConfigError("checkpoint parameter count does not match model");
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& name = store.name(i);
        if (!manifest.contains(name)) throw ConfigError("checkpoint lacks parameter '" + name + "'");
        const auto& e = manifest[name];
        auto& p = store.at(i);
        if (e.at("shape").template get<Shape>() != p.value.shape)
            throw ConfigError("checkpoint shape mismatch for '" + name + "'");
        if (e.at("dtype").template get<std::string>() != dtype_name<T>())
            throw ConfigError("checkpoint dtype mismatch for '" + name + "'");
        const auto off = e.at("byte_offset").template get<std::size_t>();
        const auto len = e.at("byte_len").template get<std::size_t>();
        if (len != p.value.size() * sizeof(T) || off + len > blob.size())
            throw DataError("checkpoint blob range invalid for '" + name + "'");
        for (std::size_t k = 0; k < p.value.size(); ++k)
            p.value.data[k] = detail::get_le<detail::bits_of<T>, T>(blob.data() + off + k * sizeof(T));
    }
}

}  // namespace patchar
