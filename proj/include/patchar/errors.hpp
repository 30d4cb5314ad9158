// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace patchar {

/// Coarse error classes. The CLI maps them onto process exit codes.
enum class ErrorKind {
    Usage,        // bad flags, text given to a text-less model, ...
    Range,        // index or id outside its domain
    Geometry,     // placement/rectangle/image size mismatch
    Shape,        // tensor shape mismatch
    Config,       // model/data configuration disagreement
    Data,         // malformed files
    Sequencing,   // pool/plan operations out of order
    State,        // duplicate insertion and similar
    MissingOffset,
    DegenerateRow,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define PATCHAR_DEFINE_ERROR(Name, Kind)                                       \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
    };

PATCHAR_DEFINE_ERROR(UsageError, Usage)
PATCHAR_DEFINE_ERROR(RangeError, Range)
PATCHAR_DEFINE_ERROR(GeometryError, Geometry)
PATCHAR_DEFINE_ERROR(ShapeError, Shape)
PATCHAR_DEFINE_ERROR(ConfigError, Config)
PATCHAR_DEFINE_ERROR(DataError, Data)
PATCHAR_DEFINE_ERROR(SequencingError, Sequencing)
PATCHAR_DEFINE_ERROR(StateError, State)
PATCHAR_DEFINE_ERROR(MissingOffsetError, MissingOffset)
PATCHAR_DEFINE_ERROR(DegenerateRowError, DegenerateRow)

#undef PATCHAR_DEFINE_ERROR

}  // namespace patchar
