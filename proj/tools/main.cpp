// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "patchar/cli.hpp"

int main(int argc, char** argv) { return patchar::cli::run(argc, argv, std::cout, std::cerr); }
