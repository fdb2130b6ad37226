// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/cli.hpp"

int main(int argc, char** argv) { return s2diff::cli::run(argc, argv); }
