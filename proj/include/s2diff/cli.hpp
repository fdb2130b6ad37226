// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

namespace s2diff::cli {

// Entry point behind the s2diff binary. Subcommands: demos, train, eval,
// ablate, report, mock-perception. Option precedence is flags over config
// file over defaults, and the resolved configuration is written into every
// output directory as run_config.json.
//
// Returns 0 on success, 1 on a usage error, 2 on a runtime error.
int run(int argc, const char* const* argv);

// Same, from program arguments without the leading program name.
int run(const std::vector<std::string>& args);

}  // namespace s2diff::cli
