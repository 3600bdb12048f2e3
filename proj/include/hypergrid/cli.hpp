#pragma once

// Command-line front end: train, eval, sweep, gradcheck, param-audit.
// Exit codes: 0 success, 1 validation failure, 2 runtime or numeric failure.

#include <ostream>
#include <string>
#include <vector>

#include "hypergrid/config.hpp"

namespace hgrid {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

/// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Per-variant parameter audit at the configured dims (none, L, L2, LG, GL, outgate).
std::string param_audit(const RunConfig& config);

}  // namespace hgrid
