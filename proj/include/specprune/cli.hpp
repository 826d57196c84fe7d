#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace specprune {

inline constexpr const char* kToolVersion = "0.1.0";

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitError = 1, kExitInfeasible = 2 };

/// Runs one command: train | spectrum | prune | eval | sweep | report.
/// `args` excludes the program name. Options may also come from a flat
/// key = value file given by --config; command-line flags take precedence.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace specprune
