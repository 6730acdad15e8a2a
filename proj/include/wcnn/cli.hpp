#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace wcnn {

/// Exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitError = 1, kExitUsage = 2, kExitNumerical = 3 };

/// Runs the `wcnn` command line. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace wcnn
