#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tlam {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitNumerical = 2 };

/// Runs the command line `args` (args[0] is the program name). Normal output
/// goes to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tlam
