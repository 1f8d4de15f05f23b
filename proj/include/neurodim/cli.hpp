#pragma once

#include <ostream>

namespace neurodim {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDisagree = 3;
inline constexpr int kExitAbort = 4;

/// Runs the neurodim command line. JSON and CSV go to `out`, diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace neurodim
