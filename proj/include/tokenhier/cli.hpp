#pragma once

#include <iosfwd>

namespace tokenhier {

/// Stable process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitVerifyFailed = 1,
  kExitUsage = 2,
  kExitData = 3,
};

/// Entry point of the `tokenhier` command line tool.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tokenhier
