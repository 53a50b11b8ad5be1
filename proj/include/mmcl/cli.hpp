#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mmcl {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit codes shared by every subcommand.
enum ExitCode : int {
  kExitOk = 0,
  kExitInputError = 2,
  kExitMissingInput = 3,
  kExitNumericFailure = 4,
};

// Entry point of the `mmcl` tool. args excludes the program name.
// Machine-readable results go to `out` as single-line JSON, logs to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmcl
