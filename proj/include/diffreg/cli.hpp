#pragma once

#include "diffreg/error.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace diffreg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

/// Usage-class errors map to 2, file errors to 3, numerical failures to 4.
int exit_code_for(ErrorKind kind);

/// Runs one subcommand; `args` excludes the program name. Primary outputs are
/// staged and only moved into place when the command succeeds.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace diffreg::cli
