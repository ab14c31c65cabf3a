#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace seqcl::cli {

enum ExitCode : int { ok = 0, config_error = 2, runtime_error = 3 };

/// Parses `args` (without the program name) and runs one subcommand.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace seqcl::cli
