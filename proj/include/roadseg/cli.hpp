#pragma once

// The `roadseg` command-line tool: dataset statistics, split, augmentation,
// GAN training and sampling, segmentation training and evaluation.

#include <iosfwd>

namespace roadseg::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

/// Parses argv (argv[0] is the program name) and runs one subcommand. Help and
/// usage go to `out`; structured JSON-line logs and errors go to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace roadseg::cli
