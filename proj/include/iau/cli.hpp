#pragma once

#include <string>
#include <vector>

// Command-line entry point: gen, train, eval, gradcheck, inspect.
namespace iau::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 2,         // invalid arguments or configuration
  kIo = 3,            // unreadable or unwritable files
  kNumeric = 4,       // non-finite loss during training
  kVerification = 5,  // gradient check above tolerance
};

// args excludes the program name. Log verbosity comes from IAU_LOG_LEVEL
// (error, info or debug; info when unset).
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace iau::cli
