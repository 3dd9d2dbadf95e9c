#pragma once

// Umbrella command-line suite: one executable, one subcommand per workflow
// (dataset synthesis, split generation, the training phases, inference,
// evaluation, attribute generation), all state through files.

#include <filesystem>
#include <string>
#include <vector>

namespace ovdet::cli {

struct CommandOutcome {
  int exit_code = 0;
  std::vector<std::filesystem::path> artifacts;
  std::vector<std::string> summary;
};

/// Parses argv, runs the selected subcommand, prints the outcome (or a JSON
/// object under --json), and returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace ovdet::cli
