#pragma once

// Command-line front end: gen-data, train, eval, infer.
//
// Configuration files are flat `section.key = value` lines ('#' starts a
// comment) over two sections, `model` and `train`; `--set` applies the same
// syntax on the command line after the file.

#include <iosfwd>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>

#include "usmtl/network.hpp"
#include "usmtl/training.hpp"

namespace usmtl {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

/// Bad flag or configuration value; maps to kExitUsage.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Model defaults for a training profile: the full-size architecture for
/// "faithful", width 0.25 with a 3-tap global convolution for "desk".
[[nodiscard]] RunConfig default_run_config(std::string_view profile);

/// Applies one `section.key = value` assignment. Unknown keys and values of
/// the wrong type throw UsageError.
void apply_setting(RunConfig& config, std::string_view assignment);
/// Applies every assignment in a config file body.
void apply_config_text(RunConfig& config, std::string_view text);

[[nodiscard]] nlohmann::ordered_json run_config_json(const RunConfig& config);

/// Entry point shared by the executable and the tests; returns an ExitCode.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace usmtl
