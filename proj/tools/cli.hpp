#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "geocap/model.hpp"

namespace geocap::cli {

/// Default output directory when neither a flag nor the config sets one.
inline constexpr const char* kOutputDirEnv = "GEOCAP_OUTPUT_DIR";

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

/// Settings shared by all commands. Flags override the config file, which
/// overrides the built-in defaults.
struct RunConfig {
  std::string dataset;
  std::string entities;
  std::string triples;
  std::string synonyms;
  std::string lexicon;
  std::string features_dir;
  std::string output_dir;
  ModelConfig model = ModelConfig::tiny();
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

/// INI text with sections [paths], [model] and [run]. Relative paths are
/// resolved against `base_dir`. Unknown keys are a ConfigError.
RunConfig parse_run_config(const std::string& text, const std::string& base_dir,
                           const std::string& source = "<memory>");
RunConfig load_run_config(const std::string& path);

/// Runs one command line (without the program name) and returns its exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace geocap::cli
