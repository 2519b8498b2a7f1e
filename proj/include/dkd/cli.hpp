#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dkd/corpus.hpp"
#include "dkd/distill.hpp"
#include "dkd/model.hpp"
#include "dkd/probe.hpp"
#include "dkd/trainer.hpp"

namespace dkd {

// Everything a subcommand may need; loaded from --config (JSON). Missing
// sections keep the desk defaults.
struct ExperimentConfig {
  CorpusParams corpus;
  EncoderConfig teacher = EncoderConfig::desk_teacher();
  std::uint64_t teacher_seed = 1;
  // Student backbone; heads follow the distill spec.
  EncoderConfig student = EncoderConfig::desk_student();
  DistillSpec distill;
  TrainConfig train = TrainConfig::desk();
  ProbeConfig probe;

  static ExperimentConfig desk();
  static ExperimentConfig reference();
};

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
// Throws ConfigError on malformed JSON, DataError when unreadable.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Parses "4,8,12"; throws SpecError on malformed entries.
std::vector<int> parse_layer_list(const std::string& text);

// Entry point of the `dkd` tool. args excludes the program name. Returns 0 on
// success, 1 on validation errors and bad usage (usage goes to `err`), 2 on
// runtime failures.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dkd
