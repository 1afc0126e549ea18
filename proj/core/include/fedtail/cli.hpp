#pragma once

// Experiment harness behind the `fedtail` command-line tool: JSON config
// with dotted overrides, the four subcommands and their output files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtail/experiment.hpp"

namespace fedtail::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kNumericalError = 3,
};

struct Options {
  std::filesystem::path config;
  std::vector<std::string> sets;  // "dotted.key=value"
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = ".";
  int checkpoint_every = 0;
  std::optional<int> threads;
  std::filesystem::path checkpoint;  // export-embeddings only
};

// Reads FEDTAIL_LOG (error|info|debug) and routes logs to stderr.
void init_logging();

nlohmann::json load_config(const std::filesystem::path& path);
// Sets a dotted key; the value is parsed as JSON and kept as a string when
// that fails.
void apply_override(nlohmann::json& config, const std::string& assignment);
exp::ExperimentSpec spec_from_json(const nlohmann::json& config);
// Config file + overrides + --seed/--threads.
exp::ExperimentSpec resolve_spec(const Options& options);

nlohmann::ordered_json to_json(const exp::MetricsRecord& record);
std::string metrics_jsonl(const std::vector<exp::MetricsRecord>& records);
std::string summary_csv(const exp::ExperimentResult& result);
std::string ablation_csv(const std::vector<exp::AblationRow>& rows);

int run(const Options& options);
int ablation(const Options& options);
int export_embeddings(const Options& options);
int gen_data(const Options& options);

}  // namespace fedtail::cli
