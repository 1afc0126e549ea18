#pragma once

// Leave-one-domain-out orchestration over seeds, and the five-row ablation
// ladder built on top of it.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedtail/data.hpp"
#include "fedtail/federated.hpp"
#include "fedtail/model.hpp"
#include "fedtail/objective.hpp"

namespace fedtail::exp {

struct ExperimentSpec {
  data::SynthSpec synth;
  // When set, domains are read from every *.data file in this directory
  // (sorted by file name) instead of being generated.
  std::optional<std::filesystem::path> data_dir;

  // input_dim, num_classes and num_domains are filled in from the data.
  model::ModelSpec model;

  fl::SGDConfig sgd;
  // Explicit learning rate; otherwise lr_sam when a sharpness term is on
  // and lr_base when not.
  std::optional<double> lr;
  double lr_sam = 0.01;
  double lr_base = 0.001;

  objective::FedTailConfig fedtail;

  int rounds = 30;
  int num_seeds = 3;
  std::uint64_t seed = 0;
  std::string held_out = "all";
  fl::Aggregation aggregation = fl::Aggregation::Weighted;
  double train_frac = 0.9;
  int threads = 1;
  bool record_timing = false;

  void validate() const;
  fl::SGDConfig resolved_sgd() const;
};

// One line of metrics.jsonl.
struct MetricsRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string held_out;
  int round = 0;
  objective::LossBreakdown losses;
  double accuracy = 0.0;
  double macro_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<double> gamma;
  double coherence_dot = 0.0;
  std::vector<double> client_val_accuracy;
  int participating = 0;
  std::optional<double> wall_ms;
};

// Final-round outcome of one (seed, held-out domain) run.
struct SplitOutcome {
  std::uint64_t seed = 0;
  std::string held_out;
  double accuracy = 0.0;
  double macro_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
};

struct ExperimentResult {
  std::vector<std::string> domain_names;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricsRecord> records;
  std::vector<SplitOutcome> finals;

  // Mean over held-out splits of the final accuracy, per seed (seed order).
  std::vector<double> per_seed_mean_accuracy() const;
  // Same for the macro accuracy restricted to `classes`.
  std::vector<double> per_seed_mean_class_accuracy(const std::vector<int>& classes) const;
};

struct RunKey {
  std::uint64_t seed = 0;
  std::string held_out;
};

// Called after every round with the post-aggregation server state.
using RoundHook = std::function<void(const RunKey&, const fl::ServerState&)>;

// Loads or generates the domains for one seed.
std::vector<data::DomainDataset> make_domains(const ExperimentSpec& spec, std::uint64_t seed);

ExperimentResult run_experiment(const ExperimentSpec& spec, const RoundHook& hook = {});

// ---- ablation --------------------------------------------------------------

struct AblationRow {
  int row = 0;
  std::string label;
  objective::TermSet terms;
  ExperimentResult result;
};

const std::vector<std::string>& ladder_labels();

// Runs the five ladder rows with shared seeds; every other setting comes
// from `spec` unchanged.
std::vector<AblationRow> run_ablation(const ExperimentSpec& spec);

// Classes in the tail third (highest class indices; rarest under the
// long-tail profile).
std::vector<int> tail_classes(int num_classes);

double mean(const std::vector<double>& v);
// Sample standard deviation (n - 1); 0 for fewer than two values.
double stddev(const std::vector<double>& v);

}  // namespace fedtail::exp
