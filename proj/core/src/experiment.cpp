#include "fedtail/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <thread>

#include <spdlog/spdlog.h>

#include "fedtail/random.hpp"

namespace fedtail::exp {

void ExperimentSpec::validate() const {
  if (!data_dir) synth.validate();
  if (model.feature_dims.empty()) throw ConfigError("model.feature_dims must not be empty");
  for (int w : model.feature_dims)
    if (w < 1) throw ConfigError("model.feature_dims entries must be >= 1");
  for (int w : model.discriminator_dims)
    if (w < 1) throw ConfigError("model.discriminator_dims entries must be >= 1");
  sgd.validate();
  if (lr && !(*lr >= 0.0)) throw ConfigError("sgd.lr must be >= 0");
  if (!(lr_sam >= 0.0) || !(lr_base >= 0.0)) throw ConfigError("sgd.lr_sam and sgd.lr_base must be >= 0");
  fedtail.validate();
  if (!fedtail.terms.cls) throw ConfigError("the enabled loss terms must include cls");
  if (rounds < 1) throw ConfigError("experiment.rounds must be >= 1");
  if (num_seeds < 1) throw ConfigError("experiment.num_seeds must be >= 1");
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("experiment.train_frac must lie in (0, 1)");
  if (threads < 0) throw ConfigError("experiment.threads must be >= 0");
}

fl::SGDConfig ExperimentSpec::resolved_sgd() const {
  fl::SGDConfig out = sgd;
  out.lr = lr ? *lr : (fedtail.terms.uses_sharpness() ? lr_sam : lr_base);
  return out;
}

// ---- statistics ------------------------------------------------------------

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

std::vector<int> tail_classes(int num_classes) {
  const int count = std::max(1, static_cast<int>(std::lround(num_classes / 3.0)));
  std::vector<int> out;
  for (int c = num_classes - count; c < num_classes; ++c) out.push_back(c);
  return out;
}

std::vector<double> ExperimentResult::per_seed_mean_accuracy() const {
  std::vector<double> out;
  for (auto s : seeds) {
    std::vector<double> acc;
    for (const auto& f : finals)
      if (f.seed == s) acc.push_back(f.accuracy);
    out.push_back(mean(acc));
  }
  return out;
}

std::vector<double> ExperimentResult::per_seed_mean_class_accuracy(const std::vector<int>& classes) const {
  std::vector<double> out;
  for (auto s : seeds) {
    std::vector<double> per_split;
    for (const auto& f : finals) {
      if (f.seed != s) continue;
      std::vector<double> vals;
      for (int c : classes) {
        const double v = f.per_class_accuracy[static_cast<std::size_t>(c)];
        if (!std::isnan(v)) vals.push_back(v);
      }
      per_split.push_back(mean(vals));
    }
    out.push_back(mean(per_split));
  }
  return out;
}

// ---- domains ---------------------------------------------------------------

std::vector<data::DomainDataset> make_domains(const ExperimentSpec& spec, std::uint64_t seed) {
  std::vector<data::DomainDataset> domains;
  if (spec.data_dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(*spec.data_dir))
      if (entry.is_regular_file() && entry.path().extension() == ".data") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.size() < 2) throw ConfigError("data_dir needs at least two .data files: " + spec.data_dir->string());
    data::ExpectedSchema schema;
    for (const auto& f : files) {
      auto ds = data::load_dataset_file(f, schema);
      schema.num_classes = ds.num_classes;
      schema.dim = ds.dim();
      ds.domain_id = static_cast<int>(domains.size());
      domains.push_back(std::move(ds));
    }
  } else {
    data::SynthSpec synth = spec.synth;
    synth.seed = derive_key(spec.synth.seed, seed);
    domains = data::gen_synthetic(synth);
  }
  for (auto& d : domains)
    d = data::split(std::move(d), spec.train_frac, derive_key(seed, 0x5b0000 + static_cast<std::uint64_t>(d.domain_id)));
  return domains;
}

// ---- one leave-one-domain-out run ------------------------------------------

namespace {

using DomainSet = std::shared_ptr<const std::vector<std::shared_ptr<const data::DomainDataset>>>;

struct Job {
  std::uint64_t seed = 0;
  int held_out = 0;
  DomainSet domains;
};

struct JobOutput {
  std::vector<MetricsRecord> records;
  SplitOutcome final;
};

JobOutput run_job(const ExperimentSpec& spec, const Job& job, const RoundHook& hook) {
  const auto& domains = *job.domains;
  const auto& target = *domains[static_cast<std::size_t>(job.held_out)];

  model::ModelSpec mspec = spec.model;
  mspec.input_dim = target.dim();
  mspec.num_classes = target.num_classes;
  mspec.num_domains = static_cast<int>(domains.size());
  mspec.seed = derive_key(spec.model.seed, job.seed);
  mspec.validate();

  std::vector<fl::ClientState> clients;
  std::vector<std::vector<double>> counts;
  for (const auto& d : domains) {
    if (d->domain_id == job.held_out) {
      // Never read: no client carries the held-out domain id.
      counts.emplace_back(static_cast<std::size_t>(mspec.num_classes), 1.0);
      continue;
    }
    counts.push_back(data::train_class_counts(*d));
    fl::ClientState c;
    c.client_id = d->domain_id;
    c.domain_id = d->domain_id;
    c.dataset = d;
    c.seed = derive_key(job.seed, 0xc11e00 + static_cast<std::uint64_t>(job.held_out) * 64 +
                                      static_cast<std::uint64_t>(d->domain_id));
    clients.push_back(std::move(c));
  }

  auto server = fl::ServerState::start(model::init(mspec), objective::estimate_qt(counts));
  fl::RoundOptions options;
  options.ctx.spec = &mspec;
  options.ctx.sgd = spec.resolved_sgd();
  options.ctx.fedtail = spec.fedtail;
  options.aggregation = spec.aggregation;
  options.threads = spec.threads == 0 ? static_cast<int>(std::max(1u, std::thread::hardware_concurrency())) : spec.threads;

  const RunKey key{job.seed, target.name};
  JobOutput out;
  for (int r = 0; r < spec.rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const fl::RoundReport report = fl::run_round(server, clients, options, &target);
    const auto t1 = std::chrono::steady_clock::now();

    MetricsRecord rec;
    rec.run_id = "seed" + std::to_string(job.seed) + "-" + target.name;
    rec.seed = job.seed;
    rec.held_out = target.name;
    rec.round = report.round;
    rec.losses = report.mean_losses;
    rec.accuracy = report.held_out.accuracy;
    rec.macro_accuracy = report.held_out.macro_accuracy;
    rec.per_class_accuracy = report.held_out.per_class;
    rec.gamma = report.gamma;
    rec.coherence_dot = report.coherence_dot;
    for (const auto& c : report.clients) rec.client_val_accuracy.push_back(c.val.accuracy);
    rec.participating = report.participating;
    if (spec.record_timing) rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    out.records.push_back(std::move(rec));
    if (hook) hook(key, server);
  }
  const auto& last = out.records.back();
  out.final = {job.seed, target.name, last.accuracy, last.macro_accuracy, last.per_class_accuracy};
  spdlog::info("seed {} held-out {}: accuracy {:.4f} macro {:.4f}", job.seed, target.name, last.accuracy,
               last.macro_accuracy);
  return out;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, const RoundHook& hook) {
  spec.validate();
  ExperimentResult result;
  std::vector<Job> jobs;
  for (int k = 0; k < spec.num_seeds; ++k) {
    const std::uint64_t seed = spec.seed + static_cast<std::uint64_t>(k);
    result.seeds.push_back(seed);
    auto loaded = make_domains(spec, seed);
    auto shared = std::make_shared<std::vector<std::shared_ptr<const data::DomainDataset>>>();
    for (auto& d : loaded) shared->push_back(std::make_shared<const data::DomainDataset>(std::move(d)));
    if (k == 0)
      for (const auto& d : *shared) result.domain_names.push_back(d->name);

    bool matched = false;
    for (const auto& d : *shared) {
      if (spec.held_out != "all" && spec.held_out != d->name) continue;
      matched = true;
      jobs.push_back({seed, d->domain_id, shared});
    }
    if (!matched) throw ConfigError("held_out domain '" + spec.held_out + "' not found");
  }

  // Jobs run one after another; --threads parallelizes the clients of a round.
  std::vector<JobOutput> outputs;
  outputs.reserve(jobs.size());
  for (const auto& job : jobs) outputs.push_back(run_job(spec, job, hook));

  for (auto& o : outputs) {
    std::move(o.records.begin(), o.records.end(), std::back_inserter(result.records));
    result.finals.push_back(std::move(o.final));
  }
  return result;
}

// ---- ablation --------------------------------------------------------------

const std::vector<std::string>& ladder_labels() {
  static const std::vector<std::string> labels{"Baseline", "+ Adv", "+ Sharp-er", "+ Class Bal.", "+ Coherence"};
  return labels;
}

std::vector<AblationRow> run_ablation(const ExperimentSpec& spec) {
  std::vector<AblationRow> rows;
  for (int r = 1; r <= 5; ++r) {
    ExperimentSpec s = spec;
    s.fedtail.terms = objective::TermSet::ladder(r);
    spdlog::info("ablation row {} ({})", r, ladder_labels()[static_cast<std::size_t>(r - 1)]);
    rows.push_back({r, ladder_labels()[static_cast<std::size_t>(r - 1)], s.fedtail.terms, run_experiment(s)});
  }
  return rows;
}

}  // namespace fedtail::exp
