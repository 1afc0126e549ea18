#pragma once

// Multi-domain long-tailed synthetic data, the on-disk dataset format,
// stratified splits and class-frequency statistics.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedtail/autograd.hpp"
#include "fedtail/errors.hpp"
#include "fedtail/losses.hpp"

namespace fedtail::data {

class DegenerateSpec : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Malformed dataset file. `line` is 1-based (0 when not line-specific).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Well-formed file that disagrees with the experiment's C or d.
class SchemaError : public Error {
 public:
  using Error::Error;
};

struct DomainDataset {
  int domain_id = 0;
  std::string name;
  int num_classes = 0;
  ad::Matrix x;  // n x d
  std::vector<int> y;
  std::vector<std::size_t> class_counts;
  // Disjoint, together covering [0, n). Both empty until split().
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;

  std::size_t size() const { return y.size(); }
  int dim() const { return static_cast<int>(x.cols); }
  bool is_split() const { return !train.empty() || !val.empty(); }

  loss::Batch batch(std::span<const std::size_t> indices) const;
  loss::Batch all() const;
  // Recomputes class_counts from labels.
  void recount();
};

struct SynthSpec {
  int num_domains = 4;
  int num_classes = 6;
  int feature_dim = 8;
  int samples_per_class_max = 100;
  double imbalance_ratio = 10.0;
  // Per-domain shift, spread symmetrically over domains: domain i gets
  // u_i = 2i/(K-1) - 1 in [-1, 1], rotation u_i * max_rotation_deg in the
  // class plane, scale 1 + u_i * scale_spread, and a translation of norm
  // translation_norm in a seeded random direction.
  double max_rotation_deg = 20.0;
  double translation_norm = 2.0;
  double scale_spread = 0.3;
  // Radius of the class-prototype circle and within-class latent noise.
  double class_radius = 2.0;
  double class_noise = 0.6;
  // Isotropic noise added in all d observed dimensions.
  double feature_noise = 0.1;
  double label_noise = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
};

// n_c = round(n_max * r^(-c / (C - 1))).
std::vector<std::size_t> class_sample_counts(const SynthSpec& spec);

// One unsplit dataset per domain, samples grouped by class.
std::vector<DomainDataset> gen_synthetic(const SynthSpec& spec);

// Stratified split: per class about train_frac of the samples go to train,
// with at least one sample on each side for classes of size >= 2.
DomainDataset split(DomainDataset dataset, double train_frac, std::uint64_t seed);

// Relative class frequencies over the training split (all samples when the
// dataset has not been split).
std::vector<double> class_frequencies(const DomainDataset& dataset);
// Raw class counts over the training split.
std::vector<double> train_class_counts(const DomainDataset& dataset);

struct ExpectedSchema {
  std::optional<int> num_classes;
  std::optional<int> dim;
};

// Text format: a JSON header line {"version":1,"domain":..,"C":..,"d":..,"n":..}
// followed by n lines "label,f0,...,f{d-1}". Lines starting with '#' are
// comments.
DomainDataset load_dataset_file(const std::filesystem::path& path, const ExpectedSchema& expected = {});
DomainDataset parse_dataset(std::string_view text, const ExpectedSchema& expected = {});
void save_dataset_file(const std::filesystem::path& path, const DomainDataset& dataset);
std::string format_dataset(const DomainDataset& dataset);

}  // namespace fedtail::data
