#pragma once

// MLP instantiations of the three networks: feature extractor (F.*),
// classifier (T.*) and domain discriminator (D.*), all stored in a single
// ParamVector.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedtail/autograd.hpp"

namespace fedtail::model {

using ad::Matrix;
using ad::ParamVector;
using ModelParams = ad::ParamVector;

struct ModelSpec {
  int input_dim = 2;
  std::vector<int> feature_dims{32, 16};
  int num_classes = 2;
  int num_domains = 2;
  std::array<int, 2> discriminator_dims{16, 16};
  std::uint64_t seed = 0;

  // Throws ConfigError on invalid dimensions.
  void validate() const;
  int feature_width() const { return feature_dims.back(); }
};

// Segment names: F.w{i}/F.b{i}, T.w0/T.b0, D.w{0,1,2}/D.b{0,1,2}.
// Weights are fan_in x fan_out, biases 1 x fan_out.
ad::LayoutPtr make_layout(const ModelSpec& spec);

// Glorot-uniform weights, zero biases, deterministic per spec.seed.
ModelParams init(const ModelSpec& spec);

// ---- graph pieces ----------------------------------------------------------

ad::Var features(ad::Tape& tape, const ModelSpec& spec, ad::Var x);
ad::Var class_logits(ad::Tape& tape, const ModelSpec& spec, ad::Var feats);
// Discriminator head over reversed features: gradients flowing back into F.*
// are scaled by -grl_lambda, D.* gradients are untouched.
ad::Var domain_logits(ad::Tape& tape, const ModelSpec& spec, ad::Var feats, double grl_lambda);

// ---- plain forward passes --------------------------------------------------

Matrix embed(const ModelSpec& spec, const ModelParams& params, const Matrix& x);
Matrix forward_probs(const ModelSpec& spec, const ModelParams& params, const Matrix& x);
Matrix forward_domain(const ModelSpec& spec, const ModelParams& params, const Matrix& x,
                      double grl_lambda = 1.0);

// ---- checkpoint format -----------------------------------------------------
//
// One JSON header line describing the layout and the named blobs, then
// blobs.size() * layout.size() little-endian f64 values, blob after blob.

struct NamedParams {
  std::string name;
  ModelParams params;
};

void save_params(const std::filesystem::path& path, const std::vector<NamedParams>& blobs);
void save_params(const std::filesystem::path& path, const ModelParams& params);
std::vector<NamedParams> load_params(const std::filesystem::path& path);

}  // namespace fedtail::model
