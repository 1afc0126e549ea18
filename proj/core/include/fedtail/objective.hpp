#pragma once

// The FedTAIL objective: gradient coherence between classification and
// adversarial gradients, class-wise sharpness with curvature-aware weights,
// sharpness-aware conditional alignment against a per-domain class
// distribution, and their weighted sum.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedtail/autograd.hpp"
#include "fedtail/losses.hpp"
#include "fedtail/model.hpp"

namespace fedtail::objective {

using ad::Gradient;
using ad::ParamVector;
using ad::ValueGrad;
using loss::Batch;
using model::ModelSpec;

class ClassAbsent : public Error {
 public:
  using Error::Error;
};

class EmptyDomain : public Error {
 public:
  using Error::Error;
};

enum class QtMode { Frequency, MomentumTeacher };
enum class CoherenceScope { Features, Full };

struct TermSet {
  bool cls = true;
  bool adv = true;
  bool sharp_er = true;
  bool classwise = true;
  bool coh = true;

  static TermSet only_cls() { return {true, false, false, false, false}; }
  // Row r (1-based) of the ablation ladder: {cls}, +adv, +sharp-er,
  // +classwise, +coh.
  static TermSet ladder(int row);
  bool uses_sharpness() const { return sharp_er || classwise; }
  std::vector<std::string> names() const;
  friend bool operator==(const TermSet&, const TermSet&) = default;
};

struct TermWeights {
  double cls = 1.0;
  double adv = 1.0;
  double sharp_er = 1.0;
  double classwise = 1.0;
  double coh = 1.0;
};

struct FedTailConfig {
  double rho = 0.05;
  double alpha = 0.1;
  double grl_lambda = 1.0;
  int power_iters = 10;
  int curvature_refresh_period = 10;
  QtMode qt_mode = QtMode::Frequency;
  double teacher_momentum = 0.99;
  // Weight gamma_c onto the plain class loss instead of the class-wise SAM loss.
  bool classwise_plain = false;
  CoherenceScope coherence_scope = CoherenceScope::Features;
  TermSet terms;
  TermWeights weights;

  void validate() const;
};

// Per-domain reference class distribution for conditional alignment.
struct QTDistribution {
  enum class Provenance { Frequency, Teacher };

  std::vector<std::vector<double>> rows;
  Provenance provenance = Provenance::Frequency;

  std::span<const double> row(int domain) const;
};

// Q_T[d][c] = count[d][c] / sum_c count[d][c]. Throws EmptyDomain when a
// domain has no positive count.
QTDistribution estimate_qt(const std::vector<std::vector<double>>& class_counts);

// Q_T row for batch.domain_id from the teacher's batch-mean prediction;
// every other domain row is uniform.
QTDistribution teacher_qt(const ModelSpec& spec, const ParamVector& teacher, const Batch& batch);

struct CurvatureState {
  std::vector<double> sigma_max;
  std::vector<double> gamma;
  // Warm-start vectors for the next power iteration, one per class (empty
  // until the class has been probed).
  std::vector<std::vector<double>> vectors;
  long last_refresh = -1;
  long refreshes = 0;
  std::uint64_t seed = 0;

  // gamma = 1 for every class.
  static CurvatureState cold(int num_classes, std::uint64_t seed = 0);
};

// 1 / (1 + max(sigma, 0)).
double curvature_gamma(double sigma_max);

// ---- individual terms ------------------------------------------------------

// -alpha <P g1, P g2> where P keeps the ranges in `scope` (all of theta when
// empty). Gradient: -alpha (H1 P g2 + H2 P g1) via finite-difference Hessian
// actions.
ValueGrad coherence_loss(const ad::Builder& first, const ad::Builder& second, const ParamVector& params,
                         double alpha, std::span<const std::pair<std::size_t, std::size_t>> scope = {});

ValueGrad coherence_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch, double alpha,
                         double grl_lambda, CoherenceScope scope = CoherenceScope::Features);

// rho * grad L_c / ||grad L_c|| with L_c the class loss on class-c samples.
// Throws ClassAbsent when the batch holds no sample of class c.
Gradient classwise_perturbation(const ModelSpec& spec, const ParamVector& params, const Batch& batch, int c,
                                double rho);

struct ClasswiseResult {
  // Per-class loss at theta + eps_c (plain loss at theta in plain mode);
  // zero for absent classes.
  std::vector<double> per_class;
  std::vector<bool> present;
  // sum_c gamma_c * per_class[c]
  double weighted = 0.0;
  Gradient grad;
};

ClasswiseResult classwise_sharp_losses(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                                       double rho, const CurvatureState& curvature, bool plain = false);

// Probes each class present in `batch` with power iteration on its class
// loss; classes without samples keep their previous value (or gamma = 1).
CurvatureState curvature_weights(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                                 int power_iters, std::uint64_t seed, const CurvatureState* previous = nullptr);

// KL(P_hat || Q_T[domain]) with P_hat the batch-mean class distribution at
// theta + eps, eps the SAM perturbation of the classification gradient.
ValueGrad sharp_er_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                        const QTDistribution& qt, double rho);

// ---- composition -----------------------------------------------------------

struct LossBreakdown {
  double cls = 0.0;
  double adv = 0.0;
  double sharp_er = 0.0;
  std::vector<double> classwise;
  double classwise_total = 0.0;
  double coh = 0.0;
  double total = 0.0;
  // Diagnostics.
  double coherence_dot = 0.0;
  std::vector<double> gamma;
  double adv_log_likelihood = 0.0;
};

struct TotalLoss {
  LossBreakdown breakdown;
  Gradient grad;
};

TotalLoss total_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                     const FedTailConfig& cfg, const QTDistribution& qt, const CurvatureState& curvature);

}  // namespace fedtail::objective
