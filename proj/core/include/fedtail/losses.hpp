#pragma once

// Building-block and baseline objectives. Each batch objective is available
// as an ad::Builder (for composition and curvature probing) and as a
// value-plus-gradient function.

#include <vector>

#include "fedtail/autograd.hpp"
#include "fedtail/model.hpp"

namespace fedtail::loss {

using ad::Gradient;
using ad::Matrix;
using ad::ParamVector;
using ad::ValueGrad;
using model::ModelSpec;

struct Batch {
  Matrix x;            // N x d
  std::vector<int> y;  // N labels in [0, C)
  int domain_id = 0;

  std::size_t size() const { return y.size(); }
  // Throws DimMismatch on an empty batch, bad labels or wrong feature width.
  void validate(const ModelSpec& spec) const;
  // Rows whose label is `c`, in batch order.
  Batch restrict_to_class(int c) const;
  bool has_class(int c) const;
};

// Mean negative log-likelihood of the true labels.
ad::Builder cls_objective(const ModelSpec& spec, const Batch& batch);
// Mean cross-entropy of the discriminator against the batch's domain label,
// with gradient reversal into F.*.
ad::Builder adv_objective(const ModelSpec& spec, const Batch& batch, double grl_lambda);

ValueGrad cls_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch);
ValueGrad adv_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                   double grl_lambda);

// Literal log-likelihood form mean log D(F(x))_domain (= -adv); diagnostic only.
double adv_log_likelihood(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

// ---- sharpness-aware family ------------------------------------------------

// rho * g / ||g||, or zero when ||g|| < 1e-12.
Gradient sam_perturbation(const Gradient& grad, double rho);

// L(theta + eps(theta)); gradient is grad L at theta + eps (eps held fixed).
ValueGrad sam_loss(const ad::Builder& objective, const ParamVector& params, double rho);
ValueGrad sam_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch, double rho);

// L_p(theta) - L(theta).
double surrogate_gap(const ad::Builder& objective, const ParamVector& params, double rho);
double surrogate_gap(const ModelSpec& spec, const ParamVector& params, const Batch& batch, double rho);

// L + L_p - alpha <grad L, grad L_p>. The inner-product gradient is
// H g_p + H_p g with both Hessian actions taken by finite differences and
// the dependence of eps on theta ignored.
ValueGrad sagm_loss(const ad::Builder& objective, const ParamVector& params, double rho, double alpha);
ValueGrad sagm_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch, double rho,
                    double alpha);

// ---- probability-space losses ----------------------------------------------

// -(1 / 2N) sum_n sum_c p_{n,c}^2
double max_square_loss(const Matrix& probs);
// Analytic dL/dp = -p / N.
Matrix max_square_grad(const Matrix& probs);
ad::Var max_square(ad::Tape& tape, ad::Var probs);

// Mean row Shannon entropy (natural log).
double entropy_loss(const Matrix& probs);
ad::Var entropy(ad::Tape& tape, ad::Var probs);

}  // namespace fedtail::loss
