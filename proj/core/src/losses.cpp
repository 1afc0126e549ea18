#include "fedtail/losses.hpp"

#include <algorithm>
#include <cmath>

namespace fedtail::loss {

void Batch::validate(const ModelSpec& spec) const {
  if (y.empty()) throw DimMismatch("empty batch");
  if (x.rows != y.size()) throw DimMismatch("batch x rows do not match label count");
  if (x.cols != static_cast<std::size_t>(spec.input_dim))
    throw DimMismatch("batch feature width " + std::to_string(x.cols) + " != model input " +
                      std::to_string(spec.input_dim));
  for (int label : y)
    if (label < 0 || label >= spec.num_classes) throw DimMismatch("label out of range");
  if (domain_id < 0 || domain_id >= spec.num_domains) throw DimMismatch("domain id out of range");
}

Batch Batch::restrict_to_class(int c) const {
  Batch out;
  out.domain_id = domain_id;
  out.x.cols = x.cols;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != c) continue;
    auto r = x.row(i);
    out.x.data.insert(out.x.data.end(), r.begin(), r.end());
    out.y.push_back(c);
  }
  out.x.rows = out.y.size();
  return out;
}

bool Batch::has_class(int c) const { return std::find(y.begin(), y.end(), c) != y.end(); }

// ---- objectives ------------------------------------------------------------

ad::Builder cls_objective(const ModelSpec& spec, const Batch& batch) {
  return [&spec, &batch](ad::Tape& tape) {
    auto f = model::features(tape, spec, tape.constant(batch.x));
    auto logp = tape.log_softmax(model::class_logits(tape, spec, f));
    return -tape.mean(tape.pick(logp, batch.y));
  };
}

ad::Builder adv_objective(const ModelSpec& spec, const Batch& batch, double grl_lambda) {
  return [&spec, &batch, grl_lambda](ad::Tape& tape) {
    auto f = model::features(tape, spec, tape.constant(batch.x));
    auto logp = tape.log_softmax(model::domain_logits(tape, spec, f, grl_lambda));
    return -tape.mean(tape.pick(logp, std::vector<int>(batch.size(), batch.domain_id)));
  };
}

ValueGrad cls_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  batch.validate(spec);
  return ad::value_and_gradient(cls_objective(spec, batch), params);
}

ValueGrad adv_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                   double grl_lambda) {
  batch.validate(spec);
  return ad::value_and_gradient(adv_objective(spec, batch, grl_lambda), params);
}

double adv_log_likelihood(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  return -ad::evaluate(adv_objective(spec, batch, 1.0), params);
}

// ---- SAM family ------------------------------------------------------------

Gradient sam_perturbation(const Gradient& grad, double rho) {
  if (!(rho > 0.0)) throw ConfigError("rho must be > 0");
  const double n = grad.norm();
  if (n < 1e-12) return Gradient::zeros_like(grad);
  return ad::scale(rho / n, grad);
}

ValueGrad sam_loss(const ad::Builder& objective, const ParamVector& params, double rho) {
  const Gradient g = ad::gradient(objective, params);
  return ad::value_and_gradient(objective, ad::shifted(params, 1.0, sam_perturbation(g, rho)));
}

ValueGrad sam_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch, double rho) {
  batch.validate(spec);
  return sam_loss(cls_objective(spec, batch), params, rho);
}

double surrogate_gap(const ad::Builder& objective, const ParamVector& params, double rho) {
  const ValueGrad base = ad::value_and_gradient(objective, params);
  const double perturbed = ad::evaluate(objective, ad::shifted(params, 1.0, sam_perturbation(base.grad, rho)));
  return perturbed - base.value;
}

double surrogate_gap(const ModelSpec& spec, const ParamVector& params, const Batch& batch, double rho) {
  batch.validate(spec);
  return surrogate_gap(cls_objective(spec, batch), params, rho);
}

ValueGrad sagm_loss(const ad::Builder& objective, const ParamVector& params, double rho, double alpha) {
  const ValueGrad base = ad::value_and_gradient(objective, params);
  const ParamVector perturbed_params = ad::shifted(params, 1.0, sam_perturbation(base.grad, rho));
  const ValueGrad perturbed = ad::value_and_gradient(objective, perturbed_params);

  const double inner = ad::dot(base.grad, perturbed.grad);
  ValueGrad out{base.value + perturbed.value - alpha * inner, ad::axpy(1.0, base.grad, perturbed.grad)};
  if (alpha != 0.0) {
    if (perturbed.grad.norm() > 0.0)
      ad::axpy_inplace(-alpha, ad::hvp(objective, params, perturbed.grad).values(), out.grad.values());
    if (base.grad.norm() > 0.0)
      ad::axpy_inplace(-alpha, ad::hvp(objective, perturbed_params, base.grad).values(), out.grad.values());
  }
  return out;
}

ValueGrad sagm_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch, double rho,
                    double alpha) {
  batch.validate(spec);
  return sagm_loss(cls_objective(spec, batch), params, rho, alpha);
}

// ---- probability-space losses ----------------------------------------------

double max_square_loss(const Matrix& probs) {
  if (probs.rows == 0) throw DimMismatch("empty probability matrix");
  // Each row's sum of squares is accumulated in doubled precision (error-free
  // products and sums) so it is rounded once; rows are then averaged around
  // the first one. Uniform rows come out at exactly 1/C this way.
  auto row_sum_sq = [&](std::size_t n) {
    double hi = 0.0, lo = 0.0;
    for (double p : probs.row(n)) {
      const double prod = p * p;
      const double prod_err = std::fma(p, p, -prod);
      const double s = hi + prod;
      const double t = s - hi;
      lo += (hi - (s - t)) + (prod - t) + prod_err;
      hi = s;
    }
    return hi + lo;
  };
  const double first = row_sum_sq(0);
  double shift = 0.0;
  for (std::size_t n = 1; n < probs.rows; ++n) shift += row_sum_sq(n) - first;
  return -0.5 * (first + shift / static_cast<double>(probs.rows));
}

Matrix max_square_grad(const Matrix& probs) {
  Matrix g = probs;
  const double n = static_cast<double>(probs.rows);
  for (double& v : g.data) v = -v / n;
  return g;
}

ad::Var max_square(ad::Tape& tape, ad::Var probs) {
  const double n = static_cast<double>(probs.rows());
  return tape.scale(tape.sum(tape.square(probs)), -1.0 / (2.0 * n));
}

double entropy_loss(const Matrix& probs) {
  if (probs.rows == 0) throw DimMismatch("empty probability matrix");
  double acc = 0.0;
  for (double p : probs.data)
    if (p > 0.0) acc -= p * std::log(p);
  return acc / static_cast<double>(probs.rows);
}

ad::Var entropy(ad::Tape& tape, ad::Var probs) {
  const double n = static_cast<double>(probs.rows());
  return tape.scale(tape.sum(tape.mul(probs, tape.log(probs))), -1.0 / n);
}

}  // namespace fedtail::loss
