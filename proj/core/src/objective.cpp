#include "fedtail/objective.hpp"

#include <cmath>
#include <mutex>

#include <spdlog/spdlog.h>

#include "fedtail/random.hpp"

namespace fedtail::objective {

TermSet TermSet::ladder(int row) {
  if (row < 1 || row > 5) throw ConfigError("ablation ladder rows are 1..5");
  return {true, row >= 2, row >= 3, row >= 4, row >= 5};
}

std::vector<std::string> TermSet::names() const {
  std::vector<std::string> out;
  if (cls) out.emplace_back("cls");
  if (adv) out.emplace_back("adv");
  if (sharp_er) out.emplace_back("sharp_er");
  if (classwise) out.emplace_back("classwise");
  if (coh) out.emplace_back("coh");
  return out;
}

void FedTailConfig::validate() const {
  if (!(rho > 0.0)) throw ConfigError("fedtail.rho must be > 0");
  if (!(alpha >= 0.0)) throw ConfigError("fedtail.alpha must be >= 0");
  if (!(grl_lambda >= 0.0)) throw ConfigError("fedtail.grl_lambda must be >= 0");
  if (power_iters < 1) throw ConfigError("fedtail.power_iters must be >= 1");
  if (curvature_refresh_period < 1) throw ConfigError("fedtail.curvature_refresh_period must be >= 1");
  if (!(teacher_momentum >= 0.0 && teacher_momentum < 1.0))
    throw ConfigError("fedtail.teacher_momentum must lie in [0, 1)");
}

// ---- Q_T -------------------------------------------------------------------

std::span<const double> QTDistribution::row(int domain) const {
  if (domain < 0 || static_cast<std::size_t>(domain) >= rows.size())
    throw DimMismatch("no Q_T row for domain " + std::to_string(domain));
  return rows[static_cast<std::size_t>(domain)];
}

QTDistribution estimate_qt(const std::vector<std::vector<double>>& class_counts) {
  QTDistribution qt;
  qt.provenance = QTDistribution::Provenance::Frequency;
  for (std::size_t d = 0; d < class_counts.size(); ++d) {
    double total = 0.0;
    for (double c : class_counts[d]) {
      if (!(c >= 0.0)) throw ConfigError("class counts must be >= 0");
      total += c;
    }
    if (!(total > 0.0)) throw EmptyDomain("domain " + std::to_string(d) + " has no samples");
    std::vector<double> row;
    row.reserve(class_counts[d].size());
    for (double c : class_counts[d]) row.push_back(c / total);
    qt.rows.push_back(std::move(row));
  }
  return qt;
}

QTDistribution teacher_qt(const ModelSpec& spec, const ParamVector& teacher, const Batch& batch) {
  const auto probs = model::forward_probs(spec, teacher, batch.x);
  const auto c = static_cast<std::size_t>(spec.num_classes);
  QTDistribution qt;
  qt.provenance = QTDistribution::Provenance::Teacher;
  qt.rows.assign(static_cast<std::size_t>(spec.num_domains), std::vector<double>(c, 1.0 / static_cast<double>(c)));
  auto& row = qt.rows[static_cast<std::size_t>(batch.domain_id)];
  std::fill(row.begin(), row.end(), 0.0);
  for (std::size_t n = 0; n < probs.rows; ++n)
    for (std::size_t j = 0; j < c; ++j) row[j] += probs(n, j);
  for (double& v : row) v /= static_cast<double>(probs.rows);
  return qt;
}

// ---- curvature -------------------------------------------------------------

CurvatureState CurvatureState::cold(int num_classes, std::uint64_t seed) {
  CurvatureState s;
  const auto c = static_cast<std::size_t>(num_classes);
  s.sigma_max.assign(c, 0.0);
  s.gamma.assign(c, 1.0);
  s.vectors.assign(c, {});
  s.seed = seed;
  return s;
}

double curvature_gamma(double sigma_max) { return 1.0 / (1.0 + std::max(sigma_max, 0.0)); }

CurvatureState curvature_weights(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                                 int power_iters, std::uint64_t seed, const CurvatureState* previous) {
  batch.validate(spec);
  CurvatureState state = previous ? *previous : CurvatureState::cold(spec.num_classes, seed);
  state.seed = seed;
  for (int c = 0; c < spec.num_classes; ++c) {
    if (!batch.has_class(c)) continue;
    const Batch sub = batch.restrict_to_class(c);
    const auto key = derive_key(state.seed, static_cast<std::uint64_t>(state.refreshes) * 4096u +
                                                static_cast<std::uint64_t>(c));
    const auto& warm = state.vectors[static_cast<std::size_t>(c)];
    const auto est = ad::power_iteration(loss::cls_objective(spec, sub), params, power_iters, key, warm);
    state.sigma_max[static_cast<std::size_t>(c)] = est.value;
    state.gamma[static_cast<std::size_t>(c)] = curvature_gamma(est.value);
    if (!est.vector.empty()) state.vectors[static_cast<std::size_t>(c)] = est.vector;
  }
  ++state.refreshes;
  return state;
}

// ---- coherence -------------------------------------------------------------

namespace {

using Scope = std::span<const std::pair<std::size_t, std::size_t>>;

Gradient project(const Gradient& g, Scope scope) {
  if (scope.empty()) return g;
  Gradient out = Gradient::zeros_like(g);
  for (auto [begin, end] : scope)
    for (std::size_t i = begin; i < end; ++i) out[i] = g[i];
  return out;
}

struct Coherence {
  double dot = 0.0;
  ValueGrad value;
};

Coherence coherence_from(const ad::Builder& first, const ad::Builder& second, const ParamVector& params,
                         const Gradient& g1, const Gradient& g2, double alpha, Scope scope) {
  if (!(alpha >= 0.0)) throw ConfigError("coherence alpha must be >= 0");
  const Gradient p1 = project(g1, scope);
  const Gradient p2 = project(g2, scope);
  Coherence out;
  out.dot = ad::dot(p1, p2);
  out.value.value = -alpha * out.dot;
  out.value.grad = Gradient::zeros_like(g1);
  if (alpha == 0.0) return out;
  if (p2.norm() > 0.0) ad::axpy_inplace(-alpha, ad::hvp(first, params, p2).values(), out.value.grad.values());
  if (p1.norm() > 0.0) ad::axpy_inplace(-alpha, ad::hvp(second, params, p1).values(), out.value.grad.values());
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> scope_ranges(const ParamVector& params, CoherenceScope scope) {
  if (scope == CoherenceScope::Full) return {};
  return params.layout()->ranges_with_prefix("F.");
}

}  // namespace

ValueGrad coherence_loss(const ad::Builder& first, const ad::Builder& second, const ParamVector& params,
                         double alpha, Scope scope) {
  const Gradient g1 = ad::gradient(first, params);
  const Gradient g2 = ad::gradient(second, params);
  return coherence_from(first, second, params, g1, g2, alpha, scope).value;
}

ValueGrad coherence_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch, double alpha,
                         double grl_lambda, CoherenceScope scope) {
  batch.validate(spec);
  const auto ranges = scope_ranges(params, scope);
  return coherence_loss(loss::cls_objective(spec, batch), loss::adv_objective(spec, batch, grl_lambda), params,
                        alpha, ranges);
}

// ---- class-wise sharpness --------------------------------------------------

Gradient classwise_perturbation(const ModelSpec& spec, const ParamVector& params, const Batch& batch, int c,
                                double rho) {
  batch.validate(spec);
  if (!batch.has_class(c)) throw ClassAbsent("class " + std::to_string(c) + " absent from batch");
  const Batch sub = batch.restrict_to_class(c);
  return loss::sam_perturbation(ad::gradient(loss::cls_objective(spec, sub), params), rho);
}

ClasswiseResult classwise_sharp_losses(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                                       double rho, const CurvatureState& curvature, bool plain) {
  batch.validate(spec);
  const auto num_classes = static_cast<std::size_t>(spec.num_classes);
  if (curvature.gamma.size() != num_classes) throw DimMismatch("curvature state has the wrong class count");

  ClasswiseResult out;
  out.per_class.assign(num_classes, 0.0);
  out.present.assign(num_classes, false);
  out.grad = Gradient(params.layout());
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (!batch.has_class(static_cast<int>(c))) continue;
    const Batch sub = batch.restrict_to_class(static_cast<int>(c));
    const auto objective = loss::cls_objective(spec, sub);
    ValueGrad vg = ad::value_and_gradient(objective, params);
    if (!plain) vg = ad::value_and_gradient(objective, ad::shifted(params, 1.0, loss::sam_perturbation(vg.grad, rho)));
    const double gamma = curvature.gamma[c];
    out.present[c] = true;
    out.per_class[c] = vg.value;
    out.weighted += gamma * vg.value;
    ad::axpy_inplace(gamma, vg.grad.values(), out.grad.values());
  }
  return out;
}

// ---- sharpness-aware conditional alignment ---------------------------------

namespace {

std::vector<double> log_reference(std::span<const double> q) {
  bool clamped = false;
  std::vector<double> fixed(q.begin(), q.end());
  for (double& v : fixed)
    if (!(v >= 1e-8)) {
      v = 1e-8;
      clamped = true;
    }
  if (clamped) {
    static std::once_flag warned;
    std::call_once(warned, [] { spdlog::warn("Q_T has zero-probability classes; clamping at 1e-8 and renormalizing"); });
    double total = 0.0;
    for (double v : fixed) total += v;
    for (double& v : fixed) v /= total;
  }
  for (double& v : fixed) v = std::log(v);
  return fixed;
}

ValueGrad sharp_er_from(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                        const QTDistribution& qt, double rho, const Gradient& cls_grad) {
  const auto q = qt.row(batch.domain_id);
  if (q.size() != static_cast<std::size_t>(spec.num_classes)) throw DimMismatch("Q_T row has the wrong class count");
  ad::Matrix logq(1, q.size(), log_reference(q));
  const ParamVector perturbed = ad::shifted(params, 1.0, loss::sam_perturbation(cls_grad, rho));
  auto objective = [&](ad::Tape& tape) {
    auto f = model::features(tape, spec, tape.constant(batch.x));
    auto pbar = tape.mean_rows(tape.softmax(model::class_logits(tape, spec, f)));
    return tape.dot(pbar, tape.sub(tape.log(pbar), tape.constant(logq)));
  };
  return ad::value_and_gradient(objective, perturbed);
}

}  // namespace

ValueGrad sharp_er_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                        const QTDistribution& qt, double rho) {
  batch.validate(spec);
  const Gradient g = ad::gradient(loss::cls_objective(spec, batch), params);
  return sharp_er_from(spec, params, batch, qt, rho, g);
}

// ---- total objective -------------------------------------------------------

TotalLoss total_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                     const FedTailConfig& cfg, const QTDistribution& qt, const CurvatureState& curvature) {
  cfg.validate();
  batch.validate(spec);
  const TermSet& on = cfg.terms;
  const TermWeights& w = cfg.weights;

  TotalLoss out;
  out.grad = Gradient(params.layout());
  auto& b = out.breakdown;
  auto accumulate = [&](double weight, double value, const Gradient& grad) {
    b.total += weight * value;
    ad::axpy_inplace(weight, grad.values(), out.grad.values());
  };

  const auto cls_obj = loss::cls_objective(spec, batch);
  const auto adv_obj = loss::adv_objective(spec, batch, cfg.grl_lambda);

  std::optional<ValueGrad> cls;
  if (on.cls || on.sharp_er || on.coh) cls = ad::value_and_gradient(cls_obj, params);
  std::optional<ValueGrad> adv;
  if (on.adv || on.coh) adv = ad::value_and_gradient(adv_obj, params);

  if (on.cls) {
    b.cls = cls->value;
    accumulate(w.cls, b.cls, cls->grad);
  }
  if (on.adv) {
    b.adv = adv->value;
    b.adv_log_likelihood = -adv->value;
    accumulate(w.adv, b.adv, adv->grad);
  }
  if (on.sharp_er) {
    const ValueGrad er = sharp_er_from(spec, params, batch, qt, cfg.rho, cls->grad);
    b.sharp_er = er.value;
    accumulate(w.sharp_er, b.sharp_er, er.grad);
  }
  if (on.classwise) {
    const ClasswiseResult cw = classwise_sharp_losses(spec, params, batch, cfg.rho, curvature, cfg.classwise_plain);
    b.classwise = cw.per_class;
    b.classwise_total = cw.weighted;
    b.gamma = curvature.gamma;
    accumulate(w.classwise, b.classwise_total, cw.grad);
  }
  if (on.coh) {
    const auto ranges = scope_ranges(params, cfg.coherence_scope);
    const Coherence coh = coherence_from(cls_obj, adv_obj, params, cls->grad, adv->grad, cfg.alpha, ranges);
    b.coh = coh.value.value;
    b.coherence_dot = coh.dot;
    accumulate(w.coh, b.coh, coh.value.grad);
  }
  if (!std::isfinite(b.total)) throw NonFiniteLoss("total loss is non-finite");
  if (!out.grad.all_finite()) throw NonFiniteGradient("total gradient is non-finite");
  return out;
}

}  // namespace fedtail::objective
