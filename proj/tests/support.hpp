#pragma once

// Independent reference implementations used as test oracles. Nothing in
// here touches the tape: forward passes are plain loops and derivatives are
// central finite differences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedtail/autograd.hpp"
#include "fedtail/losses.hpp"
#include "fedtail/model.hpp"
#include "fedtail/random.hpp"

namespace fedtail::testing {

using ad::Matrix;
using ad::ParamVector;
using model::ModelSpec;

// Init plus a random bias offset so no layer sits at the symmetric point.
inline ParamVector random_params(const ModelSpec& spec, std::uint64_t seed, double bias_scale = 0.3) {
  ParamVector p = model::init(spec);
  CounterRng rng(seed, 0xb1a5);
  for (const auto& s : p.layout()->segments()) {
    if (s.name.find(".b") == std::string::npos) continue;
    for (std::size_t i = 0; i < s.length(); ++i) p[s.offset + i] = bias_scale * rng.normal();
  }
  return p;
}

inline loss::Batch random_batch(const ModelSpec& spec, std::size_t n, std::uint64_t seed, int domain = 0) {
  CounterRng rng(seed, 0xba7c);
  loss::Batch b;
  b.x = Matrix(n, static_cast<std::size_t>(spec.input_dim));
  for (double& v : b.x.data) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) b.y.push_back(static_cast<int>(i % static_cast<std::size_t>(spec.num_classes)));
  b.domain_id = domain;
  return b;
}

// ---- graph-free forward pass -----------------------------------------------

inline std::vector<double> dense(const std::vector<double>& in, const ParamVector& p, const std::string& w,
                                 const std::string& b, bool relu) {
  const auto& seg = p.layout()->find(w);
  const auto W = p.segment(w);
  const auto B = p.segment(b);
  std::vector<double> out(seg.cols);
  for (std::size_t j = 0; j < seg.cols; ++j) {
    double acc = B[j];
    for (std::size_t i = 0; i < seg.rows; ++i) acc += in[i] * W[i * seg.cols + j];
    out[j] = relu ? std::max(acc, 0.0) : acc;
  }
  return out;
}

inline std::vector<double> oracle_features(const ModelSpec& spec, const ParamVector& p, std::span<const double> x) {
  std::vector<double> h(x.begin(), x.end());
  for (std::size_t l = 0; l < spec.feature_dims.size(); ++l)
    h = dense(h, p, "F.w" + std::to_string(l), "F.b" + std::to_string(l), true);
  return h;
}

inline std::vector<double> oracle_softmax(std::vector<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) s += (v = std::exp(v - m));
  for (double& v : z) v /= s;
  return z;
}

inline std::vector<double> oracle_class_probs(const ModelSpec& spec, const ParamVector& p, std::span<const double> x) {
  return oracle_softmax(dense(oracle_features(spec, p, x), p, "T.w0", "T.b0", false));
}

inline std::vector<double> oracle_domain_probs(const ModelSpec& spec, const ParamVector& p, std::span<const double> x) {
  auto h = oracle_features(spec, p, x);
  h = dense(h, p, "D.w0", "D.b0", true);
  h = dense(h, p, "D.w1", "D.b1", true);
  return oracle_softmax(dense(h, p, "D.w2", "D.b2", false));
}

inline double oracle_cls_loss(const ModelSpec& spec, const ParamVector& p, const loss::Batch& b) {
  double acc = 0.0;
  for (std::size_t n = 0; n < b.size(); ++n)
    acc -= std::log(oracle_class_probs(spec, p, b.x.row(n))[static_cast<std::size_t>(b.y[n])]);
  return acc / static_cast<double>(b.size());
}

inline double oracle_adv_loss(const ModelSpec& spec, const ParamVector& p, const loss::Batch& b) {
  double acc = 0.0;
  for (std::size_t n = 0; n < b.size(); ++n)
    acc -= std::log(oracle_domain_probs(spec, p, b.x.row(n))[static_cast<std::size_t>(b.domain_id)]);
  return acc / static_cast<double>(b.size());
}

// Domain cross-entropy through the discriminator without the reversal node,
// i.e. the true derivative of oracle_adv_loss.
inline ad::Builder plain_adv_objective(const ModelSpec& spec, const loss::Batch& batch) {
  return [&spec, &batch](ad::Tape& t) {
    auto h = model::features(t, spec, t.constant(batch.x));
    h = t.relu(t.add_row(t.matmul(h, t.param("D.w0")), t.param("D.b0")));
    h = t.relu(t.add_row(t.matmul(h, t.param("D.w1")), t.param("D.b1")));
    auto logits = t.add_row(t.matmul(h, t.param("D.w2")), t.param("D.b2"));
    return t.scale(t.sum(t.pick(t.log_softmax(logits), std::vector<int>(batch.size(), batch.domain_id))),
                   -1.0 / static_cast<double>(batch.size()));
  };
}

// ---- finite differences ----------------------------------------------------

template <typename F>
std::vector<double> fd_gradient(F&& f, const ParamVector& p, double h) {
  std::vector<double> g(p.size());
  ParamVector q = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    q[i] = p[i] + h;
    const double up = f(q);
    q[i] = p[i] - h;
    const double down = f(q);
    q[i] = p[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Dense Hessian, column by column, from central differences of autograd
// gradients; symmetrized.
inline Eigen::MatrixXd fd_hessian(const ad::Builder& builder, const ParamVector& p, double h) {
  const auto n = static_cast<Eigen::Index>(p.size());
  Eigen::MatrixXd H(n, n);
  ParamVector q = p;
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    q[ju] = p[ju] + h;
    const auto up = ad::gradient(builder, q);
    q[ju] = p[ju] - h;
    const auto down = ad::gradient(builder, q);
    q[ju] = p[ju];
    for (Eigen::Index i = 0; i < n; ++i)
      H(i, j) = (up[static_cast<std::size_t>(i)] - down[static_cast<std::size_t>(i)]) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose());
}

// Eigenvalue of largest magnitude.
inline double dominant_eigenvalue(const Eigen::MatrixXd& H) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(H, Eigen::EigenvaluesOnly);
  const auto& ev = solver.eigenvalues();
  double best = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (std::abs(ev[i]) > std::abs(best)) best = ev[i];
  return best;
}

// |a-b| / max(|a|, |b|, floor); the floor keeps near-zero coordinates from
// dominating.
inline double rel_err(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// ½θᵀAθ for diagonal A, on a one-segment layout.
inline ad::LayoutPtr vector_layout(std::size_t n) {
  auto l = std::make_shared<ad::Layout>();
  l->add("theta", 1, n);
  return l;
}

inline ad::Builder diag_quadratic(std::vector<double> diag) {
  return [diag = std::move(diag)](ad::Tape& t) {
    auto th = t.param("theta");
    auto a = t.constant(Matrix(1, diag.size(), diag));
    return t.scale(t.sum(t.mul(a, t.square(th))), 0.5);
  };
}

}  // namespace fedtail::testing
