#include "fedtail/federated.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include <spdlog/spdlog.h>

#include "fedtail/random.hpp"

namespace fedtail::fl {

void SGDConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("sgd.lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd.momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("sgd.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("sgd.batch_size must be >= 1");
}

ServerState ServerState::start(ParamVector initial, QTDistribution qt) {
  ServerState s;
  s.teacher = initial;
  s.global = std::move(initial);
  s.qt = std::move(qt);
  return s;
}

// ---- local training --------------------------------------------------------

namespace {

void add_breakdown(LossBreakdown& acc, const LossBreakdown& b) {
  acc.cls += b.cls;
  acc.adv += b.adv;
  acc.sharp_er += b.sharp_er;
  if (acc.classwise.size() < b.classwise.size()) acc.classwise.resize(b.classwise.size(), 0.0);
  for (std::size_t c = 0; c < b.classwise.size(); ++c) acc.classwise[c] += b.classwise[c];
  acc.classwise_total += b.classwise_total;
  acc.coh += b.coh;
  acc.total += b.total;
  acc.coherence_dot += b.coherence_dot;
  acc.adv_log_likelihood += b.adv_log_likelihood;
}

void scale_breakdown(LossBreakdown& b, double s) {
  b.cls *= s;
  b.adv *= s;
  b.sharp_er *= s;
  for (double& v : b.classwise) v *= s;
  b.classwise_total *= s;
  b.coh *= s;
  b.total *= s;
  b.coherence_dot *= s;
  b.adv_log_likelihood *= s;
}

}  // namespace

LocalResult local_train_epoch(ClientState& client, const ParamVector& global, const TrainContext& ctx) {
  const ModelSpec& spec = *ctx.spec;
  const auto& ds = *client.dataset;
  if (ds.train.empty()) throw ConfigError("client " + std::to_string(client.client_id) + " has no training data");
  ctx.sgd.validate();

  LocalResult result;
  result.client_id = client.client_id;
  result.samples = ds.train.size();

  client.local = global;
  if (client.velocity.size() != global.size()) client.velocity.assign(global.size(), 0.0);
  if (client.curvature.gamma.size() != static_cast<std::size_t>(spec.num_classes))
    client.curvature = CurvatureState::cold(spec.num_classes, derive_key(client.seed, 0xc0));

  std::vector<std::size_t> order = ds.train;
  CounterRng rng(client.seed, 0x100000 + static_cast<std::uint64_t>(client.epochs));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  ++client.epochs;

  const auto& cfg = ctx.fedtail;
  const auto batch_size = static_cast<std::size_t>(ctx.sgd.batch_size);
  auto& theta = client.local.raw();
  try {
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const loss::Batch batch = ds.batch(std::span(order).subspan(start, end - start));

      if (cfg.terms.classwise && client.step % cfg.curvature_refresh_period == 0) {
        client.curvature = objective::curvature_weights(spec, client.local, batch, cfg.power_iters,
                                                        client.curvature.seed, &client.curvature);
        client.curvature.last_refresh = client.step;
      }

      objective::TotalLoss total;
      if (cfg.terms.sharp_er && cfg.qt_mode == objective::QtMode::MomentumTeacher) {
        if (!ctx.teacher) throw ConfigError("momentum_teacher mode needs teacher parameters");
        const auto qt = objective::teacher_qt(spec, *ctx.teacher, batch);
        total = objective::total_loss(spec, client.local, batch, cfg, qt, client.curvature);
      } else {
        total = objective::total_loss(spec, client.local, batch, cfg, *ctx.qt, client.curvature);
      }

      const auto& g = total.grad.raw();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        client.velocity[i] = ctx.sgd.momentum * client.velocity[i] + (g[i] + ctx.sgd.weight_decay * theta[i]);
        theta[i] -= ctx.sgd.lr * client.velocity[i];
      }
      if (!client.local.all_finite()) throw NonFiniteGradient("parameters became non-finite after SGD step");

      add_breakdown(result.mean_losses, total.breakdown);
      ++client.step;
      ++result.steps;
    }
  } catch (const NumericalError& e) {
    result.ok = false;
    result.error = e.what();
    spdlog::warn("client {} dropped from round: {}", client.client_id, e.what());
    return result;
  }
  if (result.steps > 0) scale_breakdown(result.mean_losses, 1.0 / result.steps);
  result.mean_losses.gamma = client.curvature.gamma;
  result.params = client.local;
  return result;
}

// ---- aggregation -----------------------------------------------------------

ParamVector fedavg(std::span<const Update> updates, Aggregation mode) {
  if (updates.empty()) throw EmptyUpdateSet("fedavg needs at least one update");
  const ParamVector& first = *updates.front().params;
  double total = 0.0;
  for (const auto& u : updates) {
    if (!(u.sample_count > 0.0)) throw ConfigError("fedavg sample counts must be > 0");
    if (u.params->size() != first.size() || !(*u.params->layout() == *first.layout()))
      throw LayoutMismatch("fedavg updates have different layouts");
    total += u.sample_count;
  }
  if (updates.size() == 1) return first;

  ParamVector out(first.layout());
  auto& acc = out.raw();
  for (const auto& u : updates) {
    const double w = mode == Aggregation::Weighted ? u.sample_count / total : 1.0 / static_cast<double>(updates.size());
    const auto& v = u.params->raw();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * v[i];
  }
  return out;
}

ParamVector teacher_update(const ParamVector& teacher, const ParamVector& global, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("teacher momentum must lie in [0, 1]");
  if (teacher.size() != global.size()) throw LayoutMismatch("teacher and global layouts differ");
  ParamVector out = teacher;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = momentum * teacher[i] + (1.0 - momentum) * global[i];
  return out;
}

void teacher_update(ServerState& server, double momentum) {
  server.teacher = teacher_update(server.teacher, server.global, momentum);
}

// ---- evaluation ------------------------------------------------------------

EvalResult evaluate(const ModelSpec& spec, const ParamVector& params, const data::DomainDataset& dataset,
                    std::span<const std::size_t> indices) {
  const auto num_classes = static_cast<std::size_t>(spec.num_classes);
  EvalResult out;
  out.count = indices.size();
  std::vector<std::size_t> seen(num_classes, 0), hit(num_classes, 0);
  if (!indices.empty()) {
    const auto batch = dataset.batch(indices);
    const auto probs = model::forward_probs(spec, params, batch.x);
    for (std::size_t n = 0; n < probs.rows; ++n) {
      const auto row = probs.row(n);
      const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      const auto label = static_cast<std::size_t>(batch.y[n]);
      ++seen[label];
      if (pred == label) ++hit[label];
    }
  }
  std::size_t hits = 0;
  double macro = 0.0;
  std::size_t present = 0;
  out.per_class.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < num_classes; ++c) {
    hits += hit[c];
    if (seen[c] == 0) continue;
    out.per_class[c] = static_cast<double>(hit[c]) / static_cast<double>(seen[c]);
    macro += out.per_class[c];
    ++present;
  }
  out.accuracy = out.count ? static_cast<double>(hits) / static_cast<double>(out.count) : 0.0;
  out.macro_accuracy = present ? macro / static_cast<double>(present) : 0.0;
  return out;
}

EvalResult evaluate(const ModelSpec& spec, const ParamVector& params, const data::DomainDataset& dataset) {
  std::vector<std::size_t> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return evaluate(spec, params, dataset, idx);
}

// ---- rounds ----------------------------------------------------------------

RoundReport run_round(ServerState& server, std::vector<ClientState>& clients, const RoundOptions& options,
                      const data::DomainDataset* held_out) {
  const ModelSpec& spec = *options.ctx.spec;
  TrainContext ctx = options.ctx;
  ctx.qt = &server.qt;
  ctx.teacher = &server.teacher;

  std::vector<LocalResult> results(clients.size());
  const std::size_t workers = std::min<std::size_t>(std::max(options.threads, 1), clients.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < clients.size(); ++i) results[i] = local_train_epoch(clients[i], server.global, ctx);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < clients.size(); i += workers)
          results[i] = local_train_epoch(clients[i], server.global, ctx);
      });
  }

  std::vector<std::size_t> order(clients.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return clients[a].client_id < clients[b].client_id; });

  RoundReport report;
  report.round = server.round;
  std::vector<Update> updates;
  for (std::size_t i : order) {
    if (!results[i].ok) continue;
    updates.push_back({&results[i].params, static_cast<double>(results[i].samples)});
  }
  if (updates.empty())
    throw NumericalError("round " + std::to_string(server.round) + ": no client finished local training");

  server.global = fedavg(updates, options.aggregation);
  teacher_update(server, ctx.fedtail.teacher_momentum);

  const auto num_classes = static_cast<std::size_t>(spec.num_classes);
  report.gamma.assign(num_classes, 0.0);
  for (std::size_t i : order) {
    const auto& r = results[i];
    ClientRoundInfo info;
    info.client_id = clients[i].client_id;
    info.domain_id = clients[i].domain_id;
    info.ok = r.ok;
    info.error = r.error;
    info.losses = r.mean_losses;
    info.val = evaluate(spec, server.global, *clients[i].dataset, clients[i].dataset->val);
    if (r.ok) {
      add_breakdown(report.mean_losses, r.mean_losses);
      for (std::size_t c = 0; c < num_classes && c < r.mean_losses.gamma.size(); ++c)
        report.gamma[c] += r.mean_losses.gamma[c];
      ++report.participating;
    }
    report.clients.push_back(std::move(info));
  }
  const double inv = 1.0 / report.participating;
  scale_breakdown(report.mean_losses, inv);
  for (double& g : report.gamma) g *= inv;
  report.mean_losses.gamma = report.gamma;
  report.coherence_dot = report.mean_losses.coherence_dot;
  if (held_out) report.held_out = evaluate(spec, server.global, *held_out);
  ++server.round;
  return report;
}

}  // namespace fedtail::fl
