// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include <spdlog/spdlog.h>

#include "fedtail/cli.hpp"
#include "fedtail/experiment.hpp"
#include "support.hpp"

namespace {

using namespace fedtail;
using ad::Gradient;
using ad::ParamVector;
using model::ModelSpec;

struct Outcome {
  bool pass = true;
  std::string detail;
};

ModelSpec random_spec(CounterRng& rng, std::size_t max_params) {
  while (true) {
    ModelSpec s;
    s.input_dim = 2 + static_cast<int>(rng.below(3));
    s.feature_dims.clear();
    const auto layers = 1 + rng.below(2);
    for (std::size_t l = 0; l < layers; ++l) s.feature_dims.push_back(2 + static_cast<int>(rng.below(5)));
    s.num_classes = 2 + static_cast<int>(rng.below(3));
    s.num_domains = 2 + static_cast<int>(rng.below(2));
    s.discriminator_dims = {2 + static_cast<int>(rng.below(3)), 2 + static_cast<int>(rng.below(3))};
    s.seed = rng.next_u64();
    if (model::make_layout(s)->size() <= max_params) return s;
  }
}

// ---- 1 ---------------------------------------------------------------------

Outcome gradient_correctness() {
  CounterRng rng(101, 0);
  double worst = 0.0;
  std::size_t largest = 0;
  for (int k = 0; k < 100; ++k) {
    const auto spec = random_spec(rng, 200);
    const auto p = testing::random_params(spec, rng.next_u64());
    const auto domain = static_cast<int>(rng.below(static_cast<std::size_t>(spec.num_domains)));
    const auto batch = testing::random_batch(spec, 4 + rng.below(8), rng.next_u64(), domain);
    largest = std::max(largest, p.size());
    const ad::Builder f = [&](ad::Tape& t) {
      return t.add(loss::cls_objective(spec, batch)(t), testing::plain_adv_objective(spec, batch)(t));
    };
    const auto g = ad::gradient(f, p);
    const auto fd = testing::fd_gradient(
        [&](const ParamVector& q) {
          return testing::oracle_cls_loss(spec, q, batch) + testing::oracle_adv_loss(spec, q, batch);
        },
        p, 1e-5);
    for (std::size_t i = 0; i < p.size(); ++i) worst = std::max(worst, testing::rel_err(g[i], fd[i]));
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "max rel err %.3e over 100 models (largest %zu params)", worst, largest);
  return {worst < 1e-5, buf};
}

// ---- 2 ---------------------------------------------------------------------

Outcome sam_geometry() {
  CounterRng rng(202, 0);
  double worst_norm = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const auto n = 1 + rng.below(300);
    std::vector<double> g(n);
    for (double& v : g) v = rng.normal() * std::exp(rng.uniform(-8, 8));
    const auto eps = loss::sam_perturbation(Gradient(testing::vector_layout(n), g), 0.05);
    worst_norm = std::max(worst_norm, std::abs(eps.norm() - 0.05));
  }
  // The gap is rho * ||g|| to first order; the largest gradient norm is
  // reported alongside so a failure can be read off directly.
  double worst_gap = 0.0;
  double worst_grad = 0.0;
  for (int k = 0; k < 50; ++k) {
    const auto spec = random_spec(rng, 200);
    const auto p = testing::random_params(spec, rng.next_u64());
    const auto batch = testing::random_batch(spec, 8, rng.next_u64());
    const auto plain = loss::cls_loss(spec, p, batch);
    worst_gap = std::max(worst_gap, std::abs(loss::sam_loss(spec, p, batch, 1e-6).value - plain.value));
    worst_grad = std::max(worst_grad, plain.grad.norm());
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "max | ||eps|| - 0.05 | = %.3e; max |sam - cls| at rho=1e-6 = %.3e (max ||g|| = %.3f)",
                worst_norm, worst_gap, worst_grad);
  return {worst_norm <= 1e-12 && worst_gap < 1e-6, buf};
}

// ---- 3 ---------------------------------------------------------------------

Outcome curvature_oracle() {
  CounterRng rng(303, 0);
  double worst = 0.0;
  bool gamma_ok = true;
  int classes = 0;
  for (int k = 0; k < 20; ++k) {
    ModelSpec spec;
    spec.input_dim = 2;
    spec.feature_dims = {4};
    spec.num_classes = 3;
    spec.num_domains = 2;
    spec.discriminator_dims = {2, 2};
    spec.seed = rng.next_u64();
    const auto p = testing::random_params(spec, rng.next_u64(), 0.5);
    if (p.size() > 50) return {false, "model exceeds 50 parameters"};
    const auto batch = testing::random_batch(spec, 12, rng.next_u64());
    const auto state = objective::curvature_weights(spec, p, batch, 2000, rng.next_u64());
    for (int c = 0; c < spec.num_classes; ++c) {
      const auto H = testing::fd_hessian(loss::cls_objective(spec, batch.restrict_to_class(c)), p, 1e-5);
      const double want = testing::dominant_eigenvalue(H);
      const double got = state.sigma_max[static_cast<std::size_t>(c)];
      worst = std::max(worst, std::abs(got - want) / std::max(std::abs(want), 1e-12));
      const double g = state.gamma[static_cast<std::size_t>(c)];
      gamma_ok = gamma_ok && g > 0.0 && g <= 1.0 && g == objective::curvature_gamma(got);
      ++classes;
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "max rel err %.3e over %d class Hessians; gamma in (0,1]: %s", worst, classes,
                gamma_ok ? "yes" : "no");
  return {worst < 1e-3 && gamma_ok, buf};
}

// ---- 4 ---------------------------------------------------------------------

Outcome coherence_closed_form() {
  auto check = [](std::vector<double> a, std::vector<double> b, std::vector<double> theta, double alpha) {
    const ParamVector p(testing::vector_layout(theta.size()), theta);
    const auto r = objective::coherence_loss(testing::diag_quadratic(a), testing::diag_quadratic(b), p, alpha);
    double value = 0.0;
    double err = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) value += a[i] * theta[i] * b[i] * theta[i];
    err = std::abs(r.value + alpha * value);
    for (std::size_t i = 0; i < theta.size(); ++i)
      err = std::max(err, std::abs(r.grad[i] + alpha * 2.0 * a[i] * b[i] * theta[i]));
    return std::pair{err, r};
  };
  auto [worked_err, worked] = check({1, 2}, {3, 1}, {1, 1}, 1.0);
  double worst = worked_err;
  CounterRng rng(404, 0);
  for (int k = 0; k < 200; ++k) {
    const auto n = 1 + rng.below(6);
    std::vector<double> a(n), b(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.uniform(-3, 3);
      b[i] = rng.uniform(-3, 3);
      t[i] = rng.uniform(-2, 2);
    }
    worst = std::max(worst, check(a, b, t, rng.uniform(0, 2)).first);
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "worked example value %.9f grad (%.6f, %.6f); max err %.3e over 200 pairs",
                worked.value, worked.grad[0], worked.grad[1], worst);
  return {worst < 1e-6, buf};
}

// ---- 5 ---------------------------------------------------------------------

Outcome qt_fidelity() {
  // PACS Art Painting per-class image counts (Dog .. Person).
  const std::vector<double> art{379, 255, 285, 184, 201, 295, 449};
  const std::vector<double> table{0.1851, 0.1245, 0.1392, 0.0898, 0.0981, 0.1440, 0.2192};
  const auto qt = objective::estimate_qt({art, std::vector<double>(10, 37.0)});
  double worst = 0.0;
  for (std::size_t c = 0; c < table.size(); ++c) worst = std::max(worst, std::abs(qt.rows[0][c] - table[c]));
  bool uniform = true;
  for (double v : qt.rows[1]) uniform = uniform && v == 0.1;
  char buf[160];
  std::snprintf(buf, sizeof buf, "max |Q_T - table| = %.2e; balanced 10-class uniform 0.1 exactly: %s", worst,
                uniform ? "yes" : "no");
  return {worst <= 5e-4 && uniform, buf};
}

// ---- 6 ---------------------------------------------------------------------

Outcome fedavg_algebra() {
  using fl::Update;
  const auto layout = testing::vector_layout(2);
  const ParamVector a(layout, {1, 1}), b(layout, {3, 5});
  bool ok = true;
  std::string failed;
  auto expect = [&](bool cond, const char* what) {
    if (!cond) {
      ok = false;
      failed += std::string(" ") + what;
    }
  };
  const Update single[] = {{&a, 5}};
  expect(fl::fedavg(single) == a, "identity");
  const Update mid[] = {{&a, 1}, {&b, 1}};
  expect(fl::fedavg(mid).raw() == std::vector<double>{2, 3}, "midpoint");
  const Update weighted[] = {{&a, 3}, {&b, 1}};
  expect(fl::fedavg(weighted).raw() == std::vector<double>{1.5, 2}, "weighted");

  CounterRng rng(606, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto k = 2 + rng.below(6);
    std::vector<ParamVector> ps;
    std::vector<Update> us;
    ps.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<double> v(8);
      for (double& x : v) x = rng.normal() * 10;
      ps.emplace_back(testing::vector_layout(8), v);
    }
    for (std::size_t i = 0; i < k; ++i) us.push_back({&ps[i], 1.0 + static_cast<double>(rng.below(100))});
    const auto avg = fl::fedavg(us);
    for (std::size_t j = 0; j < 8; ++j) {
      double lo = ps[0][j], hi = ps[0][j];
      for (const auto& p : ps) {
        lo = std::min(lo, p[j]);
        hi = std::max(hi, p[j]);
      }
      if (avg[j] < lo || avg[j] > hi) {
        expect(false, "envelope");
        trial = 200;
        break;
      }
    }
  }

  // K = 1 federation versus a direct local epoch.
  data::SynthSpec s;
  s.num_domains = 2;
  s.num_classes = 3;
  s.feature_dim = 4;
  s.samples_per_class_max = 30;
  s.imbalance_ratio = 3;
  auto domains = data::gen_synthetic(s);
  auto ds = std::make_shared<const data::DomainDataset>(data::split(std::move(domains[0]), 0.9, 1));
  const auto qt = objective::estimate_qt({data::train_class_counts(*ds), {1, 1, 1}});
  ModelSpec spec;
  spec.input_dim = 4;
  spec.feature_dims = {8};
  spec.num_classes = 3;
  spec.num_domains = 2;
  const auto init = model::init(spec);
  fl::ClientState client;
  client.dataset = ds;
  client.seed = 3;
  fl::RoundOptions opt;
  opt.ctx.spec = &spec;
  opt.ctx.sgd.batch_size = 16;
  auto server = fl::ServerState::start(init, qt);
  std::vector<fl::ClientState> clients{client};
  for (int r = 0; r < 3; ++r) fl::run_round(server, clients, opt);
  fl::TrainContext ctx = opt.ctx;
  ctx.qt = &qt;
  ParamVector central = init;
  for (int r = 0; r < 3; ++r) central = fl::local_train_epoch(client, central, ctx).params;
  expect(server.global == central, "K=1-centralized");
  return {ok, ok ? "identity, midpoint, weighted mean, envelope (200 trials), K=1 bitwise over 3 rounds" : "failed:" + failed};
}

// ---- 7 ---------------------------------------------------------------------

Outcome composition() {
  CounterRng rng(707, 0);
  bool bitwise = true;
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    auto spec = random_spec(rng, 200);
    const auto p = testing::random_params(spec, rng.next_u64());
    const auto batch = testing::random_batch(spec, 10, rng.next_u64(), spec.num_domains - 1);
    std::vector<std::vector<double>> counts;
    for (int d = 0; d < spec.num_domains; ++d) {
      std::vector<double> row;
      for (int c = 0; c < spec.num_classes; ++c) row.push_back(1.0 + static_cast<double>(rng.below(20)));
      counts.push_back(row);
    }
    const auto qt = objective::estimate_qt(counts);
    auto cs = objective::CurvatureState::cold(spec.num_classes);
    for (double& g : cs.gamma) g = rng.uniform(0.1, 1.0);

    objective::FedTailConfig cfg;
    const objective::TermSet singles[] = {{true, false, false, false, false},
                                          {false, true, false, false, false},
                                          {false, false, true, false, false},
                                          {false, false, false, true, false},
                                          {false, false, false, false, true}};
    for (int t = 0; t < 5; ++t) {
      cfg.terms = singles[t];
      const auto total = objective::total_loss(spec, p, batch, cfg, qt, cs);
      ad::ValueGrad want;
      switch (t) {
        case 0: want = loss::cls_loss(spec, p, batch); break;
        case 1: want = loss::adv_loss(spec, p, batch, cfg.grl_lambda); break;
        case 2: want = objective::sharp_er_loss(spec, p, batch, qt, cfg.rho); break;
        case 3: {
          const auto cw = objective::classwise_sharp_losses(spec, p, batch, cfg.rho, cs);
          want = {cw.weighted, cw.grad};
          break;
        }
        default: want = objective::coherence_loss(spec, p, batch, cfg.alpha, cfg.grl_lambda); break;
      }
      bitwise = bitwise && total.breakdown.total == want.value && total.grad == want.grad;
    }
    cfg.terms = {};
    cfg.weights = {rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2)};
    const auto b = objective::total_loss(spec, p, batch, cfg, qt, cs).breakdown;
    const auto& w = cfg.weights;
    const double sum = w.cls * b.cls + w.adv * b.adv + w.sharp_er * b.sharp_er + w.classwise * b.classwise_total + w.coh * b.coh;
    worst = std::max(worst, std::abs(b.total - sum));
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "single-term toggles bit-for-bit: %s; max |total - weighted sum| = %.2e",
                bitwise ? "yes" : "no", worst);
  return {bitwise && worst <= 1e-10, buf};
}

// ---- 8, 9 ------------------------------------------------------------------

std::vector<exp::AblationRow> g_ablation;
double g_ablation_seconds = 0.0;

const std::vector<exp::AblationRow>& ablation() {
  if (g_ablation.empty()) {
    exp::ExperimentSpec spec;  // default synthetic benchmark: K=4, C=6, r=10
    spec.rounds = 30;
    spec.num_seeds = 5;
    const auto t0 = std::chrono::steady_clock::now();
    g_ablation = exp::run_ablation(spec);
    g_ablation_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return g_ablation;
}

Outcome ablation_trend() {
  const auto& rows = ablation();
  std::vector<double> means, stds;
  for (const auto& r : rows) {
    const auto per_seed = r.result.per_seed_mean_accuracy();
    means.push_back(exp::mean(per_seed));
    stds.push_back(exp::stddev(per_seed));
  }
  bool ok = true;
  std::ostringstream detail;
  detail.precision(4);
  detail << std::fixed << "means";
  for (double m : means) detail << ' ' << m;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double pooled = std::sqrt((stds[i - 1] * stds[i - 1] + stds[i] * stds[i]) / 2.0);
    if (means[i] < means[i - 1] - pooled) {
      ok = false;
      detail << "; row " << i + 1 << " drops by more than pooled std " << pooled;
    }
  }
  const double gain = means.back() - means.front();
  detail << "; row5 - row1 = " << gain;
  if (gain < 0.02) ok = false;
  detail.precision(1);
  detail << "; runtime " << g_ablation_seconds << " s";
  if (g_ablation_seconds >= 600.0) ok = false;
  return {ok, detail.str()};
}

Outcome tail_effect() {
  const auto& rows = ablation();
  const auto tail = exp::tail_classes(6);
  const auto row3 = rows[2].result.per_seed_mean_class_accuracy(tail);
  const auto row4 = rows[3].result.per_seed_mean_class_accuracy(tail);
  int improved = 0;
  std::ostringstream detail;
  detail.precision(3);
  detail << std::fixed << "tail macro row3 -> row4 per seed:";
  for (std::size_t s = 0; s < row3.size(); ++s) {
    detail << ' ' << row3[s] << "->" << row4[s];
    if (row4[s] > row3[s]) ++improved;
  }
  detail << " (" << improved << "/5 improved)";
  return {improved >= 4, detail.str()};
}

// ---- 10 --------------------------------------------------------------------

Outcome determinism() {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "fedtail_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << R"({
    "synth": {"num_domains": 3, "num_classes": 4, "samples_per_class_max": 40, "imbalance_ratio": 5},
    "model": {"feature_dims": [16, 8]},
    "fedtail": {"qt_mode": "momentum_teacher"},
    "experiment": {"rounds": 3, "num_seeds": 2}
  })";
  auto read = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  cli::Options o;
  o.config = dir / "config.json";
  o.out = dir / "a";
  const int a = cli::run(o);
  o.out = dir / "b";
  const int b = cli::run(o);
  const auto ja = read(dir / "a" / "metrics.jsonl");
  const auto jb = read(dir / "b" / "metrics.jsonl");
  fs::remove_all(dir);
  const bool ok = a == 0 && b == 0 && !ja.empty() && ja == jb;
  return {ok, "two runs, " + std::to_string(ja.size()) + " bytes of metrics.jsonl, identical: " + (ja == jb ? "yes" : "no")};
}

// ---- 11 --------------------------------------------------------------------

Outcome max_square() {
  bool exact = true;
  for (int c = 2; c <= 12; ++c)
    for (std::size_t n = 1; n <= 9; ++n)
      exact = exact && loss::max_square_loss(ad::Matrix(n, static_cast<std::size_t>(c), 1.0 / c)) == -1.0 / (2.0 * c);

  CounterRng rng(1111, 0);
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const auto n = 1 + rng.below(10);
    const auto c = 2 + rng.below(8);
    ad::Matrix probs(n, c);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += (probs(i, j) = rng.uniform(0.001, 1.0));
      for (std::size_t j = 0; j < c; ++j) probs(i, j) /= s;
    }
    auto layout = std::make_shared<ad::Layout>();
    layout->add("p", n, c);
    const auto g = ad::gradient([](ad::Tape& t) { return loss::max_square(t, t.param("p")); }, ParamVector(layout, probs.data));
    const auto want = loss::max_square_grad(probs);
    for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(g[i] - want.data[i]));
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "uniform value == -1/(2C) exactly for C=2..12: %s; max |d/dp - (-p/N)| = %.2e",
                exact ? "yes" : "no", worst);
  return {exact && worst <= 1e-10, buf};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::err);
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {1, "gradient correctness", gradient_correctness},
      {2, "SAM geometry", sam_geometry},
      {3, "curvature oracle", curvature_oracle},
      {4, "coherence closed form", coherence_closed_form},
      {5, "Q_T fidelity", qt_fidelity},
      {6, "FedAvg algebra", fedavg_algebra},
      {7, "loss composition", composition},
      {8, "ablation trend", ablation_trend},
      {9, "tail-class effect", tail_effect},
      {10, "determinism", determinism},
      {11, "max-square loss", max_square},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!out.pass) ++failures;
    std::printf("[%s] %2d %-22s %s (%.1f s)\n", out.pass ? "PASS" : "FAIL", c.id, c.name, out.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(std::size(criteria)) - failures, std::size(criteria));
  return failures == 0 ? 0 : 1;
}
