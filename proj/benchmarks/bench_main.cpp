#include <benchmark/benchmark.h>

#include "fedtail/data.hpp"
#include "fedtail/federated.hpp"
#include "fedtail/objective.hpp"
#include "fedtail/random.hpp"

namespace {

using namespace fedtail;

struct Setup {
  model::ModelSpec spec;
  ad::ParamVector params;
  loss::Batch batch;
  objective::QTDistribution qt;

  explicit Setup(std::size_t n = 64) {
    spec.input_dim = 8;
    spec.num_classes = 6;
    spec.num_domains = 4;
    params = model::init(spec);
    CounterRng rng(1, 0);
    batch.x = ad::Matrix(n, 8);
    for (double& v : batch.x.data) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i) batch.y.push_back(static_cast<int>(i % 6));
    qt = objective::estimate_qt(std::vector<std::vector<double>>(4, std::vector<double>(6, 1.0)));
  }
};

void BM_ClsGradient(benchmark::State& state) {
  Setup s(static_cast<std::size_t>(state.range(0)));
  const auto f = loss::cls_objective(s.spec, s.batch);
  for (auto _ : state) benchmark::DoNotOptimize(ad::gradient(f, s.params));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ClsGradient)->Arg(16)->Arg(64)->Arg(256);

void BM_Hvp(benchmark::State& state) {
  Setup s;
  const auto f = loss::cls_objective(s.spec, s.batch);
  const auto v = ad::gradient(f, s.params);
  for (auto _ : state) benchmark::DoNotOptimize(ad::hvp(f, s.params, v));
}
BENCHMARK(BM_Hvp);

void BM_CurvatureRefresh(benchmark::State& state) {
  Setup s;
  for (auto _ : state)
    benchmark::DoNotOptimize(objective::curvature_weights(s.spec, s.params, s.batch, 10, 3));
}
BENCHMARK(BM_CurvatureRefresh);

void BM_TotalLossStep(benchmark::State& state) {
  Setup s;
  objective::FedTailConfig cfg;
  cfg.terms = objective::TermSet::ladder(static_cast<int>(state.range(0)));
  const auto cs = objective::CurvatureState::cold(6);
  for (auto _ : state) benchmark::DoNotOptimize(objective::total_loss(s.spec, s.params, s.batch, cfg, s.qt, cs));
}
BENCHMARK(BM_TotalLossStep)->DenseRange(1, 5);

void BM_FedAvg(benchmark::State& state) {
  Setup s;
  std::vector<ad::ParamVector> ps(static_cast<std::size_t>(state.range(0)), s.params);
  std::vector<fl::Update> us;
  for (const auto& p : ps) us.push_back({&p, 100.0});
  for (auto _ : state) benchmark::DoNotOptimize(fl::fedavg(us));
}
BENCHMARK(BM_FedAvg)->Arg(3)->Arg(10);

void BM_LocalEpoch(benchmark::State& state) {
  data::SynthSpec synth;
  auto domains = data::gen_synthetic(synth);
  auto ds = std::make_shared<const data::DomainDataset>(data::split(std::move(domains[0]), 0.9, 1));
  Setup s;
  fl::TrainContext ctx;
  ctx.spec = &s.spec;
  ctx.qt = &s.qt;
  ctx.fedtail.terms = objective::TermSet::ladder(static_cast<int>(state.range(0)));
  const auto global = model::init(s.spec);
  for (auto _ : state) {
    fl::ClientState c;
    c.dataset = ds;
    benchmark::DoNotOptimize(fl::local_train_epoch(c, global, ctx));
  }
}
BENCHMARK(BM_LocalEpoch)->Arg(1)->Arg(5)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
