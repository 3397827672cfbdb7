#include <benchmark/benchmark.h>

#include "pcrd/datasyn.hpp"
#include "pcrd/evalkit.hpp"
#include "pcrd/geom3d.hpp"
#include "pcrd/regnet.hpp"
#include "pcrd/trainer.hpp"

namespace {

using namespace pcrd;

Cloud cloud_of(int n, std::uint64_t seed) {
  Rng rng(seed);
  return sample_shape(ShapeKind::Composite, n, rng);
}

void BM_Kabsch(benchmark::State& state) {
  const Cloud p = cloud_of(static_cast<int>(state.range(0)), 1);
  Rng rng(2);
  const Cloud q = apply(random_transform(rng, 45, 1), p);
  for (auto _ : state) benchmark::DoNotOptimize(kabsch(p, q));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Kabsch)->Arg(128)->Arg(1024);

void BM_KdTreeBuild(benchmark::State& state) {
  const Cloud p = cloud_of(static_cast<int>(state.range(0)), 3);
  for (auto _ : state) benchmark::DoNotOptimize(KdTree(p));
}
BENCHMARK(BM_KdTreeBuild)->Arg(128)->Arg(1024)->Arg(8192);

void BM_KdTreeNearest(benchmark::State& state) {
  const Cloud p = cloud_of(static_cast<int>(state.range(0)), 4);
  const Cloud queries = cloud_of(256, 5);
  const KdTree tree(p);
  for (auto _ : state) {
    for (Eigen::Index i = 0; i < queries.rows(); ++i) benchmark::DoNotOptimize(tree.nearest(queries.row(i).transpose()));
  }
  state.SetItemsProcessed(state.iterations() * queries.rows());
}
BENCHMARK(BM_KdTreeNearest)->Arg(128)->Arg(1024)->Arg(8192);

void BM_Chamfer(benchmark::State& state) {
  const Cloud a = cloud_of(static_cast<int>(state.range(0)), 6);
  const Cloud b = cloud_of(static_cast<int>(state.range(0)), 7);
  for (auto _ : state) benchmark::DoNotOptimize(train::loss_chamfer(a, b));
}
BENCHMARK(BM_Chamfer)->Arg(128)->Arg(1024);

void BM_Sinkhorn(benchmark::State& state) {
  const Eigen::Index n = state.range(0);
  Rng rng(8);
  std::normal_distribution<double> normal;
  nn::RowMatrix sim(n, n);
  for (Eigen::Index i = 0; i < sim.size(); ++i) sim.data()[i] = normal(rng);
  for (auto _ : state) benchmark::DoNotOptimize(regnet::sinkhorn(sim, 5, 0.1));
}
BENCHMARK(BM_Sinkhorn)->Arg(128)->Arg(512);

// One denoiser call on pre-encoded clouds, as in the sampling loop.
void BM_CfDecode(benchmark::State& state) {
  const regnet::ModelConfig cfg;
  auto model = regnet::make_model(cfg);
  nn::ParamStore store;
  Rng rng(9);
  model->init(store, rng);
  const auto cond = model->encode(store, cloud_of(128, 10), cloud_of(128, 11));
  const StateVec g_t = standard_normal(model->state_dim(), rng);
  for (auto _ : state) benchmark::DoNotOptimize(model->decode(store, *cond, g_t, 500));
}
BENCHMARK(BM_CfDecode);

void BM_CfEncode(benchmark::State& state) {
  const regnet::ModelConfig cfg;
  auto model = regnet::make_model(cfg);
  nn::ParamStore store;
  Rng rng(12);
  model->init(store, rng);
  const Cloud p = cloud_of(static_cast<int>(state.range(0)), 13), q = cloud_of(static_cast<int>(state.range(0)), 14);
  for (auto _ : state) benchmark::DoNotOptimize(model->encode(store, p, q));
}
BENCHMARK(BM_CfEncode)->Arg(128)->Arg(1024);

void BM_Icp(benchmark::State& state) {
  const Cloud p = cloud_of(512, 15);
  Rng rng(16);
  const Cloud q = apply(random_transform(rng, 10, 0.1), p);
  for (auto _ : state) benchmark::DoNotOptimize(eval::icp(p, q));
}
BENCHMARK(BM_Icp);

}  // namespace

BENCHMARK_MAIN();
