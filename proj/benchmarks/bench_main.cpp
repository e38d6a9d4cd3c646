#include <benchmark/benchmark.h>

#include <vector>

#include "olseg/boxes.hpp"
#include "olseg/falkon.hpp"
#include "olseg/kernel.hpp"
#include "olseg/rle.hpp"
#include "olseg/rng.hpp"
#include "olseg/segmentation.hpp"

namespace {

using namespace olseg;

Matrix gaussian_rows(Rng& rng, Eigen::Index n, Eigen::Index d) {
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

std::vector<double> labels(const Matrix& X) {
  std::vector<double> y(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) y[static_cast<std::size_t>(i)] = X(i, 0) > 0 ? 1.0 : -1.0;
  return y;
}

void BM_GaussianKernel(benchmark::State& state) {
  Rng rng(1);
  const Matrix X = gaussian_rows(rng, state.range(0), 256);
  const Matrix C = gaussian_rows(rng, 500, 256);
  for (auto _ : state) benchmark::DoNotOptimize(gaussian_kernel(X, C, 10.0));
  state.SetItemsProcessed(state.iterations() * state.range(0) * 500);
}
BENCHMARK(BM_GaussianKernel)->Arg(1000)->Arg(4000)->Unit(benchmark::kMillisecond);

void BM_FalkonTrain(benchmark::State& state) {
  Rng rng(2);
  const Matrix X = gaussian_rows(rng, state.range(0), 32);
  const auto y = labels(X);
  FalkonOptions o;
  o.centers = static_cast<std::size_t>(state.range(1));
  o.sigma = 5.0;
  o.lambda = 1e-5;
  for (auto _ : state) benchmark::DoNotOptimize(falkon_train(X, y, o));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FalkonTrain)->Args({2000, 200})->Args({20000, 300})->Args({100000, 300})->Unit(benchmark::kMillisecond);

void BM_FalkonPredict(benchmark::State& state) {
  Rng rng(3);
  const Matrix X = gaussian_rows(rng, 5000, 32);
  FalkonOptions o;
  o.centers = 300;
  o.sigma = 5.0;
  const auto model = falkon_train(X, labels(X), o);
  const Matrix Q = gaussian_rows(rng, state.range(0), 32);
  for (auto _ : state) benchmark::DoNotOptimize(falkon_predict(model, Q));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FalkonPredict)->Arg(784)->Arg(10000)->Unit(benchmark::kMicrosecond);

void BM_Nms(benchmark::State& state) {
  Rng rng(4);
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (int i = 0; i < state.range(0); ++i) {
    const double x = rng.uniform(0, 600), y = rng.uniform(0, 400);
    boxes.push_back({x, y, x + rng.uniform(10, 100), y + rng.uniform(10, 100)});
    scores.push_back(rng.uniform());
  }
  for (auto _ : state) benchmark::DoNotOptimize(nms(boxes, scores, 0.3));
}
BENCHMARK(BM_Nms)->Arg(300)->Arg(2000);

void BM_PasteScoreMap(benchmark::State& state) {
  Rng rng(5);
  Matrix map(28, 28);
  for (Eigen::Index i = 0; i < map.size(); ++i) map.data()[i] = rng.normal();
  const Box box{100.3, 80.7, 100.3 + static_cast<double>(state.range(0)), 80.7 + static_cast<double>(state.range(0))};
  for (auto _ : state) benchmark::DoNotOptimize(paste_score_map(map, box, 640, 480, 0.0));
}
BENCHMARK(BM_PasteScoreMap)->Arg(50)->Arg(300);

void BM_MaskIou(benchmark::State& state) {
  Rng rng(6);
  Bitmap a(480, 640), b(480, 640);
  for (std::uint32_t y = 100; y < 300; ++y)
    for (std::uint32_t x = 200; x < 400; ++x) {
      a.at(y, x) = rng.uniform() < 0.9;
      b.at(y + 20, x + 10) = rng.uniform() < 0.9;
    }
  const auto ra = RleMask::encode(a), rb = RleMask::encode(b);
  for (auto _ : state) benchmark::DoNotOptimize(iou(ra, rb));
}
BENCHMARK(BM_MaskIou);

void BM_Subsample(benchmark::State& state) {
  Rng rng(7);
  for (auto _ : state) benchmark::DoNotOptimize(subsample(100000, 0.3, rng));
}
BENCHMARK(BM_Subsample);

}  // namespace

BENCHMARK_MAIN();
