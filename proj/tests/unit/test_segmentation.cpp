#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "olseg/error.hpp"
#include "olseg/segmentation.hpp"
#include "olseg/synthetic.hpp"
#include "properties.hpp"
#include "test_support.hpp"

namespace olseg {
namespace {

using testing::TempDir;

SegFeatureGrid make_grid(std::uint32_t s, std::uint32_t f, std::uint32_t class_id, Rng& rng, double fg_shift) {
  SegFeatureGrid g;
  g.image_id = 0;
  g.box = {0, 0, 20, 20};
  g.class_id = class_id;
  g.s = s;
  g.f = f;
  g.gt_mask_grid.assign(std::size_t{s} * s, 0);
  for (std::uint32_t i = 0; i < s; ++i) {
    for (std::uint32_t j = 0; j < s; ++j) {
      const bool fg = j < s / 2;
      g.gt_mask_grid[std::size_t{i} * s + j] = fg ? 1 : 0;
      for (std::uint32_t k = 0; k < f; ++k) {
        g.grid.push_back(static_cast<float>(rng.normal() + (fg && k == 0 ? fg_shift : 0.0)));
      }
    }
  }
  return g;
}

// A bank whose model returns `value` for every input (one far-reaching center).
MaskBank constant_bank(std::uint32_t s, std::uint32_t f, double value) {
  MaskBank bank;
  bank.num_classes = 1;
  bank.s = s;
  bank.f = f;
  FalkonModel m;
  m.centers = MatrixF::Zero(1, f);
  m.alpha = Vector::Constant(1, value);
  m.sigma = 1e6;
  bank.models.push_back(m);
  return bank;
}

// ---- pixel extraction -----------------------------------------------------

TEST(ExtractPixels, CountsMatchMaskPopcount) {
  Rng rng(1);
  const auto g = make_grid(6, 3, 2, rng, 0.0);
  const auto px = extract_pixel_samples(g, 3);
  EXPECT_EQ(px.class_id, 2u);
  EXPECT_EQ(px.positive_count(), 18u);
  EXPECT_EQ(px.negative_count(), 18u);
  EXPECT_EQ(px.positives.size(), 18u * 3);
  // First positive row is cell (0, 0).
  EXPECT_EQ(px.positives[1], g.grid[1]);
  // First negative row is cell (0, 3).
  EXPECT_EQ(px.negatives[0], g.grid[3 * 3]);
}

TEST(ExtractPixels, RejectsBadClassAndMissingMask) {
  Rng rng(1);
  auto g = make_grid(4, 2, 4, rng, 0.0);
  EXPECT_THROW(extract_pixel_samples(g, 3), InputError);
  g.class_id = 0;
  EXPECT_THROW(extract_pixel_samples(g, 3), InputError);
  g.class_id = 1;
  g.gt_mask_grid.clear();
  EXPECT_THROW(extract_pixel_samples(g, 3), InputError);
}

// ---- subsampling ----------------------------------------------------------

TEST(Subsample, FullFactorKeepsEverything) {
  Rng rng(2);
  auto idx = subsample(500, 1.0, rng);
  std::sort(idx.begin(), idx.end());
  ASSERT_EQ(idx.size(), 500u);
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(idx[i], i);
}

TEST(Subsample, CountsAndErrors) {
  Rng rng(3);
  EXPECT_EQ(subsample(1000, 0.3, rng).size(), 300u);
  EXPECT_EQ(subsample_count(10, 0.01), 1u);
  EXPECT_EQ(subsample_count(0, 0.5), 0u);
  EXPECT_EQ(subsample_count(7, 0.5), 4u);
  for (double bad : {0.0, -0.1, 1.5, std::nan("")}) {
    EXPECT_THROW(subsample_count(10, bad), ConfigError) << bad;
    EXPECT_THROW(subsample(10, bad, rng), ConfigError) << bad;
  }
}

TEST(Subsample, CeilInvariantAndDistinctOverRandomCases) {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = rng.below(5000);
    const double r = rng.uniform(1e-4, 1.0);
    const auto idx = subsample(n, r, rng);
    EXPECT_EQ(idx.size(), static_cast<std::size_t>(std::ceil(r * static_cast<double>(n))));
    const std::set<std::size_t> uniq(idx.begin(), idx.end());
    EXPECT_EQ(uniq.size(), idx.size());
    if (!idx.empty()) EXPECT_LT(*uniq.rbegin(), n);
  }
}

TEST(Subsample, PerClassPolarityCountsAtVideoScale) {
  // 28x28 grids at ~40% foreground, 12 grids per class, r = 0.3: every
  // class keeps ceil(0.3 n) of each polarity, 1k-4k pixels in total.
  Rng rng(5);
  PixelSampleCollector col(2, 2);
  for (std::uint32_t c = 1; c <= 2; ++c) {
    for (int k = 0; k < 12; ++k) {
      auto g = make_grid(28, 2, c, rng, 1.0);
      for (auto& b : g.gt_mask_grid) b = rng.uniform() < 0.4 ? 1 : 0;
      col.add(g);
    }
  }
  const auto set = subsample_pixels(col, 0.3, 77);
  ASSERT_EQ(set.classes.size(), 2u);
  for (std::uint32_t c = 1; c <= 2; ++c) {
    const auto& cs = set.classes[c - 1];
    EXPECT_EQ(cs.pre_positives, col.positive_count(c));
    EXPECT_EQ(cs.pre_negatives, col.negative_count(c));
    EXPECT_EQ(static_cast<std::size_t>(cs.positives.rows()), subsample_count(cs.pre_positives, 0.3));
    EXPECT_EQ(static_cast<std::size_t>(cs.negatives.rows()), subsample_count(cs.pre_negatives, 0.3));
    const auto kept = cs.positives.rows() + cs.negatives.rows();
    EXPECT_GE(kept, 1000);
    EXPECT_LE(kept, 4000);
  }
  const auto again = subsample_pixels(col, 0.3, 77);
  EXPECT_EQ(again.classes[0].positives, set.classes[0].positives);
  EXPECT_NE(subsample_pixels(col, 0.3, 78).classes[0].positives, set.classes[0].positives);
}

// ---- training -------------------------------------------------------------

struct SyntheticSplit {
  TempDir dir;
  DatasetIndex index;
  std::vector<SegFeatureGrid> train, test;
};

SyntheticSplit& synthetic() {
  static SyntheticSplit* data = [] {
    auto* d = new SyntheticSplit;
    SyntheticConfig c;
    c.train_images = 40;
    c.test_images = 10;
    c.s = 14;
    c.f = 8;
    c.seed = 3;
    d->index = generate_synthetic(c, d->dir.path());
    for (auto& g : read_grids(d->index, "train")) {
      if (g.source == GridSource::ground_truth) d->train.push_back(std::move(g));
    }
    for (auto& g : read_grids(d->index, "test")) {
      if (g.source == GridSource::ground_truth) d->test.push_back(std::move(g));
    }
    return d;
  }();
  return *data;
}

MaskTrainConfig seg_config(double r) {
  MaskTrainConfig cfg;
  cfg.falkon.sigma = 5.0;
  cfg.falkon.lambda = 1e-5;
  cfg.falkon.centers = 100;
  cfg.sampling_factor = r;
  cfg.seed = 9;
  return cfg;
}

MaskBank train_on(const std::vector<SegFeatureGrid>& grids, const DatasetIndex& index, double r,
                  MaskTrainReport* report = nullptr) {
  PixelSampleCollector col(index.num_classes, index.dims.f);
  for (const auto& g : grids) col.add(g);
  return train_mask_bank(col, index.dims.s, seg_config(r), report);
}

std::vector<std::uint8_t> cell_predictions(const MaskBank& bank, const SegFeatureGrid& g) {
  const Matrix map = mask_score_map(bank, g.class_id, g.grid);
  std::vector<std::uint8_t> out;
  for (Eigen::Index i = 0; i < map.rows(); ++i)
    for (Eigen::Index j = 0; j < map.cols(); ++j) out.push_back(map(i, j) > bank.mask_score_threshold ? 1 : 0);
  return out;
}

TEST(MaskTraining, SeparableCellsAreClassifiedOnHeldOutGrids) {
  auto& d = synthetic();
  MaskTrainReport report;
  const auto bank = train_on(d.train, d.index, 0.3, &report);
  EXPECT_EQ(report.classes.size(), d.index.num_classes);
  EXPECT_GT(report.train_seconds, 0.0);
  std::size_t correct = 0, total = 0;
  for (const auto& g : d.test) {
    const auto pred = cell_predictions(bank, g);
    for (std::size_t k = 0; k < pred.size(); ++k) correct += pred[k] == g.gt_mask_grid[k] ? 1 : 0;
    total += pred.size();
  }
  ASSERT_GT(total, 0u);
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(total), 0.99);
}

TEST(MaskTraining, HalfTheSamplesGiveNearlyTheSameMasks) {
  auto& d = synthetic();
  const auto full = train_on(d.train, d.index, 1.0);
  const auto half = train_on(d.train, d.index, 0.5);
  std::size_t differ = 0, total = 0;
  for (const auto& g : d.test) {
    const auto a = cell_predictions(full, g), b = cell_predictions(half, g);
    for (std::size_t k = 0; k < a.size(); ++k) differ += a[k] != b[k] ? 1 : 0;
    total += a.size();
  }
  EXPECT_LE(static_cast<double>(differ) / static_cast<double>(total), 0.02);
}

TEST(MaskTraining, DeterministicForFixedSeedAndThreadCount) {
  auto& d = synthetic();
  PixelSampleCollector col(d.index.num_classes, d.index.dims.f);
  for (const auto& g : d.train) col.add(g);
  auto cfg = seg_config(0.3);
  cfg.threads = 1;
  const auto a = train_mask_bank(col, d.index.dims.s, cfg);
  cfg.threads = 3;
  const auto b = train_mask_bank(col, d.index.dims.s, cfg);
  for (std::uint32_t c = 0; c < d.index.num_classes; ++c) {
    ASSERT_TRUE(a.models[c] && b.models[c]);
    EXPECT_EQ(a.models[c]->alpha, b.models[c]->alpha);
    EXPECT_EQ(a.models[c]->centers, b.models[c]->centers);
  }
  std::stringstream ss;
  write_mask_bank(ss, a);
  const auto back = read_mask_bank(ss);
  const auto& g = d.test.front();
  EXPECT_EQ(mask_score_map(back, g.class_id, g.grid), mask_score_map(a, g.class_id, g.grid));
}

TEST(MaskTraining, ClassMissingAPolarityIsSkipped) {
  Rng rng(6);
  PixelSampleCollector col(2, 2);
  auto g1 = make_grid(6, 2, 1, rng, 4.0);
  auto g2 = make_grid(6, 2, 2, rng, 4.0);
  std::fill(g2.gt_mask_grid.begin(), g2.gt_mask_grid.end(), 1);
  col.add(g1);
  col.add(g2);
  MaskTrainReport report;
  MaskTrainConfig cfg;
  cfg.falkon.centers = 10;
  const auto bank = train_mask_bank(col, 6, cfg, &report);
  EXPECT_TRUE(bank.models[0].has_value());
  EXPECT_FALSE(bank.models[1].has_value());
  EXPECT_TRUE(report.classes[1].skipped);
  ASSERT_EQ(report.warnings.size(), 1u);
  EXPECT_NE(report.warnings[0].find("class 2"), std::string::npos);
  EXPECT_EQ(report.classes[0].kept_positives, subsample_count(18, 0.3));
}

TEST(MaskTraining, ConfigValidation) {
  MaskTrainConfig cfg;
  cfg.sampling_factor = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.sampling_factor = 0.3;
  cfg.mask_threshold = std::nan("");
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// ---- mask prediction ------------------------------------------------------

std::size_t pixels_with_center_in(const Box& b, std::uint32_t w, std::uint32_t h) {
  std::size_t n = 0;
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = 0; x < w; ++x)
      n += (x + 0.5 >= b.x1 && x + 0.5 < b.x2 && y + 0.5 >= b.y1 && y + 0.5 < b.y2) ? 1 : 0;
  return n;
}

TEST(PredictMask, PositiveConstantMapFillsTheBoxExactly) {
  const Box box{10.2, 5.7, 30.6, 20.1};
  const auto bm = paste_score_map(Matrix::Constant(7, 7, 0.5), box, 64, 48, 0.0);
  const auto rle = RleMask::encode(bm);
  EXPECT_EQ(rle.area(), pixels_with_center_in(box, 64, 48));
  EXPECT_EQ(rle.area(), 21u * 14u);
  const Box tight = rle.bounding_box();
  EXPECT_EQ(tight.x1, 10.0);
  EXPECT_EQ(tight.y1, 6.0);
  EXPECT_EQ(RleMask::encode(paste_score_map(Matrix::Constant(7, 7, -0.5), box, 64, 48, 0.0)).area(), 0u);
}

TEST(PredictMask, BoxOutsideTheImageIsClipped) {
  const Box box{-10, -10, 15, 12};
  const auto rle = RleMask::encode(paste_score_map(Matrix::Ones(5, 5), box, 40, 30, 0.0));
  EXPECT_EQ(rle.area(), 15u * 12u);
  EXPECT_EQ(RleMask::encode(paste_score_map(Matrix::Ones(5, 5), Box{50, 50, 60, 60}, 40, 30, 0.0)).area(), 0u);
}

TEST(PredictMask, LinearRampSplitsTheBoxAtItsCentre) {
  const std::uint32_t s = 28;
  Matrix ramp(s, s);
  for (Eigen::Index i = 0; i < s; ++i)
    for (Eigen::Index j = 0; j < s; ++j) ramp(i, j) = static_cast<double>(j) - (s - 1) / 2.0;
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const Box box = testing::random_box(rng, 200, 150, 10);
    const auto bm = paste_score_map(ramp, box, 200, 150, 0.0);
    const double split = box.center_x();
    for (std::uint32_t y = 0; y < 150; ++y) {
      for (std::uint32_t x = 0; x < 200; ++x) {
        if (!bm.at(y, x)) continue;
        EXPECT_GT(x + 0.5, split - 1.0) << "trial " << trial;
      }
    }
    // Pixels with centres clearly right of the split are foreground.
    for (std::uint32_t y = 0; y < 150; ++y) {
      const double cy = y + 0.5;
      if (cy < box.y1 || cy >= box.y2) continue;
      for (std::uint32_t x = 0; x < 200; ++x) {
        const double cx = x + 0.5;
        if (cx > split + 1.0 && cx < box.x2) EXPECT_EQ(bm.at(y, x), 1) << "trial " << trial;
      }
    }
  }
}

TEST(PredictMask, ConstantBankAndMissingModel) {
  const auto bank = constant_bank(4, 3, 2.0);
  const std::vector<float> grid(4 * 4 * 3, 0.25f);
  const auto res = predict_mask(bank, grid, DetectionResult{5, 1, {2, 2, 12, 8}, 0.7}, 20, 20);
  EXPECT_EQ(res.mask.area(), 60u);
  EXPECT_EQ(res.detection.image_id, 5u);
  EXPECT_EQ(res.detection.score, 0.7);
  MaskBank two = bank;
  two.num_classes = 2;
  two.models.push_back(std::nullopt);
  try {
    predict_mask(two, grid, DetectionResult{0, 2, {0, 0, 5, 5}, 1.0}, 10, 10);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("class 2"), std::string::npos);
  }
  EXPECT_THROW(predict_mask(bank, std::vector<float>(5), DetectionResult{0, 1, {0, 0, 5, 5}, 1.0}, 10, 10),
               InputError);
}

TEST(PredictMaskProperties, MaskStaysInsideBox) {
  const auto r = testing::check_mask_in_box(1000, 21);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

// ---- ground-truth boxes ---------------------------------------------------

TEST(GtBoxes, OracleScoreMapReproducesInstanceMasks) {
  TempDir dir;
  SyntheticConfig c;
  c.train_images = 1;
  c.test_images = 20;
  c.f = 2;
  const auto index = generate_synthetic(c, dir.path());
  const auto instances = read_ground_truth(index, "test");
  double sum = 0.0, worst = 1.0;
  std::size_t n = 0;
  for (const auto& g : read_grids(index, "test")) {
    if (g.source != GridSource::ground_truth) continue;
    ASSERT_GE(g.gt_instance, 0);
    Matrix map(g.s, g.s);
    for (std::uint32_t i = 0; i < g.s; ++i)
      for (std::uint32_t j = 0; j < g.s; ++j) map(i, j) = g.gt_mask_grid[std::size_t{i} * g.s + j] ? 1.0 : -1.0;
    const auto& img = index.image(g.image_id);
    const auto pasted = RleMask::encode(paste_score_map(map, g.box, img.width, img.height, 0.0));
    const double v = iou(pasted, instances[static_cast<std::size_t>(g.gt_instance)].mask);
    sum += v;
    worst = std::min(worst, v);
    ++n;
  }
  ASSERT_GT(n, 0u);
  EXPECT_GE(sum / static_cast<double>(n), 0.95);
  EXPECT_GE(worst, 0.8);
}

TEST(GtBoxes, MatchesPerGridPredictionAndHandlesEmptyInput) {
  auto& d = synthetic();
  const auto bank = train_on(d.train, d.index, 0.3);
  const auto out = segment_gt_boxes(bank, d.test, d.index);
  ASSERT_EQ(out.size(), d.test.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto& g = d.test[k];
    const auto& img = d.index.image(g.image_id);
    const auto ref = predict_mask(bank, g.grid, DetectionResult{g.image_id, g.class_id, g.box, 1.0}, img.width, img.height);
    EXPECT_EQ(out[k].mask, ref.mask);
    EXPECT_EQ(out[k].detection.score, 1.0);
    EXPECT_EQ(out[k].detection.box, g.box);
  }
  EXPECT_TRUE(segment_gt_boxes(bank, {}, d.index).empty());
  EXPECT_EQ(segment_gt_boxes(bank, d.test, d.index)[0].mask, out[0].mask);
}

}  // namespace
}  // namespace olseg
