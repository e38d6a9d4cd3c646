#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "olseg/boxes.hpp"
#include "olseg/detection.hpp"
#include "olseg/error.hpp"
#include "olseg/synthetic.hpp"
#include "oracles.hpp"
#include "properties.hpp"
#include "test_support.hpp"

namespace olseg {
namespace {

using testing::random_box;
using testing::random_matrix;
using testing::TempDir;

RoIFeature roi_at(const Box& b, RoiSource source = RoiSource::rpn_proposal) {
  RoIFeature r;
  r.box = b;
  r.source = source;
  return r;
}

// ---- label assignment -----------------------------------------------------

TEST(AssignLabels, IdenticalBoxIsPositiveWithUnitIoU) {
  std::vector<RoIFeature> rois{roi_at({10, 10, 30, 30})};
  const std::vector<GroundTruthBox> gts{{{10, 10, 30, 30}, 2}};
  assign_roi_labels(rois, gts, 0.5, 0.3);
  EXPECT_EQ(rois[0].assigned_label, 2);
  EXPECT_EQ(rois[0].assigned_iou, 1.0f);
}

TEST(AssignLabels, BandIsIgnoredAndLowOverlapIsBackground) {
  // IoU 0.45: a 20x20 GT and a box sharing a 20 x h strip.
  const Box gt{0, 0, 20, 20};
  const double h = 0.45 * 2 * 400 / (1.45 * 20);  // inter/(800-inter) = 0.45
  std::vector<RoIFeature> rois{roi_at({0, 20 - h, 20, 40 - h}), roi_at({50, 50, 60, 60})};
  assign_roi_labels(rois, std::vector<GroundTruthBox>{{gt, 1}}, 0.5, 0.3);
  EXPECT_NEAR(rois[0].assigned_iou, 0.45, 1e-6);
  EXPECT_EQ(rois[0].assigned_label, kLabelIgnored);
  EXPECT_EQ(rois[1].assigned_label, kLabelBackground);
}

TEST(AssignLabels, EmptyGroundTruthGivesBackgroundAndGtSourcedArePositive) {
  std::vector<RoIFeature> rois{roi_at({0, 0, 5, 5})};
  assign_roi_labels(rois, {}, 0.5, 0.3);
  EXPECT_EQ(rois[0].assigned_label, kLabelBackground);
  std::vector<RoIFeature> gt_rois{roi_at({0, 0, 10, 10}, RoiSource::ground_truth)};
  assign_roi_labels(gt_rois, std::vector<GroundTruthBox>{{{0, 0, 10, 30}, 3}}, 0.5, 0.3);
  EXPECT_EQ(gt_rois[0].assigned_label, 3);
}

TEST(AssignLabels, MatchesExhaustiveMaxIoUAssignment) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<GroundTruthBox> gts;
    for (std::uint32_t g = 0; g < 3; ++g) gts.push_back({random_box(rng, 100, 100, 5), 1 + g});
    std::vector<RoIFeature> rois;
    for (int r = 0; r < 20; ++r) rois.push_back(roi_at(random_box(rng, 100, 100, 5)));
    assign_roi_labels(rois, gts, 0.5, 0.3);
    for (const auto& roi : rois) {
      double best = -1;
      std::uint32_t cls = 0;
      for (const auto& g : gts) {
        const double v = testing::box_iou_direct(roi.box, g.box);
        if (v > best) {
          best = v;
          cls = g.class_id;
        }
      }
      const std::int32_t expected =
          best >= 0.5 ? static_cast<std::int32_t>(cls) : (best < 0.3 ? kLabelBackground : kLabelIgnored);
      EXPECT_EQ(roi.assigned_label, expected);
      EXPECT_NEAR(roi.assigned_iou, best, 1e-6);
    }
  }
}

// ---- box deltas -----------------------------------------------------------

TEST(BoxDeltas, IdentityInverseAndHandCase) {
  const Box p{0, 0, 10, 10}, g{5, 0, 15, 10};
  const auto zero = compute_bbox_targets(p, p);
  for (double v : zero) EXPECT_EQ(v, 0.0);
  const auto t = compute_bbox_targets(p, g);
  EXPECT_DOUBLE_EQ(t[0], 0.5);
  EXPECT_DOUBLE_EQ(t[1], 0.0);
  EXPECT_DOUBLE_EQ(t[2], 0.0);
  EXPECT_DOUBLE_EQ(t[3], 0.0);
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const Box a = random_box(rng, 500, 500, 20), b = random_box(rng, 500, 500, 20);
    const Box back = apply_bbox_deltas(a, compute_bbox_targets(a, b));
    EXPECT_NEAR(back.x1, b.x1, 1e-9);
    EXPECT_NEAR(back.y1, b.y1, 1e-9);
    EXPECT_NEAR(back.x2, b.x2, 1e-9);
    EXPECT_NEAR(back.y2, b.y2, 1e-9);
  }
  EXPECT_THROW(compute_bbox_targets(Box{0, 0, 0, 10}, g), InputError);
  EXPECT_THROW(apply_bbox_deltas(Box{0, 0, 10, 0}, zero), InputError);
}

TEST(BoxIoU, HandCases) {
  EXPECT_DOUBLE_EQ(iou(Box{0, 0, 10, 10}, Box{0, 0, 10, 10}), 1.0);
  EXPECT_DOUBLE_EQ(iou(Box{0, 0, 10, 10}, Box{20, 20, 30, 30}), 0.0);
  EXPECT_DOUBLE_EQ(iou(Box{0, 0, 10, 10}, Box{5, 0, 15, 10}), 1.0 / 3.0);
}

// ---- NMS ------------------------------------------------------------------

TEST(Nms, DuplicateBoxKeepsHigherScore) {
  const std::vector<Box> boxes{{0, 0, 10, 10}, {0, 0, 10, 10}};
  const std::vector<double> scores{0.8, 0.9};
  EXPECT_EQ(nms(boxes, scores, 0.5), std::vector<std::size_t>{1});
  EXPECT_TRUE(nms(std::vector<Box>{}, std::vector<double>{}, 0.5).empty());
}

TEST(Nms, MatchesQuadraticReference) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 100; ++i) {
      boxes.push_back(random_box(rng, 200, 200));
      scores.push_back(rng.uniform());
    }
    EXPECT_EQ(nms(boxes, scores, 0.3), testing::quadratic_nms(boxes, scores, 0.3));
  }
}

TEST(NmsProperties, Idempotence) {
  const auto r = testing::check_nms_idempotence(1000, 11);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

// ---- minibootstrap --------------------------------------------------------

struct Problem {
  Matrix positives, negatives;
};

Problem make_problem(Rng& rng, Eigen::Index np, Eigen::Index nn, Eigen::Index d, double shift) {
  Problem p{random_matrix(rng, np, d), random_matrix(rng, nn, d)};
  p.positives.col(0).array() += shift;
  return p;
}

FalkonOptions small_falkon() {
  FalkonOptions o;
  o.centers = 20;
  o.sigma = 2.0;
  o.lambda = 1e-3;
  o.max_iterations = 10;
  o.seed = 4;
  return o;
}

TEST(Minibootstrap, SingleBatchTrainsOnceWithoutMining) {
  Rng rng(8);
  const auto p = make_problem(rng, 30, 200, 3, 2.0);
  MinibootstrapConfig cfg;
  cfg.batches = 1;
  cfg.batch_size = 50;
  const auto r = minibootstrap_train(p.positives, p.negatives, cfg, small_falkon());
  ASSERT_EQ(r.rounds.size(), 1u);
  EXPECT_TRUE(r.rounds[0].hard.empty());
  EXPECT_EQ(r.negatives_visited, 50u);
  EXPECT_EQ(r.negatives_kept, 50u);
}

TEST(Minibootstrap, VisitsMinOfPoolAndBatchBudget) {
  Rng rng(9);
  const auto p = make_problem(rng, 40, 50000, 2, 6.0);
  MinibootstrapConfig cfg;  // n_B = 15, BS = 2000
  FalkonOptions o = small_falkon();
  o.max_iterations = 5;
  const auto r = minibootstrap_train(p.positives, p.negatives, cfg, o);
  EXPECT_EQ(r.negatives_visited, 30000u);
  EXPECT_EQ(r.rounds.size(), 15u);

  const auto small = make_problem(rng, 10, 700, 2, 6.0);
  EXPECT_EQ(minibootstrap_train(small.positives, small.negatives, cfg, o).negatives_visited, 700u);
}

TEST(Minibootstrap, MatchesBruteForceOracleAndIsDeterministic) {
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    Rng rng(derive_seed(100, inst));
    const auto p = make_problem(rng, 20 + static_cast<Eigen::Index>(rng.below(30)), 300 + static_cast<Eigen::Index>(rng.below(300)), 3, rng.uniform(0.5, 2.5));
    MinibootstrapConfig cfg;
    cfg.batches = 2 + rng.below(5);
    cfg.batch_size = 40 + rng.below(80);
    cfg.hard_threshold = rng.uniform(-1.2, -0.2);
    cfg.max_negatives_kept = 60 + rng.below(150);
    cfg.seed = inst;
    const auto falkon = small_falkon();
    const auto got = minibootstrap_train(p.positives, p.negatives, cfg, falkon, true);
    const auto ref = testing::minibootstrap_oracle(p.positives, p.negatives, cfg, falkon);
    ASSERT_EQ(got.rounds.size(), ref.rounds.size());
    for (std::size_t k = 0; k < got.rounds.size(); ++k) {
      EXPECT_EQ(got.rounds[k].hard, ref.rounds[k].hard) << "instance " << inst << " round " << k;
      EXPECT_EQ(got.rounds[k].active, ref.rounds[k].active) << "instance " << inst << " round " << k;
      EXPECT_LE(got.rounds[k].active.size(), cfg.max_negatives_kept + cfg.batch_size);
    }
    EXPECT_EQ(got.model.alpha, ref.model.alpha);
    const auto again = minibootstrap_train(p.positives, p.negatives, cfg, falkon);
    EXPECT_EQ(again.model.alpha, got.model.alpha);
    EXPECT_EQ(again.model.centers, got.model.centers);
  }
}

TEST(Minibootstrap, ConfigValidation) {
  MinibootstrapConfig c;
  c.batches = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.iou_bg = 0.6;
  EXPECT_THROW(c.validate(), ConfigError);
  Rng rng(1);
  const auto p = make_problem(rng, 3, 3, 2, 1.0);
  EXPECT_THROW(minibootstrap_train(Matrix(0, 2), p.negatives, {}, small_falkon()), InputError);
}

// ---- detect ---------------------------------------------------------------

// A one-center classifier with score exp(-x^2 / 2) for feature x.
DetectionBank scoring_bank(std::uint32_t classes) {
  DetectionBank bank;
  bank.num_classes = classes;
  bank.dim = 1;
  bank.nms_iou = 0.5;
  bank.score_threshold = 0.0;
  for (std::uint32_t c = 0; c < classes; ++c) {
    FalkonModel m;
    m.centers = MatrixF::Zero(1, 1);
    m.alpha = Vector::Ones(1);
    m.sigma = 1.0;
    bank.classifiers.push_back(m);
    bank.regressors.push_back(std::nullopt);
  }
  return bank;
}

RoIFeature scored_roi(const Box& b, double score) {
  RoIFeature r = roi_at(b);
  r.feature = {static_cast<float>(std::sqrt(-2.0 * std::log(score)))};
  return r;
}

TEST(Detect, NmsRemovesDuplicatesPerClassOnly) {
  const std::vector<RoIFeature> rois{scored_roi({0, 0, 10, 10}, 0.9), scored_roi({0, 0, 10, 10}, 0.8)};
  auto one = detect(3, rois, scoring_bank(1), 100, 100);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_NEAR(one[0].score, 0.9, 1e-6);
  EXPECT_EQ(one[0].image_id, 3u);
  // Two classes each see both boxes; one survivor per class.
  const auto two = detect(3, rois, scoring_bank(2), 100, 100);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_NE(two[0].class_id, two[1].class_id);
  EXPECT_TRUE(detect(0, {}, scoring_bank(1), 10, 10).empty());
}

TEST(Detect, ThresholdMonotonicityAndSortedOutput) {
  Rng rng(12);
  std::vector<RoIFeature> rois;
  for (int i = 0; i < 60; ++i) rois.push_back(scored_roi(random_box(rng, 100, 100), rng.uniform(0.01, 0.99)));
  auto bank = scoring_bank(2);
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (double thr : {0.0, 0.2, 0.4, 0.6, 0.8, 0.95}) {
    bank.score_threshold = thr;
    const auto out = detect(0, rois, bank, 100, 100);
    EXPECT_LE(out.size(), prev);
    prev = out.size();
    for (std::size_t k = 1; k < out.size(); ++k) EXPECT_GE(out[k - 1].score, out[k].score);
    for (const auto& d : out) {
      EXPECT_GE(d.score, thr);
      EXPECT_TRUE(d.box.well_formed());
      EXPECT_GE(d.box.x1, 0.0);
      EXPECT_LE(d.box.x2, 100.0);
    }
  }
}

TEST(Detect, BoxesAreRefinedAndClipped) {
  auto bank = scoring_bank(1);
  RlsRegressor reg;
  reg.weights = Eigen::Matrix<double, 4, Eigen::Dynamic>::Zero(4, 2);
  reg.weights(0, 1) = 0.5;  // shift right by half a width
  bank.regressors[0] = reg;
  const auto out = detect(0, std::vector<RoIFeature>{scored_roi({80, 0, 100, 20}, 0.9)}, bank, 100, 100);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_DOUBLE_EQ(out[0].box.x1, 90.0);
  EXPECT_DOUBLE_EQ(out[0].box.x2, 100.0);
}

TEST(DetectionBank, TrainsOnSyntheticDataAndIsThreadCountInvariant) {
  TempDir dir;
  SyntheticConfig c;
  c.train_images = 40;
  c.test_images = 5;
  c.f = 4;
  const auto index = generate_synthetic(c, dir.path());
  const auto rois = read_rois(index, "train");
  const auto gts = group_ground_truth(read_ground_truth(index, "train"));
  DetectionTrainConfig cfg;
  cfg.falkon = small_falkon();
  cfg.falkon.centers = 100;
  cfg.falkon.sigma = 4.0;
  cfg.bootstrap.batch_size = 300;
  cfg.threads = 1;
  DetectionTrainReport report;
  const auto a = train_detection_bank(rois, gts, index.num_classes, index.dims.d, cfg, &report);
  cfg.threads = 3;
  const auto b = train_detection_bank(rois, gts, index.num_classes, index.dims.d, cfg);
  ASSERT_EQ(report.classes.size(), 3u);
  for (std::uint32_t k = 0; k < 3; ++k) {
    ASSERT_TRUE(a.classifiers[k] && b.classifiers[k]);
    EXPECT_EQ(a.classifiers[k]->alpha, b.classifiers[k]->alpha);
    EXPECT_EQ(a.regressors[k]->weights, b.regressors[k]->weights);
    EXPECT_GT(report.classes[k].positives, 0u);
    EXPECT_GT(report.classes[k].negatives_visited, 0u);
  }
  std::stringstream ss;
  write_detection_bank(ss, a);
  const std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_detection_bank(truncated), LoadError);
}

TEST(DetectionBank, ClassWithoutPositivesIsSkippedWithWarning) {
  std::vector<RoIFeature> rois;
  GroundTruthByImage gts;
  gts[0] = {{{0, 0, 10, 10}, 1}};
  for (int i = 0; i < 20; ++i) {
    RoIFeature r = roi_at(i < 5 ? Box{0, 0, 10, 10} : Box{50, 50, 60, 60});
    r.feature = {static_cast<float>(i < 5 ? 3.0 : -3.0)};
    rois.push_back(r);
  }
  DetectionTrainConfig cfg;
  cfg.falkon = small_falkon();
  DetectionTrainReport report;
  const auto bank = train_detection_bank(rois, gts, 2, 1, cfg, &report);
  EXPECT_TRUE(bank.classifiers[0].has_value());
  EXPECT_FALSE(bank.classifiers[1].has_value());
  EXPECT_TRUE(report.classes[1].skipped);
  EXPECT_FALSE(report.warnings.empty());
}

}  // namespace
}  // namespace olseg
