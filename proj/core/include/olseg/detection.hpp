#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "olseg/boxes.hpp"
#include "olseg/falkon.hpp"
#include "olseg/feature_store.hpp"
#include "olseg/rls.hpp"

namespace olseg {

struct GroundTruthBox {
  Box box;
  std::uint32_t class_id = 0;
};

/// Hard-negative mining schedule.
struct MinibootstrapConfig {
  std::size_t batches = 15;      ///< n_B
  std::size_t batch_size = 2000;  ///< BS
  /// Negatives of a new batch scoring at or above this are kept as hard.
  double hard_threshold = -1.0;
  std::size_t max_negatives_kept = 16000;
  double iou_fg = 0.5;
  double iou_bg = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Labels each RoI in place. A RoI is positive for the class of its best
/// ground truth (ties to the lower index) when IoU >= iou_fg, background
/// when the best IoU < iou_bg, ignored otherwise. Ground-truth sourced RoIs
/// are positives for their own (best-matching) box.
void assign_roi_labels(std::span<RoIFeature> rois, std::span<const GroundTruthBox> gts, double iou_fg, double iou_bg);

/// Index of the highest-IoU box in `gts` (ties to the lower index) and the
/// IoU; nullopt when gts is empty.
std::optional<std::pair<std::size_t, double>> best_match(const Box& box, std::span<const GroundTruthBox> gts);

struct MinibootstrapRound {
  std::vector<std::size_t> batch;   ///< pool indices visited this round
  std::vector<std::size_t> hard;    ///< batch members kept as hard negatives
  std::vector<std::size_t> active;  ///< active negative set after the round
  std::optional<FalkonModel> scoring_model;  ///< model that scored this batch
};

struct MinibootstrapResult {
  FalkonModel model;
  std::size_t negatives_visited = 0;
  std::size_t negatives_kept = 0;
  std::vector<MinibootstrapRound> rounds;
};

/// Trains one binary classifier (+1 positives, -1 negatives) by visiting
/// the shuffled negative pool in n_B batches of BS. Round 0 uses the whole
/// first batch; later rounds score the new batch with the current model,
/// append negatives scoring >= hard_threshold, trim the active set to the
/// max_negatives_kept highest-scoring, and retrain.
MinibootstrapResult minibootstrap_train(const MatrixRef& positives, const MatrixRef& negatives,
                                        const MinibootstrapConfig& config, const FalkonOptions& falkon,
                                        bool record_models = false);

struct DetectionBank {
  std::uint32_t num_classes = 0;
  std::uint32_t dim = 0;
  std::vector<std::optional<FalkonModel>> classifiers;  ///< index class_id - 1
  std::vector<std::optional<RlsRegressor>> regressors;
  double score_threshold = 0.0;
  double nms_iou = 0.3;
};

struct DetectionResult {
  std::uint32_t image_id = 0;
  std::uint32_t class_id = 0;
  Box box;
  double score = 0.0;
};

struct DetectionTrainConfig {
  FalkonOptions falkon{};
  MinibootstrapConfig bootstrap{};
  double rls_lambda = 1.0;
  double score_threshold = 0.0;
  double nms_iou = 0.3;
  std::size_t threads = 0;

  void validate() const;
};

struct DetectionClassStats {
  std::uint32_t class_id = 0;
  std::size_t positives = 0;
  std::size_t negative_pool = 0;
  std::size_t negatives_visited = 0;
  std::size_t negatives_kept = 0;
  std::size_t rounds = 0;
  double seconds = 0.0;
  bool skipped = false;
};

struct DetectionTrainReport {
  std::vector<DetectionClassStats> classes;
  std::vector<std::string> warnings;
};

using GroundTruthByImage = std::unordered_map<std::uint32_t, std::vector<GroundTruthBox>>;

GroundTruthByImage group_ground_truth(std::span<const GroundTruthInstance> instances);

/// Assigns labels, then trains per class (concurrently, independent seeds)
/// a minibootstrapped classifier and an RLS box refiner. Negatives for
/// class c are RoIs whose best IoU with class-c ground truth is < iou_bg.
DetectionBank train_detection_bank(std::span<const RoIFeature> rois, const GroundTruthByImage& gts,
                                   std::uint32_t num_classes, std::uint32_t dim, const DetectionTrainConfig& config,
                                   DetectionTrainReport* report = nullptr);

/// Scores every RoI of one image with every class, refines and clips the
/// boxes, thresholds, applies per-class NMS, and sorts by descending score.
std::vector<DetectionResult> detect(std::uint32_t image_id, std::span<const RoIFeature> rois, const DetectionBank& bank,
                                    double image_width, double image_height);

void write_detection_bank(std::ostream& out, const DetectionBank& bank);
DetectionBank read_detection_bank(std::istream& in);

}  // namespace olseg
