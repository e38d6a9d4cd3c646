#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "olseg/boxes.hpp"
#include "olseg/rle.hpp"

namespace olseg {

enum class IouKind { bbox, segm };

const char* to_string(IouKind kind);

/// One ranked prediction after matching: its score and whether it hit an
/// unmatched ground truth.
struct ScoredMatch {
  double score = 0.0;
  bool true_positive = false;
};

/// All-point interpolated average precision (area under the precision
/// envelope). Matches are ranked by descending score; equal scores keep
/// their input order. Requires num_ground_truth > 0.
double average_precision(std::span<const ScoredMatch> matches, std::size_t num_ground_truth);

struct EvalPrediction {
  std::uint32_t image_id = 0;
  std::uint32_t class_id = 0;
  Box box;
  double score = 0.0;
  std::optional<RleMask> mask;
};

struct EvalGroundTruth {
  std::uint32_t image_id = 0;
  std::uint32_t class_id = 0;
  Box box;
  std::optional<RleMask> mask;
};

/// Greedy matching of one class: predictions in descending score order
/// each take the max-IoU ground truth of their image (ties to the lower
/// index); a hit needs IoU >= threshold and an unmatched ground truth.
/// Returned matches are in ranked order.
std::vector<ScoredMatch> match_class(std::span<const EvalPrediction> predictions,
                                     std::span<const EvalGroundTruth> ground_truth, IouKind kind,
                                     double iou_threshold);

struct ClassEval {
  std::uint32_t class_id = 0;
  std::string name;
  std::size_t num_ground_truth = 0;
  std::size_t num_predictions = 0;
  // Indexed [kind][threshold]; AP is NaN when the class has no ground truth.
  std::vector<std::vector<double>> ap;
  std::vector<std::vector<std::size_t>> true_positives;
  std::vector<std::vector<std::size_t>> false_positives;
};

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<IouKind> kinds;
  std::vector<ClassEval> classes;
  std::vector<std::vector<double>> mean_ap;  ///< [kind][threshold]
  std::vector<std::string> notes;
  double eval_seconds = 0.0;
  std::optional<double> train_seconds;

  double map(IouKind kind, double threshold) const;
  nlohmann::json to_json() const;
  std::string to_table() const;
};

struct EvalOptions {
  std::vector<double> thresholds{0.5, 0.7};
  bool segm = true;
};

/// Per-class AP and mAP over classes with at least one ground truth. With
/// options.segm every prediction and ground truth needs a mask.
EvalReport evaluate(std::span<const EvalPrediction> predictions, std::span<const EvalGroundTruth> ground_truth,
                    std::uint32_t num_classes, std::span<const std::string> class_names, const EvalOptions& options = {});

}  // namespace olseg
