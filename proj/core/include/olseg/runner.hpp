#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "olseg/detection.hpp"
#include "olseg/evaluation.hpp"
#include "olseg/feature_store.hpp"
#include "olseg/segmentation.hpp"

namespace olseg {

struct SweepConfig {
  std::vector<double> r_values{1.0, 0.7, 0.5, 0.3, 0.1, 0.05, 0.01};
  std::size_t repeats = 3;
};

/// Hyper-parameter grids searched on the validation split when enabled.
struct GridSearchConfig {
  bool enabled = false;
  std::string split = "val";
  std::vector<double> detection_sigma;
  std::vector<double> detection_lambda;
  std::vector<double> segmentation_sigma;
  std::vector<double> segmentation_lambda;
};

struct RunConfig {
  std::filesystem::path dataset;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  std::string train_split = "train";
  std::string test_split = "test";
  std::size_t threads = 0;
  DetectionTrainConfig detection{};
  MaskTrainConfig segmentation{};
  std::vector<double> iou_thresholds{0.5, 0.7};
  SweepConfig sweep{};
  GridSearchConfig grid_search{};

  /// Relative paths resolve against base_dir.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  /// Checks parameter ranges and that the dataset manifest exists.
  void validate() const;

  /// Per-component seeds derived from the run seed.
  DetectionTrainConfig detection_config() const;
  MaskTrainConfig segmentation_config() const;
};

/// Exclusive lock on an output directory, held for the lifetime of the
/// object. Creating it fails if another run holds the directory.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Supplies the s x s x f grid for a detection at test time.
class GridProvider {
 public:
  virtual ~GridProvider() = default;
  virtual std::vector<float> grid_for(const DetectionResult& detection) const = 0;
};

/// Synthetic datasets re-render grids for arbitrary boxes; others look up
/// detection-sourced grids stored in the split's grid file.
std::unique_ptr<GridProvider> make_grid_provider(const DatasetIndex& index, const std::string& split);

struct TimingReport {
  double feature_loading = 0.0;
  double model_selection = 0.0;
  double detection_training = 0.0;
  double segmentation_training = 0.0;
  double writing = 0.0;
  double total = 0.0;

  double phase_sum() const;
  nlohmann::json to_json() const;
};

struct TrainResult {
  DetectionBank detection;
  MaskBank masks;
  DetectionTrainReport detection_report;
  MaskTrainReport mask_report;
  TimingReport timing;
  nlohmann::json selected = nlohmann::json::object();
};

struct PredictResult {
  std::vector<EvalPrediction> detections;
  std::vector<EvalPrediction> masks;
};

inline constexpr const char* kDetectionBankFile = "detection_bank.bin";
inline constexpr const char* kMaskBankFile = "mask_bank.bin";
inline constexpr const char* kTrainReportFile = "train_report.json";
inline constexpr const char* kDetectionsFile = "detections.jsonl";
inline constexpr const char* kMasksFile = "masks.jsonl";
inline constexpr const char* kReportJsonFile = "report.json";
inline constexpr const char* kReportTextFile = "report.txt";
inline constexpr const char* kGtReportJsonFile = "gt_mask_report.json";
inline constexpr const char* kGtReportTextFile = "gt_mask_report.txt";
inline constexpr const char* kSweepFile = "sweep_r.csv";

TrainResult cmd_train(const RunConfig& config);
PredictResult cmd_predict(const RunConfig& config);
EvalReport cmd_eval(const RunConfig& config, const std::optional<std::filesystem::path>& predictions = std::nullopt);
EvalReport cmd_gt_mask_eval(const RunConfig& config);

struct SweepRow {
  double r = 1.0;
  std::size_t kept_positives = 0;
  std::size_t kept_negatives = 0;
  std::vector<double> train_seconds;  ///< one per repeat
  double median_train_seconds = 0.0;
  double segm_map50 = 0.0;
  double segm_map70 = 0.0;
  std::vector<MaskClassStats> classes;  ///< counts from the first repeat
};

std::vector<SweepRow> cmd_sweep_r(const RunConfig& config);

/// Ground truth of a split in evaluation form.
std::vector<EvalGroundTruth> load_eval_ground_truth(const DatasetIndex& index, const std::string& split);

/// Detection plus mask prediction over a split with in-memory banks.
PredictResult predict_split(const DatasetIndex& index, const std::string& split, const DetectionBank& detection,
                            const MaskBank& masks, std::size_t threads = 0);

}  // namespace olseg
