#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "olseg/detection.hpp"
#include "olseg/falkon.hpp"
#include "olseg/feature_store.hpp"
#include "olseg/rle.hpp"
#include "olseg/rng.hpp"

namespace olseg {

/// Pixel feature rows (f floats each) contributed by one grid to the
/// sample set of its own class.
struct GridPixels {
  std::uint32_t class_id = 0;
  std::vector<float> positives;
  std::vector<float> negatives;
  std::size_t positive_count() const;
  std::size_t negative_count() const;
  std::uint32_t f = 0;
};

/// Flattens an s x s x f grid into s^2 rows of length f: cell (i, j) is a
/// positive when gt_mask_grid(i, j) = 1, a negative otherwise.
GridPixels extract_pixel_samples(const SegFeatureGrid& grid, std::uint32_t num_classes);

/// ceil(r * count) for r in (0, 1]; config error otherwise.
std::size_t subsample_count(std::size_t count, double r);

/// subsample_count(count, r) distinct indices of [0, count), uniform
/// without replacement.
std::vector<std::size_t> subsample(std::size_t count, double r, Rng& rng);

/// Pools pixel samples per class and polarity across grids.
class PixelSampleCollector {
 public:
  PixelSampleCollector(std::uint32_t num_classes, std::uint32_t f);

  void add(const SegFeatureGrid& grid);

  std::uint32_t num_classes() const { return static_cast<std::uint32_t>(classes_.size()); }
  std::uint32_t f() const { return f_; }
  std::size_t positive_count(std::uint32_t class_id) const;
  std::size_t negative_count(std::uint32_t class_id) const;

  struct ClassPool {
    std::vector<float> positives;
    std::vector<float> negatives;
  };
  const ClassPool& pool(std::uint32_t class_id) const { return classes_.at(class_id - 1); }

 private:
  std::uint32_t f_;
  std::vector<ClassPool> classes_;
};

/// Per-class subsampled training pixels.
struct PixelSampleSet {
  struct ClassSamples {
    Matrix positives;
    Matrix negatives;
    std::size_t pre_positives = 0;
    std::size_t pre_negatives = 0;
  };
  std::vector<ClassSamples> classes;  ///< index class_id - 1
  double sampling_factor = 1.0;
  std::uint64_t seed = 0;
};

/// Subsamples each class and polarity independently over the pooled set.
PixelSampleSet subsample_pixels(const PixelSampleCollector& collector, double r, std::uint64_t seed);

struct MaskBank {
  std::uint32_t num_classes = 0;
  std::uint32_t s = 0;
  std::uint32_t f = 0;
  double mask_score_threshold = 0.0;
  std::vector<std::optional<FalkonModel>> models;  ///< index class_id - 1
};

struct MaskTrainConfig {
  FalkonOptions falkon{};
  double sampling_factor = 0.3;
  double mask_threshold = 0.0;
  std::uint64_t seed = 0;
  std::size_t threads = 0;

  void validate() const;
};

struct MaskClassStats {
  std::uint32_t class_id = 0;
  std::size_t pre_positives = 0;
  std::size_t pre_negatives = 0;
  std::size_t kept_positives = 0;
  std::size_t kept_negatives = 0;
  double seconds = 0.0;
  bool skipped = false;
};

struct MaskTrainReport {
  std::vector<MaskClassStats> classes;
  std::vector<std::string> warnings;
  double subsample_seconds = 0.0;
  double train_seconds = 0.0;  ///< subsampling plus all classifier fits
};

/// Trains one +-1 pixel classifier per class on its subsampled set. Classes
/// lacking either polarity are skipped with a warning.
MaskBank train_mask_bank(const PixelSampleSet& samples, std::uint32_t s, std::uint32_t f, const MaskTrainConfig& config,
                         MaskTrainReport* report = nullptr);

/// Collect, subsample (config.sampling_factor, config.seed) and train.
MaskBank train_mask_bank(const PixelSampleCollector& collector, std::uint32_t s, const MaskTrainConfig& config,
                         MaskTrainReport* report = nullptr);

struct InstanceMaskResult {
  DetectionResult detection;
  RleMask mask;
};

/// s x s map of class scores for a grid tensor.
Matrix mask_score_map(const MaskBank& bank, std::uint32_t class_id, std::span<const float> grid);

/// Bilinearly resamples an s x s score map onto the pixels of `box`
/// (clipped to the image) and keeps pixels whose value exceeds threshold.
/// Pixel (x, y) is inside the box when its center is; it reads the map at
/// u = (x + 0.5 - x1) / w * s - 0.5, clamped to the map edges.
Bitmap paste_score_map(const Matrix& scores, const Box& box, std::uint32_t image_width, std::uint32_t image_height,
                       double threshold);

InstanceMaskResult predict_mask(const MaskBank& bank, std::span<const float> grid, const DetectionResult& detection,
                                std::uint32_t image_width, std::uint32_t image_height);

/// Masks for ground-truth boxes (score 1), bypassing detection.
std::vector<InstanceMaskResult> segment_gt_boxes(const MaskBank& bank, std::span<const SegFeatureGrid> grids,
                                                 const DatasetIndex& index);

void write_mask_bank(std::ostream& out, const MaskBank& bank);
MaskBank read_mask_bank(std::istream& in);

}  // namespace olseg
