#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "olseg/feature_store.hpp"

namespace olseg {

/// Seeded stand-in for a real feature extractor.
///
/// Each image holds a few non-overlapping ellipses. Detection features of a
/// proposal are a Gaussian around quality * separation * e_c, where c is the
/// class of its best-overlapping object and quality ramps from 0 at IoU 0.3
/// to 1 at IoU 0.7; background proposals sit at the origin. When d >= N + 4
/// the four coordinates after the class axes additionally carry
/// box_signal * (clamped box deltas to the object), so box refinement has
/// something to learn. Mask grid cells sample the label map at one pixel
/// and carry separation * e_c for object pixels, the origin for background,
/// plus isotropic noise.
struct SyntheticConfig {
  std::uint32_t num_classes = 3;
  std::uint32_t train_images = 200;
  std::uint32_t val_images = 0;
  std::uint32_t test_images = 50;
  std::uint32_t objects_min = 1;
  std::uint32_t objects_max = 3;
  std::uint32_t d = 16;
  std::uint32_t s = 28;
  std::uint32_t f = 32;
  double separation = 10.0;
  double noise = 1.0;
  std::uint64_t seed = 0;
  std::uint32_t image_width = 160;
  std::uint32_t image_height = 120;
  std::uint32_t proposals_per_object = 10;
  std::uint32_t background_proposals = 20;
  double box_signal = 20.0;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticConfig from_json(const nlohmann::json& j);
};

/// Writes manifest, rois/grids/masks for every split and returns the index.
/// Output is byte-identical for a fixed config.
DatasetIndex generate_synthetic(const SyntheticConfig& config, const std::filesystem::path& out);

/// Renders mask-head grids for arbitrary boxes of a synthetic dataset, which
/// is what a real exporter does with RoI Align on detection boxes. The grid
/// for a given (image, box, class) is deterministic.
class SyntheticGridRenderer {
 public:
  SyntheticGridRenderer(SyntheticConfig config, const DatasetIndex& index,
                        std::span<const GroundTruthInstance> instances);

  /// Reconstructs the renderer from a generated dataset's manifest.
  static SyntheticGridRenderer from_dataset(const DatasetIndex& index, std::string_view split);

  SegFeatureGrid render(std::uint32_t image_id, const Box& box, std::uint32_t class_id, GridSource source) const;

  const SyntheticConfig& config() const { return config_; }

 private:
  struct LabelMap {
    std::uint32_t width, height;
    std::vector<std::uint8_t> labels;  // class id per pixel, 0 background
  };

  SyntheticConfig config_;
  std::unordered_map<std::uint32_t, LabelMap> label_maps_;
};

}  // namespace olseg
