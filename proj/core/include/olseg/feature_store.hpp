#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "olseg/boxes.hpp"
#include "olseg/rle.hpp"

namespace olseg {

inline constexpr std::uint32_t kFormatVersion = 1;

/// Label sentinels for RoIFeature::assigned_label.
inline constexpr std::int32_t kLabelUnassigned = -1;
inline constexpr std::int32_t kLabelIgnored = -2;
inline constexpr std::int32_t kLabelBackground = 0;

enum class RoiSource : std::uint32_t { rpn_proposal = 0, ground_truth = 1 };
enum class GridSource : std::uint32_t { ground_truth = 0, detection = 1 };

struct ImageRecord {
  std::uint32_t id = 0;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::string split;
};

struct FeatureDims {
  std::uint32_t d = 1024;  ///< detection feature length
  std::uint32_t s = 28;    ///< mask grid side
  std::uint32_t f = 256;   ///< mask grid channels
};

/// Parsed manifest.json plus the dataset root it was read from.
struct DatasetIndex {
  std::filesystem::path root;
  std::uint32_t num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<ImageRecord> images;
  FeatureDims dims;
  std::vector<std::string> splits;
  /// Producer-specific metadata ("synthetic" generator block, exporter
  /// conventions). Round-tripped verbatim.
  nlohmann::json extra = nlohmann::json::object();

  const ImageRecord* find_image(std::uint32_t id) const;
  const ImageRecord& image(std::uint32_t id) const;
  std::vector<ImageRecord> images_in(std::string_view split) const;
  bool has_split(std::string_view split) const;

  std::filesystem::path roi_file(std::string_view split) const;
  std::filesystem::path grid_file(std::string_view split) const;
  std::filesystem::path mask_file(std::string_view split) const;

  /// Throws LoadError on violated manifest invariants.
  void check() const;
  nlohmann::json to_json() const;
};

/// One pooled detection-head feature vector.
struct RoIFeature {
  std::uint32_t image_id = 0;
  Box box;
  std::vector<float> feature;
  RoiSource source = RoiSource::rpn_proposal;
  std::int32_t assigned_label = kLabelUnassigned;
  float assigned_iou = 0.0f;
};

/// One s x s x f mask-head feature map. Layout is ((i * s) + j) * f + k for
/// row i, column j, channel k. gt_mask_grid is s*s bytes (0/1) for ground
/// truth grids and empty for detection grids.
struct SegFeatureGrid {
  std::uint32_t image_id = 0;
  Box box;
  std::uint32_t class_id = 0;
  GridSource source = GridSource::ground_truth;
  /// Record index of the matching instance in masks_<split>.bin, or -1.
  std::int32_t gt_instance = -1;
  std::uint32_t s = 0;
  std::uint32_t f = 0;
  std::vector<float> grid;
  std::vector<std::uint8_t> gt_mask_grid;

  std::span<const float> cell(std::uint32_t i, std::uint32_t j) const {
    return std::span<const float>(grid).subspan((static_cast<std::size_t>(i) * s + j) * f, f);
  }
};

/// Annotated instance with its image-resolution mask.
struct GroundTruthInstance {
  std::uint32_t image_id = 0;
  std::uint32_t class_id = 0;
  Box box;
  RleMask mask;
};

DatasetIndex load_dataset(const std::filesystem::path& root);
void write_manifest(const DatasetIndex& index);

/// Nearest-neighbour s x s view of `full` inside `box`: cell (i, j) samples
/// pixel (floor(x1 + (j + 0.5) w / s), floor(y1 + (i + 0.5) h / s)), clamped
/// to the image.
std::vector<std::uint8_t> resample_mask_nearest(const Bitmap& full, const Box& box, std::uint32_t s);

/// Pixel sampled by grid cell (i, j) of `box`; shared by the nearest-neighbour
/// resampler and synthetic feature rendering.
std::pair<std::uint32_t, std::uint32_t> grid_cell_pixel(const Box& box, std::uint32_t s, std::uint32_t i,
                                                        std::uint32_t j, std::uint32_t width, std::uint32_t height);

namespace detail {

// Length-prefixed record file with a 16-byte header
// (magic, u32 version, u32 dim_a, u32 dim_b).
class RecordFileReader {
 public:
  RecordFileReader(const std::filesystem::path& path, const char (&magic)[5]);

  struct Record {
    std::uint64_t offset;  ///< offset of the length prefix
    std::vector<std::uint8_t> payload;
  };
  std::optional<Record> next();

  std::uint32_t dim_a() const { return dim_a_; }
  std::uint32_t dim_b() const { return dim_b_; }
  const std::string& name() const { return name_; }
  [[noreturn]] void fail(std::uint64_t offset, const std::string& what) const;

 private:
  std::ifstream in_;
  std::string name_;
  std::uint64_t offset_ = 0;
  std::uint64_t size_ = 0;
  std::uint32_t dim_a_ = 0;
  std::uint32_t dim_b_ = 0;
};

class RecordFileWriter {
 public:
  RecordFileWriter(const std::filesystem::path& path, const char (&magic)[5], std::uint32_t dim_a,
                   std::uint32_t dim_b);
  void write(std::span<const std::uint8_t> payload);
  void close();
  ~RecordFileWriter();

  RecordFileWriter(const RecordFileWriter&) = delete;
  RecordFileWriter& operator=(const RecordFileWriter&) = delete;

 private:
  std::ofstream out_;
  std::string name_;
};

}  // namespace detail

/// Lazily streams rois_<split>.bin, validating each record against the
/// manifest. Corrupt records raise LoadError with file name and offset.
class RoiReader {
 public:
  RoiReader(const DatasetIndex& index, std::string_view split);
  std::optional<RoIFeature> next();

 private:
  const DatasetIndex& index_;
  detail::RecordFileReader file_;
};

class GridReader {
 public:
  GridReader(const DatasetIndex& index, std::string_view split);
  std::optional<SegFeatureGrid> next();

 private:
  const DatasetIndex& index_;
  detail::RecordFileReader file_;
};

class MaskReader {
 public:
  MaskReader(const DatasetIndex& index, std::string_view split);
  std::optional<GroundTruthInstance> next();

 private:
  const DatasetIndex& index_;
  detail::RecordFileReader file_;
};

std::vector<RoIFeature> read_rois(const DatasetIndex& index, std::string_view split);
std::vector<SegFeatureGrid> read_grids(const DatasetIndex& index, std::string_view split);
std::vector<GroundTruthInstance> read_ground_truth(const DatasetIndex& index, std::string_view split);

class RoiWriter {
 public:
  RoiWriter(const std::filesystem::path& path, std::uint32_t d);
  void write(const RoIFeature& roi);
  void close() { file_.close(); }

 private:
  detail::RecordFileWriter file_;
  std::uint32_t d_;
};

class GridWriter {
 public:
  GridWriter(const std::filesystem::path& path, std::uint32_t s, std::uint32_t f);
  void write(const SegFeatureGrid& grid);
  void close() { file_.close(); }

 private:
  detail::RecordFileWriter file_;
  std::uint32_t s_, f_;
};

class MaskWriter {
 public:
  explicit MaskWriter(const std::filesystem::path& path);
  void write(const GroundTruthInstance& instance);
  void close() { file_.close(); }

 private:
  detail::RecordFileWriter file_;
};

struct SplitCounts {
  std::string split;
  std::size_t images = 0;
  std::size_t rois = 0;
  std::size_t grids = 0;
  std::size_t instances = 0;
};

struct ValidationReport {
  std::vector<SplitCounts> splits;
  std::vector<std::string> errors;
  bool ok() const { return errors.empty(); }
};

/// Full pass over every file of every split. Collects errors instead of
/// stopping at the first one (one per file at most, since a corrupt record
/// desynchronizes the stream).
ValidationReport validate_dataset(const DatasetIndex& index);
ValidationReport validate_dataset(const std::filesystem::path& root);

}  // namespace olseg
