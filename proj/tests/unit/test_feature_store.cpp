#include <gtest/gtest.h>

#include <fstream>
#include <map>

#include "olseg/binary_io.hpp"
#include "olseg/detection.hpp"
#include "olseg/error.hpp"
#include "olseg/feature_store.hpp"
#include "olseg/synthetic.hpp"
#include "properties.hpp"
#include "test_support.hpp"

namespace olseg {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

SyntheticConfig small_config() {
  SyntheticConfig c;
  c.train_images = 2;
  c.test_images = 1;
  c.f = 8;
  return c;
}

TEST(FeatureStore, GeneratorOutputValidates) {
  TempDir dir;
  const auto index = generate_synthetic(small_config(), dir.path());
  const auto report = validate_dataset(dir.path());
  ASSERT_TRUE(report.ok()) << report.errors.front();
  ASSERT_EQ(report.splits.size(), 2u);
  EXPECT_EQ(report.splits[0].images, 2u);
  EXPECT_GT(report.splits[0].rois, 0u);
  EXPECT_EQ(report.splits[0].grids, report.splits[0].instances);
}

TEST(FeatureStore, GeneratorIsByteDeterministic) {
  TempDir a, b;
  generate_synthetic(small_config(), a.path());
  generate_synthetic(small_config(), b.path());
  for (const auto& e : fs::directory_iterator(a.path())) {
    EXPECT_EQ(file_bytes(e.path()), file_bytes(b.path() / e.path().filename())) << e.path().filename();
  }
}

TEST(FeatureStore, WriteThenLoadIsBitIdentical) {
  TempDir src, dst;
  SyntheticConfig c = small_config();
  c.train_images = 3;
  c.test_images = 0;
  const auto index = generate_synthetic(c, src.path());
  DatasetIndex copy = index;
  copy.root = dst.path();
  write_manifest(copy);
  for (const auto& split : index.splits) {
    RoiWriter rw(copy.roi_file(split), index.dims.d);
    for (const auto& r : read_rois(index, split)) rw.write(r);
    rw.close();
    GridWriter gw(copy.grid_file(split), index.dims.s, index.dims.f);
    for (const auto& g : read_grids(index, split)) gw.write(g);
    gw.close();
    MaskWriter mw(copy.mask_file(split));
    for (const auto& m : read_ground_truth(index, split)) mw.write(m);
    mw.close();
    EXPECT_EQ(file_bytes(index.roi_file(split)), file_bytes(copy.roi_file(split)));
    EXPECT_EQ(file_bytes(index.grid_file(split)), file_bytes(copy.grid_file(split)));
    EXPECT_EQ(file_bytes(index.mask_file(split)), file_bytes(copy.mask_file(split)));
  }
}

TEST(FeatureStore, EmptySplitStreamsNothing) {
  TempDir dir;
  SyntheticConfig c = small_config();
  c.test_images = 0;
  const auto index = generate_synthetic(c, dir.path());
  EXPECT_TRUE(read_rois(index, "test").empty());
  EXPECT_TRUE(read_grids(index, "test").empty());
  EXPECT_TRUE(read_ground_truth(index, "test").empty());
}

TEST(FeatureStore, FeatureLengthMismatchIsALoadErrorAtTheRecord) {
  TempDir dir;
  DatasetIndex index;
  index.root = dir.path();
  index.num_classes = 1;
  index.class_names = {"obj"};
  index.dims = {1024, 2, 1};
  index.splits = {"train"};
  index.images = {{0, 10, 10, "train"}};
  write_manifest(index);
  {
    RoiWriter w(index.roi_file("train"), 512);
    RoIFeature roi;
    roi.box = {1, 1, 5, 5};
    roi.feature.assign(512, 0.0f);
    w.write(roi);
    w.close();
  }
  try {
    RoiReader r(index, "train");
    r.next();
    FAIL() << "expected a load error";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("rois_train.bin"), std::string::npos);
  }
  {
    // A header agreeing with the manifest but a short record.
    std::ofstream out(index.roi_file("train"), std::ios::binary | std::ios::trunc);
  }
  detail::RecordFileWriter raw(index.roi_file("train"), "ROI1", 1024, 0);
  ByteWriter w;
  w.put<std::uint32_t>(0);
  w.put<std::uint32_t>(0);
  w.put<std::int32_t>(-1);
  w.put<float>(0);
  for (float v : {1.0f, 1.0f, 5.0f, 5.0f}) w.put<float>(v);
  w.put<std::uint32_t>(512);
  for (int i = 0; i < 512; ++i) w.put<float>(0);
  raw.write(w.bytes());
  raw.close();
  try {
    read_rois(index, "train");
    FAIL() << "expected a load error";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 16"), std::string::npos) << e.what();
  }
}

TEST(FeatureStore, MissingManifestAndFilesAreLoadErrors) {
  TempDir dir;
  EXPECT_THROW(load_dataset(dir.path()), LoadError);
  const auto index = generate_synthetic(small_config(), dir.path());
  fs::remove(index.grid_file("train"));
  EXPECT_THROW(read_grids(index, "train"), LoadError);
  EXPECT_FALSE(validate_dataset(dir.path()).ok());
}

TEST(FeatureStore, ManifestKeepsExtraKeys) {
  TempDir dir;
  generate_synthetic(small_config(), dir.path());
  const auto index = load_dataset(dir.path());
  EXPECT_TRUE(index.extra.contains("synthetic"));
  EXPECT_EQ(index.extra.at("test_grid_boxes"), "refined");
}

TEST(FeatureStore, GridMaskIsNearestNeighbourViewOfFullMask) {
  TempDir dir;
  const auto index = generate_synthetic(small_config(), dir.path());
  const auto gts = read_ground_truth(index, "train");
  const auto grids = read_grids(index, "train");
  ASSERT_EQ(gts.size(), grids.size());
  for (const auto& g : grids) {
    const auto& gt = gts.at(static_cast<std::size_t>(g.gt_instance));
    const Bitmap full = gt.mask.decode();
    std::size_t expected = 0, got = 0;
    for (std::uint32_t i = 0; i < g.s; ++i) {
      for (std::uint32_t j = 0; j < g.s; ++j) {
        const auto [x, y] = grid_cell_pixel(g.box, g.s, i, j, full.width, full.height);
        expected += full.at(y, x);
        got += g.gt_mask_grid[static_cast<std::size_t>(i) * g.s + j];
      }
    }
    EXPECT_EQ(got, expected);
    EXPECT_GT(got, 0u);
  }
}

TEST(FeatureStore, GridCellPixelMapping) {
  const Box b{10, 20, 38, 48};
  EXPECT_EQ(grid_cell_pixel(b, 28, 0, 0, 100, 100), (std::pair<std::uint32_t, std::uint32_t>{10, 20}));
  EXPECT_EQ(grid_cell_pixel(b, 28, 27, 27, 100, 100), (std::pair<std::uint32_t, std::uint32_t>{37, 47}));
  EXPECT_EQ(grid_cell_pixel(Box{-10, -10, 200, 200}, 2, 1, 1, 50, 40), (std::pair<std::uint32_t, std::uint32_t>{49, 39}));
}

// Nearest-class-mean classification of the well-localized RoIs.
double class_mean_accuracy(double separation) {
  TempDir dir;
  SyntheticConfig c;
  c.train_images = 60;
  c.test_images = 0;
  c.f = 4;
  c.separation = separation;
  const auto index = generate_synthetic(c, dir.path());
  auto rois = read_rois(index, "train");
  const auto gt_by_image = group_ground_truth(read_ground_truth(index, "train"));
  std::vector<std::pair<std::vector<float>, int>> samples;
  for (auto& roi : rois) {
    const auto& gts = gt_by_image.at(roi.image_id);
    assign_roi_labels(std::span<RoIFeature>(&roi, 1), gts, 0.7, 0.3);
    if (roi.assigned_label > 0 && roi.assigned_iou >= 0.7f) samples.emplace_back(roi.feature, roi.assigned_label);
  }
  std::map<int, std::vector<double>> mean;
  std::map<int, int> count;
  for (std::size_t i = 0; i < samples.size(); i += 2) {
    auto& m = mean[samples[i].second];
    m.resize(c.d, 0.0);
    for (std::uint32_t k = 0; k < c.d; ++k) m[k] += samples[i].first[k];
    ++count[samples[i].second];
  }
  for (auto& [label, m] : mean)
    for (auto& v : m) v /= count[label];
  int correct = 0, total = 0;
  for (std::size_t i = 1; i < samples.size(); i += 2) {
    int best = 0;
    double best_d = 1e300;
    for (const auto& [label, m] : mean) {
      double d = 0;
      for (std::uint32_t k = 0; k < c.d; ++k) d += (samples[i].first[k] - m[k]) * (samples[i].first[k] - m[k]);
      if (d < best_d) {
        best_d = d;
        best = label;
      }
    }
    correct += best == samples[i].second;
    ++total;
  }
  return static_cast<double>(correct) / total;
}

TEST(Synthetic, SeparatedClassesAreLinearlySeparable) { EXPECT_GE(class_mean_accuracy(10.0), 0.99); }

TEST(Synthetic, ZeroSeparationIsNearChance) { EXPECT_LT(class_mean_accuracy(0.0), 0.5); }

TEST(Synthetic, ConfigValidation) {
  SyntheticConfig c;
  c.num_classes = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SyntheticConfig{};
  c.objects_min = 4;
  c.objects_max = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(SyntheticConfig::from_json(SyntheticConfig{}.to_json()).to_json(), SyntheticConfig{}.to_json());
}

TEST(Synthetic, UnwritablePathIsAnIoError) {
  TempDir dir;
  std::ofstream(dir / "file") << "x";
  EXPECT_THROW(generate_synthetic(small_config(), dir / "file" / "sub"), Error);
}

TEST(Synthetic, RendererReproducesStoredGrids) {
  TempDir dir;
  const auto index = generate_synthetic(small_config(), dir.path());
  const auto renderer = SyntheticGridRenderer::from_dataset(index, "test");
  for (const auto& g : read_grids(index, "test")) {
    EXPECT_EQ(renderer.render(g.image_id, g.box, g.class_id, GridSource::detection).grid, g.grid);
  }
}

TEST(FeatureStoreProperties, FormatValidation) {
  const auto r = testing::check_format_validation(1000, 7);
  EXPECT_TRUE(r.ok()) << r.failures << " failures; first: " << r.first_failure;
  EXPECT_EQ(r.cases, 1000u);
}

TEST(FeatureStoreProperties, SerializationRoundTrips) {
  const auto r = testing::check_serialization_round_trip(1200, 8);
  EXPECT_TRUE(r.ok()) << r.failures << " failures; first: " << r.first_failure;
}

}  // namespace
}  // namespace olseg
