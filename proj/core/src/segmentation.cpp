#include "olseg/segmentation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <ostream>
#include <tuple>

#include "olseg/binary_io.hpp"
#include "olseg/error.hpp"
#include "olseg/parallel.hpp"
#include "olseg/rng.hpp"

namespace olseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Matrix rows_to_matrix(const std::vector<float>& pool, std::uint32_t f, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), f);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const float* src = pool.data() + rows[i] * f;
    for (std::uint32_t k = 0; k < f; ++k) out(static_cast<Eigen::Index>(i), k) = src[k];
  }
  return out;
}

}  // namespace

std::size_t GridPixels::positive_count() const { return f ? positives.size() / f : 0; }
std::size_t GridPixels::negative_count() const { return f ? negatives.size() / f : 0; }

GridPixels extract_pixel_samples(const SegFeatureGrid& grid, std::uint32_t num_classes) {
  if (grid.class_id < 1 || grid.class_id > num_classes) {
    throw InputError("extract_pixel_samples: class id " + std::to_string(grid.class_id) + " outside 1.." +
                     std::to_string(num_classes));
  }
  const std::size_t cells = static_cast<std::size_t>(grid.s) * grid.s;
  if (grid.gt_mask_grid.size() != cells || grid.grid.size() != cells * grid.f) {
    throw InputError("extract_pixel_samples: grid lacks a ground-truth mask of s*s cells");
  }
  GridPixels out;
  out.class_id = grid.class_id;
  out.f = grid.f;
  for (std::size_t c = 0; c < cells; ++c) {
    auto& dst = grid.gt_mask_grid[c] ? out.positives : out.negatives;
    const auto first = grid.grid.begin() + static_cast<std::ptrdiff_t>(c * grid.f);
    dst.insert(dst.end(), first, first + grid.f);
  }
  return out;
}

std::size_t subsample_count(std::size_t count, double r) {
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("subsample: sampling factor must lie in (0, 1]");
  const auto kept = static_cast<std::size_t>(std::ceil(r * static_cast<double>(count)));
  return std::min(kept, count);
}

std::vector<std::size_t> subsample(std::size_t count, double r, Rng& rng) {
  return sample_without_replacement(count, subsample_count(count, r), rng);
}

PixelSampleCollector::PixelSampleCollector(std::uint32_t num_classes, std::uint32_t f) : f_(f), classes_(num_classes) {
  if (num_classes < 1 || f < 1) throw ConfigError("PixelSampleCollector: need >= 1 class and f >= 1");
}

void PixelSampleCollector::add(const SegFeatureGrid& grid) {
  if (grid.f != f_) throw InputError("PixelSampleCollector: grid channel count does not match");
  GridPixels px = extract_pixel_samples(grid, num_classes());
  auto& pool = classes_[grid.class_id - 1];
  pool.positives.insert(pool.positives.end(), px.positives.begin(), px.positives.end());
  pool.negatives.insert(pool.negatives.end(), px.negatives.begin(), px.negatives.end());
}

std::size_t PixelSampleCollector::positive_count(std::uint32_t class_id) const { return pool(class_id).positives.size() / f_; }
std::size_t PixelSampleCollector::negative_count(std::uint32_t class_id) const { return pool(class_id).negatives.size() / f_; }

PixelSampleSet subsample_pixels(const PixelSampleCollector& collector, double r, std::uint64_t seed) {
  subsample_count(0, r);
  PixelSampleSet set;
  set.sampling_factor = r;
  set.seed = seed;
  set.classes.resize(collector.num_classes());
  for (std::uint32_t c = 1; c <= collector.num_classes(); ++c) {
    auto& dst = set.classes[c - 1];
    const auto& pool = collector.pool(c);
    dst.pre_positives = collector.positive_count(c);
    dst.pre_negatives = collector.negative_count(c);
    Rng pos_rng(derive_seed(derive_seed(seed, c), 1));
    Rng neg_rng(derive_seed(derive_seed(seed, c), 0));
    dst.positives = rows_to_matrix(pool.positives, collector.f(), subsample(dst.pre_positives, r, pos_rng));
    dst.negatives = rows_to_matrix(pool.negatives, collector.f(), subsample(dst.pre_negatives, r, neg_rng));
  }
  return set;
}

void MaskTrainConfig::validate() const {
  falkon.validate();
  subsample_count(0, sampling_factor);
  if (!std::isfinite(mask_threshold)) throw ConfigError("segmentation: mask threshold must be finite");
}

MaskBank train_mask_bank(const PixelSampleSet& samples, std::uint32_t s, std::uint32_t f, const MaskTrainConfig& config,
                         MaskTrainReport* report) {
  config.validate();
  const auto t0 = Clock::now();
  const auto num_classes = static_cast<std::uint32_t>(samples.classes.size());
  MaskBank bank;
  bank.num_classes = num_classes;
  bank.s = s;
  bank.f = f;
  bank.mask_score_threshold = config.mask_threshold;
  bank.models.resize(num_classes);
  std::vector<MaskClassStats> stats(num_classes);

  parallel_for(num_classes, config.threads, [&](std::size_t ci) {
    const auto tc = Clock::now();
    const auto& cs = samples.classes[ci];
    auto& st = stats[ci];
    st.class_id = static_cast<std::uint32_t>(ci + 1);
    st.pre_positives = cs.pre_positives;
    st.pre_negatives = cs.pre_negatives;
    st.kept_positives = static_cast<std::size_t>(cs.positives.rows());
    st.kept_negatives = static_cast<std::size_t>(cs.negatives.rows());
    if (st.kept_positives == 0 || st.kept_negatives == 0) {
      st.skipped = true;
      return;
    }
    Matrix X(cs.positives.rows() + cs.negatives.rows(), f);
    X.topRows(cs.positives.rows()) = cs.positives;
    X.bottomRows(cs.negatives.rows()) = cs.negatives;
    std::vector<double> y(static_cast<std::size_t>(X.rows()), -1.0);
    std::fill_n(y.begin(), cs.positives.rows(), 1.0);
    FalkonOptions fo = config.falkon;
    fo.seed = derive_seed(config.falkon.seed, ci + 1);
    bank.models[ci] = falkon_train(X, y, fo);
    st.seconds = seconds_since(tc);
  });

  if (report) {
    report->classes = stats;
    report->train_seconds = seconds_since(t0);
    for (const auto& st : stats) {
      if (st.skipped) {
        report->warnings.push_back("mask class " + std::to_string(st.class_id) + " skipped: " +
                                   (st.kept_positives == 0 ? "no foreground pixels" : "no background pixels"));
      }
    }
  }
  return bank;
}

MaskBank train_mask_bank(const PixelSampleCollector& collector, std::uint32_t s, const MaskTrainConfig& config,
                         MaskTrainReport* report) {
  config.validate();
  const auto t0 = Clock::now();
  const PixelSampleSet samples = subsample_pixels(collector, config.sampling_factor, config.seed);
  const double sub = seconds_since(t0);
  MaskBank bank = train_mask_bank(samples, s, collector.f(), config, report);
  if (report) {
    report->subsample_seconds = sub;
    report->train_seconds = seconds_since(t0);
  }
  return bank;
}

Matrix mask_score_map(const MaskBank& bank, std::uint32_t class_id, std::span<const float> grid) {
  if (class_id < 1 || class_id > bank.num_classes || !bank.models[class_id - 1]) {
    throw InputError("predict_mask: no mask model for class " + std::to_string(class_id));
  }
  const std::size_t cells = static_cast<std::size_t>(bank.s) * bank.s;
  if (grid.size() != cells * bank.f) throw InputError("predict_mask: grid tensor size does not match s*s*f");
  const Eigen::Map<const MatrixF> G(grid.data(), static_cast<Eigen::Index>(cells), bank.f);
  const Vector scores = falkon_predict(*bank.models[class_id - 1], G.cast<double>());
  Matrix map(bank.s, bank.s);
  for (std::size_t c = 0; c < cells; ++c) map(static_cast<Eigen::Index>(c / bank.s), static_cast<Eigen::Index>(c % bank.s)) = scores[static_cast<Eigen::Index>(c)];
  return map;
}

Bitmap paste_score_map(const Matrix& scores, const Box& box, std::uint32_t image_width, std::uint32_t image_height,
                       double threshold) {
  Bitmap out(image_height, image_width);
  const Box clipped = clip_box(box, image_width, image_height);
  if (!clipped.well_formed() || scores.size() == 0) return out;
  const auto rows = scores.rows(), cols = scores.cols();
  const auto lerp_coord = [](double pos, Eigen::Index n) {
    const double c = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    const auto i0 = static_cast<Eigen::Index>(std::floor(c));
    const auto i1 = std::min<Eigen::Index>(i0 + 1, n - 1);
    return std::tuple{i0, i1, c - static_cast<double>(i0)};
  };
  const auto x_begin = static_cast<std::uint32_t>(std::max(0.0, std::floor(clipped.x1 - 0.5)));
  const auto y_begin = static_cast<std::uint32_t>(std::max(0.0, std::floor(clipped.y1 - 0.5)));
  for (std::uint32_t y = y_begin; y < image_height; ++y) {
    const double cy = y + 0.5;
    if (cy >= clipped.y2) break;
    if (cy < clipped.y1) continue;
    const auto [r0, r1, fy] = lerp_coord((cy - box.y1) / box.height() * static_cast<double>(rows) - 0.5, rows);
    for (std::uint32_t x = x_begin; x < image_width; ++x) {
      const double cx = x + 0.5;
      if (cx >= clipped.x2) break;
      if (cx < clipped.x1) continue;
      const auto [c0, c1, fx] = lerp_coord((cx - box.x1) / box.width() * static_cast<double>(cols) - 0.5, cols);
      const double top = (1.0 - fx) * scores(r0, c0) + fx * scores(r0, c1);
      const double bottom = (1.0 - fx) * scores(r1, c0) + fx * scores(r1, c1);
      const double v = (1.0 - fy) * top + fy * bottom;
      if (v > threshold) out.at(y, x) = 1;
    }
  }
  return out;
}

InstanceMaskResult predict_mask(const MaskBank& bank, std::span<const float> grid, const DetectionResult& detection,
                                std::uint32_t image_width, std::uint32_t image_height) {
  const Matrix map = mask_score_map(bank, detection.class_id, grid);
  const Bitmap bm = paste_score_map(map, detection.box, image_width, image_height, bank.mask_score_threshold);
  return {detection, RleMask::encode(bm)};
}

std::vector<InstanceMaskResult> segment_gt_boxes(const MaskBank& bank, std::span<const SegFeatureGrid> grids,
                                                 const DatasetIndex& index) {
  std::vector<InstanceMaskResult> out;
  out.reserve(grids.size());
  for (const auto& g : grids) {
    const auto& img = index.image(g.image_id);
    out.push_back(predict_mask(bank, g.grid, DetectionResult{g.image_id, g.class_id, g.box, 1.0}, img.width, img.height));
  }
  return out;
}

void write_mask_bank(std::ostream& out, const MaskBank& bank) {
  ByteWriter w;
  w.put_magic("MBK1");
  w.put<std::uint32_t>(bank.num_classes);
  w.put<std::uint32_t>(bank.s);
  w.put<std::uint32_t>(bank.f);
  w.put<double>(bank.mask_score_threshold);
  write_all(out, w.bytes());
  for (std::uint32_t c = 0; c < bank.num_classes; ++c) {
    const std::uint8_t present = bank.models[c] ? 1 : 0;
    write_all(out, std::span<const std::uint8_t>(&present, 1));
    if (present) write_falkon(out, *bank.models[c]);
  }
}

MaskBank read_mask_bank(std::istream& in) {
  const auto header = read_exact(in, 24, "MBK1 stream");
  ByteReader r(header, "MBK1 stream");
  r.expect_magic("MBK1");
  MaskBank bank;
  bank.num_classes = r.get<std::uint32_t>();
  bank.s = r.get<std::uint32_t>();
  bank.f = r.get<std::uint32_t>();
  bank.mask_score_threshold = r.get<double>();
  bank.models.resize(bank.num_classes);
  for (std::uint32_t c = 0; c < bank.num_classes; ++c) {
    const auto flag = read_exact(in, 1, "MBK1 stream");
    if (flag[0]) {
      bank.models[c] = read_falkon(in);
      if (bank.models[c]->dim() != bank.f) throw LoadError("MBK1 stream: model dimension does not match f");
    }
  }
  return bank;
}

}  // namespace olseg
