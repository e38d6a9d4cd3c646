#include "olseg/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "olseg/error.hpp"
#include "olseg/parallel.hpp"
#include "olseg/prediction_io.hpp"
#include "olseg/rng.hpp"
#include "olseg/synthetic.hpp"

namespace olseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Reads known keys from a JSON object and rejects the rest, so that typos
// in a config file fail loudly.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

GramMode parse_gram(const std::string& s) {
  if (s == "auto") return GramMode::automatic;
  if (s == "precompute") return GramMode::precompute;
  if (s == "streaming") return GramMode::streaming;
  throw ConfigError("gram must be one of auto, precompute, streaming");
}

std::string gram_name(GramMode m) {
  switch (m) {
    case GramMode::automatic: return "auto";
    case GramMode::precompute: return "precompute";
    case GramMode::streaming: return "streaming";
  }
  return "auto";
}

void read_falkon_block(ObjectReader& r, FalkonOptions& f) {
  r.get("sigma", f.sigma);
  r.get("lambda", f.lambda);
  r.get("centers", f.centers);
  r.get("iterations", f.max_iterations);
  r.get("tolerance", f.tolerance);
  std::string gram = gram_name(f.gram);
  r.get("gram", gram);
  f.gram = parse_gram(gram);
}

json falkon_block(const FalkonOptions& f) {
  return {{"sigma", f.sigma},          {"lambda", f.lambda},       {"centers", f.centers},
          {"iterations", f.max_iterations}, {"tolerance", f.tolerance}, {"gram", gram_name(f.gram)}};
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

template <class F>
void write_binary(const fs::path& path, F&& fn) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  fn(out);
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

DetectionBank load_detection_bank(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string() + " (run train first)");
  return read_detection_bank(in);
}

MaskBank load_mask_bank(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string() + " (run train first)");
  return read_mask_bank(in);
}

std::vector<SegFeatureGrid> ground_truth_grids(const DatasetIndex& index, const std::string& split) {
  auto grids = read_grids(index, split);
  std::erase_if(grids, [](const SegFeatureGrid& g) { return g.source != GridSource::ground_truth; });
  return grids;
}

PixelSampleCollector collect_pixels(const DatasetIndex& index, std::span<const SegFeatureGrid> grids) {
  PixelSampleCollector collector(index.num_classes, index.dims.f);
  for (const auto& g : grids) collector.add(g);
  return collector;
}

std::string phase_context(const char* phase, const std::exception& e) { return std::string(phase) + ": " + e.what(); }

// Rethrows with the failing phase prepended, keeping the error category.
template <class F>
auto in_phase(const char* phase, F&& fn) {
  try {
    return fn();
  } catch (const InputError& e) {
    throw InputError(phase_context(phase, e));
  } catch (const ConfigError& e) {
    throw ConfigError(phase_context(phase, e));
  } catch (const NumericalError& e) {
    throw NumericalError(phase_context(phase, e));
  } catch (const LoadError& e) {
    throw LoadError(phase_context(phase, e));
  } catch (const IoError& e) {
    throw IoError(phase_context(phase, e));
  }
}

class SyntheticGridProvider final : public GridProvider {
 public:
  SyntheticGridProvider(const DatasetIndex& index, const std::string& split)
      : renderer_(SyntheticGridRenderer::from_dataset(index, split)) {}

  std::vector<float> grid_for(const DetectionResult& d) const override {
    return renderer_.render(d.image_id, d.box, d.class_id, GridSource::detection).grid;
  }

 private:
  SyntheticGridRenderer renderer_;
};

class StoredGridProvider final : public GridProvider {
 public:
  StoredGridProvider(const DatasetIndex& index, const std::string& split) {
    for (auto& g : read_grids(index, split)) {
      if (g.source == GridSource::detection) by_image_[g.image_id].push_back(std::move(g));
    }
  }

  std::vector<float> grid_for(const DetectionResult& d) const override {
    const auto close = [](double a, double b) { return std::abs(a - b) <= 1e-3 * std::max(1.0, std::abs(a)); };
    const auto it = by_image_.find(d.image_id);
    if (it != by_image_.end()) {
      for (const auto& g : it->second) {
        if (g.class_id == d.class_id && close(g.box.x1, d.box.x1) && close(g.box.y1, d.box.y1) &&
            close(g.box.x2, d.box.x2) && close(g.box.y2, d.box.y2)) {
          return g.grid;
        }
      }
    }
    std::ostringstream msg;
    msg << "no stored detection grid for image " << d.image_id << " class " << d.class_id << " box [" << d.box.x1
        << ", " << d.box.y1 << ", " << d.box.x2 << ", " << d.box.y2
        << "]; export mask-head grids for the boxes in " << kDetectionsFile;
    throw InputError(msg.str());
  }

 private:
  std::map<std::uint32_t, std::vector<SegFeatureGrid>> by_image_;
};

std::vector<EvalPrediction> masks_as_predictions(std::span<const InstanceMaskResult> masks) {
  std::vector<EvalPrediction> out;
  out.reserve(masks.size());
  for (const auto& m : masks) {
    out.push_back({m.detection.image_id, m.detection.class_id, m.detection.box, m.detection.score, m.mask});
  }
  return out;
}

EvalOptions eval_options(const RunConfig& c, bool segm) {
  EvalOptions o;
  o.thresholds = c.iou_thresholds;
  o.segm = segm;
  return o;
}

// Test-time detections of a split with their grids, computed once.
struct DetectionCache {
  std::vector<DetectionResult> detections;
  std::vector<std::vector<float>> grids;
};

DetectionCache detect_split(const DatasetIndex& index, const std::string& split, const DetectionBank& bank,
                            bool with_grids, std::size_t threads) {
  std::map<std::uint32_t, std::vector<RoIFeature>> rois_by_image;
  for (auto& roi : read_rois(index, split)) rois_by_image[roi.image_id].push_back(std::move(roi));
  const auto images = index.images_in(split);
  const auto provider = with_grids ? make_grid_provider(index, split) : nullptr;

  std::vector<DetectionCache> per_image(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    const auto& img = images[i];
    const auto it = rois_by_image.find(img.id);
    if (it == rois_by_image.end()) return;
    auto& cache = per_image[i];
    cache.detections = detect(img.id, it->second, bank, img.width, img.height);
    if (provider) {
      for (const auto& d : cache.detections) cache.grids.push_back(provider->grid_for(d));
    }
  });
  DetectionCache out;
  for (auto& c : per_image) {
    std::move(c.detections.begin(), c.detections.end(), std::back_inserter(out.detections));
    std::move(c.grids.begin(), c.grids.end(), std::back_inserter(out.grids));
  }
  return out;
}

std::vector<InstanceMaskResult> masks_for(const DatasetIndex& index, const DetectionCache& cache, const MaskBank& bank,
                                          std::size_t threads) {
  std::vector<InstanceMaskResult> out(cache.detections.size());
  parallel_for(cache.detections.size(), threads, [&](std::size_t i) {
    const auto& d = cache.detections[i];
    const auto& img = index.image(d.image_id);
    out[i] = predict_mask(bank, cache.grids[i], d, img.width, img.height);
  });
  return out;
}

std::vector<InstanceMaskResult> masks_for_gt_boxes(const DatasetIndex& index, const std::string& split,
                                                   const MaskBank& bank) {
  const auto grids = ground_truth_grids(index, split);
  if (!grids.empty()) return segment_gt_boxes(bank, grids, index);
  // No stored ground-truth grids for this split: obtain them like detections.
  DetectionCache cache;
  const auto provider = make_grid_provider(index, split);
  for (const auto& gt : read_ground_truth(index, split)) {
    cache.detections.push_back({gt.image_id, gt.class_id, gt.box, 1.0});
    cache.grids.push_back(provider->grid_for(cache.detections.back()));
  }
  return masks_for(index, cache, bank, 1);
}

struct Selection {
  double sigma;
  double lambda;
  double score;
};

template <class Score>
Selection search_grid(const std::vector<double>& sigmas, const std::vector<double>& lambdas, double sigma0,
                      double lambda0, Score&& score) {
  const std::vector<double> ss = sigmas.empty() ? std::vector{sigma0} : sigmas;
  const std::vector<double> ls = lambdas.empty() ? std::vector{lambda0} : lambdas;
  Selection best{ss.front(), ls.front(), -1.0};
  for (double s : ss) {
    for (double l : ls) {
      const double v = score(s, l);
      if (v > best.score) best = {s, l, v};
    }
  }
  return best;
}

json stats_json(const DetectionTrainReport& r) {
  json cls = json::array();
  for (const auto& c : r.classes) {
    cls.push_back({{"class_id", c.class_id},
                   {"positives", c.positives},
                   {"negative_pool", c.negative_pool},
                   {"negatives_visited", c.negatives_visited},
                   {"negatives_kept", c.negatives_kept},
                   {"rounds", c.rounds},
                   {"seconds", c.seconds},
                   {"skipped", c.skipped}});
  }
  return {{"classes", cls}, {"warnings", r.warnings}};
}

json stats_json(const MaskTrainReport& r) {
  json cls = json::array();
  for (const auto& c : r.classes) {
    cls.push_back({{"class_id", c.class_id},
                   {"pre_positives", c.pre_positives},
                   {"pre_negatives", c.pre_negatives},
                   {"kept_positives", c.kept_positives},
                   {"kept_negatives", c.kept_negatives},
                   {"seconds", c.seconds},
                   {"skipped", c.skipped}});
  }
  return {{"classes", cls},
          {"warnings", r.warnings},
          {"subsample_seconds", r.subsample_seconds},
          {"train_seconds", r.train_seconds}};
}

void write_eval_report(const fs::path& dir, const char* json_name, const char* text_name, const EvalReport& report) {
  write_text(dir / json_name, report.to_json().dump(2) + "\n");
  write_text(dir / text_name, report.to_table());
}

}  // namespace

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  RunConfig c;
  ObjectReader top(j, "config");
  std::string dataset, output;
  top.get("dataset", dataset);
  top.get("output_dir", output);
  c.dataset = resolve(dataset, base_dir);
  c.output_dir = resolve(output, base_dir);
  top.get("seed", c.seed);
  top.get("threads", c.threads);
  top.get("train_split", c.train_split);
  top.get("test_split", c.test_split);

  if (const json* d = top.child("detection")) {
    ObjectReader r(*d, "detection");
    read_falkon_block(r, c.detection.falkon);
    r.get("rls_lambda", c.detection.rls_lambda);
    r.get("score_threshold", c.detection.score_threshold);
    r.get("nms_iou", c.detection.nms_iou);
    if (const json* mb = r.child("minibootstrap")) {
      ObjectReader m(*mb, "detection.minibootstrap");
      auto& b = c.detection.bootstrap;
      m.get("batches", b.batches);
      m.get("batch_size", b.batch_size);
      m.get("hard_threshold", b.hard_threshold);
      m.get("max_negatives_kept", b.max_negatives_kept);
      m.get("iou_fg", b.iou_fg);
      m.get("iou_bg", b.iou_bg);
      m.finish();
    }
    r.finish();
  }
  if (const json* s = top.child("segmentation")) {
    ObjectReader r(*s, "segmentation");
    read_falkon_block(r, c.segmentation.falkon);
    r.get("sampling_factor", c.segmentation.sampling_factor);
    r.get("mask_threshold", c.segmentation.mask_threshold);
    r.finish();
  }
  if (const json* e = top.child("eval")) {
    ObjectReader r(*e, "eval");
    r.get("iou_thresholds", c.iou_thresholds);
    r.finish();
  }
  if (const json* s = top.child("sweep")) {
    ObjectReader r(*s, "sweep");
    r.get("r_values", c.sweep.r_values);
    r.get("repeats", c.sweep.repeats);
    r.finish();
  }
  if (const json* g = top.child("grid_search")) {
    ObjectReader r(*g, "grid_search");
    r.get("enabled", c.grid_search.enabled);
    r.get("split", c.grid_search.split);
    r.get("detection_sigma", c.grid_search.detection_sigma);
    r.get("detection_lambda", c.grid_search.detection_lambda);
    r.get("segmentation_sigma", c.grid_search.segmentation_sigma);
    r.get("segmentation_lambda", c.grid_search.segmentation_lambda);
    r.finish();
  }
  top.finish();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

json RunConfig::to_json() const {
  const auto& b = detection.bootstrap;
  json det = falkon_block(detection.falkon);
  det["rls_lambda"] = detection.rls_lambda;
  det["score_threshold"] = detection.score_threshold;
  det["nms_iou"] = detection.nms_iou;
  det["minibootstrap"] = {{"batches", b.batches},
                          {"batch_size", b.batch_size},
                          {"hard_threshold", b.hard_threshold},
                          {"max_negatives_kept", b.max_negatives_kept},
                          {"iou_fg", b.iou_fg},
                          {"iou_bg", b.iou_bg}};
  json seg = falkon_block(segmentation.falkon);
  seg["sampling_factor"] = segmentation.sampling_factor;
  seg["mask_threshold"] = segmentation.mask_threshold;
  return {{"dataset", dataset.string()},
          {"output_dir", output_dir.string()},
          {"seed", seed},
          {"threads", threads},
          {"train_split", train_split},
          {"test_split", test_split},
          {"detection", det},
          {"segmentation", seg},
          {"eval", {{"iou_thresholds", iou_thresholds}}},
          {"sweep", {{"r_values", sweep.r_values}, {"repeats", sweep.repeats}}},
          {"grid_search",
           {{"enabled", grid_search.enabled},
            {"split", grid_search.split},
            {"detection_sigma", grid_search.detection_sigma},
            {"detection_lambda", grid_search.detection_lambda},
            {"segmentation_sigma", grid_search.segmentation_sigma},
            {"segmentation_lambda", grid_search.segmentation_lambda}}}};
}

void RunConfig::validate() const {
  if (dataset.empty()) throw ConfigError("config: dataset path is required");
  if (!fs::exists(dataset / "manifest.json")) {
    throw ConfigError("config: dataset " + dataset.string() + " has no manifest.json");
  }
  if (output_dir.empty()) throw ConfigError("config: output_dir is required");
  detection_config().validate();
  segmentation_config().validate();
  if (iou_thresholds.empty()) throw ConfigError("config: eval.iou_thresholds is empty");
  for (double t : iou_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("config: IoU thresholds must lie in (0, 1]");
  }
  if (sweep.repeats < 1) throw ConfigError("config: sweep.repeats must be >= 1");
  for (double r : sweep.r_values) subsample_count(0, r);
  for (const auto* grid : {&grid_search.detection_sigma, &grid_search.segmentation_sigma}) {
    for (double v : *grid) {
      if (!(v > 0.0)) throw ConfigError("config: grid_search sigmas must be > 0");
    }
  }
  for (const auto* grid : {&grid_search.detection_lambda, &grid_search.segmentation_lambda}) {
    for (double v : *grid) {
      if (!(v > 0.0)) throw ConfigError("config: grid_search lambdas must be > 0");
    }
  }
}

DetectionTrainConfig RunConfig::detection_config() const {
  DetectionTrainConfig c = detection;
  c.falkon.seed = derive_seed(seed, 1);
  c.bootstrap.seed = derive_seed(seed, 2);
  c.threads = threads;
  return c;
}

MaskTrainConfig RunConfig::segmentation_config() const {
  MaskTrainConfig c = segmentation;
  c.seed = derive_seed(seed, 3);
  c.falkon.seed = derive_seed(seed, 4);
  c.threads = threads;
  return c;
}

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.string().c_str(), "wx");
  if (!f) throw IoError("output directory " + dir.string() + " is locked by another run (remove " + path_.string() + " if stale)");
  std::fclose(f);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::unique_ptr<GridProvider> make_grid_provider(const DatasetIndex& index, const std::string& split) {
  if (index.extra.contains("synthetic")) return std::make_unique<SyntheticGridProvider>(index, split);
  return std::make_unique<StoredGridProvider>(index, split);
}

double TimingReport::phase_sum() const {
  return feature_loading + model_selection + detection_training + segmentation_training + writing;
}

json TimingReport::to_json() const {
  return {{"feature_loading_seconds", feature_loading},
          {"model_selection_seconds", model_selection},
          {"detection_training_seconds", detection_training},
          {"segmentation_training_seconds", segmentation_training},
          {"writing_seconds", writing},
          {"total_seconds", total}};
}

std::vector<EvalGroundTruth> load_eval_ground_truth(const DatasetIndex& index, const std::string& split) {
  std::vector<EvalGroundTruth> out;
  for (auto& gt : read_ground_truth(index, split)) out.push_back({gt.image_id, gt.class_id, gt.box, std::move(gt.mask)});
  return out;
}

PredictResult predict_split(const DatasetIndex& index, const std::string& split, const DetectionBank& detection,
                            const MaskBank& masks, std::size_t threads) {
  const DetectionCache cache = detect_split(index, split, detection, true, threads);
  const auto results = masks_for(index, cache, masks, threads);
  PredictResult out;
  out.masks = masks_as_predictions(results);
  out.detections = out.masks;
  for (auto& d : out.detections) d.mask.reset();
  return out;
}

TrainResult cmd_train(const RunConfig& config) {
  const auto t_start = Clock::now();
  config.validate();
  OutputLock lock(config.output_dir);
  TrainResult result;
  auto& timing = result.timing;
  const auto det_cfg0 = config.detection_config();
  const auto seg_cfg0 = config.segmentation_config();

  auto t0 = Clock::now();
  const auto [index, rois, gts, grids] = in_phase("feature loading", [&] {
    auto idx = load_dataset(config.dataset);
    auto r = read_rois(idx, config.train_split);
    auto g = read_ground_truth(idx, config.train_split);
    auto gr = ground_truth_grids(idx, config.train_split);
    return std::tuple{std::move(idx), std::move(r), std::move(g), std::move(gr)};
  });
  const auto gt_by_image = group_ground_truth(gts);
  timing.feature_loading = seconds_since(t0);

  DetectionTrainConfig det_cfg = det_cfg0;
  MaskTrainConfig seg_cfg = seg_cfg0;
  if (config.grid_search.enabled) {
    t0 = Clock::now();
    in_phase("model selection", [&] {
      const auto& split = config.grid_search.split;
      if (!index.has_split(split)) throw ConfigError("grid search split '" + split + "' not in dataset");
      const auto val_gt = load_eval_ground_truth(index, split);
      const double thr = config.iou_thresholds.front();
      const auto det = search_grid(config.grid_search.detection_sigma, config.grid_search.detection_lambda,
                                   det_cfg.falkon.sigma, det_cfg.falkon.lambda, [&](double s, double l) {
                                     DetectionTrainConfig c = det_cfg;
                                     c.falkon.sigma = s;
                                     c.falkon.lambda = l;
                                     const auto bank = train_detection_bank(rois, gt_by_image, index.num_classes,
                                                                            index.dims.d, c);
                                     const auto cache = detect_split(index, split, bank, false, config.threads);
                                     std::vector<EvalPrediction> preds;
                                     for (const auto& d : cache.detections) preds.push_back({d.image_id, d.class_id, d.box, d.score, {}});
                                     return evaluate(preds, val_gt, index.num_classes, index.class_names,
                                                     {{thr}, false})
                                         .map(IouKind::bbox, thr);
                                   });
      det_cfg.falkon.sigma = det.sigma;
      det_cfg.falkon.lambda = det.lambda;
      const auto collector = collect_pixels(index, grids);
      const auto seg = search_grid(config.grid_search.segmentation_sigma, config.grid_search.segmentation_lambda,
                                   seg_cfg.falkon.sigma, seg_cfg.falkon.lambda, [&](double s, double l) {
                                     MaskTrainConfig c = seg_cfg;
                                     c.falkon.sigma = s;
                                     c.falkon.lambda = l;
                                     const auto bank = train_mask_bank(collector, index.dims.s, c);
                                     const auto preds = masks_as_predictions(masks_for_gt_boxes(index, split, bank));
                                     return evaluate(preds, val_gt, index.num_classes, index.class_names, {{thr}, true})
                                         .map(IouKind::segm, thr);
                                   });
      seg_cfg.falkon.sigma = seg.sigma;
      seg_cfg.falkon.lambda = seg.lambda;
      result.selected = {{"split", split},
                         {"detection", {{"sigma", det.sigma}, {"lambda", det.lambda}, {"bbox_mAP", det.score}}},
                         {"segmentation", {{"sigma", seg.sigma}, {"lambda", seg.lambda}, {"segm_mAP", seg.score}}}};
    });
    timing.model_selection = seconds_since(t0);
  }

  t0 = Clock::now();
  result.detection = in_phase("detection training", [&] {
    return train_detection_bank(rois, gt_by_image, index.num_classes, index.dims.d, det_cfg, &result.detection_report);
  });
  timing.detection_training = seconds_since(t0);

  t0 = Clock::now();
  result.masks = in_phase("segmentation training", [&] {
    const auto collector = collect_pixels(index, grids);
    return train_mask_bank(collector, index.dims.s, seg_cfg, &result.mask_report);
  });
  timing.segmentation_training = seconds_since(t0);

  t0 = Clock::now();
  write_binary(config.output_dir / kDetectionBankFile, [&](std::ostream& o) { write_detection_bank(o, result.detection); });
  write_binary(config.output_dir / kMaskBankFile, [&](std::ostream& o) { write_mask_bank(o, result.masks); });
  timing.writing = seconds_since(t0);
  timing.total = seconds_since(t_start);

  const json report{{"timing", timing.to_json()},
                    {"detection", stats_json(result.detection_report)},
                    {"segmentation", stats_json(result.mask_report)},
                    {"selected", result.selected},
                    {"config", config.to_json()}};
  write_text(config.output_dir / kTrainReportFile, report.dump(2) + "\n");
  return result;
}

PredictResult cmd_predict(const RunConfig& config) {
  config.validate();
  OutputLock lock(config.output_dir);
  const auto index = load_dataset(config.dataset);
  const auto det = load_detection_bank(config.output_dir / kDetectionBankFile);
  const auto masks = load_mask_bank(config.output_dir / kMaskBankFile);
  if (det.num_classes != index.num_classes || det.dim != index.dims.d) {
    throw InputError("detection bank does not match dataset dimensions");
  }
  if (masks.num_classes != index.num_classes || masks.s != index.dims.s || masks.f != index.dims.f) {
    throw InputError("mask bank does not match dataset dimensions");
  }
  const DetectionCache cache = detect_split(index, config.test_split, det, false, config.threads);
  PredictResult out;
  for (const auto& d : cache.detections) out.detections.push_back({d.image_id, d.class_id, d.box, d.score, {}});
  // Detections go to disk first so that stored-grid exports can consume them.
  write_predictions(config.output_dir / kDetectionsFile, out.detections);
  out.masks = in_phase("mask prediction", [&] {
    return predict_split(index, config.test_split, det, masks, config.threads).masks;
  });
  write_predictions(config.output_dir / kMasksFile, out.masks);
  return out;
}

EvalReport cmd_eval(const RunConfig& config, const std::optional<fs::path>& predictions) {
  config.validate();
  OutputLock lock(config.output_dir);
  const auto index = load_dataset(config.dataset);
  const fs::path path = predictions.value_or(config.output_dir / kMasksFile);
  const auto preds = read_predictions(path);
  const bool segm = std::all_of(preds.begin(), preds.end(), [](const EvalPrediction& p) { return p.mask.has_value(); });
  auto report = evaluate(preds, load_eval_ground_truth(index, config.test_split), index.num_classes,
                         index.class_names, eval_options(config, segm));
  if (!segm) report.notes.push_back("predictions carry no masks; segm metrics omitted");
  const fs::path train_report = config.output_dir / kTrainReportFile;
  if (fs::exists(train_report)) {
    std::ifstream in(train_report);
    const json j = json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.contains("timing")) report.train_seconds = j["timing"].value("total_seconds", 0.0);
  }
  write_eval_report(config.output_dir, kReportJsonFile, kReportTextFile, report);
  return report;
}

EvalReport cmd_gt_mask_eval(const RunConfig& config) {
  config.validate();
  OutputLock lock(config.output_dir);
  const auto index = load_dataset(config.dataset);
  const auto masks = load_mask_bank(config.output_dir / kMaskBankFile);
  const auto preds = masks_as_predictions(masks_for_gt_boxes(index, config.test_split, masks));
  auto report = evaluate(preds, load_eval_ground_truth(index, config.test_split), index.num_classes,
                         index.class_names, eval_options(config, true));
  report.notes.push_back("masks predicted on ground-truth boxes");
  write_eval_report(config.output_dir, kGtReportJsonFile, kGtReportTextFile, report);
  return report;
}

std::vector<SweepRow> cmd_sweep_r(const RunConfig& config) {
  config.validate();
  OutputLock lock(config.output_dir);
  const auto index = load_dataset(config.dataset);

  const fs::path bank_path = config.output_dir / kDetectionBankFile;
  DetectionBank det;
  if (fs::exists(bank_path)) {
    det = load_detection_bank(bank_path);
  } else {
    const auto rois = read_rois(index, config.train_split);
    const auto gts = read_ground_truth(index, config.train_split);
    det = train_detection_bank(rois, group_ground_truth(gts), index.num_classes, index.dims.d, config.detection_config());
    write_binary(bank_path, [&](std::ostream& o) { write_detection_bank(o, det); });
  }
  const DetectionCache cache = detect_split(index, config.test_split, det, true, config.threads);
  const auto gts = load_eval_ground_truth(index, config.test_split);
  const auto collector = collect_pixels(index, ground_truth_grids(index, config.train_split));

  std::vector<SweepRow> rows;
  for (double r : config.sweep.r_values) {
    SweepRow row;
    row.r = r;
    std::vector<double> m50, m70;
    for (std::size_t rep = 0; rep < config.sweep.repeats; ++rep) {
      MaskTrainConfig cfg = config.segmentation_config();
      cfg.sampling_factor = r;
      cfg.seed = derive_seed(cfg.seed, rep);
      cfg.falkon.seed = derive_seed(cfg.falkon.seed, rep);
      MaskTrainReport rep_report;
      const auto bank = train_mask_bank(collector, index.dims.s, cfg, &rep_report);
      row.train_seconds.push_back(rep_report.train_seconds);
      if (rep == 0) {
        row.classes = rep_report.classes;
        for (const auto& c : rep_report.classes) {
          row.kept_positives += c.kept_positives;
          row.kept_negatives += c.kept_negatives;
        }
      }
      const auto preds = masks_as_predictions(masks_for(index, cache, bank, config.threads));
      const auto report = evaluate(preds, gts, index.num_classes, index.class_names, {{0.5, 0.7}, true});
      m50.push_back(report.map(IouKind::segm, 0.5));
      m70.push_back(report.map(IouKind::segm, 0.7));
    }
    row.median_train_seconds = median(row.train_seconds);
    row.segm_map50 = median(m50);
    row.segm_map70 = median(m70);
    rows.push_back(std::move(row));
  }

  std::ostringstream csv;
  csv << "r,kept_positives,kept_negatives,kept_total,train_seconds_median,train_seconds_runs,segm_mAP50,segm_mAP70\n";
  csv << std::setprecision(10);
  for (const auto& row : rows) {
    csv << row.r << ',' << row.kept_positives << ',' << row.kept_negatives << ','
        << row.kept_positives + row.kept_negatives << ',' << row.median_train_seconds << ',';
    for (std::size_t i = 0; i < row.train_seconds.size(); ++i) csv << (i ? ";" : "") << row.train_seconds[i];
    csv << ',' << row.segm_map50 << ',' << row.segm_map70 << '\n';
  }
  write_text(config.output_dir / kSweepFile, csv.str());
  return rows;
}

}  // namespace olseg
