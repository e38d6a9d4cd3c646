#include "olseg/synthetic.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "olseg/error.hpp"
#include "olseg/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace olseg {

namespace {

struct SceneObject {
  std::uint32_t class_id;
  Box box;
  Bitmap mask;
};

struct LabelMapView {
  std::uint32_t width, height;
  const std::vector<std::uint8_t>& labels;
};

Box round_to_float(const Box& b) {
  return Box{static_cast<float>(b.x1), static_cast<float>(b.y1), static_cast<float>(b.x2), static_cast<float>(b.y2)};
}

std::uint64_t grid_seed(std::uint64_t seed, std::uint32_t image_id, const Box& box, std::uint32_t class_id) {
  std::uint64_t h = derive_seed(seed ^ 0x67726964ULL, image_id);
  for (double v : {box.x1, box.y1, box.x2, box.y2}) h = derive_seed(h, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return derive_seed(h, class_id);
}

SegFeatureGrid render_grid(const SyntheticConfig& cfg, const LabelMapView& map, std::uint32_t image_id, const Box& box,
                           std::uint32_t class_id, GridSource source) {
  SegFeatureGrid g;
  g.image_id = image_id;
  g.box = round_to_float(box);
  g.class_id = class_id;
  g.source = source;
  g.s = cfg.s;
  g.f = cfg.f;
  g.grid.assign(static_cast<std::size_t>(cfg.s) * cfg.s * cfg.f, 0.0f);
  Rng rng(grid_seed(cfg.seed, image_id, g.box, class_id));
  for (std::uint32_t i = 0; i < cfg.s; ++i) {
    for (std::uint32_t j = 0; j < cfg.s; ++j) {
      const auto [x, y] = grid_cell_pixel(g.box, cfg.s, i, j, map.width, map.height);
      const std::uint8_t label = map.labels[static_cast<std::size_t>(y) * map.width + x];
      float* cell = g.grid.data() + (static_cast<std::size_t>(i) * cfg.s + j) * cfg.f;
      for (std::uint32_t k = 0; k < cfg.f; ++k) cell[k] = static_cast<float>(cfg.noise * rng.normal());
      if (label > 0) cell[(label - 1u) % cfg.f] += static_cast<float>(cfg.separation);
    }
  }
  return g;
}

Bitmap rasterize_ellipse(std::uint32_t w, std::uint32_t h, double cx, double cy, double a, double b) {
  Bitmap bm(h, w);
  for (std::uint32_t y = 0; y < h; ++y) {
    for (std::uint32_t x = 0; x < w; ++x) {
      const double u = (x + 0.5 - cx) / a;
      const double v = (y + 0.5 - cy) / b;
      if (u * u + v * v <= 1.0) bm.at(y, x) = 1;
    }
  }
  return bm;
}

std::vector<SceneObject> make_scene(const SyntheticConfig& cfg, Rng& rng) {
  const std::uint32_t count = cfg.objects_min + static_cast<std::uint32_t>(rng.below(cfg.objects_max - cfg.objects_min + 1));
  const double W = cfg.image_width, H = cfg.image_height;
  const double max_axis = std::min({28.0, W / 2.0 - 2.0, H / 2.0 - 2.0});
  const double min_axis = std::min(10.0, max_axis);
  std::vector<SceneObject> objects;
  for (std::uint32_t o = 0; o < count; ++o) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double a = rng.uniform(min_axis, max_axis);
      const double b = rng.uniform(min_axis, max_axis);
      const double cx = rng.uniform(a + 1.0, W - a - 1.0);
      const double cy = rng.uniform(b + 1.0, H - b - 1.0);
      const Box extent{cx - a - 2.0, cy - b - 2.0, cx + a + 2.0, cy + b + 2.0};
      const bool overlaps = std::any_of(objects.begin(), objects.end(), [&](const SceneObject& other) {
        return iou(extent, Box{other.box.x1 - 2.0, other.box.y1 - 2.0, other.box.x2 + 2.0, other.box.y2 + 2.0}) > 0.0;
      });
      if (overlaps) continue;
      SceneObject obj;
      obj.class_id = 1 + static_cast<std::uint32_t>(rng.below(cfg.num_classes));
      obj.mask = rasterize_ellipse(cfg.image_width, cfg.image_height, cx, cy, a, b);
      obj.box = RleMask::encode(obj.mask).bounding_box();
      if (!obj.box.well_formed()) continue;
      objects.push_back(std::move(obj));
      break;
    }
  }
  return objects;
}

std::vector<float> detection_feature(const SyntheticConfig& cfg, const Box& box, const std::vector<SceneObject>& objects,
                                     Rng& rng) {
  std::vector<float> feat(cfg.d);
  for (auto& v : feat) v = static_cast<float>(cfg.noise * rng.normal());
  double best = 0.0;
  const SceneObject* match = nullptr;
  for (const auto& obj : objects) {
    const double v = iou(box, obj.box);
    if (v > best) {
      best = v;
      match = &obj;
    }
  }
  if (!match) return feat;
  const double quality = std::clamp((best - 0.3) / 0.4, 0.0, 1.0);
  feat[(match->class_id - 1) % cfg.d] += static_cast<float>(quality * cfg.separation);
  if (cfg.d >= cfg.num_classes + 4 && best >= 0.1) {
    const BoxDeltas t = compute_bbox_targets(box, match->box);
    for (std::size_t k = 0; k < 4; ++k) {
      feat[cfg.num_classes + k] += static_cast<float>(cfg.box_signal * std::clamp(t[k], -1.0, 1.0));
    }
  }
  return feat;
}

std::vector<Box> make_proposals(const SyntheticConfig& cfg, const std::vector<SceneObject>& objects, Rng& rng) {
  const double W = cfg.image_width, H = cfg.image_height;
  std::vector<Box> out;
  for (const auto& obj : objects) {
    for (std::uint32_t p = 0; p < cfg.proposals_per_object; ++p) {
      for (int attempt = 0; attempt < 20; ++attempt) {
        const double jitter = rng.uniform(0.0, 0.35);
        const double cx = obj.box.center_x() + jitter * obj.box.width() * rng.uniform(-1.0, 1.0);
        const double cy = obj.box.center_y() + jitter * obj.box.height() * rng.uniform(-1.0, 1.0);
        const double w = obj.box.width() * std::exp(jitter * rng.uniform(-1.0, 1.0));
        const double h = obj.box.height() * std::exp(jitter * rng.uniform(-1.0, 1.0));
        const Box b = round_to_float(clip_box(Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, W, H));
        if (b.width() >= 2.0 && b.height() >= 2.0) {
          out.push_back(b);
          break;
        }
      }
    }
  }
  const double lo = std::min(12.0, std::min(W, H) / 2.0);
  const double hi = std::min(60.0, std::min(W, H) - 1.0);
  for (std::uint32_t p = 0; p < cfg.background_proposals; ++p) {
    const double w = rng.uniform(lo, std::max(lo, hi));
    const double h = rng.uniform(lo, std::max(lo, hi));
    const double x1 = rng.uniform(0.0, W - w);
    const double y1 = rng.uniform(0.0, H - h);
    out.push_back(round_to_float(Box{x1, y1, x1 + w, y1 + h}));
  }
  return out;
}

}  // namespace

void SyntheticConfig::validate() const {
  if (num_classes < 1) throw ConfigError("synthetic: num_classes must be >= 1");
  if (num_classes > 255) throw ConfigError("synthetic: at most 255 classes");
  if (objects_min > objects_max) throw ConfigError("synthetic: objects_min > objects_max");
  if (d < 1 || s < 1 || f < 1) throw ConfigError("synthetic: d, s, f must be >= 1");
  if (!(separation >= 0.0) || !(noise >= 0.0)) throw ConfigError("synthetic: separation and noise must be >= 0");
  if (image_width < 32 || image_height < 32) throw ConfigError("synthetic: images must be at least 32x32");
}

json SyntheticConfig::to_json() const {
  return {{"num_classes", num_classes},
          {"train_images", train_images},
          {"val_images", val_images},
          {"test_images", test_images},
          {"objects_min", objects_min},
          {"objects_max", objects_max},
          {"d", d},
          {"s", s},
          {"f", f},
          {"separation", separation},
          {"noise", noise},
          {"seed", seed},
          {"image_width", image_width},
          {"image_height", image_height},
          {"proposals_per_object", proposals_per_object},
          {"background_proposals", background_proposals},
          {"box_signal", box_signal}};
}

SyntheticConfig SyntheticConfig::from_json(const json& j) {
  SyntheticConfig c;
  const auto read = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    read("num_classes", c.num_classes);
    read("train_images", c.train_images);
    read("val_images", c.val_images);
    read("test_images", c.test_images);
    read("objects_min", c.objects_min);
    read("objects_max", c.objects_max);
    read("d", c.d);
    read("s", c.s);
    read("f", c.f);
    read("separation", c.separation);
    read("noise", c.noise);
    read("seed", c.seed);
    read("image_width", c.image_width);
    read("image_height", c.image_height);
    read("proposals_per_object", c.proposals_per_object);
    read("background_proposals", c.background_proposals);
    read("box_signal", c.box_signal);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synthetic config: ") + e.what());
  }
  return c;
}

DatasetIndex generate_synthetic(const SyntheticConfig& cfg, const fs::path& out) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError(out.string() + ": " + ec.message());

  DatasetIndex index;
  index.root = out;
  index.num_classes = cfg.num_classes;
  for (std::uint32_t c = 1; c <= cfg.num_classes; ++c) index.class_names.push_back("class_" + std::to_string(c));
  index.dims = {cfg.d, cfg.s, cfg.f};
  std::vector<std::pair<std::string, std::uint32_t>> splits = {{"train", cfg.train_images}};
  if (cfg.val_images > 0) splits.emplace_back("val", cfg.val_images);
  splits.emplace_back("test", cfg.test_images);
  std::uint32_t next_id = 0;
  for (const auto& [name, count] : splits) {
    index.splits.push_back(name);
    for (std::uint32_t i = 0; i < count; ++i) index.images.push_back({next_id++, cfg.image_width, cfg.image_height, name});
  }
  index.extra["synthetic"] = cfg.to_json();
  index.extra["test_grid_boxes"] = "refined";
  write_manifest(index);

  for (const auto& [name, count] : splits) {
    RoiWriter rois(index.roi_file(name), cfg.d);
    GridWriter grids(index.grid_file(name), cfg.s, cfg.f);
    MaskWriter masks(index.mask_file(name));
    const bool train = name == "train";
    std::int32_t instance = 0;
    for (const auto& img : index.images_in(name)) {
      Rng rng(derive_seed(cfg.seed, img.id));
      const auto objects = make_scene(cfg, rng);

      std::vector<std::uint8_t> labels(static_cast<std::size_t>(img.width) * img.height, 0);
      for (const auto& obj : objects) {
        for (std::size_t p = 0; p < labels.size(); ++p) {
          if (obj.mask.pixels[p]) labels[p] = static_cast<std::uint8_t>(obj.class_id);
        }
      }
      const LabelMapView map{img.width, img.height, labels};

      for (const auto& obj : objects) {
        GroundTruthInstance gt{img.id, obj.class_id, round_to_float(obj.box), RleMask::encode(obj.mask)};
        masks.write(gt);
        SegFeatureGrid g = render_grid(cfg, map, img.id, gt.box, obj.class_id, GridSource::ground_truth);
        g.gt_instance = instance++;
        g.gt_mask_grid = resample_mask_nearest(obj.mask, g.box, cfg.s);
        grids.write(g);
        if (train) {
          RoIFeature roi;
          roi.image_id = img.id;
          roi.box = gt.box;
          roi.source = RoiSource::ground_truth;
          roi.feature = detection_feature(cfg, gt.box, objects, rng);
          rois.write(roi);
        }
      }
      for (const Box& b : make_proposals(cfg, objects, rng)) {
        RoIFeature roi;
        roi.image_id = img.id;
        roi.box = b;
        roi.feature = detection_feature(cfg, b, objects, rng);
        rois.write(roi);
      }
    }
    rois.close();
    grids.close();
    masks.close();
  }
  return index;
}

SyntheticGridRenderer::SyntheticGridRenderer(SyntheticConfig config, const DatasetIndex& index,
                                             std::span<const GroundTruthInstance> instances)
    : config_(std::move(config)) {
  for (const auto& gt : instances) {
    auto it = label_maps_.find(gt.image_id);
    if (it == label_maps_.end()) {
      const auto& img = index.image(gt.image_id);
      it = label_maps_
               .emplace(gt.image_id,
                        LabelMap{img.width, img.height, std::vector<std::uint8_t>(std::size_t{img.width} * img.height, 0)})
               .first;
    }
    const Bitmap bm = gt.mask.decode();
    for (std::size_t p = 0; p < bm.pixels.size(); ++p) {
      if (bm.pixels[p]) it->second.labels[p] = static_cast<std::uint8_t>(gt.class_id);
    }
  }
  // Images without objects still need a (blank) map.
  for (const auto& img : index.images) {
    if (!label_maps_.count(img.id)) {
      label_maps_.emplace(img.id,
                          LabelMap{img.width, img.height, std::vector<std::uint8_t>(std::size_t{img.width} * img.height, 0)});
    }
  }
}

SyntheticGridRenderer SyntheticGridRenderer::from_dataset(const DatasetIndex& index, std::string_view split) {
  if (!index.extra.contains("synthetic")) {
    throw LoadError((index.root / "manifest.json").string() + ": not a synthetic dataset");
  }
  const auto cfg = SyntheticConfig::from_json(index.extra.at("synthetic"));
  const auto instances = read_ground_truth(index, split);
  return SyntheticGridRenderer(cfg, index, instances);
}

SegFeatureGrid SyntheticGridRenderer::render(std::uint32_t image_id, const Box& box, std::uint32_t class_id,
                                             GridSource source) const {
  const auto it = label_maps_.find(image_id);
  if (it == label_maps_.end()) throw InputError("synthetic renderer: unknown image " + std::to_string(image_id));
  return render_grid(config_, LabelMapView{it->second.width, it->second.height, it->second.labels}, image_id, box,
                     class_id, source);
}

}  // namespace olseg
