#include "olseg/feature_store.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "olseg/binary_io.hpp"
#include "olseg/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace olseg {

namespace {

constexpr std::size_t kHeaderBytes = 16;

void put_box(ByteWriter& w, const Box& b) {
  w.put<float>(static_cast<float>(b.x1));
  w.put<float>(static_cast<float>(b.y1));
  w.put<float>(static_cast<float>(b.x2));
  w.put<float>(static_cast<float>(b.y2));
}

Box get_box(ByteReader& r) {
  Box b;
  b.x1 = r.get<float>();
  b.y1 = r.get<float>();
  b.x2 = r.get<float>();
  b.y2 = r.get<float>();
  return b;
}

bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

void check_box_against_image(const Box& box, const ImageRecord& img, ByteReader& r) {
  if (!box.well_formed()) r.fail("malformed box");
  const Box clipped = clip_box(box, img.width, img.height);
  if (!clipped.well_formed()) r.fail("box lies outside image " + std::to_string(img.id));
}

const ImageRecord& image_or_fail(const DatasetIndex& index, std::uint32_t id, ByteReader& r) {
  const ImageRecord* img = index.find_image(id);
  if (!img) r.fail("unknown image id " + std::to_string(id));
  return *img;
}

}  // namespace

const ImageRecord* DatasetIndex::find_image(std::uint32_t id) const {
  // Images are usually stored with id == position.
  if (id < images.size() && images[id].id == id) return &images[id];
  const auto it = std::find_if(images.begin(), images.end(), [&](const ImageRecord& r) { return r.id == id; });
  return it == images.end() ? nullptr : &*it;
}

const ImageRecord& DatasetIndex::image(std::uint32_t id) const {
  const ImageRecord* img = find_image(id);
  if (!img) throw InputError("unknown image id " + std::to_string(id));
  return *img;
}

std::vector<ImageRecord> DatasetIndex::images_in(std::string_view split) const {
  std::vector<ImageRecord> out;
  for (const auto& img : images) {
    if (img.split == split) out.push_back(img);
  }
  return out;
}

bool DatasetIndex::has_split(std::string_view split) const {
  return std::find(splits.begin(), splits.end(), split) != splits.end();
}

fs::path DatasetIndex::roi_file(std::string_view split) const { return root / ("rois_" + std::string(split) + ".bin"); }
fs::path DatasetIndex::grid_file(std::string_view split) const { return root / ("grids_" + std::string(split) + ".bin"); }
fs::path DatasetIndex::mask_file(std::string_view split) const { return root / ("masks_" + std::string(split) + ".bin"); }

void DatasetIndex::check() const {
  const std::string where = (root / "manifest.json").string();
  if (num_classes < 1) throw LoadError(where + ": num_classes must be >= 1");
  if (class_names.size() != num_classes) throw LoadError(where + ": class_names length differs from num_classes");
  if (dims.d < 1 || dims.s < 1 || dims.f < 1) throw LoadError(where + ": feature_dims must all be >= 1");
  std::set<std::uint32_t> ids;
  for (const auto& img : images) {
    if (!ids.insert(img.id).second) throw LoadError(where + ": duplicate image id " + std::to_string(img.id));
    if (img.width == 0 || img.height == 0) throw LoadError(where + ": image " + std::to_string(img.id) + " has zero size");
    if (!has_split(img.split)) throw LoadError(where + ": image " + std::to_string(img.id) + " in undeclared split " + img.split);
  }
}

json DatasetIndex::to_json() const {
  json j;
  j["format"] = "olseg-features";
  j["format_version"] = kFormatVersion;
  j["num_classes"] = num_classes;
  j["class_names"] = class_names;
  j["feature_dims"] = {{"d", dims.d}, {"s", dims.s}, {"f", dims.f}};
  j["splits"] = splits;
  json imgs = json::array();
  for (const auto& img : images) {
    imgs.push_back({{"id", img.id}, {"width", img.width}, {"height", img.height}, {"split", img.split}});
  }
  j["images"] = std::move(imgs);
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

DatasetIndex load_dataset(const fs::path& root) {
  const fs::path manifest = root / "manifest.json";
  std::ifstream in(manifest);
  if (!in) throw LoadError(manifest.string() + ": cannot open manifest");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw LoadError(manifest.string() + ": " + e.what());
  }
  DatasetIndex index;
  index.root = root;
  try {
    if (j.at("format").get<std::string>() != "olseg-features") {
      throw LoadError(manifest.string() + ": format tag is not olseg-features");
    }
    const auto version = j.at("format_version").get<std::uint32_t>();
    if (version != kFormatVersion) {
      throw LoadError(manifest.string() + ": unsupported format_version " + std::to_string(version));
    }
    index.num_classes = j.at("num_classes").get<std::uint32_t>();
    index.class_names = j.at("class_names").get<std::vector<std::string>>();
    const auto& dims = j.at("feature_dims");
    index.dims = {dims.at("d").get<std::uint32_t>(), dims.at("s").get<std::uint32_t>(), dims.at("f").get<std::uint32_t>()};
    index.splits = j.at("splits").get<std::vector<std::string>>();
    for (const auto& img : j.at("images")) {
      index.images.push_back({img.at("id").get<std::uint32_t>(), img.at("width").get<std::uint32_t>(),
                              img.at("height").get<std::uint32_t>(), img.at("split").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw LoadError(manifest.string() + ": " + e.what());
  }
  static const std::set<std::string> known = {"format", "format_version", "num_classes", "class_names",
                                              "feature_dims", "splits", "images"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) index.extra[k] = v;
  }
  index.check();
  return index;
}

void write_manifest(const DatasetIndex& index) {
  index.check();
  fs::create_directories(index.root);
  const fs::path manifest = index.root / "manifest.json";
  std::ofstream out(manifest);
  if (!out) throw IoError(manifest.string() + ": cannot open for writing");
  out << index.to_json().dump(1) << '\n';
  if (!out) throw IoError(manifest.string() + ": write failed");
}

std::pair<std::uint32_t, std::uint32_t> grid_cell_pixel(const Box& box, std::uint32_t s, std::uint32_t i,
                                                        std::uint32_t j, std::uint32_t width, std::uint32_t height) {
  const double px = box.x1 + (j + 0.5) * box.width() / s;
  const double py = box.y1 + (i + 0.5) * box.height() / s;
  const auto clampi = [](double v, std::uint32_t hi) {
    const double f = std::floor(v);
    if (f < 0.0) return std::uint32_t{0};
    if (f > hi - 1.0) return hi - 1;
    return static_cast<std::uint32_t>(f);
  };
  return {clampi(px, width), clampi(py, height)};
}

std::vector<std::uint8_t> resample_mask_nearest(const Bitmap& full, const Box& box, std::uint32_t s) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(s) * s);
  for (std::uint32_t i = 0; i < s; ++i) {
    for (std::uint32_t j = 0; j < s; ++j) {
      const auto [x, y] = grid_cell_pixel(box, s, i, j, full.width, full.height);
      out[static_cast<std::size_t>(i) * s + j] = full.at(y, x) ? 1 : 0;
    }
  }
  return out;
}

namespace detail {

RecordFileReader::RecordFileReader(const fs::path& path, const char (&magic)[5])
    : in_(path, std::ios::binary), name_(path.string()) {
  if (!in_) throw LoadError(name_ + ": cannot open file");
  in_.seekg(0, std::ios::end);
  size_ = static_cast<std::uint64_t>(in_.tellg());
  in_.seekg(0);
  if (size_ < kHeaderBytes) throw LoadError(name_ + ": file shorter than header");
  const auto header = read_exact(in_, kHeaderBytes, name_);
  ByteReader r(header, name_);
  r.expect_magic(magic);
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) r.fail("unsupported version " + std::to_string(version));
  dim_a_ = r.get<std::uint32_t>();
  dim_b_ = r.get<std::uint32_t>();
  offset_ = kHeaderBytes;
}

std::optional<RecordFileReader::Record> RecordFileReader::next() {
  if (offset_ == size_) return std::nullopt;
  if (size_ - offset_ < 4) fail(offset_, "truncated length prefix");
  const auto prefix = read_exact(in_, 4, name_);
  ByteReader pr(prefix, name_, offset_);
  const auto len = pr.get<std::uint32_t>();
  if (len > size_ - offset_ - 4) fail(offset_, "record length " + std::to_string(len) + " runs past end of file");
  Record rec{offset_, read_exact(in_, len, name_)};
  offset_ += 4 + len;
  return rec;
}

void RecordFileReader::fail(std::uint64_t offset, const std::string& what) const {
  throw LoadError(name_ + ": record at offset " + std::to_string(offset) + ": " + what);
}

RecordFileWriter::RecordFileWriter(const fs::path& path, const char (&magic)[5], std::uint32_t dim_a,
                                   std::uint32_t dim_b)
    : out_(path, std::ios::binary | std::ios::trunc), name_(path.string()) {
  if (!out_) throw IoError(name_ + ": cannot open for writing");
  ByteWriter w;
  w.put_magic(magic);
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint32_t>(dim_a);
  w.put<std::uint32_t>(dim_b);
  write_all(out_, w.bytes());
}

void RecordFileWriter::write(std::span<const std::uint8_t> payload) {
  ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(payload.size()));
  try {
    write_all(out_, w.bytes());
    write_all(out_, payload);
  } catch (const IoError&) {
    throw IoError(name_ + ": write failed");
  }
}

void RecordFileWriter::close() {
  if (out_.is_open()) {
    out_.flush();
    if (!out_) throw IoError(name_ + ": flush failed");
    out_.close();
  }
}

RecordFileWriter::~RecordFileWriter() {
  if (out_.is_open()) out_.close();
}

}  // namespace detail

RoiReader::RoiReader(const DatasetIndex& index, std::string_view split)
    : index_(index), file_(index.roi_file(split), "ROI1") {
  if (file_.dim_a() != index.dims.d) {
    throw LoadError(file_.name() + ": header d=" + std::to_string(file_.dim_a()) + " but manifest d=" +
                    std::to_string(index.dims.d));
  }
}

std::optional<RoIFeature> RoiReader::next() {
  auto rec = file_.next();
  if (!rec) return std::nullopt;
  ByteReader r(rec->payload, file_.name() + ": record at offset " + std::to_string(rec->offset), rec->offset + 4);
  RoIFeature roi;
  roi.image_id = r.get<std::uint32_t>();
  const auto source = r.get<std::uint32_t>();
  if (source > 1) r.fail("unknown RoI source tag " + std::to_string(source));
  roi.source = static_cast<RoiSource>(source);
  roi.assigned_label = r.get<std::int32_t>();
  roi.assigned_iou = r.get<float>();
  roi.box = get_box(r);
  const auto len = r.get<std::uint32_t>();
  if (len != index_.dims.d) {
    r.fail("feature length " + std::to_string(len) + " does not match manifest d=" + std::to_string(index_.dims.d));
  }
  roi.feature.resize(len);
  r.get_into(std::span<float>(roi.feature));
  if (r.remaining() != 0) r.fail("trailing bytes in RoI record");

  const ImageRecord& img = image_or_fail(index_, roi.image_id, r);
  check_box_against_image(roi.box, img, r);
  if (!all_finite(roi.feature)) r.fail("non-finite feature value");
  if (roi.assigned_label < kLabelIgnored || roi.assigned_label > static_cast<std::int32_t>(index_.num_classes)) {
    r.fail("assigned label " + std::to_string(roi.assigned_label) + " out of range");
  }
  if (!(roi.assigned_iou >= 0.0f && roi.assigned_iou <= 1.0f)) r.fail("assigned IoU outside [0,1]");
  return roi;
}

GridReader::GridReader(const DatasetIndex& index, std::string_view split)
    : index_(index), file_(index.grid_file(split), "GRD1") {
  if (file_.dim_a() != index.dims.s || file_.dim_b() != index.dims.f) {
    throw LoadError(file_.name() + ": header (s,f)=(" + std::to_string(file_.dim_a()) + "," +
                    std::to_string(file_.dim_b()) + ") disagrees with manifest");
  }
}

std::optional<SegFeatureGrid> GridReader::next() {
  auto rec = file_.next();
  if (!rec) return std::nullopt;
  ByteReader r(rec->payload, file_.name() + ": record at offset " + std::to_string(rec->offset), rec->offset + 4);
  SegFeatureGrid g;
  g.image_id = r.get<std::uint32_t>();
  g.class_id = r.get<std::uint32_t>();
  const auto source = r.get<std::uint32_t>();
  if (source > 1) r.fail("unknown grid source tag " + std::to_string(source));
  g.source = static_cast<GridSource>(source);
  g.gt_instance = r.get<std::int32_t>();
  g.box = get_box(r);
  g.s = r.get<std::uint32_t>();
  g.f = r.get<std::uint32_t>();
  if (g.s != index_.dims.s || g.f != index_.dims.f) {
    r.fail("grid dims (" + std::to_string(g.s) + "," + std::to_string(g.f) + ") do not match manifest");
  }
  const std::size_t cells = static_cast<std::size_t>(g.s) * g.s;
  g.grid.resize(cells * g.f);
  r.get_into(std::span<float>(g.grid));
  const auto mask_bytes = r.get<std::uint32_t>();
  if (mask_bytes != 0 && mask_bytes != cells) r.fail("gt mask grid has " + std::to_string(mask_bytes) + " cells");
  g.gt_mask_grid.resize(mask_bytes);
  r.get_into(std::span<std::uint8_t>(g.gt_mask_grid));
  r.align_to(4);
  if (r.remaining() != 0) r.fail("trailing bytes in grid record");

  const ImageRecord& img = image_or_fail(index_, g.image_id, r);
  check_box_against_image(g.box, img, r);
  if (g.class_id < 1 || g.class_id > index_.num_classes) r.fail("class id " + std::to_string(g.class_id) + " out of range");
  if (!all_finite(g.grid)) r.fail("non-finite grid value");
  if (std::any_of(g.gt_mask_grid.begin(), g.gt_mask_grid.end(), [](std::uint8_t v) { return v > 1; })) {
    r.fail("gt mask grid is not binary");
  }
  if (g.source == GridSource::ground_truth && g.gt_mask_grid.empty()) r.fail("ground-truth grid without mask");
  return g;
}

MaskReader::MaskReader(const DatasetIndex& index, std::string_view split)
    : index_(index), file_(index.mask_file(split), "MSK1") {}

std::optional<GroundTruthInstance> MaskReader::next() {
  auto rec = file_.next();
  if (!rec) return std::nullopt;
  ByteReader r(rec->payload, file_.name() + ": record at offset " + std::to_string(rec->offset), rec->offset + 4);
  GroundTruthInstance gt;
  gt.image_id = r.get<std::uint32_t>();
  gt.class_id = r.get<std::uint32_t>();
  gt.box = get_box(r);
  const auto h = r.get<std::uint32_t>();
  const auto w = r.get<std::uint32_t>();
  const auto n = r.get<std::uint32_t>();
  if (static_cast<std::uint64_t>(n) * 4 != r.remaining()) r.fail("run count disagrees with record length");
  std::vector<std::uint32_t> counts(n);
  r.get_into(std::span<std::uint32_t>(counts));

  const ImageRecord& img = image_or_fail(index_, gt.image_id, r);
  if (h != img.height || w != img.width) r.fail("mask size differs from image size");
  if (gt.class_id < 1 || gt.class_id > index_.num_classes) r.fail("class id " + std::to_string(gt.class_id) + " out of range");
  check_box_against_image(gt.box, img, r);
  try {
    gt.mask = RleMask(h, w, std::move(counts));
  } catch (const InputError& e) {
    r.fail(e.what());
  }
  return gt;
}

std::vector<RoIFeature> read_rois(const DatasetIndex& index, std::string_view split) {
  RoiReader reader(index, split);
  std::vector<RoIFeature> out;
  while (auto r = reader.next()) out.push_back(std::move(*r));
  return out;
}

std::vector<SegFeatureGrid> read_grids(const DatasetIndex& index, std::string_view split) {
  GridReader reader(index, split);
  std::vector<SegFeatureGrid> out;
  while (auto g = reader.next()) out.push_back(std::move(*g));
  return out;
}

std::vector<GroundTruthInstance> read_ground_truth(const DatasetIndex& index, std::string_view split) {
  MaskReader reader(index, split);
  std::vector<GroundTruthInstance> out;
  while (auto m = reader.next()) out.push_back(std::move(*m));
  return out;
}

RoiWriter::RoiWriter(const fs::path& path, std::uint32_t d) : file_(path, "ROI1", d, 0), d_(d) {}

void RoiWriter::write(const RoIFeature& roi) {
  if (roi.feature.size() != d_) throw InputError("RoiWriter: feature length does not match d");
  ByteWriter w;
  w.put<std::uint32_t>(roi.image_id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(roi.source));
  w.put<std::int32_t>(roi.assigned_label);
  w.put<float>(roi.assigned_iou);
  put_box(w, roi.box);
  w.put<std::uint32_t>(d_);
  w.put_span(std::span<const float>(roi.feature));
  file_.write(w.bytes());
}

GridWriter::GridWriter(const fs::path& path, std::uint32_t s, std::uint32_t f)
    : file_(path, "GRD1", s, f), s_(s), f_(f) {}

void GridWriter::write(const SegFeatureGrid& g) {
  const std::size_t cells = static_cast<std::size_t>(s_) * s_;
  if (g.s != s_ || g.f != f_ || g.grid.size() != cells * f_) throw InputError("GridWriter: grid dims mismatch");
  if (!g.gt_mask_grid.empty() && g.gt_mask_grid.size() != cells) throw InputError("GridWriter: mask grid size mismatch");
  ByteWriter w;
  w.put<std::uint32_t>(g.image_id);
  w.put<std::uint32_t>(g.class_id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.source));
  w.put<std::int32_t>(g.gt_instance);
  put_box(w, g.box);
  w.put<std::uint32_t>(s_);
  w.put<std::uint32_t>(f_);
  w.put_span(std::span<const float>(g.grid));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.gt_mask_grid.size()));
  w.put_bytes(g.gt_mask_grid);
  w.pad_to(4);
  file_.write(w.bytes());
}

MaskWriter::MaskWriter(const fs::path& path) : file_(path, "MSK1", 0, 0) {}

void MaskWriter::write(const GroundTruthInstance& gt) {
  ByteWriter w;
  w.put<std::uint32_t>(gt.image_id);
  w.put<std::uint32_t>(gt.class_id);
  put_box(w, gt.box);
  w.put<std::uint32_t>(gt.mask.height());
  w.put<std::uint32_t>(gt.mask.width());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(gt.mask.counts().size()));
  w.put_span(std::span<const std::uint32_t>(gt.mask.counts()));
  file_.write(w.bytes());
}

ValidationReport validate_dataset(const DatasetIndex& index) {
  ValidationReport report;
  for (const auto& split : index.splits) {
    SplitCounts counts;
    counts.split = split;
    counts.images = index.images_in(split).size();
    std::vector<GroundTruthInstance> gts;
    try {
      MaskReader masks(index, split);
      while (auto m = masks.next()) gts.push_back(std::move(*m));
    } catch (const LoadError& e) {
      report.errors.emplace_back(e.what());
    }
    counts.instances = gts.size();
    try {
      RoiReader rois(index, split);
      while (rois.next()) ++counts.rois;
    } catch (const LoadError& e) {
      report.errors.emplace_back(e.what());
    }
    try {
      GridReader grids(index, split);
      while (auto g = grids.next()) {
        ++counts.grids;
        if (g->gt_instance < 0) continue;
        const auto inst = static_cast<std::size_t>(g->gt_instance);
        const std::string where = index.grid_file(split).string() + ": grid " + std::to_string(counts.grids - 1);
        if (inst >= gts.size()) {
          report.errors.push_back(where + ": gt_instance " + std::to_string(inst) + " out of range");
          continue;
        }
        const auto& gt = gts[inst];
        if (gt.image_id != g->image_id || gt.class_id != g->class_id) {
          report.errors.push_back(where + ": gt_instance refers to a different image or class");
          continue;
        }
        if (!g->gt_mask_grid.empty() && resample_mask_nearest(gt.mask.decode(), g->box, g->s) != g->gt_mask_grid) {
          report.errors.push_back(where + ": gt_mask_grid is not the nearest-neighbour view of the full mask");
        }
      }
    } catch (const LoadError& e) {
      report.errors.emplace_back(e.what());
    }
    report.splits.push_back(counts);
  }
  return report;
}

ValidationReport validate_dataset(const fs::path& root) {
  try {
    return validate_dataset(load_dataset(root));
  } catch (const LoadError& e) {
    ValidationReport r;
    r.errors.emplace_back(e.what());
    return r;
  }
}

}  // namespace olseg
