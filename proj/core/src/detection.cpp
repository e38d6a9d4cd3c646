#include "olseg/detection.hpp"

#include <algorithm>
#include <chrono>
#include <istream>
#include <numeric>
#include <ostream>

#include "olseg/binary_io.hpp"
#include "olseg/error.hpp"
#include "olseg/parallel.hpp"
#include "olseg/rng.hpp"

namespace olseg {

namespace {

Matrix gather_rows(const MatrixRef& src, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

FalkonModel train_round(const MatrixRef& positives, const MatrixRef& negatives, std::span<const std::size_t> active,
                        const FalkonOptions& falkon, std::size_t round) {
  const auto np = positives.rows();
  const auto nn = static_cast<Eigen::Index>(active.size());
  Matrix X(np + nn, positives.cols());
  X.topRows(np) = positives;
  for (Eigen::Index i = 0; i < nn; ++i) X.row(np + i) = negatives.row(static_cast<Eigen::Index>(active[static_cast<std::size_t>(i)]));
  std::vector<double> y(static_cast<std::size_t>(np + nn), -1.0);
  std::fill_n(y.begin(), np, 1.0);
  FalkonOptions opts = falkon;
  opts.seed = derive_seed(falkon.seed, round);
  return falkon_train(X, y, opts);
}

Matrix features_of(std::span<const RoIFeature> rois, std::span<const std::size_t> which, std::uint32_t dim) {
  Matrix X(static_cast<Eigen::Index>(which.size()), dim);
  for (std::size_t i = 0; i < which.size(); ++i) {
    const auto& f = rois[which[i]].feature;
    if (f.size() != dim) throw InputError("detection: RoI feature length does not match bank dimension");
    for (std::uint32_t k = 0; k < dim; ++k) X(static_cast<Eigen::Index>(i), k) = f[k];
  }
  return X;
}

}  // namespace

void MinibootstrapConfig::validate() const {
  if (batches < 1) throw ConfigError("minibootstrap: n_B must be >= 1");
  if (batch_size < 1) throw ConfigError("minibootstrap: BS must be >= 1");
  if (max_negatives_kept < 1) throw ConfigError("minibootstrap: max_negatives_kept must be >= 1");
  if (!(iou_bg >= 0.0 && iou_bg < iou_fg && iou_fg <= 1.0)) {
    throw ConfigError("minibootstrap: need 0 <= iou_bg < iou_fg <= 1");
  }
}

void DetectionTrainConfig::validate() const {
  falkon.validate();
  bootstrap.validate();
  if (!(rls_lambda > 0.0)) throw ConfigError("detection: rls_lambda must be positive");
  if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw ConfigError("detection: nms_iou must lie in (0, 1)");
}

std::optional<std::pair<std::size_t, double>> best_match(const Box& box, std::span<const GroundTruthBox> gts) {
  if (gts.empty()) return std::nullopt;
  std::size_t best = 0;
  double best_iou = -1.0;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const double v = iou(box, gts[g].box);
    if (v > best_iou) {
      best_iou = v;
      best = g;
    }
  }
  return std::make_pair(best, best_iou);
}

void assign_roi_labels(std::span<RoIFeature> rois, std::span<const GroundTruthBox> gts, double iou_fg, double iou_bg) {
  for (auto& roi : rois) {
    const auto match = best_match(roi.box, gts);
    if (!match) {
      roi.assigned_label = kLabelBackground;
      roi.assigned_iou = 0.0f;
      continue;
    }
    const auto [g, v] = *match;
    roi.assigned_iou = static_cast<float>(v);
    if (roi.source == RoiSource::ground_truth || v >= iou_fg) {
      roi.assigned_label = static_cast<std::int32_t>(gts[g].class_id);
    } else if (v < iou_bg) {
      roi.assigned_label = kLabelBackground;
    } else {
      roi.assigned_label = kLabelIgnored;
    }
  }
}

MinibootstrapResult minibootstrap_train(const MatrixRef& positives, const MatrixRef& negatives,
                                        const MinibootstrapConfig& config, const FalkonOptions& falkon,
                                        bool record_models) {
  config.validate();
  if (positives.rows() < 1) throw InputError("minibootstrap: no positives");
  if (negatives.rows() < 1) throw InputError("minibootstrap: empty negative pool");
  if (positives.cols() != negatives.cols()) throw InputError("minibootstrap: positive/negative dimension mismatch");

  const auto pool = static_cast<std::size_t>(negatives.rows());
  std::vector<std::size_t> order(pool);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(config.seed);
  shuffle(std::span<std::size_t>(order), rng);

  const std::size_t visited = std::min(pool, config.batches * config.batch_size);
  order.resize(visited);

  MinibootstrapResult result;
  std::vector<std::size_t> active;
  std::optional<FalkonModel> model;
  std::size_t round = 0;
  for (std::size_t start = 0; start < visited; start += config.batch_size, ++round) {
    MinibootstrapRound rec;
    const std::size_t end = std::min(visited, start + config.batch_size);
    rec.batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    if (!model) {
      active = rec.batch;
    } else {
      const Vector batch_scores = falkon_predict(*model, gather_rows(negatives, rec.batch));
      for (std::size_t i = 0; i < rec.batch.size(); ++i) {
        if (batch_scores[static_cast<Eigen::Index>(i)] >= config.hard_threshold) rec.hard.push_back(rec.batch[i]);
      }
      active.insert(active.end(), rec.hard.begin(), rec.hard.end());
      if (active.size() > config.max_negatives_kept) {
        const Vector scores = falkon_predict(*model, gather_rows(negatives, active));
        std::vector<std::size_t> rank(active.size());
        std::iota(rank.begin(), rank.end(), std::size_t{0});
        std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
          const double sa = scores[static_cast<Eigen::Index>(a)], sb = scores[static_cast<Eigen::Index>(b)];
          if (sa != sb) return sa > sb;
          return active[a] < active[b];
        });
        std::vector<std::size_t> trimmed(config.max_negatives_kept);
        for (std::size_t i = 0; i < trimmed.size(); ++i) trimmed[i] = active[rank[i]];
        active = std::move(trimmed);
      }
      if (record_models) rec.scoring_model = *model;
    }
    // A round that mined nothing leaves the training set unchanged, so the
    // retrained model would be identical; skip the solve.
    if (!model || !rec.hard.empty()) model = train_round(positives, negatives, active, falkon, round);
    rec.active = active;
    result.rounds.push_back(std::move(rec));
  }
  result.model = std::move(*model);
  result.negatives_visited = visited;
  result.negatives_kept = active.size();
  return result;
}

GroundTruthByImage group_ground_truth(std::span<const GroundTruthInstance> instances) {
  GroundTruthByImage out;
  for (const auto& gt : instances) out[gt.image_id].push_back({gt.box, gt.class_id});
  return out;
}

DetectionBank train_detection_bank(std::span<const RoIFeature> rois_in, const GroundTruthByImage& gts,
                                   std::uint32_t num_classes, std::uint32_t dim, const DetectionTrainConfig& config,
                                   DetectionTrainReport* report) {
  config.validate();
  if (num_classes < 1) throw ConfigError("detection: num_classes must be >= 1");

  std::vector<RoIFeature> rois(rois_in.begin(), rois_in.end());
  static const std::vector<GroundTruthBox> kNoBoxes;
  const auto gts_of = [&](std::uint32_t image_id) -> const std::vector<GroundTruthBox>& {
    const auto it = gts.find(image_id);
    return it == gts.end() ? kNoBoxes : it->second;
  };
  for (auto& roi : rois) {
    assign_roi_labels(std::span<RoIFeature>(&roi, 1), gts_of(roi.image_id), config.bootstrap.iou_fg,
                      config.bootstrap.iou_bg);
  }

  DetectionBank bank;
  bank.num_classes = num_classes;
  bank.dim = dim;
  bank.classifiers.resize(num_classes);
  bank.regressors.resize(num_classes);
  bank.score_threshold = config.score_threshold;
  bank.nms_iou = config.nms_iou;
  std::vector<DetectionClassStats> stats(num_classes);

  parallel_for(num_classes, config.threads, [&](std::size_t ci) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto class_id = static_cast<std::uint32_t>(ci + 1);
    DetectionClassStats& st = stats[ci];
    st.class_id = class_id;

    std::vector<std::size_t> pos, neg;
    Matrix targets;
    std::vector<BoxDeltas> deltas;
    for (std::size_t r = 0; r < rois.size(); ++r) {
      const auto& roi = rois[r];
      std::vector<GroundTruthBox> class_gts;
      for (const auto& g : gts_of(roi.image_id)) {
        if (g.class_id == class_id) class_gts.push_back(g);
      }
      if (roi.assigned_label == static_cast<std::int32_t>(class_id)) {
        pos.push_back(r);
        const auto m = best_match(roi.box, class_gts);
        deltas.push_back(compute_bbox_targets(roi.box, class_gts[m->first].box));
      } else {
        const auto m = best_match(roi.box, class_gts);
        if (!m || m->second < config.bootstrap.iou_bg) neg.push_back(r);
      }
    }
    st.positives = pos.size();
    st.negative_pool = neg.size();
    if (pos.empty() || neg.empty()) {
      st.skipped = true;
      return;
    }
    const Matrix P = features_of(rois, pos, dim);
    const Matrix N = features_of(rois, neg, dim);
    MinibootstrapConfig mb = config.bootstrap;
    mb.seed = derive_seed(config.bootstrap.seed, class_id);
    FalkonOptions fo = config.falkon;
    fo.seed = derive_seed(config.falkon.seed, class_id);
    auto trained = minibootstrap_train(P, N, mb, fo);
    st.negatives_visited = trained.negatives_visited;
    st.negatives_kept = trained.negatives_kept;
    st.rounds = trained.rounds.size();
    bank.classifiers[ci] = std::move(trained.model);

    Matrix T(static_cast<Eigen::Index>(deltas.size()), 4);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      for (int k = 0; k < 4; ++k) T(static_cast<Eigen::Index>(i), k) = deltas[i][static_cast<std::size_t>(k)];
    }
    bank.regressors[ci] = rls_fit(P, T, config.rls_lambda);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });

  if (report) {
    report->classes = stats;
    for (const auto& st : stats) {
      if (st.skipped) {
        report->warnings.push_back("class " + std::to_string(st.class_id) + " skipped: " +
                                   (st.positives == 0 ? "no positive RoIs" : "no negative RoIs"));
      }
    }
  }
  return bank;
}

std::vector<DetectionResult> detect(std::uint32_t image_id, std::span<const RoIFeature> rois, const DetectionBank& bank,
                                    double image_width, double image_height) {
  std::vector<DetectionResult> out;
  if (rois.empty()) return out;
  std::vector<std::size_t> all(rois.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Matrix X = features_of(rois, all, bank.dim);
  for (std::uint32_t ci = 0; ci < bank.num_classes; ++ci) {
    if (!bank.classifiers[ci]) continue;
    const Vector scores = falkon_predict(*bank.classifiers[ci], X);
    Matrix deltas = Matrix::Zero(X.rows(), 4);
    if (bank.regressors[ci]) deltas = rls_predict(*bank.regressors[ci], X);
    std::vector<Box> boxes;
    std::vector<double> kept_scores;
    for (std::size_t r = 0; r < rois.size(); ++r) {
      const double s = scores[static_cast<Eigen::Index>(r)];
      if (!(s >= bank.score_threshold)) continue;
      const auto i = static_cast<Eigen::Index>(r);
      const Box refined = clip_box(apply_bbox_deltas(rois[r].box, {deltas(i, 0), deltas(i, 1), deltas(i, 2), deltas(i, 3)}),
                                   image_width, image_height);
      if (!refined.well_formed()) continue;
      boxes.push_back(refined);
      kept_scores.push_back(s);
    }
    for (std::size_t k : nms(boxes, kept_scores, bank.nms_iou)) {
      out.push_back({image_id, ci + 1, boxes[k], kept_scores[k]});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const DetectionResult& a, const DetectionResult& b) { return a.score > b.score; });
  return out;
}

void write_detection_bank(std::ostream& out, const DetectionBank& bank) {
  ByteWriter w;
  w.put_magic("DBK1");
  w.put<std::uint32_t>(bank.num_classes);
  w.put<std::uint32_t>(bank.dim);
  w.put<double>(bank.score_threshold);
  w.put<double>(bank.nms_iou);
  write_all(out, w.bytes());
  for (std::uint32_t c = 0; c < bank.num_classes; ++c) {
    ByteWriter flags;
    flags.put<std::uint8_t>(bank.classifiers[c] ? 1 : 0);
    flags.put<std::uint8_t>(bank.regressors[c] ? 1 : 0);
    write_all(out, flags.bytes());
    if (bank.classifiers[c]) write_falkon(out, *bank.classifiers[c]);
    if (bank.regressors[c]) write_rls(out, *bank.regressors[c]);
  }
}

DetectionBank read_detection_bank(std::istream& in) {
  const auto header = read_exact(in, 28, "DBK1 stream");
  ByteReader r(header, "DBK1 stream");
  r.expect_magic("DBK1");
  DetectionBank bank;
  bank.num_classes = r.get<std::uint32_t>();
  bank.dim = r.get<std::uint32_t>();
  bank.score_threshold = r.get<double>();
  bank.nms_iou = r.get<double>();
  bank.classifiers.resize(bank.num_classes);
  bank.regressors.resize(bank.num_classes);
  for (std::uint32_t c = 0; c < bank.num_classes; ++c) {
    const auto flags = read_exact(in, 2, "DBK1 stream");
    if (flags[0]) {
      bank.classifiers[c] = read_falkon(in);
      if (bank.classifiers[c]->dim() != bank.dim) throw LoadError("DBK1 stream: classifier dimension mismatch");
    }
    if (flags[1]) bank.regressors[c] = read_rls(in);
  }
  return bank;
}

}  // namespace olseg
