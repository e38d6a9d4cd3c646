#include "olseg/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "olseg/error.hpp"

namespace olseg {

const char* to_string(IouKind kind) { return kind == IouKind::bbox ? "bbox" : "segm"; }

double average_precision(std::span<const ScoredMatch> matches, std::size_t num_ground_truth) {
  if (num_ground_truth == 0) throw InputError("average_precision: no ground truth");
  std::vector<std::size_t> order(matches.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return matches[a].score > matches[b].score; });

  std::vector<double> recall, precision;
  recall.reserve(order.size());
  precision.reserve(order.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (matches[order[k]].true_positive) ++tp;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_ground_truth));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

namespace {

double overlap(const EvalPrediction& p, const EvalGroundTruth& g, IouKind kind) {
  if (kind == IouKind::bbox) return iou(p.box, g.box);
  if (!p.mask || !g.mask) throw InputError("evaluate: segm evaluation needs masks on every instance");
  return iou(*p.mask, *g.mask);
}

}  // namespace

std::vector<ScoredMatch> match_class(std::span<const EvalPrediction> predictions,
                                     std::span<const EvalGroundTruth> ground_truth, IouKind kind,
                                     double iou_threshold) {
  std::map<std::uint32_t, std::vector<std::size_t>> gts_by_image;
  for (std::size_t g = 0; g < ground_truth.size(); ++g) gts_by_image[ground_truth[g].image_id].push_back(g);
  std::vector<bool> matched(ground_truth.size(), false);

  std::vector<std::size_t> order(predictions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return predictions[a].score > predictions[b].score; });

  std::vector<ScoredMatch> out;
  out.reserve(order.size());
  for (std::size_t idx : order) {
    const auto& p = predictions[idx];
    ScoredMatch m{p.score, false};
    const auto it = gts_by_image.find(p.image_id);
    if (it != gts_by_image.end()) {
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g : it->second) {
        const double v = overlap(p, ground_truth[g], kind);
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
      if (best >= iou_threshold && !matched[best_g]) {
        matched[best_g] = true;
        m.true_positive = true;
      }
    }
    out.push_back(m);
  }
  return out;
}

double EvalReport::map(IouKind kind, double threshold) const {
  const auto k = std::find(kinds.begin(), kinds.end(), kind);
  const auto t = std::find_if(thresholds.begin(), thresholds.end(),
                              [&](double v) { return std::abs(v - threshold) < 1e-12; });
  if (k == kinds.end() || t == thresholds.end()) {
    throw InputError(std::string("EvalReport: no ") + to_string(kind) + " mAP at threshold " + std::to_string(threshold));
  }
  return mean_ap[static_cast<std::size_t>(k - kinds.begin())][static_cast<std::size_t>(t - thresholds.begin())];
}

namespace {

std::string threshold_tag(double t) { return std::to_string(static_cast<int>(std::lround(t * 100))); }

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["thresholds"] = thresholds;
  nlohmann::json maps = nlohmann::json::object();
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      maps[std::string(to_string(kinds[k])) + "_mAP" + threshold_tag(thresholds[t])] = number_or_null(mean_ap[k][t]);
    }
  }
  j["mAP"] = maps;
  nlohmann::json cls = nlohmann::json::array();
  for (const auto& c : classes) {
    nlohmann::json e{{"class_id", c.class_id}, {"name", c.name}, {"num_ground_truth", c.num_ground_truth},
                     {"num_predictions", c.num_predictions}};
    for (std::size_t k = 0; k < kinds.size(); ++k) {
      for (std::size_t t = 0; t < thresholds.size(); ++t) {
        const std::string key = std::string(to_string(kinds[k])) + "_" + threshold_tag(thresholds[t]);
        e["AP"][key] = number_or_null(c.ap[k][t]);
        e["true_positives"][key] = c.true_positives[k][t];
        e["false_positives"][key] = c.false_positives[k][t];
      }
    }
    cls.push_back(std::move(e));
  }
  j["classes"] = std::move(cls);
  j["notes"] = notes;
  j["eval_seconds"] = eval_seconds;
  if (train_seconds) j["train_seconds"] = *train_seconds;
  return j;
}

std::string EvalReport::to_table() const {
  std::vector<std::string> header{"class"};
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    for (auto kind : kinds) header.push_back("mAP" + threshold_tag(thresholds[t]) + " " + to_string(kind));
  }
  std::vector<std::vector<std::string>> rows;
  const auto fmt = [](double v) {
    if (!std::isfinite(v)) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * v;
    return s.str();
  };
  for (const auto& c : classes) {
    std::vector<std::string> row{c.name.empty() ? std::to_string(c.class_id) : c.name};
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      for (std::size_t k = 0; k < kinds.size(); ++k) row.push_back(fmt(c.ap[k][t]));
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::string> total{"mean"};
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    for (std::size_t k = 0; k < kinds.size(); ++k) total.push_back(fmt(mean_ap[k][t]));
  }
  rows.push_back(std::move(total));
  if (train_seconds) {
    header.push_back("train time");
    const auto secs = static_cast<long long>(std::llround(*train_seconds));
    const std::string tt = std::to_string(secs / 60) + "m" + (secs % 60 < 10 ? "0" : "") + std::to_string(secs % 60) + "s";
    for (auto& r : rows) r.push_back("");
    rows.back().back() = tt;
  }

  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream out;
  const auto emit = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) out << "  ";
      if (c == 0) out << std::left; else out << std::right;
      out << std::setw(static_cast<int>(width[c])) << r[c];
    }
    out << '\n';
  };
  emit(header);
  std::size_t line = 0;
  for (auto w : width) line += w + 2;
  out << std::string(line - 2, '-') << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i + 1 == rows.size()) out << std::string(line - 2, '-') << '\n';
    emit(rows[i]);
  }
  return out.str();
}

EvalReport evaluate(std::span<const EvalPrediction> predictions, std::span<const EvalGroundTruth> ground_truth,
                    std::uint32_t num_classes, std::span<const std::string> class_names, const EvalOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  if (options.thresholds.empty()) throw ConfigError("evaluate: no IoU thresholds");
  for (double t : options.thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("evaluate: IoU thresholds must lie in (0, 1]");
  }
  EvalReport report;
  report.thresholds = options.thresholds;
  report.kinds = options.segm ? std::vector{IouKind::bbox, IouKind::segm} : std::vector{IouKind::bbox};
  const std::size_t nk = report.kinds.size(), nt = report.thresholds.size();

  std::vector<std::vector<EvalPrediction>> preds(num_classes);
  std::vector<std::vector<EvalGroundTruth>> gts(num_classes);
  for (const auto& p : predictions) {
    if (p.class_id < 1 || p.class_id > num_classes) throw InputError("evaluate: prediction class out of range");
    preds[p.class_id - 1].push_back(p);
  }
  for (const auto& g : ground_truth) {
    if (g.class_id < 1 || g.class_id > num_classes) throw InputError("evaluate: ground-truth class out of range");
    gts[g.class_id - 1].push_back(g);
  }

  report.mean_ap.assign(nk, std::vector<double>(nt, 0.0));
  std::size_t counted = 0;
  for (std::uint32_t c = 0; c < num_classes; ++c) {
    ClassEval ce;
    ce.class_id = c + 1;
    if (c < class_names.size()) ce.name = class_names[c];
    ce.num_ground_truth = gts[c].size();
    ce.num_predictions = preds[c].size();
    ce.ap.assign(nk, std::vector<double>(nt, std::numeric_limits<double>::quiet_NaN()));
    ce.true_positives.assign(nk, std::vector<std::size_t>(nt, 0));
    ce.false_positives.assign(nk, std::vector<std::size_t>(nt, 0));
    for (std::size_t k = 0; k < nk; ++k) {
      for (std::size_t t = 0; t < nt; ++t) {
        const auto m = match_class(preds[c], gts[c], report.kinds[k], report.thresholds[t]);
        const auto tp = static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](auto& x) { return x.true_positive; }));
        ce.true_positives[k][t] = tp;
        ce.false_positives[k][t] = m.size() - tp;
        if (!gts[c].empty()) ce.ap[k][t] = average_precision(m, gts[c].size());
      }
    }
    if (gts[c].empty()) {
      report.notes.push_back("class " + std::to_string(c + 1) + " has no ground truth; excluded from mAP");
    } else {
      ++counted;
      for (std::size_t k = 0; k < nk; ++k)
        for (std::size_t t = 0; t < nt; ++t) report.mean_ap[k][t] += ce.ap[k][t];
    }
    report.classes.push_back(std::move(ce));
  }
  for (auto& row : report.mean_ap) {
    for (auto& v : row) v = counted ? v / static_cast<double>(counted) : std::numeric_limits<double>::quiet_NaN();
  }
  report.eval_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace olseg
