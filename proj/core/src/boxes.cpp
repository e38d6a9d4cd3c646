#include "olseg/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "olseg/error.hpp"

namespace olseg {

namespace {
const double kMaxLogScale = std::log(1000.0 / 16.0);
}

bool Box::well_formed() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 > x1 && y2 > y1;
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box clip_box(const Box& b, double image_width, double image_height) {
  return Box{std::clamp(b.x1, 0.0, image_width), std::clamp(b.y1, 0.0, image_height),
             std::clamp(b.x2, 0.0, image_width), std::clamp(b.y2, 0.0, image_height)};
}

BoxDeltas compute_bbox_targets(const Box& p, const Box& g) {
  if (!p.well_formed() || !g.well_formed()) throw InputError("compute_bbox_targets: degenerate box");
  return {(g.center_x() - p.center_x()) / p.width(), (g.center_y() - p.center_y()) / p.height(),
          std::log(g.width() / p.width()), std::log(g.height() / p.height())};
}

Box apply_bbox_deltas(const Box& p, const BoxDeltas& t) {
  if (!p.well_formed()) throw InputError("apply_bbox_deltas: degenerate box");
  const double cx = p.center_x() + t[0] * p.width();
  const double cy = p.center_y() + t[1] * p.height();
  const double w = p.width() * std::exp(std::min(t[2], kMaxLogScale));
  const double h = p.height() * std::exp(std::min(t[3], kMaxLogScale));
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold) {
  if (boxes.size() != scores.size()) throw InputError("nms: boxes and scores differ in length");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(),
                                        [&](std::size_t k) { return iou(boxes[i], boxes[k]) > iou_threshold; });
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

}  // namespace olseg
