#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace olseg {

/// Axis-aligned box in continuous pixel coordinates, (x1, y1) inclusive
/// corner and (x2, y2) exclusive corner; area is (x2-x1)(y2-y1).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool well_formed() const;

  friend bool operator==(const Box&, const Box&) = default;
};

double iou(const Box& a, const Box& b);

/// Intersection of the box with [0, width] x [0, height].
Box clip_box(const Box& b, double image_width, double image_height);

using BoxDeltas = std::array<double, 4>;

/// R-CNN parameterization: t_x = (g_cx - p_cx)/p_w, t_y likewise,
/// t_w = log(g_w/p_w), t_h = log(g_h/p_h).
BoxDeltas compute_bbox_targets(const Box& proposal, const Box& target);

/// Inverse of compute_bbox_targets. Log-size deltas are clamped at
/// log(1000/16) to keep exp() finite on wild regressor outputs.
Box apply_bbox_deltas(const Box& proposal, const BoxDeltas& deltas);

/// Greedy non-maximum suppression. Visits boxes by descending score (ties
/// by lower index) and drops any box whose IoU with an already kept box
/// exceeds iou_threshold. Returns kept indices in visiting order.
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold);

}  // namespace olseg
