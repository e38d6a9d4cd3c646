#include "olseg/rle.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "olseg/error.hpp"

namespace olseg {

RleMask::RleMask(std::uint32_t height, std::uint32_t width, std::vector<std::uint32_t> counts)
    : height_(height), width_(width), counts_(std::move(counts)) {
  std::uint64_t total = 0;
  for (auto c : counts_) total += c;
  if (total != static_cast<std::uint64_t>(height) * width) {
    throw InputError("RleMask: run lengths sum to " + std::to_string(total) + ", expected " +
                     std::to_string(static_cast<std::uint64_t>(height) * width));
  }
}

RleMask RleMask::encode(const Bitmap& bitmap) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (std::uint8_t v : bitmap.pixels) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      counts.push_back(run);
      run = 0;
      current = bit;
    }
    ++run;
  }
  counts.push_back(run);
  return RleMask(bitmap.height, bitmap.width, std::move(counts));
}

RleMask RleMask::empty(std::uint32_t height, std::uint32_t width) {
  return RleMask(height, width, {height * width});
}

Bitmap RleMask::decode() const {
  Bitmap out(height_, width_);
  std::size_t pos = 0;
  std::uint8_t value = 0;
  for (auto c : counts_) {
    std::fill_n(out.pixels.begin() + static_cast<std::ptrdiff_t>(pos), c, value);
    pos += c;
    value ^= 1;
  }
  return out;
}

std::uint64_t RleMask::area() const {
  std::uint64_t a = 0;
  for (std::size_t i = 1; i < counts_.size(); i += 2) a += counts_[i];
  return a;
}

Box RleMask::bounding_box() const {
  if (width_ == 0) return {};
  std::uint64_t pos = 0;
  std::uint32_t xmin = width_, ymin = height_, xmax = 0, ymax = 0;
  bool any = false;
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    const std::uint64_t start = pos;
    pos += counts_[i];
    if (i % 2 == 0 || counts_[i] == 0) continue;
    any = true;
    const std::uint64_t last = pos - 1;
    const auto y0 = static_cast<std::uint32_t>(start / width_);
    const auto y1 = static_cast<std::uint32_t>(last / width_);
    ymin = std::min(ymin, y0);
    ymax = std::max(ymax, y1);
    if (y0 == y1) {
      xmin = std::min(xmin, static_cast<std::uint32_t>(start % width_));
      xmax = std::max(xmax, static_cast<std::uint32_t>(last % width_));
    } else {
      // A run that wraps a row boundary reaches both the last and first column.
      xmin = 0;
      xmax = width_ - 1;
    }
  }
  if (!any) return {};
  return Box{static_cast<double>(xmin), static_cast<double>(ymin), static_cast<double>(xmax) + 1.0,
             static_cast<double>(ymax) + 1.0};
}

std::uint64_t intersection_area(const RleMask& a, const RleMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw InputError("mask size mismatch: " + std::to_string(a.height()) + "x" + std::to_string(a.width()) + " vs " +
                     std::to_string(b.height()) + "x" + std::to_string(b.width()));
  }
  const auto& ca = a.counts();
  const auto& cb = b.counts();
  std::size_t ia = 0, ib = 0;
  std::uint64_t ra = ca.empty() ? 0 : ca[0], rb = cb.empty() ? 0 : cb[0];
  std::uint64_t inter = 0;
  // Walk both run sequences in lockstep; odd run indices are foreground.
  while (ia < ca.size() && ib < cb.size()) {
    const std::uint64_t step = std::min(ra, rb);
    if ((ia & 1) && (ib & 1)) inter += step;
    ra -= step;
    rb -= step;
    if (ra == 0 && ++ia < ca.size()) ra = ca[ia];
    if (rb == 0 && ++ib < cb.size()) rb = cb[ib];
  }
  return inter;
}

double iou(const RleMask& a, const RleMask& b) {
  const std::uint64_t inter = intersection_area(a, b);
  const std::uint64_t uni = a.area() + b.area() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace olseg
