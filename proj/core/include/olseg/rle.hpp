#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "olseg/boxes.hpp"

namespace olseg {

/// Binary image, row-major, one byte per pixel (0 or 1).
struct Bitmap {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<std::uint8_t> pixels;

  Bitmap() = default;
  Bitmap(std::uint32_t h, std::uint32_t w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t at(std::uint32_t y, std::uint32_t x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(std::uint32_t y, std::uint32_t x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// Run-length encoding over the row-major pixel sequence. Runs alternate
/// starting with a (possibly empty) run of zeros. Counts are uncompressed.
class RleMask {
 public:
  RleMask() = default;
  RleMask(std::uint32_t height, std::uint32_t width, std::vector<std::uint32_t> counts);

  static RleMask encode(const Bitmap& bitmap);
  static RleMask empty(std::uint32_t height, std::uint32_t width);

  Bitmap decode() const;
  std::uint64_t area() const;
  /// Tight pixel bounding box of the foreground; a zero box when empty.
  Box bounding_box() const;

  std::uint32_t height() const { return height_; }
  std::uint32_t width() const { return width_; }
  const std::vector<std::uint32_t>& counts() const { return counts_; }

  friend bool operator==(const RleMask&, const RleMask&) = default;

 private:
  std::uint32_t height_ = 0;
  std::uint32_t width_ = 0;
  std::vector<std::uint32_t> counts_;
};

std::uint64_t intersection_area(const RleMask& a, const RleMask& b);

/// Intersection over union; 0 when the union is empty. Throws InputError
/// on size mismatch.
double iou(const RleMask& a, const RleMask& b);

}  // namespace olseg
