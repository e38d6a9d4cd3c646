#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace olseg {

// Little-endian encoders shared by the feature store and model files.

template <class T>
T to_little_endian(T value) {
  static_assert(std::is_arithmetic_v<T>);
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return value;
  }
}

class ByteWriter {
 public:
  template <class T>
  void put(T value) {
    const T le = to_little_endian(value);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&le);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  template <class T>
  void put_span(std::span<const T> values) {
    for (const T& v : values) put(v);
  }
  void put_magic(const char (&magic)[5]) { bytes_.insert(bytes_.end(), magic, magic + 4); }
  void put_bytes(std::span<const std::uint8_t> raw) { bytes_.insert(bytes_.end(), raw.begin(), raw.end()); }
  void pad_to(std::size_t alignment) {
    while (bytes_.size() % alignment != 0) bytes_.push_back(0);
  }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked cursor over a byte buffer. Overruns throw LoadError
/// tagged with `context` and the absolute offset.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string context, std::uint64_t base_offset = 0)
      : bytes_(bytes), context_(std::move(context)), base_offset_(base_offset) {}

  template <class T>
  T get() {
    require(sizeof(T));
    T raw;
    std::memcpy(&raw, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little_endian(raw);
  }
  template <class T>
  void get_into(std::span<T> out) {
    require(out.size() * sizeof(T));
    for (T& v : out) v = get<T>();
  }
  void expect_magic(const char (&magic)[5]);
  void skip(std::size_t n) {
    require(n);
    pos_ += n;
  }
  void align_to(std::size_t alignment) {
    while (pos_ % alignment != 0) skip(1);
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::uint64_t absolute_offset() const { return base_offset_ + pos_; }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void require(std::size_t n) const {
    if (remaining() < n) fail("truncated data (need " + std::to_string(n) + " bytes)");
  }

  std::span<const std::uint8_t> bytes_;
  std::string context_;
  std::uint64_t base_offset_;
  std::size_t pos_ = 0;
};

void write_all(std::ostream& out, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_exact(std::istream& in, std::size_t n, const std::string& context);

}  // namespace olseg
