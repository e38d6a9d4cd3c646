#include "olseg/binary_io.hpp"

#include "olseg/error.hpp"

namespace olseg {

void ByteReader::expect_magic(const char (&magic)[5]) {
  require(4);
  if (std::memcmp(bytes_.data() + pos_, magic, 4) != 0) {
    fail(std::string("bad magic, expected \"") + magic + "\"");
  }
  pos_ += 4;
}

void ByteReader::fail(const std::string& what) const {
  throw LoadError(context_ + ": " + what + " at offset " + std::to_string(absolute_offset()));
}

void write_all(std::ostream& out, std::span<const std::uint8_t> bytes) {
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed");
}

std::vector<std::uint8_t> read_exact(std::istream& in, std::size_t n, const std::string& context) {
  std::vector<std::uint8_t> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw LoadError(context + ": truncated stream (wanted " + std::to_string(n) + " bytes)");
  }
  return buf;
}

}  // namespace olseg
