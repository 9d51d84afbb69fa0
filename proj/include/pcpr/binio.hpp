#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "pcpr/errors.hpp"

namespace pcpr {

/// Little-endian primitives over iostreams. Read failures throw FormatError
/// carrying the file name and byte offset.
namespace binio {

inline void write_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  write_bytes(os, b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  write_u32(os, static_cast<std::uint32_t>(v));
  write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

class Reader {
 public:
  Reader(std::istream& is, std::string name) : is_(is), name_(std::move(name)) {}

  void read_bytes(void* out, std::size_t n) {
    is_.read(static_cast<char*>(out), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError(name_ + ": truncated at byte offset " + std::to_string(offset_));
    }
    offset_ += n;
  }

  std::uint32_t read_u32() {
    unsigned char b[4];
    read_bytes(b, 4);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
  }

  std::uint64_t read_u64() {
    std::uint64_t lo = read_u32();
    std::uint64_t hi = read_u32();
    return lo | (hi << 32);
  }

  float read_f32() {
    std::uint32_t bits = read_u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  double read_f64() {
    std::uint64_t bits = read_u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  void expect_magic(const char* magic, std::size_t n) {
    std::string got(n, '\0');
    read_bytes(got.data(), n);
    if (got != std::string(magic, n)) {
      throw FormatError(name_ + ": bad magic at byte offset 0");
    }
  }

  bool at_eof() {
    is_.peek();
    return is_.eof();
  }

  std::uint64_t offset() const { return offset_; }
  const std::string& name() const { return name_; }

 private:
  std::istream& is_;
  std::string name_;
  std::uint64_t offset_ = 0;
};

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(path.string() + ": cannot open for reading");
  return is;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(path.string() + ": cannot open for writing");
  return os;
}

}  // namespace binio
}  // namespace pcpr
