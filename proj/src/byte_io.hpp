#pragma once

// Internal little-endian binary readers/writers shared by the VQRF and VQTF
// file formats. Errors surface as FormatError with the byte offset at which
// the failing read began.

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <string>

#include "vqa/error.hpp"

namespace vqa::detail {

class ByteReader {
 public:
  explicit ByteReader(const std::string& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot open " + path);
  }

  std::uint64_t offset() const { return offset_; }
  const std::string& path() const { return path_; }

  void bytes(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(path_ + ": truncated while reading " + what +
                        " at byte " + std::to_string(offset_));
    }
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    std::array<unsigned char, 4> b{};
    bytes(b.data(), 4, what);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
           (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
  }

  std::uint64_t u64(const char* what) {
    std::uint64_t lo = u32(what), hi = u32(what);
    return lo | (hi << 32);
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

 private:
  std::string path_;
  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path)
      : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open " + path + " for writing");
  }

  void bytes(const void* src, std::size_t n) {
    out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    if (!out_) throw FormatError("short write to " + path_);
  }

  void u32(std::uint32_t v) {
    const unsigned char b[4] = {
        static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
        static_cast<unsigned char>(v >> 16),
        static_cast<unsigned char>(v >> 24)};
    bytes(b, 4);
  }

  void u64(std::uint64_t v) {
    u32(static_cast<std::uint32_t>(v));
    u32(static_cast<std::uint32_t>(v >> 32));
  }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

 private:
  std::string path_;
  std::ofstream out_;
};

}  // namespace vqa::detail
