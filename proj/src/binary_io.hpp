#pragma once

// Little-endian byte buffer helpers shared by the checkpoint and dataset formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cmcl/errors.hpp"

namespace cmcl::detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void i32(std::int32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void text(std::string_view s) { bytes(s.data(), s.size()); }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  void write_file(const std::filesystem::path& path) const { detail::write_file(path, buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> buf) : buf_(std::move(buf)) {}
  static ByteReader from_file(const std::filesystem::path& path) {
    return ByteReader(read_file(path));
  }

  void bytes(void* out, std::size_t n, const char* what) {
    if (n > buf_.size() - pos_) {
      throw FormatError(std::string("truncated while reading ") + what, pos_);
    }
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T read(const char* what) {
    T v;
    bytes(&v, sizeof(T), what);
    return v;
  }
  std::string text(std::size_t n, const char* what) {
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }
  /// Throws unless at least `count * width` bytes remain.
  void require(std::uint64_t count, std::size_t width, const char* what) const {
    if (count > (buf_.size() - pos_) / width) {
      throw FormatError(std::string("truncated payload in ") + what, pos_);
    }
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

}  // namespace cmcl::detail
