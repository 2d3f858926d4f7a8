#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace iip::io {

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& m) : std::runtime_error(m) {}
};

// FNV-1a over a byte range.
inline uint64_t fnv1a(const uint8_t* p, size_t n, uint64_t h = 14695981039346656037ull) {
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

// Little-endian append/read. All on-disk integers are little-endian.
class ByteWriter {
 public:
  std::vector<uint8_t> buf;

  void raw(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u8(uint8_t x) { buf.push_back(x); }
  void u16(uint16_t x) { le(&x, 2); }
  void u32(uint32_t x) { le(&x, 4); }
  void u64(uint64_t x) { le(&x, 8); }
  void f32(float x) { le(&x, 4); }
  void f64(double x) { le(&x, 8); }

 private:
  void le(const void* p, size_t n) {
    // build is little-endian x86/arm64; keep the byte order explicit anyway
    uint64_t v = 0;
    std::memcpy(&v, p, n);
    for (size_t i = 0; i < n; ++i) buf.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
  }
};

class ByteReader {
 public:
  ByteReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}

  size_t offset() const { return off_; }
  size_t remaining() const { return n_ - off_; }

  void raw(void* out, size_t n) {
    need(n);
    std::memcpy(out, p_ + off_, n);
    off_ += n;
  }
  uint8_t u8() { return static_cast<uint8_t>(le(1)); }
  uint16_t u16() { return static_cast<uint16_t>(le(2)); }
  uint32_t u32() { return static_cast<uint32_t>(le(4)); }
  uint64_t u64() { return le(8); }
  float f32() {
    uint32_t b = u32();
    float f;
    std::memcpy(&f, &b, 4);
    return f;
  }
  double f64() {
    uint64_t b = u64();
    double f;
    std::memcpy(&f, &b, 8);
    return f;
  }

 private:
  const uint8_t* p_;
  size_t n_;
  size_t off_ = 0;

  void need(size_t n) {
    if (off_ + n > n_)
      throw FormatError("truncated payload at offset " + std::to_string(off_));
  }
  uint64_t le(size_t n) {
    need(n);
    uint64_t v = 0;
    for (size_t i = 0; i < n; ++i) v |= static_cast<uint64_t>(p_[off_ + i]) << (8 * i);
    off_ += n;
    return v;
  }
};

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);
void write_file(const std::string& path, const std::string& text);

}  // namespace iip::io
