// Binary plumbing shared by checkpoints, traces and image emission:
// little-endian byte packing with bounds-checked reading, CRC-32 integrity,
// whole-file transfer, and the binary PGM (P5) / PPM (P6) image formats.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ditmoe/model.hpp"

namespace ditmoe {

// CRC-32 (IEEE, reflected polynomial 0xEDB88320). crc32 of "123456789" is
// 0xCBF43926.
uint32_t crc32(const uint8_t* data, size_t n);
uint32_t crc32(const std::vector<uint8_t>& bytes);

class ByteWriter {
 public:
  void u8(uint8_t v) { bytes.push_back(v); }
  void u32(uint32_t v);
  void u64(uint64_t v);
  void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
  void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
  void f32(float v);
  void f64(double v);
  void raw(const void* src, size_t n);
  void str(const std::string& s);  // u32 length prefix + bytes

  std::vector<uint8_t> bytes;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<uint8_t>& b) : data_(b.data()), size_(b.size()) {}
  ByteReader(const uint8_t* data, size_t size) : data_(data), size_(size) {}

  uint8_t u8();
  uint32_t u32();
  uint64_t u64();
  int32_t i32() { return static_cast<int32_t>(u32()); }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  float f32();
  double f64();
  std::string str();
  void raw(void* dst, size_t n);

  size_t offset() const { return off_; }
  size_t remaining() const { return size_ - off_; }
  bool done() const { return off_ == size_; }

 private:
  void need(size_t n) const;  // throws on truncation

  const uint8_t* data_;
  size_t size_;
  size_t off_ = 0;
};

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);

// 8-bit image, interleaved by channel within a pixel; channels is 1 (PGM)
// or 3 (PPM).
struct PnmImage {
  int channels = 1;
  int w = 0;
  int h = 0;
  std::vector<uint8_t> pix;
};

void write_pnm(const std::string& path, const PnmImage& img);
PnmImage read_pnm(const std::string& path);

// Value mapping between model space [-1, 1] and 8-bit pixels.
uint8_t quantize_unit(double v);
double dequantize_unit(uint8_t b);

// Channel-major model image <-> 8-bit file image. One channel becomes a PGM,
// three become a PPM; any other channel count is emitted as a single PGM
// with the channels stacked vertically (c*h rows) for eyeballing latents.
PnmImage to_pnm(const ImageCHW& img);
ImageCHW from_pnm(const PnmImage& img);

}  // namespace ditmoe
