#include "ditmoe/io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ditmoe {

// ---------------------------------------------------------------------------
// CRC-32
// ---------------------------------------------------------------------------

namespace {

const uint32_t* crc_table() {
  static uint32_t table[256];
  static bool built = false;
  if (!built) {
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    built = true;
  }
  return table;
}

}  // namespace

uint32_t crc32(const uint8_t* data, size_t n) {
  const uint32_t* table = crc_table();
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

uint32_t crc32(const std::vector<uint8_t>& bytes) { return crc32(bytes.data(), bytes.size()); }

// ---------------------------------------------------------------------------
// byte packing
// ---------------------------------------------------------------------------

void ByteWriter::u32(uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(uint64_t v) {
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  u32(u);
}

void ByteWriter::f64(double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  u64(u);
}

void ByteWriter::raw(const void* src, size_t n) {
  const uint8_t* p = static_cast<const uint8_t*>(src);
  bytes.insert(bytes.end(), p, p + n);
}

void ByteWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  raw(s.data(), s.size());
}

void ByteReader::need(size_t n) const {
  if (off_ + n > size_) throw std::runtime_error("truncated input: ran past end of data");
}

uint8_t ByteReader::u8() {
  need(1);
  return data_[off_++];
}

uint32_t ByteReader::u32() {
  need(4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[off_ + i]) << (8 * i);
  off_ += 4;
  return v;
}

uint64_t ByteReader::u64() {
  need(8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data_[off_ + i]) << (8 * i);
  off_ += 8;
  return v;
}

float ByteReader::f32() {
  const uint32_t u = u32();
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

double ByteReader::f64() {
  const uint64_t u = u64();
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

std::string ByteReader::str() {
  const uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(data_ + off_), n);
  off_ += n;
  return s;
}

void ByteReader::raw(void* dst, size_t n) {
  need(n);
  std::memcpy(dst, data_ + off_, n);
  off_ += n;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file: " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff n = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  if (n > 0) f.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!f) throw std::runtime_error("failed reading file: " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot create file: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing file: " + path);
}

// ---------------------------------------------------------------------------
// PGM / PPM
// ---------------------------------------------------------------------------

void write_pnm(const std::string& path, const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("write_pnm: channels must be 1 or 3");
  if (img.w < 1 || img.h < 1 ||
      img.pix.size() != static_cast<size_t>(img.channels) * img.w * img.h)
    throw std::invalid_argument("write_pnm: pixel buffer does not match dimensions");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot create image file: " + path);
  f << (img.channels == 1 ? "P5" : "P6") << '\n' << img.w << ' ' << img.h << '\n' << "255\n";
  f.write(reinterpret_cast<const char*>(img.pix.data()),
          static_cast<std::streamsize>(img.pix.size()));
  if (!f) throw std::runtime_error("failed writing image file: " + path);
}

namespace {

// Reads the next whitespace-separated token, skipping '#' comments.
std::string pnm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw std::runtime_error("truncated image header");
  return tok;
}

int pnm_int(std::istream& is) {
  const std::string tok = pnm_token(is);
  size_t pos = 0;
  int v;
  try {
    v = std::stoi(tok, &pos);
  } catch (const std::exception&) {
    throw std::runtime_error("bad image header token: '" + tok + "'");
  }
  if (pos != tok.size()) throw std::runtime_error("bad image header token: '" + tok + "'");
  return v;
}

}  // namespace

PnmImage read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open image file: " + path);
  const std::string magic = pnm_token(f);
  PnmImage img;
  if (magic == "P5")
    img.channels = 1;
  else if (magic == "P6")
    img.channels = 3;
  else
    throw std::runtime_error("unsupported image format '" + magic + "' in " + path);
  img.w = pnm_int(f);
  img.h = pnm_int(f);
  const int maxval = pnm_int(f);
  if (img.w < 1 || img.h < 1) throw std::runtime_error("bad image dimensions in " + path);
  if (maxval != 255) throw std::runtime_error("unsupported maxval (want 255) in " + path);
  // exactly one whitespace byte separates the header from the raster
  img.pix.resize(static_cast<size_t>(img.channels) * img.w * img.h);
  f.read(reinterpret_cast<char*>(img.pix.data()), static_cast<std::streamsize>(img.pix.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pix.size()))
    throw std::runtime_error("truncated image raster in " + path);
  return img;
}

uint8_t quantize_unit(double v) {
  double x = (v + 1.0) * 0.5 * 255.0;
  if (!(x > 0.0)) x = 0.0;  // also catches NaN
  if (x > 255.0) x = 255.0;
  return static_cast<uint8_t>(std::lround(x));
}

double dequantize_unit(uint8_t b) { return static_cast<double>(b) / 255.0 * 2.0 - 1.0; }

PnmImage to_pnm(const ImageCHW& img) {
  PnmImage out;
  if (img.c == 3) {
    out.channels = 3;
    out.w = img.w;
    out.h = img.h;
    out.pix.resize(static_cast<size_t>(3) * img.w * img.h);
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        for (int ch = 0; ch < 3; ++ch)
          out.pix[(static_cast<size_t>(y) * img.w + x) * 3 + ch] = quantize_unit(img.at(ch, y, x));
  } else {
    // grayscale; multi-channel latents are stacked vertically channel by channel
    out.channels = 1;
    out.w = img.w;
    out.h = img.h * img.c;
    out.pix.resize(static_cast<size_t>(out.w) * out.h);
    for (int ch = 0; ch < img.c; ++ch)
      for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
          out.pix[(static_cast<size_t>(ch) * img.h + y) * img.w + x] =
              quantize_unit(img.at(ch, y, x));
  }
  return out;
}

ImageCHW from_pnm(const PnmImage& img) {
  ImageCHW out(img.channels, img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.channels; ++ch)
        out.at(ch, y, x) =
            dequantize_unit(img.pix[(static_cast<size_t>(y) * img.w + x) * img.channels + ch]);
  return out;
}

}  // namespace ditmoe
