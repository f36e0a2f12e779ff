#include "psr/png.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

namespace psr {

namespace {

void put_u32_be(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>(v & 0xff));
}

void append_chunk(std::vector<unsigned char>& out, const char type[4],
                  const std::vector<unsigned char>& payload) {
  put_u32_be(out, static_cast<uint32_t>(payload.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uLong crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  put_u32_be(out, static_cast<uint32_t>(crc));
}

}  // namespace

void write_gray_png(const std::string& path, const Tensor& frame) {
  Tensor img = frame;
  if (img.rank() == 3 && img.dim(0) == 1) img = reshape(img, {img.dim(1), img.dim(2)});
  if (img.rank() != 2) throw ShapeError("write_gray_png expects [H, W] or [1, H, W]");
  const int64_t H = img.dim(0), W = img.dim(1);

  double lo = img.values()[0], hi = img.values()[0];
  for (double v : img.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;

  // One filter byte (0 = none) per scanline.
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<size_t>(H * (W + 1)));
  for (int64_t h = 0; h < H; ++h) {
    raw.push_back(0);
    for (int64_t w = 0; w < W; ++w) {
      const double v = (img.values()[static_cast<size_t>(h * W + w)] - lo) / span;
      raw.push_back(static_cast<unsigned char>(v * 255.0 + 0.5));
    }
  }

  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> compressed(comp_len);
  if (compress2(compressed.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 9) !=
      Z_OK) {
    throw FormatError("png deflate failed");
  }
  compressed.resize(comp_len);

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<unsigned char> ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(W));
  put_u32_be(ihdr, static_cast<uint32_t>(H));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", compressed);
  append_chunk(out, "IEND", {});

  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

}  // namespace psr
