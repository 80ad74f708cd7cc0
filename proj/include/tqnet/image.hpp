#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "tqnet/tensor.hpp"

namespace tqnet::img {

using ad::Mat;

// Channel-planar float image, values in [0,1]. data is (C, H*W), row-major pixels.
struct Image {
  int h = 0;
  int w = 0;
  Mat data;  // (channels, h*w)

  int channels() const { return int(data.rows()); }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back(std::uint8_t(x >> 24));
  v.push_back(std::uint8_t(x >> 16));
  v.push_back(std::uint8_t(x >> 8));
  v.push_back(std::uint8_t(x));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void write_chunk(std::vector<std::uint8_t>& out, const char* tag,
                        const std::vector<std::uint8_t>& payload) {
  put_u32(out, std::uint32_t(payload.size()));
  std::size_t crc_start = out.size();
  out.insert(out.end(), tag, tag + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  std::uint32_t crc =
      std::uint32_t(::crc32(0, out.data() + crc_start, uInt(out.size() - crc_start)));
  put_u32(out, crc);
}

}  // namespace detail

// 8-bit RGB, no interlace, filter type 0 on every scanline
inline void write_png(const std::filesystem::path& path, const Image& im) {
  if (im.channels() != 3) throw DataError("write_png: expected 3 channels");
  std::vector<std::uint8_t> raw;
  raw.reserve(std::size_t(im.h) * (std::size_t(im.w) * 3 + 1));
  for (int y = 0; y < im.h; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < im.w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = im.data(c, y * im.w + x);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        raw.push_back(std::uint8_t(v * 255.0 + 0.5));
      }
  }
  uLongf zlen = compressBound(uLong(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw DataError("write_png: deflate failed");
  z.resize(zlen);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  detail::put_u32(ihdr, std::uint32_t(im.w));
  detail::put_u32(ihdr, std::uint32_t(im.h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: RGB
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::write_chunk(out, "IHDR", ihdr);
  detail::write_chunk(out, "IDAT", z);
  detail::write_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_png: cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
}

// Reads 8-bit gray/RGB/RGBA non-interlaced PNGs; alpha is dropped, gray is
// replicated to 3 channels.
inline Image read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_png: cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
    throw DataError("read_png: not a PNG: " + path.string());

  int w = 0, h = 0, depth = 0, color = 0, interlace = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  while (pos + 8 <= buf.size()) {
    std::uint32_t len = detail::get_u32(&buf[pos]);
    if (pos + 12 + len > buf.size()) throw DataError("read_png: truncated chunk");
    const char* tag = reinterpret_cast<const char*>(&buf[pos + 4]);
    const std::uint8_t* payload = &buf[pos + 8];
    if (std::memcmp(tag, "IHDR", 4) == 0) {
      w = int(detail::get_u32(payload));
      h = int(detail::get_u32(payload + 4));
      depth = payload[8];
      color = payload[9];
      interlace = payload[12];
    } else if (std::memcmp(tag, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(tag, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (w <= 0 || h <= 0) throw DataError("read_png: missing IHDR");
  if (depth != 8 || interlace != 0)
    throw DataError("read_png: unsupported depth/interlace in " + path.string());
  int nch;
  switch (color) {
    case 0: nch = 1; break;
    case 2: nch = 3; break;
    case 6: nch = 4; break;
    default: throw DataError("read_png: unsupported color type");
  }

  const std::size_t stride = std::size_t(w) * nch;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (stride + 1));
  uLongf rlen = uLongf(raw.size());
  if (uncompress(raw.data(), &rlen, idat.data(), uLong(idat.size())) != Z_OK ||
      rlen != raw.size())
    throw DataError("read_png: inflate failed for " + path.string());

  // unfilter in place into a packed pixel buffer
  std::vector<std::uint8_t> px(static_cast<std::size_t>(h) * stride);
  const int bpp = nch;
  for (int y = 0; y < h; ++y) {
    const std::uint8_t ft = raw[std::size_t(y) * (stride + 1)];
    const std::uint8_t* src = &raw[std::size_t(y) * (stride + 1) + 1];
    std::uint8_t* dst = &px[std::size_t(y) * stride];
    const std::uint8_t* up = y > 0 ? &px[std::size_t(y - 1) * stride] : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      const int a = x >= std::size_t(bpp) ? dst[x - bpp] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= std::size_t(bpp)) ? up[x - bpp] : 0;
      int pred = 0;
      switch (ft) {
        case 0: pred = 0; break;
        case 1: pred = a; break;
        case 2: pred = b; break;
        case 3: pred = (a + b) / 2; break;
        case 4: {
          const int p = a + b - c;
          const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
          pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default: throw DataError("read_png: bad filter type");
      }
      dst[x] = std::uint8_t((src[x] + pred) & 0xff);
    }
  }

  Image im;
  im.h = h;
  im.w = w;
  im.data.resize(3, std::size_t(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t* p = &px[(std::size_t(y) * w + x) * nch];
      for (int c = 0; c < 3; ++c)
        im.data(c, y * w + x) = double(p[nch == 1 ? 0 : c]) / 255.0;
    }
  return im;
}

// bilinear resize to (oh, ow)
inline Image resize(const Image& im, int oh, int ow) {
  Image out;
  out.h = oh;
  out.w = ow;
  out.data.resize(im.channels(), std::size_t(oh) * ow);
  const double sy = double(im.h) / oh, sx = double(im.w) / ow;
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = int(std::floor(fy));
    double wy = fy - y0;
    int y1 = std::min(y0 + 1, im.h - 1);
    y0 = std::max(y0, 0);
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = int(std::floor(fx));
      double wx = fx - x0;
      int x1 = std::min(x0 + 1, im.w - 1);
      x0 = std::max(x0, 0);
      for (int c = 0; c < im.channels(); ++c) {
        const double v00 = im.data(c, y0 * im.w + x0), v01 = im.data(c, y0 * im.w + x1);
        const double v10 = im.data(c, y1 * im.w + x0), v11 = im.data(c, y1 * im.w + x1);
        out.data(c, y * ow + x) = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                  wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
  return out;
}

inline Image crop(const Image& im, int y0, int x0, int ch, int cw) {
  Image out;
  out.h = ch;
  out.w = cw;
  out.data.resize(im.channels(), std::size_t(ch) * cw);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x)
      for (int c = 0; c < im.channels(); ++c)
        out.data(c, y * cw + x) = im.data(c, (y0 + y) * im.w + (x0 + x));
  return out;
}

}  // namespace tqnet::img
