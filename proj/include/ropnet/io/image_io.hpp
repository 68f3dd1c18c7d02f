#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <csetjmp>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "ropnet/core/error.hpp"
#include "ropnet/core/tensor.hpp"

namespace ropnet {

// Interleaved 8-bit image, channels = 1 or 3, row-major (y, x, c).
struct ImageU8 {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> data;

  uint8_t& at(int y, int x, int ch) {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  uint8_t at(int y, int x, int ch) const {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }
};

// 16-bit single-channel image; the on-disk form of a vesselness map.
struct ImageU16 {
  int h = 0, w = 0;
  std::vector<uint16_t> data;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  std::FILE* f = std::fopen(path.c_str(), mode);
  require(f != nullptr, ErrorKind::MissingInput, "cannot open file: " + path);
  return FilePtr(f);
}

}  // namespace detail

// ---------------------------------------------------------------- PNG read

inline void read_png(const std::string& path, ImageU8* out8, ImageU16* out16) {
  auto fp = detail::open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png, ErrorKind::Runtime, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    raise(ErrorKind::Runtime, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise(ErrorKind::Runtime, "png decode failed: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 w = 0, h = 0;
  int bit_depth = 0, color_type = 0;
  png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

  const bool want16 = (out16 != nullptr) && bit_depth == 16 &&
                      color_type == PNG_COLOR_TYPE_GRAY;
  if (want16) {
    // PNG stores 16-bit samples big-endian; decode rows manually.
    out16->h = static_cast<int>(h);
    out16->w = static_cast<int>(w);
    out16->data.resize(static_cast<size_t>(w) * h);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 2);
    for (png_uint_32 y = 0; y < h; ++y) {
      png_read_row(png, row.data(), nullptr);
      for (png_uint_32 x = 0; x < w; ++x)
        out16->data[static_cast<size_t>(y) * w + x] =
            static_cast<uint16_t>((row[2 * x] << 8) | row[2 * x + 1]);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return;
  }

  require(out8 != nullptr, ErrorKind::Runtime,
          "expected 16-bit gray PNG: " + path);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  int channels = png_get_channels(png, info);
  require(channels == 1 || channels == 3, ErrorKind::Runtime,
          "unsupported PNG channel count");
  out8->h = static_cast<int>(h);
  out8->w = static_cast<int>(w);
  out8->c = channels;
  out8->data.resize(static_cast<size_t>(w) * h * channels);
  for (png_uint_32 y = 0; y < h; ++y)
    png_read_row(png, out8->data.data() + static_cast<size_t>(y) * w * channels, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
}

// ---------------------------------------------------------------- PNG write

inline void write_png_rgb8(const std::string& path, const ImageU8& img) {
  require(img.c == 3 || img.c == 1, ErrorKind::InvalidParameter,
          "write_png_rgb8 expects 1 or 3 channels");
  auto fp = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png, ErrorKind::Runtime, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    raise(ErrorKind::Runtime, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    raise(ErrorKind::Runtime, "png encode failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.w, img.h, 8,
               img.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.h; ++y)
    png_write_row(png, const_cast<png_bytep>(
        img.data.data() + static_cast<size_t>(y) * img.w * img.c));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline void write_png_gray16(const std::string& path, const ImageU16& img) {
  auto fp = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png, ErrorKind::Runtime, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    raise(ErrorKind::Runtime, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    raise(ErrorKind::Runtime, "png encode failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.w, img.h, 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<uint8_t> row(static_cast<size_t>(img.w) * 2);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      uint16_t v = img.data[static_cast<size_t>(y) * img.w + x];
      row[2 * x] = static_cast<uint8_t>(v >> 8);
      row[2 * x + 1] = static_cast<uint8_t>(v & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------- JPEG read

inline ImageU8 read_jpeg(const std::string& path) {
  auto fp = detail::open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  ImageU8 img;
  img.w = static_cast<int>(cinfo.output_width);
  img.h = static_cast<int>(cinfo.output_height);
  img.c = 3;
  img.data.resize(static_cast<size_t>(img.w) * img.h * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    uint8_t* rowp = img.data.data() +
        static_cast<size_t>(cinfo.output_scanline) * img.w * 3;
    jpeg_read_scanlines(&cinfo, &rowp, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

// ---------------------------------------------------------------- BMP read
// Uncompressed 24-bit BI_RGB only, which covers the export format of the
// capture devices this pipeline ingests.

inline ImageU8 read_bmp(const std::string& path) {
  auto fp = detail::open_file(path, "rb");
  uint8_t header[54];
  require(std::fread(header, 1, 54, fp.get()) == 54, ErrorKind::Runtime,
          "truncated BMP header: " + path);
  auto rd32 = [&](int off) {
    return uint32_t(header[off]) | (uint32_t(header[off + 1]) << 8) |
           (uint32_t(header[off + 2]) << 16) | (uint32_t(header[off + 3]) << 24);
  };
  auto rd16 = [&](int off) {
    return uint16_t(header[off]) | (uint16_t(header[off + 1]) << 8);
  };
  require(header[0] == 'B' && header[1] == 'M', ErrorKind::Runtime, "not a BMP: " + path);
  uint32_t data_off = rd32(10);
  int w = static_cast<int>(rd32(18));
  int h_raw = static_cast<int>(rd32(22));
  bool bottom_up = h_raw > 0;
  int h = bottom_up ? h_raw : -h_raw;
  require(rd16(28) == 24 && rd32(30) == 0, ErrorKind::Runtime,
          "only 24-bit uncompressed BMP supported: " + path);
  std::fseek(fp.get(), static_cast<long>(data_off), SEEK_SET);
  size_t stride = (static_cast<size_t>(w) * 3 + 3) & ~size_t(3);
  std::vector<uint8_t> row(stride);
  ImageU8 img;
  img.w = w; img.h = h; img.c = 3;
  img.data.resize(static_cast<size_t>(w) * h * 3);
  for (int yy = 0; yy < h; ++yy) {
    require(std::fread(row.data(), 1, stride, fp.get()) == stride,
            ErrorKind::Runtime, "truncated BMP data: " + path);
    int y = bottom_up ? h - 1 - yy : yy;
    for (int x = 0; x < w; ++x) {  // BGR -> RGB
      img.at(y, x, 0) = row[3 * x + 2];
      img.at(y, x, 1) = row[3 * x + 1];
      img.at(y, x, 2) = row[3 * x + 0];
    }
  }
  return img;
}

// ---------------------------------------------------------------- dispatch

inline ImageU8 read_image(const std::string& path) {
  auto fp = detail::open_file(path, "rb");
  uint8_t magic[8] = {0};
  size_t got = std::fread(magic, 1, 8, fp.get());
  fp.reset();
  require(got >= 2, ErrorKind::Runtime, "file too short: " + path);
  if (got >= 8 && png_sig_cmp(magic, 0, 8) == 0) {
    ImageU8 img;
    read_png(path, &img, nullptr);
    return img;
  }
  if (magic[0] == 0xFF && magic[1] == 0xD8) return read_jpeg(path);
  if (magic[0] == 'B' && magic[1] == 'M') return read_bmp(path);
  raise(ErrorKind::Runtime, "unsupported raster format: " + path);
}

inline ImageU16 read_image_gray16(const std::string& path) {
  ImageU16 img;
  read_png(path, nullptr, &img);
  return img;
}

// ------------------------------------------------------------- conversions

// Interleaved u8 -> planar (c,h,w) doubles in [0,1].
inline Tensor to_planar(const ImageU8& img) {
  Tensor t({img.c, img.h, img.w});
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        t.at(ch, y, x) = img.at(y, x, ch) / 255.0;
  return t;
}

// Planar [0,1] doubles -> interleaved u8 with round-to-nearest.
inline ImageU8 to_interleaved_u8(const Tensor& t) {
  require(t.rank() == 3, ErrorKind::ShapeMismatch, "expected (c,h,w) tensor");
  ImageU8 img;
  img.c = t.dim(0); img.h = t.dim(1); img.w = t.dim(2);
  img.data.resize(static_cast<size_t>(img.c) * img.h * img.w);
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double v = std::clamp(t.at(ch, y, x), 0.0, 1.0);
        img.at(y, x, ch) = static_cast<uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

}  // namespace ropnet
