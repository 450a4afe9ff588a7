#include "spotter/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace spotter {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open image: " + path);

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
    throw DataError("not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("libpng init failure reading " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng init failure reading " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("unsupported channel count in " + path);
  }

  ImageU8 img;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.channels = channels;
  img.pixels.resize(static_cast<size_t>(w) * h * channels);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = img.pixels.data() + static_cast<size_t>(y) * w * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw DataError("write_png: only gray or rgb images supported");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot open image for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("libpng init failure writing " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng init failure writing " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG write failure: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(
        img.pixels.data() + static_cast<size_t>(y) * img.width * img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor image_to_tensor(const ImageU8& img) {
  const int64_t c = img.channels, h = img.height, w = img.width;
  Tensor t = Tensor::zeros({c, h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < c; ++ch)
        t.ptr()[(ch * h + y) * w + x] = static_cast<scalar>(
            img.pixels[(static_cast<size_t>(y) * w + x) * c + ch] / 255.0);
  return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
  if (t.ndim() != 3 || (t.dim(0) != 1 && t.dim(0) != 3))
    throw ShapeError("tensor_to_image: expected 1- or 3-channel C x H x W tensor");
  ImageU8 img;
  img.channels = static_cast<int>(t.dim(0));
  img.height = static_cast<int>(t.dim(1));
  img.width = static_cast<int>(t.dim(2));
  img.pixels.resize(t.data().size());
  const int64_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(static_cast<double>(t.ptr()[(ch * h + y) * w + x]), 0.0, 1.0);
        img.pixels[(static_cast<size_t>(y) * w + x) * c + ch] =
            static_cast<uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

ImageU8 to_rgb(const ImageU8& img) {
  if (img.channels == 3) return img;
  ImageU8 out;
  out.width = img.width;
  out.height = img.height;
  out.channels = 3;
  out.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = img.pixels[i];
  }
  return out;
}

void draw_box_outline(ImageU8& rgb, double x0, double y0, double x1, double y1,
                      uint8_t r, uint8_t g, uint8_t b) {
  if (rgb.channels != 3) throw ShapeError("draw_box_outline: rgb image required");
  const int ix0 = std::clamp(static_cast<int>(std::lround(x0)), 0, rgb.width - 1);
  const int ix1 = std::clamp(static_cast<int>(std::lround(x1)), 0, rgb.width - 1);
  const int iy0 = std::clamp(static_cast<int>(std::lround(y0)), 0, rgb.height - 1);
  const int iy1 = std::clamp(static_cast<int>(std::lround(y1)), 0, rgb.height - 1);
  auto put = [&](int y, int x) {
    rgb.at(y, x, 0) = r;
    rgb.at(y, x, 1) = g;
    rgb.at(y, x, 2) = b;
  };
  for (int x = std::min(ix0, ix1); x <= std::max(ix0, ix1); ++x) {
    put(iy0, x);
    put(iy1, x);
  }
  for (int y = std::min(iy0, iy1); y <= std::max(iy0, iy1); ++y) {
    put(y, ix0);
    put(y, ix1);
  }
}

}  // namespace spotter
