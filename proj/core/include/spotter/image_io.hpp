#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spotter/tensor.hpp"

namespace spotter {

// 8-bit interleaved image, 1 (gray) or 3 (rgb) channels.
struct ImageU8 {
  int width = 0, height = 0, channels = 1;
  std::vector<uint8_t> pixels;

  uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);

// C x H x W float tensor with values in [0,1] (v / 255).
Tensor image_to_tensor(const ImageU8& img);
// Quantises a [0,1] tensor back to 8 bit (round to nearest).
ImageU8 tensor_to_image(const Tensor& t);

ImageU8 to_rgb(const ImageU8& img);
// 1-px axis-aligned rectangle outline, clamped to the image bounds.
void draw_box_outline(ImageU8& rgb, double x0, double y0, double x1, double y1,
                      uint8_t r, uint8_t g, uint8_t b);

}  // namespace spotter
