#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "layercake/tensor.hpp"

namespace layercake {

// Straight (non-premultiplied) RGBA raster: float channels in [0,1],
// row-major, interleaved R,G,B,A. Where A == 0 the color channels are defined
// but carry no compositing weight.
struct RgbaImage {
  int width = 0;
  int height = 0;
  std::vector<float> px;  // 4 * width * height

  RgbaImage() = default;
  RgbaImage(int w, int h);  // transparent black

  float* at(int x, int y) {
    return px.data() + 4 * (static_cast<std::size_t>(y) * width + x);
  }
  const float* at(int x, int y) const {
    return px.data() + 4 * (static_cast<std::size_t>(y) * width + x);
  }
  bool same_size(const RgbaImage& o) const {
    return width == o.width && height == o.height;
  }
  std::int64_t pixel_count() const {
    return static_cast<std::int64_t>(width) * height;
  }
};

// Porter-Duff source-over of `fg` onto `bg`; premultiplication is internal,
// inputs and output are straight alpha. Pixels with zero output alpha get
// color 0.
RgbaImage over(const RgbaImage& fg, const RgbaImage& bg);

// Bottom-first left fold of over(); stack[0] is the bottommost layer.
RgbaImage flatten(const std::vector<RgbaImage>& stack);

// Composites onto an opaque constant matte; output alpha is 1 everywhere.
RgbaImage composite_on_matte(const RgbaImage& img, float mr, float mg, float mb);

// img over an alternating light/dark gray checkerboard (0.8 / 0.6).
RgbaImage checkerboard_preview(const RgbaImage& img, int cell = 8);

inline constexpr float kCheckerLight = 0.8f;
inline constexpr float kCheckerDark = 0.6f;
inline constexpr int kCheckerCell = 8;

// 2x2 in-context grid. Quadrant order is fixed: top-left composite,
// top-right layer_a, bottom-left layer_b, bottom-right background.
enum class GridRole { composite, layer_a, layer_b, background };

struct GridSample {
  RgbaImage grid;
  static constexpr std::array<GridRole, 4> quadrants = {
      GridRole::composite, GridRole::layer_a, GridRole::layer_b,
      GridRole::background};
};

GridSample assemble_grid(const RgbaImage& composite, const RgbaImage& layer_a,
                         const RgbaImage& layer_b, const RgbaImage& background);
std::array<RgbaImage, 4> split_grid(const RgbaImage& grid);

// [4,H,W] double tensor <-> image. chw_to_image clamps to [0,1].
Tensor image_to_chw(const RgbaImage& img);
RgbaImage chw_to_image(const Tensor& t);

}  // namespace layercake
