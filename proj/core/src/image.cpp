#include "layercake/image.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace layercake {
namespace {

std::string size_str(const RgbaImage& img) {
  return std::to_string(img.width) + "x" + std::to_string(img.height);
}

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

}  // namespace

RgbaImage::RgbaImage(int w, int h) : width(w), height(h) {
  if (w < 0 || h < 0) throw std::invalid_argument("image: negative dimensions");
  px.assign(static_cast<std::size_t>(4) * w * h, 0.0f);
}

RgbaImage over(const RgbaImage& fg, const RgbaImage& bg) {
  if (!fg.same_size(bg)) {
    throw std::invalid_argument("over: size mismatch, fg " + size_str(fg) +
                                " vs bg " + size_str(bg));
  }
  RgbaImage out(fg.width, fg.height);
  for (std::size_t i = 0; i < out.px.size(); i += 4) {
    const float af = fg.px[i + 3];
    const float ab = bg.px[i + 3];
    const float ao = af + ab * (1.0f - af);
    out.px[i + 3] = clamp01(ao);
    if (ao <= 0.0f) continue;  // color stays 0 where nothing contributes
    for (int c = 0; c < 3; ++c) {
      const float premult = af * fg.px[i + c] + (1.0f - af) * ab * bg.px[i + c];
      out.px[i + c] = clamp01(premult / ao);
    }
  }
  return out;
}

RgbaImage flatten(const std::vector<RgbaImage>& stack) {
  if (stack.empty()) throw std::invalid_argument("flatten: empty layer stack");
  RgbaImage acc = stack.front();
  for (std::size_t i = 1; i < stack.size(); ++i) acc = over(stack[i], acc);
  return acc;
}

RgbaImage composite_on_matte(const RgbaImage& img, float mr, float mg, float mb) {
  if (mr < 0.0f || mr > 1.0f || mg < 0.0f || mg > 1.0f || mb < 0.0f || mb > 1.0f) {
    throw std::invalid_argument("composite_on_matte: matte channels outside [0,1]");
  }
  RgbaImage out(img.width, img.height);
  const float matte[3] = {mr, mg, mb};
  for (std::size_t i = 0; i < out.px.size(); i += 4) {
    const float a = img.px[i + 3];
    for (int c = 0; c < 3; ++c) {
      out.px[i + c] = clamp01(a * img.px[i + c] + (1.0f - a) * matte[c]);
    }
    out.px[i + 3] = 1.0f;
  }
  return out;
}

RgbaImage checkerboard_preview(const RgbaImage& img, int cell) {
  if (cell < 1) throw std::invalid_argument("checkerboard_preview: cell must be >= 1");
  RgbaImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const float m =
          ((x / cell + y / cell) % 2 == 0) ? kCheckerLight : kCheckerDark;
      const float* s = img.at(x, y);
      float* d = out.at(x, y);
      const float a = s[3];
      for (int c = 0; c < 3; ++c) d[c] = clamp01(a * s[c] + (1.0f - a) * m);
      d[3] = 1.0f;
    }
  }
  return out;
}

namespace {

void blit(RgbaImage& dst, const RgbaImage& src, int ox, int oy) {
  for (int y = 0; y < src.height; ++y) {
    const float* s = src.at(0, y);
    float* d = dst.at(ox, oy + y);
    std::copy(s, s + 4 * src.width, d);
  }
}

}  // namespace

GridSample assemble_grid(const RgbaImage& composite, const RgbaImage& layer_a,
                         const RgbaImage& layer_b, const RgbaImage& background) {
  if (!composite.same_size(layer_a) || !composite.same_size(layer_b) ||
      !composite.same_size(background)) {
    throw std::invalid_argument("assemble_grid: quadrants must share one size");
  }
  const int w = composite.width, h = composite.height;
  GridSample g;
  g.grid = RgbaImage(2 * w, 2 * h);
  blit(g.grid, composite, 0, 0);
  blit(g.grid, layer_a, w, 0);
  blit(g.grid, layer_b, 0, h);
  blit(g.grid, background, w, h);
  return g;
}

std::array<RgbaImage, 4> split_grid(const RgbaImage& grid) {
  if (grid.width % 2 != 0 || grid.height % 2 != 0) {
    throw std::invalid_argument("split_grid: grid dimensions must be even, got " +
                                size_str(grid));
  }
  const int w = grid.width / 2, h = grid.height / 2;
  std::array<RgbaImage, 4> q = {RgbaImage(w, h), RgbaImage(w, h), RgbaImage(w, h),
                                RgbaImage(w, h)};
  const int off[4][2] = {{0, 0}, {w, 0}, {0, h}, {w, h}};
  for (int k = 0; k < 4; ++k) {
    for (int y = 0; y < h; ++y) {
      const float* s = grid.at(off[k][0], off[k][1] + y);
      std::copy(s, s + 4 * w, q[static_cast<std::size_t>(k)].at(0, y));
    }
  }
  return q;
}

Tensor image_to_chw(const RgbaImage& img) {
  Tensor t({4, img.height, img.width});
  const std::int64_t hw = img.pixel_count();
  for (std::int64_t i = 0; i < hw; ++i) {
    for (int c = 0; c < 4; ++c) {
      t.v[c * hw + i] = static_cast<double>(img.px[4 * i + c]);
    }
  }
  return t;
}

RgbaImage chw_to_image(const Tensor& t) {
  if (t.ndim() != 3 || t.dim(0) != 4) {
    throw std::invalid_argument("chw_to_image: need [4,H,W], got " + t.shape_str());
  }
  RgbaImage img(static_cast<int>(t.dim(2)), static_cast<int>(t.dim(1)));
  const std::int64_t hw = img.pixel_count();
  for (std::int64_t i = 0; i < hw; ++i) {
    for (int c = 0; c < 4; ++c) {
      img.px[4 * i + c] =
          clamp01(static_cast<float>(t.v[c * hw + i]));
    }
  }
  return img;
}

}  // namespace layercake
