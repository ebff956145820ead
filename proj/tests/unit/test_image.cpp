#include "doctest.h"

#include "layercake/image.hpp"
#include "layercake/rng.hpp"

#include <cmath>
#include <stdexcept>

using namespace layercake;

namespace {

RgbaImage solid(int w, int h, float r, float g, float b, float a) {
  RgbaImage img(w, h);
  for (std::size_t i = 0; i < img.px.size(); i += 4) {
    img.px[i] = r;
    img.px[i + 1] = g;
    img.px[i + 2] = b;
    img.px[i + 3] = a;
  }
  return img;
}

RgbaImage random_image(int w, int h, Rng& rng) {
  RgbaImage img(w, h);
  for (auto& v : img.px) v = static_cast<float>(rng.uniform());
  return img;
}

// Max deviation on the premultiplied representation (color*alpha, alpha).
float premult_deviation(const RgbaImage& a, const RgbaImage& b) {
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.px.size(); i += 4) {
    worst = std::max(worst, std::fabs(a.px[i + 3] - b.px[i + 3]));
    for (int c = 0; c < 3; ++c) {
      worst = std::max(worst, std::fabs(a.px[i + c] * a.px[i + 3] -
                                        b.px[i + c] * b.px[i + 3]));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("opaque source replaces the background") {
  RgbaImage fg = solid(4, 4, 0.2f, 0.4f, 0.6f, 1.0f);
  RgbaImage bg = solid(4, 4, 0.9f, 0.1f, 0.5f, 0.7f);
  RgbaImage out = over(fg, bg);
  for (std::size_t i = 0; i < out.px.size(); ++i) CHECK(out.px[i] == fg.px[i]);
}

TEST_CASE("fully transparent source leaves the background unchanged") {
  RgbaImage fg = solid(4, 4, 1.0f, 1.0f, 1.0f, 0.0f);
  RgbaImage bg = solid(4, 4, 0.3f, 0.6f, 0.9f, 0.8f);
  RgbaImage out = over(fg, bg);
  for (std::size_t i = 0; i < out.px.size(); ++i) CHECK(out.px[i] == bg.px[i]);
}

TEST_CASE("half-transparent white over opaque black gives mid gray") {
  RgbaImage fg = solid(1, 1, 1.0f, 1.0f, 1.0f, 0.5f);
  RgbaImage bg = solid(1, 1, 0.0f, 0.0f, 0.0f, 1.0f);
  RgbaImage out = over(fg, bg);
  CHECK(out.px[0] == doctest::Approx(0.5f));
  CHECK(out.px[1] == doctest::Approx(0.5f));
  CHECK(out.px[2] == doctest::Approx(0.5f));
  CHECK(out.px[3] == doctest::Approx(1.0f));
}

TEST_CASE("over rejects mismatched sizes and names both shapes") {
  RgbaImage a(2, 2), b(3, 2);
  CHECK_THROWS_WITH_AS(over(a, b), doctest::Contains("2x2"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(over(a, b), doctest::Contains("3x2"), std::invalid_argument);
}

TEST_CASE("over output ignores colors under zero alpha") {
  RgbaImage fg1 = solid(2, 2, 0.9f, 0.1f, 0.4f, 0.0f);
  RgbaImage fg2 = solid(2, 2, 0.0f, 1.0f, 0.7f, 0.0f);
  Rng rng(3);
  RgbaImage bg = random_image(2, 2, rng);
  RgbaImage o1 = over(fg1, bg);
  RgbaImage o2 = over(fg2, bg);
  for (std::size_t i = 0; i < o1.px.size(); ++i) CHECK(o1.px[i] == o2.px[i]);
}

TEST_CASE("fully transparent over fully transparent has zero color") {
  RgbaImage fg = solid(2, 2, 1.0f, 0.5f, 0.25f, 0.0f);
  RgbaImage bg = solid(2, 2, 0.8f, 0.8f, 0.8f, 0.0f);
  RgbaImage out = over(fg, bg);
  for (std::size_t i = 0; i < out.px.size(); ++i) CHECK(out.px[i] == 0.0f);
}

TEST_CASE("flatten of a single layer is that layer") {
  Rng rng(7);
  RgbaImage x = random_image(3, 5, rng);
  RgbaImage out = flatten({x});
  for (std::size_t i = 0; i < x.px.size(); ++i) CHECK(out.px[i] == x.px[i]);
}

TEST_CASE("flatten with an opaque top layer fully occludes") {
  Rng rng(8);
  RgbaImage bg = random_image(4, 4, rng);
  RgbaImage fg = solid(4, 4, 0.1f, 0.2f, 0.3f, 1.0f);
  RgbaImage out = flatten({bg, fg});
  for (std::size_t i = 0; i < out.px.size(); ++i) CHECK(out.px[i] == fg.px[i]);
}

TEST_CASE("three-layer flatten matches hand-chained over arithmetic") {
  RgbaImage l0 = solid(1, 1, 0.0f, 0.0f, 0.0f, 1.0f);
  RgbaImage l1 = solid(1, 1, 1.0f, 1.0f, 1.0f, 0.5f);
  RgbaImage l2 = solid(1, 1, 1.0f, 0.0f, 0.0f, 0.5f);
  RgbaImage out = flatten({l0, l1, l2});
  CHECK(out.px[0] == doctest::Approx(0.75f));
  CHECK(out.px[1] == doctest::Approx(0.25f));
  CHECK(out.px[2] == doctest::Approx(0.25f));
  CHECK(out.px[3] == doctest::Approx(1.0f));
}

TEST_CASE("flatten rejects an empty stack") {
  CHECK_THROWS_AS(flatten({}), std::invalid_argument);
}

TEST_CASE("over is associative on the premultiplied representation") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    RgbaImage a = random_image(8, 8, rng);
    RgbaImage b = random_image(8, 8, rng);
    RgbaImage c = random_image(8, 8, rng);
    RgbaImage left = flatten({a, b, c});
    RgbaImage right = flatten({a, flatten({b, c})});
    CHECK(premult_deviation(left, right) < 1e-6f);
  }
}

TEST_CASE("flatten over an opaque bottom layer is opaque everywhere") {
  Rng rng(100);
  for (int trial = 0; trial < 20; ++trial) {
    RgbaImage bottom = random_image(6, 6, rng);
    for (std::size_t i = 3; i < bottom.px.size(); i += 4) bottom.px[i] = 1.0f;
    RgbaImage out = flatten({bottom, random_image(6, 6, rng), random_image(6, 6, rng)});
    for (std::size_t i = 3; i < out.px.size(); i += 4) CHECK(out.px[i] == 1.0f);
  }
}

TEST_CASE("opaque image is unchanged by any matte") {
  RgbaImage img = solid(3, 3, 0.4f, 0.5f, 0.6f, 1.0f);
  RgbaImage out = composite_on_matte(img, 0.9f, 0.1f, 0.2f);
  for (std::size_t i = 0; i < img.px.size(); i += 4) {
    CHECK(out.px[i] == img.px[i]);
    CHECK(out.px[i + 1] == img.px[i + 1]);
    CHECK(out.px[i + 2] == img.px[i + 2]);
    CHECK(out.px[i + 3] == 1.0f);
  }
}

TEST_CASE("fully transparent image becomes the matte") {
  RgbaImage img = solid(3, 3, 0.2f, 0.2f, 0.2f, 0.0f);
  RgbaImage out = composite_on_matte(img, 1.0f, 1.0f, 1.0f);
  for (std::size_t i = 0; i < out.px.size(); i += 4) {
    CHECK(out.px[i] == 1.0f);
    CHECK(out.px[i + 1] == 1.0f);
    CHECK(out.px[i + 2] == 1.0f);
  }
}

TEST_CASE("quarter-alpha red on blue matte matches hand arithmetic") {
  RgbaImage img = solid(1, 1, 1.0f, 0.0f, 0.0f, 0.25f);
  RgbaImage out = composite_on_matte(img, 0.0f, 0.0f, 1.0f);
  CHECK(out.px[0] == doctest::Approx(0.25f));
  CHECK(out.px[1] == doctest::Approx(0.0f));
  CHECK(out.px[2] == doctest::Approx(0.75f));
  CHECK(out.px[3] == 1.0f);
}

TEST_CASE("matte compositing is affine in the matte") {
  Rng rng(13);
  RgbaImage img = random_image(5, 5, rng);
  const float m[3] = {0.3f, 0.7f, 0.9f};
  RgbaImage out = composite_on_matte(img, m[0], m[1], m[2]);
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 5; ++x) {
      const float* s = img.at(x, y);
      const float* d = out.at(x, y);
      for (int c = 0; c < 3; ++c) {
        CHECK(d[c] == doctest::Approx(s[3] * s[c] + (1 - s[3]) * m[c]));
      }
    }
  }
}

TEST_CASE("matte channels outside [0,1] are rejected") {
  RgbaImage img(2, 2);
  CHECK_THROWS_AS(composite_on_matte(img, 1.2f, 0.0f, 0.0f), std::invalid_argument);
}

TEST_CASE("checkerboard preview leaves opaque images unchanged") {
  RgbaImage img = solid(4, 4, 0.1f, 0.9f, 0.5f, 1.0f);
  RgbaImage out = checkerboard_preview(img, 2);
  for (std::size_t i = 0; i < img.px.size(); i += 4) {
    CHECK(out.px[i] == img.px[i]);
    CHECK(out.px[i + 1] == img.px[i + 1]);
    CHECK(out.px[i + 2] == img.px[i + 2]);
  }
}

TEST_CASE("checkerboard preview of a transparent image is the pure pattern") {
  RgbaImage img(2, 2);
  RgbaImage out = checkerboard_preview(img, 1);
  CHECK(out.at(0, 0)[0] == doctest::Approx(kCheckerLight));
  CHECK(out.at(1, 0)[0] == doctest::Approx(kCheckerDark));
  CHECK(out.at(0, 1)[0] == doctest::Approx(kCheckerDark));
  CHECK(out.at(1, 1)[0] == doctest::Approx(kCheckerLight));
}

TEST_CASE("grid assembly doubles each dimension") {
  RgbaImage q(16, 16);
  GridSample g = assemble_grid(q, q, q, q);
  CHECK(g.grid.width == 32);
  CHECK(g.grid.height == 32);
}

TEST_CASE("composite lands bit-exactly in the top-left quadrant") {
  Rng rng(21);
  RgbaImage composite = random_image(8, 8, rng);
  RgbaImage other = random_image(8, 8, rng);
  GridSample g = assemble_grid(composite, other, other, other);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      for (int c = 0; c < 4; ++c) {
        CHECK(g.grid.at(x, y)[c] == composite.at(x, y)[c]);
      }
    }
  }
}

TEST_CASE("grid roundtrip is bit-exact") {
  Rng rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    RgbaImage a = random_image(6, 6, rng);
    RgbaImage b = random_image(6, 6, rng);
    RgbaImage c = random_image(6, 6, rng);
    RgbaImage d = random_image(6, 6, rng);
    auto q = split_grid(assemble_grid(a, b, c, d).grid);
    CHECK(q[0].px == a.px);
    CHECK(q[1].px == b.px);
    CHECK(q[2].px == c.px);
    CHECK(q[3].px == d.px);
  }
}

TEST_CASE("split_grid rejects odd dimensions") {
  RgbaImage odd(5, 4);
  CHECK_THROWS_AS(split_grid(odd), std::invalid_argument);
}

TEST_CASE("grid quadrant role order is fixed") {
  CHECK(GridSample::quadrants[0] == GridRole::composite);
  CHECK(GridSample::quadrants[1] == GridRole::layer_a);
  CHECK(GridSample::quadrants[2] == GridRole::layer_b);
  CHECK(GridSample::quadrants[3] == GridRole::background);
}

TEST_CASE("image/tensor conversion roundtrips and clamps") {
  Rng rng(23);
  RgbaImage img = random_image(4, 3, rng);
  Tensor t = image_to_chw(img);
  CHECK(t.shape == std::vector<std::int64_t>{4, 3, 4});
  RgbaImage back = chw_to_image(t);
  for (std::size_t i = 0; i < img.px.size(); ++i) {
    CHECK(back.px[i] == doctest::Approx(img.px[i]).epsilon(1e-6));
  }
  Tensor wild = Tensor::full({4, 2, 2}, 1.7);
  wild.v[0] = -0.3;
  RgbaImage clamped = chw_to_image(wild);
  CHECK(clamped.px[0] == 0.0f);
  CHECK(clamped.px[4 * 1] == 1.0f);
}
