#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "layercake/rng.hpp"

namespace layercake {

// Dense row-major double tensor. All training math runs in 64-bit.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s);

  static Tensor zeros(std::vector<std::int64_t> s);
  static Tensor full(std::vector<std::int64_t> s, double value);
  static Tensor randn(std::vector<std::int64_t> s, Rng& rng, double stddev = 1.0);
  static Tensor scalar(double value);

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double item() const;  // requires numel() == 1

  std::string shape_str() const;
};

// C = A(mxk) * B(kxn)
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

bool all_finite(const Tensor& t);

}  // namespace layercake
