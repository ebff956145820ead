#include "layercake/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace layercake {
namespace {

std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= d;
  }
  return n;
}

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> s)
    : shape(std::move(s)), v(static_cast<std::size_t>(numel_of(shape)), 0.0) {}

Tensor Tensor::zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }

Tensor Tensor::full(std::vector<std::int64_t> s, double value) {
  Tensor t(std::move(s));
  std::fill(t.v.begin(), t.v.end(), value);
  return t;
}

Tensor Tensor::randn(std::vector<std::int64_t> s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (auto& x : t.v) x = rng.normal() * stddev;
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t(std::vector<std::int64_t>{});
  t.v.assign(1, value);
  return t;
}

double Tensor::item() const {
  if (v.size() != 1) throw std::logic_error("tensor: item() on non-scalar " + shape_str());
  return v[0];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() +
                                " and " + b.shape_str());
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  ConstMatMap am(a.v.data(), m, k);
  ConstMatMap bm(b.v.data(), k, n);
  MatMap cm(c.v.data(), m, n);
  cm.noalias() = am * bm;
  return c;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose: need 2-d tensor");
  Tensor t({a.dim(1), a.dim(0)});
  ConstMatMap am(a.v.data(), a.dim(0), a.dim(1));
  MatMap tm(t.v.data(), a.dim(1), a.dim(0));
  tm = am.transpose();
  return t;
}

bool all_finite(const Tensor& t) {
  for (double x : t.v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace layercake
