#include "layercake/autograd.hpp"

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <stdexcept>

namespace layercake::ad {
namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Value Tape::make(Tensor val, bool rg, std::function<void(Tape&)> back) {
  Node n;
  n.val = std::move(val);
  n.rg = rg;
  if (rg) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Value{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Value Tape::leaf(Tensor t, bool requires_grad) {
  return make(std::move(t), requires_grad, nullptr);
}

const Tensor& Tape::grad(Value v) const {
  const Node& n = node(v);
  if (!n.grad_live) throw std::logic_error("autograd: gradient not populated");
  return n.grad;
}

Tensor& Tape::gbuf(std::int32_t id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_live) {
    n.grad = Tensor::zeros(n.val.shape);
    n.grad_live = true;
  }
  return n.grad;
}

void Tape::backward(Value loss) {
  if (node(loss).val.numel() != 1) {
    throw std::logic_error("autograd: backward() needs a scalar loss");
  }
  gbuf(loss.id).v[0] = 1.0;
  for (std::int32_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.rg && n.grad_live && n.back) n.back(*this);
  }
}

// ---------------------------------------------------------------- elementwise

Value Tape::add(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) {
    throw std::invalid_argument("add: shape mismatch " + ta.shape_str() + " vs " +
                                tb.shape_str());
  }
  Tensor out = ta;
  for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] += tb.v[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), rg, [a, b, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    if (t.requires_grad(a)) {
      Tensor& ga = t.gbuf(a.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.gbuf(b.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i];
    }
  });
}

Value Tape::sub(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) {
    throw std::invalid_argument("sub: shape mismatch " + ta.shape_str() + " vs " +
                                tb.shape_str());
  }
  Tensor out = ta;
  for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] -= tb.v[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), rg, [a, b, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    if (t.requires_grad(a)) {
      Tensor& ga = t.gbuf(a.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.gbuf(b.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) gb.v[i] -= g.v[i];
    }
  });
}

Value Tape::mul(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) {
    throw std::invalid_argument("mul: shape mismatch " + ta.shape_str() + " vs " +
                                tb.shape_str());
  }
  Tensor out = ta;
  for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] *= tb.v[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), rg, [a, b, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& va = t.val(a);
    const Tensor& vb = t.val(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.gbuf(a.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] * vb.v[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.gbuf(b.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i] * va.v[i];
    }
  });
}

Value Tape::scale(Value a, double c) {
  Tensor out = val(a);
  for (auto& x : out.v) x *= c;
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, c, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += c * g.v[i];
  });
}

Value Tape::add_scalar(Value a, double c) {
  Tensor out = val(a);
  for (auto& x : out.v) x += c;
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
  });
}

Value Tape::gelu(Value a) {
  const Tensor& ta = val(a);
  Tensor out = ta;
  for (auto& x : out.v) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    x = 0.5 * x * (1.0 + std::tanh(u));
  }
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& x = t.val(a);
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      double xi = x.v[i];
      double u = kGeluC * (xi + kGeluA * xi * xi * xi);
      double th = std::tanh(u);
      double du = kGeluC * (1.0 + 3.0 * kGeluA * xi * xi);
      double d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du;
      ga.v[i] += g.v[i] * d;
    }
  });
}

Value Tape::sigmoid(Value a) {
  Tensor out = val(a);
  for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& y = t.val(self);
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      ga.v[i] += g.v[i] * y.v[i] * (1.0 - y.v[i]);
    }
  });
}

Value Tape::tanh_(Value a) {
  Tensor out = val(a);
  for (auto& x : out.v) x = std::tanh(x);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& y = t.val(self);
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      ga.v[i] += g.v[i] * (1.0 - y.v[i] * y.v[i]);
    }
  });
}

Value Tape::exp_(Value a) {
  Tensor out = val(a);
  for (auto& x : out.v) x = std::exp(x);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& y = t.val(self);
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] * y.v[i];
  });
}

Value Tape::abs_(Value a) {
  Tensor out = val(a);
  for (auto& x : out.v) x = std::fabs(x);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& x = t.val(a);
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      double s = (x.v[i] > 0.0) ? 1.0 : (x.v[i] < 0.0 ? -1.0 : 0.0);
      ga.v[i] += g.v[i] * s;
    }
  });
}

Value Tape::square(Value a) {
  Tensor out = val(a);
  for (auto& x : out.v) x = x * x;
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& x = t.val(a);
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      ga.v[i] += g.v[i] * 2.0 * x.v[i];
    }
  });
}

// ------------------------------------------------------------- linear algebra

Value Tape::matmul(Value a, Value b) {
  Tensor out = layercake::matmul(val(a), val(b));
  bool rg = requires_grad(a) || requires_grad(b);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), rg, [a, b, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& va = t.val(a);
    const Tensor& vb = t.val(b);
    const auto m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    ConstMatMap gm(g.v.data(), m, n);
    ConstMatMap am(va.v.data(), m, k);
    ConstMatMap bm(vb.v.data(), k, n);
    if (t.requires_grad(a)) {
      MatMap gam(t.gbuf(a.id).v.data(), m, k);
      gam.noalias() += gm * bm.transpose();
    }
    if (t.requires_grad(b)) {
      MatMap gbm(t.gbuf(b.id).v.data(), k, n);
      gbm.noalias() += am.transpose() * gm;
    }
  });
}

Value Tape::transpose(Value a) {
  Tensor out = layercake::transpose(val(a));
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    Tensor gt = layercake::transpose(g);
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < gt.numel(); ++i) ga.v[i] += gt.v[i];
  });
}

Value Tape::add_rowvec(Value x, Value vec) {
  const Tensor& tx = val(x);
  const Tensor& tv = val(vec);
  if (tx.ndim() != 2 || tv.ndim() != 1 || tx.dim(1) != tv.dim(0)) {
    throw std::invalid_argument("add_rowvec: shapes " + tx.shape_str() + " and " +
                                tv.shape_str());
  }
  Tensor out = tx;
  const auto n = tx.dim(0), c = tx.dim(1);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < c; ++j) out.v[i * c + j] += tv.v[j];
  }
  bool rg = requires_grad(x) || requires_grad(vec);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), rg, [x, vec, n, c, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    if (t.requires_grad(x)) {
      Tensor& gx = t.gbuf(x.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx.v[i] += g.v[i];
    }
    if (t.requires_grad(vec)) {
      Tensor& gv = t.gbuf(vec.id);
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < c; ++j) gv.v[j] += g.v[i * c + j];
      }
    }
  });
}

Value Tape::softmax_rows(Value a) {
  const Tensor& ta = val(a);
  if (ta.ndim() != 2) throw std::invalid_argument("softmax_rows: need 2-d input");
  Tensor out = ta;
  const auto n = ta.dim(0), c = ta.dim(1);
  for (std::int64_t i = 0; i < n; ++i) {
    double* row = out.v.data() + i * c;
    double mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::int64_t j = 0; j < c; ++j) row[j] /= sum;
  }
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, n, c, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& y = t.val(self);
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < n; ++i) {
      const double* gr = g.v.data() + i * c;
      const double* yr = y.v.data() + i * c;
      double dot = 0.0;
      for (std::int64_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
      double* gar = ga.v.data() + i * c;
      for (std::int64_t j = 0; j < c; ++j) gar[j] += yr[j] * (gr[j] - dot);
    }
  });
}

Value Tape::layer_norm(Value x, Value gain, Value bias, double eps) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gain);
  const Tensor& tb = val(bias);
  if (tx.ndim() != 2 || tg.ndim() != 1 || tb.ndim() != 1 || tx.dim(1) != tg.dim(0) ||
      tx.dim(1) != tb.dim(0)) {
    throw std::invalid_argument("layer_norm: shapes " + tx.shape_str() + ", " +
                                tg.shape_str() + ", " + tb.shape_str());
  }
  const auto n = tx.dim(0), c = tx.dim(1);
  Tensor out({n, c});
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * c));
  auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = tx.v.data() + i * c;
    double mu = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[static_cast<std::size_t>(i)] = is;
    for (std::int64_t j = 0; j < c; ++j) {
      double xh = (row[j] - mu) * is;
      (*xhat)[static_cast<std::size_t>(i * c + j)] = xh;
      out.v[i * c + j] = xh * tg.v[j] + tb.v[j];
    }
  }
  bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), rg, [x, gain, bias, n, c, xhat, inv_sigma, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    const Tensor& tg2 = t.val(gain);
    if (t.requires_grad(gain)) {
      Tensor& gg = t.gbuf(gain.id);
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
          gg.v[j] += g.v[i * c + j] * (*xhat)[static_cast<std::size_t>(i * c + j)];
        }
      }
    }
    if (t.requires_grad(bias)) {
      Tensor& gb = t.gbuf(bias.id);
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < c; ++j) gb.v[j] += g.v[i * c + j];
      }
    }
    if (t.requires_grad(x)) {
      Tensor& gx = t.gbuf(x.id);
      const double cn = static_cast<double>(c);
      for (std::int64_t i = 0; i < n; ++i) {
        double is = (*inv_sigma)[static_cast<std::size_t>(i)];
        // dxhat = dy * gain; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) * is
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
          double dxh = g.v[i * c + j] * tg2.v[j];
          double xh = (*xhat)[static_cast<std::size_t>(i * c + j)];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh;
        }
        mean_dxh /= cn;
        mean_dxh_xh /= cn;
        for (std::int64_t j = 0; j < c; ++j) {
          double dxh = g.v[i * c + j] * tg2.v[j];
          double xh = (*xhat)[static_cast<std::size_t>(i * c + j)];
          gx.v[i * c + j] += (dxh - mean_dxh - xh * mean_dxh_xh) * is;
        }
      }
    }
  });
}

// ------------------------------------------------------------------ reductions

Value Tape::mean_all(Value a) {
  const Tensor& ta = val(a);
  if (ta.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
  double s = 0.0;
  for (double x : ta.v) s += x;
  Tensor out = Tensor::scalar(s / static_cast<double>(ta.numel()));
  Value self{static_cast<std::int32_t>(nodes_.size())};
  const double inv = 1.0 / static_cast<double>(ta.numel());
  return make(std::move(out), requires_grad(a), [a, inv, self](Tape& t) {
    double g = t.nodes_[self.id].grad.v[0];
    Tensor& ga = t.gbuf(a.id);
    for (auto& x : ga.v) x += g * inv;
  });
}

Value Tape::sum_all(Value a) {
  const Tensor& ta = val(a);
  double s = 0.0;
  for (double x : ta.v) s += x;
  Tensor out = Tensor::scalar(s);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    double g = t.nodes_[self.id].grad.v[0];
    Tensor& ga = t.gbuf(a.id);
    for (auto& x : ga.v) x += g;
  });
}

// ------------------------------------------------------------ shape / indexing

Value Tape::reshape(Value a, std::vector<std::int64_t> shape) {
  Tensor out = val(a);
  Tensor probe(shape);
  if (probe.numel() != out.numel()) {
    throw std::invalid_argument("reshape: element count mismatch " + out.shape_str() +
                                " -> " + probe.shape_str());
  }
  out.shape = std::move(shape);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
  });
}

Value Tape::slice_rows(Value a, std::int64_t begin, std::int64_t count) {
  const Tensor& ta = val(a);
  if (ta.ndim() != 2 || begin < 0 || begin + count > ta.dim(0)) {
    throw std::invalid_argument("slice_rows: bad range on " + ta.shape_str());
  }
  const auto c = ta.dim(1);
  Tensor out({count, c});
  std::copy(ta.v.begin() + begin * c, ta.v.begin() + (begin + count) * c, out.v.begin());
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, begin, count, c, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < count * c; ++i) ga.v[begin * c + i] += g.v[i];
  });
}

Value Tape::slice_cols(Value a, std::int64_t begin, std::int64_t count) {
  const Tensor& ta = val(a);
  if (ta.ndim() != 2 || begin < 0 || begin + count > ta.dim(1)) {
    throw std::invalid_argument("slice_cols: bad range on " + ta.shape_str());
  }
  const auto n = ta.dim(0), c = ta.dim(1);
  Tensor out({n, count});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(ta.v.begin() + i * c + begin, ta.v.begin() + i * c + begin + count,
              out.v.begin() + i * count);
  }
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(a), [a, begin, count, n, c, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    Tensor& ga = t.gbuf(a.id);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < count; ++j) {
        ga.v[i * c + begin + j] += g.v[i * count + j];
      }
    }
  });
}

Value Tape::concat_rows(const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty list");
  const auto c = val(parts[0]).dim(1);
  std::int64_t rows = 0;
  bool rg = false;
  for (Value p : parts) {
    const Tensor& tp = val(p);
    if (tp.ndim() != 2 || tp.dim(1) != c) {
      throw std::invalid_argument("concat_rows: column mismatch " + tp.shape_str());
    }
    rows += tp.dim(0);
    rg = rg || requires_grad(p);
  }
  Tensor out({rows, c});
  std::int64_t at = 0;
  for (Value p : parts) {
    const Tensor& tp = val(p);
    std::copy(tp.v.begin(), tp.v.end(), out.v.begin() + at);
    at += tp.numel();
  }
  std::vector<Value> ps = parts;
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), rg, [ps, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    std::int64_t at2 = 0;
    for (Value p : ps) {
      std::int64_t n = t.val(p).numel();
      if (t.requires_grad(p)) {
        Tensor& gp = t.gbuf(p.id);
        for (std::int64_t i = 0; i < n; ++i) gp.v[i] += g.v[at2 + i];
      }
      at2 += n;
    }
  });
}

Value Tape::gather_rows(Value table, std::vector<std::int64_t> ids) {
  const Tensor& tt = val(table);
  if (tt.ndim() != 2) throw std::invalid_argument("gather_rows: table must be 2-d");
  const auto c = tt.dim(1);
  Tensor out({static_cast<std::int64_t>(ids.size()), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tt.dim(0)) {
      throw std::invalid_argument("gather_rows: id out of range");
    }
    std::copy(tt.v.begin() + ids[i] * c, tt.v.begin() + (ids[i] + 1) * c,
              out.v.begin() + static_cast<std::int64_t>(i) * c);
  }
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(table),
              [table, ids = std::move(ids), c, self](Tape& t) {
                const Tensor& g = t.nodes_[self.id].grad;
                Tensor& gt = t.gbuf(table.id);
                for (std::size_t i = 0; i < ids.size(); ++i) {
                  for (std::int64_t j = 0; j < c; ++j) {
                    gt.v[ids[i] * c + j] += g.v[static_cast<std::int64_t>(i) * c + j];
                  }
                }
              });
}

// ----------------------------------------------------------------- image ops

Value Tape::conv2d(Value x, Value w, Value b, int stride, int pad) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  const Tensor& tb = val(b);
  if (tx.ndim() != 3 || tw.ndim() != 4 || tb.ndim() != 1 || tw.dim(1) != tx.dim(0) ||
      tb.dim(0) != tw.dim(0)) {
    throw std::invalid_argument("conv2d: shapes " + tx.shape_str() + ", " +
                                tw.shape_str() + ", " + tb.shape_str());
  }
  const std::int64_t ci = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
  const std::int64_t co = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
  const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");
  Tensor out({co, ho, wo});
  for (std::int64_t oc = 0; oc < co; ++oc) {
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        double acc = tb.v[oc];
        for (std::int64_t ic = 0; ic < ci; ++ic) {
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const std::int64_t iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const std::int64_t ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += tw.v[((oc * ci + ic) * kh + ky) * kw + kx] *
                     tx.v[(ic * h + iy) * wd + ix];
            }
          }
        }
        out.v[(oc * ho + oy) * wo + ox] = acc;
      }
    }
  }
  bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), rg,
              [x, w, b, stride, pad, ci, h, wd, co, kh, kw, ho, wo, self](Tape& t) {
                const Tensor& g = t.nodes_[self.id].grad;
                const Tensor& tx2 = t.val(x);
                const Tensor& tw2 = t.val(w);
                const bool need_x = t.requires_grad(x);
                const bool need_w = t.requires_grad(w);
                const bool need_b = t.requires_grad(b);
                Tensor* gx = need_x ? &t.gbuf(x.id) : nullptr;
                Tensor* gw = need_w ? &t.gbuf(w.id) : nullptr;
                Tensor* gb = need_b ? &t.gbuf(b.id) : nullptr;
                for (std::int64_t oc = 0; oc < co; ++oc) {
                  for (std::int64_t oy = 0; oy < ho; ++oy) {
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                      const double go = g.v[(oc * ho + oy) * wo + ox];
                      if (go == 0.0) continue;
                      if (need_b) gb->v[oc] += go;
                      for (std::int64_t ic = 0; ic < ci; ++ic) {
                        for (std::int64_t ky = 0; ky < kh; ++ky) {
                          const std::int64_t iy = oy * stride + ky - pad;
                          if (iy < 0 || iy >= h) continue;
                          for (std::int64_t kx = 0; kx < kw; ++kx) {
                            const std::int64_t ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wd) continue;
                            const std::int64_t wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                            const std::int64_t xi = (ic * h + iy) * wd + ix;
                            if (need_w) gw->v[wi] += go * tx2.v[xi];
                            if (need_x) gx->v[xi] += go * tw2.v[wi];
                          }
                        }
                      }
                    }
                  }
                }
              });
}

Value Tape::upsample2x(Value x) {
  const Tensor& tx = val(x);
  if (tx.ndim() != 3) throw std::invalid_argument("upsample2x: need [C,H,W]");
  const std::int64_t c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (std::int64_t ic = 0; ic < c; ++ic) {
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      for (std::int64_t xk = 0; xk < 2 * w; ++xk) {
        out.v[(ic * 2 * h + y) * 2 * w + xk] = tx.v[(ic * h + y / 2) * w + xk / 2];
      }
    }
  }
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(x), [x, c, h, w, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    Tensor& gx = t.gbuf(x.id);
    for (std::int64_t ic = 0; ic < c; ++ic) {
      for (std::int64_t y = 0; y < 2 * h; ++y) {
        for (std::int64_t xk = 0; xk < 2 * w; ++xk) {
          gx.v[(ic * h + y / 2) * w + xk / 2] += g.v[(ic * 2 * h + y) * 2 * w + xk];
        }
      }
    }
  });
}

Value Tape::avg_pool(Value x, int p) {
  const Tensor& tx = val(x);
  if (tx.ndim() != 3 || p < 1 || tx.dim(1) % p != 0 || tx.dim(2) % p != 0) {
    throw std::invalid_argument("avg_pool: " + tx.shape_str() + " with window " +
                                std::to_string(p));
  }
  const std::int64_t c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
  const std::int64_t ho = h / p, wo = w / p;
  Tensor out({c, ho, wo});
  const double inv = 1.0 / static_cast<double>(p * p);
  for (std::int64_t ic = 0; ic < c; ++ic) {
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (int dy = 0; dy < p; ++dy) {
          for (int dx = 0; dx < p; ++dx) {
            acc += tx.v[(ic * h + oy * p + dy) * w + ox * p + dx];
          }
        }
        out.v[(ic * ho + oy) * wo + ox] = acc * inv;
      }
    }
  }
  Value self{static_cast<std::int32_t>(nodes_.size())};
  return make(std::move(out), requires_grad(x), [x, p, c, h, w, ho, wo, inv, self](Tape& t) {
    const Tensor& g = t.nodes_[self.id].grad;
    Tensor& gx = t.gbuf(x.id);
    for (std::int64_t ic = 0; ic < c; ++ic) {
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          const double go = g.v[(ic * ho + oy) * wo + ox] * inv;
          for (int dy = 0; dy < p; ++dy) {
            for (int dx = 0; dx < p; ++dx) {
              gx.v[(ic * h + oy * p + dy) * w + ox * p + dx] += go;
            }
          }
        }
      }
    }
  });
}

}  // namespace layercake::ad
