#include "layercake/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "layercake/rng.hpp"

namespace layercake::nn {
namespace {

constexpr char kMagic[8] = {'L', 'C', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::string& buf, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& buf, std::size_t& at) {
  if (at + 8 > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) {
    x |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  }
  at += 8;
  return x;
}

}  // namespace

ad::Value BoundParams::at(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw std::out_of_range("params: unknown name " + name);
  return it->second;
}

BoundParams bind(ad::Tape& tape, const ParamStore& params, bool requires_grad) {
  BoundParams b;
  for (const auto& [name, tensor] : params) {
    b.values.emplace(name, tape.leaf(tensor, requires_grad));
  }
  return b;
}

void Adam::step(ParamStore& params, const BoundParams& bound, const ad::Tape& tape) {
  for (auto& [name, p] : params) {
    auto it = bound.values.find(name);
    if (it == bound.values.end() || !tape.has_grad(it->second)) continue;
    const Tensor& g = tape.grad(it->second);

    Tensor& m = m_.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    Tensor& v = v_.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    const std::int64_t t = ++t_[name];
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t));

    for (std::int64_t i = 0; i < p.numel(); ++i) {
      m.v[i] = opt_.beta1 * m.v[i] + (1.0 - opt_.beta1) * g.v[i];
      v.v[i] = opt_.beta2 * v.v[i] + (1.0 - opt_.beta2) * g.v[i] * g.v[i];
      const double mhat = m.v[i] / bc1;
      const double vhat = v.v[i] / bc2;
      p.v[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
    }
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  put_u64(buf, ckpt.meta_json.size());
  buf.append(ckpt.meta_json);
  put_u64(buf, ckpt.params.size());
  for (const auto& [name, t] : ckpt.params) {
    put_u64(buf, name.size());
    buf.append(name);
    put_u64(buf, t.shape.size());
    for (auto d : t.shape) put_u64(buf, static_cast<std::uint64_t>(d));
    for (double x : t.v) put_u64(buf, std::bit_cast<std::uint64_t>(x));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string());
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(is)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) ||
      std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  std::size_t at = sizeof(kMagic);

  Checkpoint ckpt;
  const std::uint64_t meta_len = get_u64(buf, at);
  if (at + meta_len > buf.size()) throw std::runtime_error("checkpoint: truncated meta");
  ckpt.meta_json.assign(buf, at, meta_len);
  at += meta_len;

  const std::uint64_t n_tensors = get_u64(buf, at);
  for (std::uint64_t k = 0; k < n_tensors; ++k) {
    const std::uint64_t name_len = get_u64(buf, at);
    if (at + name_len > buf.size()) throw std::runtime_error("checkpoint: truncated name");
    std::string name(buf, at, name_len);
    at += name_len;

    const std::uint64_t ndim = get_u64(buf, at);
    std::vector<std::int64_t> shape(ndim);
    for (auto& d : shape) d = static_cast<std::int64_t>(get_u64(buf, at));
    Tensor t(shape);
    for (auto& x : t.v) x = std::bit_cast<double>(get_u64(buf, at));
    if (!ckpt.params.emplace(std::move(name), std::move(t)).second) {
      throw std::runtime_error("checkpoint: duplicate tensor name");
    }
  }
  if (at != buf.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

FeatureStack::FeatureStack(std::uint64_t seed, int in_channels)
    : in_channels_(in_channels), out_channels_(16) {
  Rng rng(seed);
  const int chans[4] = {in_channels, 8, 16, out_channels_};
  for (int l = 0; l < 3; ++l) {
    const int ci = chans[l];
    const int co = chans[l + 1];
    Rng layer = rng.derive(static_cast<std::uint64_t>(l));
    const double stddev = std::sqrt(2.0 / (ci * 9.0));
    std::string base = "layer" + std::to_string(l);
    params_[base + ".w"] = Tensor::randn({co, ci, 3, 3}, layer, stddev);
    params_[base + ".b"] = Tensor::zeros({co});
  }
}

ad::Value FeatureStack::map(ad::Tape& tape, ad::Value chw) const {
  if (tape.val(chw).dim(0) != in_channels_)
    throw std::invalid_argument("FeatureStack: channel count mismatch");
  BoundParams bound;
  for (const auto& [name, tensor] : params_)
    bound.values.emplace(name, tape.leaf(tensor, /*requires_grad=*/false));
  ad::Value x = chw;
  for (int l = 0; l < 3; ++l) {
    std::string base = "layer" + std::to_string(l);
    x = tape.conv2d(x, bound.at(base + ".w"), bound.at(base + ".b"),
                    /*stride=*/2, /*pad=*/1);
    if (l < 2) x = tape.gelu(x);
  }
  return x;
}

Tensor FeatureStack::map(const Tensor& chw) const {
  ad::Tape tape;
  return tape.val(map(tape, tape.leaf(chw, /*requires_grad=*/false)));
}

Tensor FeatureStack::pooled(const Tensor& chw) const {
  Tensor m = map(chw);
  const std::int64_t c = m.dim(0);
  const std::int64_t spatial = m.numel() / c;
  Tensor out = Tensor::zeros({c});
  for (std::int64_t i = 0; i < c; ++i) {
    double sum = 0.0;
    for (std::int64_t j = 0; j < spatial; ++j) sum += m.v[i * spatial + j];
    out.v[i] = sum / static_cast<double>(spatial);
  }
  return out;
}

}  // namespace layercake::nn
