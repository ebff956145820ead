#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "layercake/autograd.hpp"
#include "layercake/tensor.hpp"

namespace layercake::nn {

// Named parameter set. std::map keeps iteration — and therefore update and
// serialization order — deterministic.
using ParamStore = std::map<std::string, Tensor>;

// Tape handles produced by binding a ParamStore for one forward/backward pass.
struct BoundParams {
  std::map<std::string, ad::Value> values;

  ad::Value at(const std::string& name) const;
  bool contains(const std::string& name) const { return values.count(name) > 0; }
};

// Registers every parameter as a leaf on `tape`. Binding with
// requires_grad=false freezes the set for that pass.
BoundParams bind(ad::Tape& tape, const ParamStore& params,
                 bool requires_grad = true);

// Adam with bias-corrected moment estimates. Moments and step counts are kept
// per parameter, so parameters that only participate in some steps (task
// mixtures, frozen phases) still get correct bias correction.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit Adam(Options opt) : opt_(opt) {}

  // Applies one update from the gradients on `tape`. Parameters whose bound
  // value never received a gradient are left untouched.
  void step(ParamStore& params, const BoundParams& bound, const ad::Tape& tape);

  const Options& options() const { return opt_; }

 private:
  Options opt_;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
  std::map<std::string, std::int64_t> t_;
};

// Checkpoint: a serialized JSON metadata object plus named tensors, stored in
// a little-endian binary container. Loading verifies magic and version.
struct Checkpoint {
  std::string meta_json = "{}";
  ParamStore params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Frozen conv stack with weights drawn once from a seed and never trained.
// Shared by the perceptual reconstruction loss and the Fréchet feature
// distance so both see the same embedding space. Three stride-2 layers;
// works on any input size >= 8.
class FeatureStack {
 public:
  explicit FeatureStack(std::uint64_t seed, int in_channels = 4);

  // Final conv feature map [out_channels, ~H/8, ~W/8].
  ad::Value map(ad::Tape& tape, ad::Value chw) const;
  Tensor map(const Tensor& chw) const;
  // Per-channel spatial means of the final map: a [out_channels] vector.
  Tensor pooled(const Tensor& chw) const;

  int out_channels() const { return out_channels_; }

 private:
  ParamStore params_;
  int in_channels_;
  int out_channels_;
};

}  // namespace layercake::nn
