#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "layercake/bundle.hpp"
#include "layercake/nn.hpp"
#include "layercake/rng.hpp"
#include "layercake/tensor.hpp"
#include "layercake/vae.hpp"

namespace layercake {

// Transformer velocity model trained by flow matching: it learns the constant
// displacement field of the straight-line path z_t = (1-t) z0 + t z1 and is
// sampled by Euler integration. Conditioning enters as extra token segments
// (condition latents, pooled prompt text, an optional mask), all attended to
// bidirectionally.

enum class FlowTask : int {
  text_extract = 0,
  text_erase = 1,
  fg_extract = 2,
  fg_erase = 3,
  t2psd = 4,
};
std::string to_string(FlowTask task);
FlowTask flow_task_from_string(const std::string& name);
FlowTask flow_task_from_triplet(TripletTask task);
const std::vector<FlowTask>& all_flow_tasks();

enum class SegmentKind : int { condition = 0, target = 1, text = 2, mask = 3 };

// A concatenated multi-modal sequence: per-token features plus the segment
// tag and (for image tokens) the 2-D latent coordinate that positional
// encodings are built from.
struct TokenSequence {
  Tensor tokens;                              // [N, d]
  std::vector<SegmentKind> segments;          // size N
  std::vector<std::array<int, 2>> positions;  // (y, x); text rows use {0, 0}

  std::int64_t size() const { return tokens.numel() == 0 ? 0 : tokens.dim(0); }
  void validate() const;
};

// Row-major (y, x) coordinates of a g x g grid, matching latent token order.
std::vector<std::array<int, 2>> grid_positions(int g);

// Prompt fields tokenized against the fixed vocabulary. Index 0 is the
// reserved unknown-word slot; real words start at 1.
struct PromptEmbedding {
  std::array<std::vector<std::int64_t>, 4> field_ids;  // poster, fg, mid, bg
};
const std::vector<std::string>& flow_vocabulary();
PromptEmbedding embed_prompt(const HierarchicalPrompt& prompt);

// Everything the velocity field is conditioned on besides (z_t, t).
struct FlowCondition {
  Tensor cond_tokens;  // [Nc, C] latent tokens; empty for pure generation
  std::vector<std::array<int, 2>> cond_positions;  // size Nc; grid order if empty
  Tensor mask_tokens;  // [target_grid^2, 1] coverage scalars; may be empty
  PromptEmbedding prompt;
  FlowTask task = FlowTask::fg_extract;
  int target_grid = 4;  // side length of the target token grid
};

// Linear interpolation on the flow path. Returns (z_t, v_target) with
// z_t = (1-t) z0 + t z1 and v_target = z1 - z0, both exact.
std::pair<Tensor, Tensor> interpolate(const Tensor& z0, const Tensor& z1,
                                      double t);

// One training example after interpolation.
struct FlowBatch {
  Tensor z0, z1;      // [N, C] latent tokens
  double t = 0.0;
  Tensor zt;          // (1-t) z0 + t z1
  Tensor v_target;    // z1 - z0
  FlowCondition cond;
};
FlowBatch make_flow_batch(Tensor z0, Tensor z1, double t, FlowCondition cond);

// Low-rank adapter tensors, stored per adapted weight W [n, m] as
// "<weight>.lora_a" [r, m] and "<weight>.lora_b" [n, r]. b starts at zero so
// a fresh adapter is an exact identity; the effective weight is
// W + (alpha / rank) * b * a.
struct LoraSet {
  int rank = 8;
  double alpha = 8.0;
  nn::ParamStore params;

  double scale() const { return alpha / static_cast<double>(rank); }
  std::set<std::string> adapted_weights() const;  // base weight names
};

struct FlowConfig {
  int latent_channels = 6;  // color + alpha latent channels per token
  int d_model = 128;
  int n_heads = 4;
  int n_blocks = 4;
  int mlp_mult = 4;
  int lora_rank = 8;
  double lora_alpha = 8.0;

  void validate() const;
};

// Plain-tensor attention weights for the standalone attention entry point.
struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// Full bidirectional multi-head attention over the whole sequence (no mask
// of any kind): per head softmax(Q K^T / sqrt(d_head)) V, heads concatenated,
// then output-projected. Segments and positions pass through untouched.
TokenSequence mma_attention(const TokenSequence& z, const AttentionWeights& w,
                            int n_heads);
// The per-head attention probability matrices, for inspection and tests.
std::vector<Tensor> mma_attention_probs(const TokenSequence& z,
                                        const AttentionWeights& w, int n_heads);

class FlowModel {
 public:
  FlowModel(FlowConfig cfg, std::uint64_t init_seed);
  FlowModel(FlowConfig cfg, nn::ParamStore params);

  const FlowConfig& config() const { return cfg_; }
  const nn::ParamStore& params() const { return params_; }
  nn::ParamStore& mutable_params() { return params_; }

  // Velocity of the learned field at (zt, t) under the given conditioning.
  // zt is [target_grid^2, latent_channels]; the result has the same shape.
  Tensor predict_velocity(const Tensor& zt, double t, const FlowCondition& cond,
                          const LoraSet* lora = nullptr) const;

  // Differentiable version; `base` must come from nn::bind(tape, params())
  // and `lora_bound` (if any) from nn::bind over the adapter tensors.
  ad::Value predict_velocity_on_tape(ad::Tape& tape, const nn::BoundParams& base,
                                     ad::Value zt, double t,
                                     const FlowCondition& cond,
                                     const LoraSet* lora = nullptr,
                                     const nn::BoundParams* lora_bound = nullptr) const;

  // Fresh adapters for this model's attention projections (b tensors zero).
  LoraSet make_lora_set(std::uint64_t seed) const;
  // Folds scale * b * a into the base weights; the merged model forwards
  // without any adapter argument.
  FlowModel merge_lora(const LoraSet& lora) const;

  void save(const std::filesystem::path& path) const;
  static FlowModel load(const std::filesystem::path& path);

 private:
  FlowConfig cfg_;
  nn::ParamStore params_;
};

// Mean squared error between the predicted velocity and batch.v_target.
double flow_loss(const FlowModel& model, const FlowBatch& batch,
                 const LoraSet* lora = nullptr);

// Euler integration z <- z + (1/steps) * field(z, k/steps), k = 0..steps-1.
Tensor euler_integrate(Tensor z0, int steps,
                       const std::function<Tensor(const Tensor&, double)>& field);

// Editing flow: starts from the condition latent itself and integrates the
// learned field to the target. Deterministic.
Tensor sample_edit(const FlowModel& model, const FlowCondition& cond, int steps,
                   const LoraSet* lora = nullptr);

// Generation flow: starts from unit Gaussian noise drawn from `rng` and is
// conditioned on text only. Returns target tokens [grid^2, C].
Tensor sample_generate(const FlowModel& model, Rng& rng,
                       const HierarchicalPrompt& prompt, int grid, int steps,
                       const LoraSet* lora = nullptr);

// One flow-matching training example. An empty z0 means "draw fresh unit
// Gaussian noise every time this sample is visited" (the generation task).
struct FlowSample {
  Tensor z0;
  Tensor z1;
  FlowCondition cond;
};

struct FlowTrainOptions {
  int steps = 200;
  int batch_size = 2;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

struct FlowTrainResult {
  std::vector<double> curve;  // one mean loss per step
};

// Flow-matching training. Trains the base weights when `adapters` is null;
// otherwise trains only the adapter tensors and leaves the base parameters
// bit-identical. Deterministic given the seed: step s picks batch indices
// from seed.derive("batch").derive(s), per-sample times from
// seed.derive("t").derive(s), and noise for empty-z0 samples from
// seed.derive("noise").derive(s). Throws std::runtime_error naming the step
// if the loss goes non-finite.
FlowTrainResult train_flow(FlowModel& model, LoraSet* adapters,
                           const std::vector<FlowSample>& dataset,
                           const FlowTrainOptions& opts);

// Adapter checkpoint I/O; the task name is stored alongside the tensors.
void save_lora(const std::filesystem::path& path, const LoraSet& lora,
               FlowTask task);
std::pair<LoraSet, FlowTask> load_lora(const std::filesystem::path& path);

// Latent <-> token bridges. Tokens hold one latent cell per row, color
// channels first then alpha, divided by `latent_scale`.
Tensor latent_to_tokens(const LatentPair& lat, double latent_scale);
std::pair<Tensor, Tensor> tokens_to_latent(const Tensor& tokens,
                                           int channels_rgb, int channels_a,
                                           double latent_scale);

// Average alpha coverage of the mask per latent cell, in grid order.
Tensor mask_to_tokens(const RgbaImage& mask, int grid);

}  // namespace layercake
