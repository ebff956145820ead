#include "layercake/flow.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace layercake {
namespace {

using nlohmann::json;

constexpr int kTextTokens = 5;  // four pooled prompt fields + one task slot
constexpr int kTaskCount = 5;

Tensor time_features(double t, int d) {
  // Classic sinusoid over a stretched time axis so nearby t remain separable.
  const double p = t * 1000.0;
  const int pairs = d / 2;
  Tensor out({d});
  for (int k = 0; k < pairs; ++k) {
    const double freq = std::pow(10000.0, -static_cast<double>(k) / pairs);
    out.v[2 * k] = std::sin(p * freq);
    out.v[2 * k + 1] = std::cos(p * freq);
  }
  return out;
}

// Sinusoidal 2-D encoding: y occupies the first d/2 features, x the second.
// Text tokens (no spatial location) get all-zero rows.
Tensor positional_features(const std::vector<std::array<int, 2>>& positions,
                           const std::vector<SegmentKind>& segments, int d) {
  const auto n = static_cast<std::int64_t>(positions.size());
  Tensor out = Tensor::zeros({n, d});
  const int half = d / 2;
  const int pairs = half / 2;
  for (std::int64_t i = 0; i < n; ++i) {
    if (segments[static_cast<std::size_t>(i)] == SegmentKind::text) continue;
    const auto& p = positions[static_cast<std::size_t>(i)];
    for (int k = 0; k < pairs; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(k) / pairs);
      out.v[i * d + 2 * k] = std::sin(p[0] * freq);
      out.v[i * d + 2 * k + 1] = std::cos(p[0] * freq);
      out.v[i * d + half + 2 * k] = std::sin(p[1] * freq);
      out.v[i * d + half + 2 * k + 1] = std::cos(p[1] * freq);
    }
  }
  return out;
}

struct ParamSpec {
  std::string name;
  std::vector<std::int64_t> shape;
};

std::vector<ParamSpec> param_specs(const FlowConfig& c) {
  const std::int64_t d = c.d_model;
  const std::int64_t ch = c.latent_channels;
  const std::int64_t hd = static_cast<std::int64_t>(c.mlp_mult) * d;
  const auto v = static_cast<std::int64_t>(flow_vocabulary().size());
  std::vector<ParamSpec> specs = {
      {"in.latent.w", {ch, d}}, {"in.latent.b", {d}},
      {"in.mask.w", {1, d}},    {"in.mask.b", {d}},
      {"seg.emb", {4, d}},      {"text.vocab", {v, d}},
      {"text.field", {4, d}},   {"text.task", {kTaskCount, d}},
      {"time.w1", {d, d}},      {"time.b1", {d}},
      {"time.w2", {d, d}},      {"time.b2", {d}},
  };
  for (int b = 0; b < c.n_blocks; ++b) {
    const std::string pre = "blk" + std::to_string(b) + ".";
    specs.push_back({pre + "ln1.g", {d}});
    specs.push_back({pre + "ln1.b", {d}});
    for (const char* p : {"q", "k", "v", "o"}) {
      specs.push_back({pre + "attn." + p + ".w", {d, d}});
      specs.push_back({pre + "attn." + p + ".b", {d}});
    }
    specs.push_back({pre + "ln2.g", {d}});
    specs.push_back({pre + "ln2.b", {d}});
    specs.push_back({pre + "mlp.w1", {d, hd}});
    specs.push_back({pre + "mlp.b1", {hd}});
    specs.push_back({pre + "mlp.w2", {hd, d}});
    specs.push_back({pre + "mlp.b2", {d}});
  }
  specs.push_back({"out.ln.g", {d}});
  specs.push_back({"out.ln.b", {d}});
  specs.push_back({"out.w", {d, ch}});
  specs.push_back({"out.b", {ch}});
  return specs;
}

bool is_gain(const std::string& name) {
  return name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
}
bool is_table(const std::string& name) {
  return name.rfind("text.", 0) == 0 || name == "seg.emb";
}

void check_params(const FlowConfig& cfg, const nn::ParamStore& params) {
  for (const auto& spec : param_specs(cfg)) {
    auto it = params.find(spec.name);
    if (it == params.end())
      throw std::invalid_argument("flow: missing parameter " + spec.name);
    if (it->second.shape != spec.shape)
      throw std::invalid_argument("flow: parameter " + spec.name +
                                  " has shape " + it->second.shape_str());
  }
}

// Multi-head core: split columns into heads, softmax(q k^T / sqrt(dh)) v per
// head, concatenate the head outputs back along columns.
ad::Value multihead_mix(ad::Tape& t, ad::Value q, ad::Value k, ad::Value v,
                        int heads) {
  const std::int64_t d = t.val(q).dim(1);
  const std::int64_t dh = d / heads;
  std::vector<ad::Value> outs_t;
  outs_t.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    ad::Value qi = t.slice_cols(q, h * dh, dh);
    ad::Value ki = t.slice_cols(k, h * dh, dh);
    ad::Value vi = t.slice_cols(v, h * dh, dh);
    ad::Value scores =
        t.scale(t.matmul(qi, t.transpose(ki)), 1.0 / std::sqrt(static_cast<double>(dh)));
    ad::Value probs = t.softmax_rows(scores);
    outs_t.push_back(t.transpose(t.matmul(probs, vi)));  // [dh, N]
  }
  return t.transpose(t.concat_rows(outs_t));  // [N, d]
}

// x W (+ low-rank update) + b for the named projection.
ad::Value project(ad::Tape& t, ad::Value x, const std::string& name,
                  const nn::BoundParams& base, const LoraSet* lora,
                  const nn::BoundParams* lora_bound) {
  ad::Value y = t.matmul(x, base.at(name + ".w"));
  if (lora != nullptr && lora_bound != nullptr &&
      lora_bound->contains(name + ".w.lora_a")) {
    ad::Value a = lora_bound->at(name + ".w.lora_a");
    ad::Value b = lora_bound->at(name + ".w.lora_b");
    y = t.add(y, t.scale(t.matmul(t.matmul(x, b), a), lora->scale()));
  }
  return t.add_rowvec(y, base.at(name + ".b"));
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

std::string to_string(FlowTask task) {
  switch (task) {
    case FlowTask::text_extract: return "text_extract";
    case FlowTask::text_erase: return "text_erase";
    case FlowTask::fg_extract: return "fg_extract";
    case FlowTask::fg_erase: return "fg_erase";
    case FlowTask::t2psd: return "t2psd";
  }
  throw std::invalid_argument("unknown flow task");
}

FlowTask flow_task_from_string(const std::string& name) {
  for (FlowTask t : all_flow_tasks()) {
    if (to_string(t) == name) return t;
  }
  throw std::invalid_argument("unknown flow task: " + name);
}

FlowTask flow_task_from_triplet(TripletTask task) {
  switch (task) {
    case TripletTask::text_extract: return FlowTask::text_extract;
    case TripletTask::text_erase: return FlowTask::text_erase;
    case TripletTask::fg_extract: return FlowTask::fg_extract;
    case TripletTask::fg_erase: return FlowTask::fg_erase;
  }
  throw std::invalid_argument("unknown triplet task");
}

const std::vector<FlowTask>& all_flow_tasks() {
  static const std::vector<FlowTask> tasks = {
      FlowTask::text_extract, FlowTask::text_erase, FlowTask::fg_extract,
      FlowTask::fg_erase, FlowTask::t2psd};
  return tasks;
}

void TokenSequence::validate() const {
  if (tokens.numel() > 0 && tokens.ndim() != 2)
    throw std::invalid_argument("token sequence: tokens must be [N, d]");
  const auto n = static_cast<std::size_t>(size());
  if (segments.size() != n || positions.size() != n)
    throw std::invalid_argument(
        "token sequence: segment/position counts do not match token rows");
}

std::vector<std::array<int, 2>> grid_positions(int g) {
  if (g < 1) throw std::invalid_argument("grid_positions: side must be >= 1");
  std::vector<std::array<int, 2>> pos;
  pos.reserve(static_cast<std::size_t>(g) * static_cast<std::size_t>(g));
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x) pos.push_back({y, x});
  return pos;
}

const std::vector<std::string>& flow_vocabulary() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v{"<unk>"};
    const auto& words = prompt_vocabulary();
    v.insert(v.end(), words.begin(), words.end());
    return v;
  }();
  return vocab;
}

PromptEmbedding embed_prompt(const HierarchicalPrompt& prompt) {
  const auto& words = prompt_vocabulary();  // sorted
  auto ids_of = [&](const std::string& text) {
    std::vector<std::int64_t> ids;
    for (const std::string& w : split_words(text)) {
      auto it = std::lower_bound(words.begin(), words.end(), w);
      if (it != words.end() && *it == w) {
        ids.push_back(1 + (it - words.begin()));  // slot 0 is <unk>
      } else {
        ids.push_back(0);
      }
    }
    return ids;
  };
  PromptEmbedding emb;
  emb.field_ids[0] = ids_of(prompt.poster);
  emb.field_ids[1] = ids_of(prompt.foreground);
  emb.field_ids[2] = ids_of(prompt.midground);
  emb.field_ids[3] = ids_of(prompt.background);
  return emb;
}

std::pair<Tensor, Tensor> interpolate(const Tensor& z0, const Tensor& z1,
                                      double t) {
  if (!z0.same_shape(z1))
    throw std::invalid_argument("interpolate: endpoint shapes differ: " +
                                z0.shape_str() + " vs " + z1.shape_str());
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("interpolate: t must lie in [0, 1]");
  Tensor zt(z0.shape);
  Tensor v(z0.shape);
  for (std::int64_t i = 0; i < z0.numel(); ++i) {
    zt.v[i] = (1.0 - t) * z0.v[i] + t * z1.v[i];
    v.v[i] = z1.v[i] - z0.v[i];
  }
  return {std::move(zt), std::move(v)};
}

FlowBatch make_flow_batch(Tensor z0, Tensor z1, double t, FlowCondition cond) {
  auto [zt, v] = interpolate(z0, z1, t);
  FlowBatch b;
  b.z0 = std::move(z0);
  b.z1 = std::move(z1);
  b.t = t;
  b.zt = std::move(zt);
  b.v_target = std::move(v);
  b.cond = std::move(cond);
  return b;
}

std::set<std::string> LoraSet::adapted_weights() const {
  std::set<std::string> names;
  const std::string suffix = ".lora_a";
  for (const auto& [key, tensor] : params) {
    if (key.size() > suffix.size() &&
        key.compare(key.size() - suffix.size(), suffix.size(), suffix) == 0) {
      names.insert(key.substr(0, key.size() - suffix.size()));
    }
  }
  return names;
}

void FlowConfig::validate() const {
  if (latent_channels < 1) throw std::invalid_argument("flow config: latent_channels must be positive");
  if (d_model < 4 || d_model % 4 != 0)
    throw std::invalid_argument("flow config: d_model must be a positive multiple of 4");
  if (n_heads < 1 || d_model % n_heads != 0)
    throw std::invalid_argument("flow config: head count must divide d_model");
  if (n_blocks < 1) throw std::invalid_argument("flow config: need at least one block");
  if (mlp_mult < 1) throw std::invalid_argument("flow config: mlp_mult must be positive");
  if (lora_rank < 1 || lora_alpha <= 0.0)
    throw std::invalid_argument("flow config: bad adapter rank or alpha");
}

FlowModel::FlowModel(FlowConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng root(init_seed);
  for (const auto& spec : param_specs(cfg_)) {
    if (is_gain(spec.name)) {
      params_[spec.name] = Tensor::full(spec.shape, 1.0);
    } else if (spec.shape.size() == 1) {
      params_[spec.name] = Tensor::zeros(spec.shape);  // biases
    } else {
      Rng layer = root.derive(spec.name);
      const double stddev =
          is_table(spec.name) || spec.name == "out.w"
              ? 0.02
              : std::sqrt(1.0 / static_cast<double>(spec.shape[0]));
      params_[spec.name] = Tensor::randn(spec.shape, layer, stddev);
    }
  }
}

FlowModel::FlowModel(FlowConfig cfg, nn::ParamStore params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  check_params(cfg_, params_);
}

TokenSequence mma_attention(const TokenSequence& z, const AttentionWeights& w,
                            int n_heads) {
  z.validate();
  const std::int64_t d = w.wq.dim(1);
  if (d % n_heads != 0)
    throw std::invalid_argument("attention: head count must divide width");
  ad::Tape t;
  ad::Value x = t.leaf(z.tokens);
  ad::Value q = t.add_rowvec(t.matmul(x, t.leaf(w.wq)), t.leaf(w.bq));
  ad::Value k = t.add_rowvec(t.matmul(x, t.leaf(w.wk)), t.leaf(w.bk));
  ad::Value v = t.add_rowvec(t.matmul(x, t.leaf(w.wv)), t.leaf(w.bv));
  ad::Value mixed = multihead_mix(t, q, k, v, n_heads);
  ad::Value out = t.add_rowvec(t.matmul(mixed, t.leaf(w.wo)), t.leaf(w.bo));
  TokenSequence result = z;
  result.tokens = t.val(out);
  return result;
}

std::vector<Tensor> mma_attention_probs(const TokenSequence& z,
                                        const AttentionWeights& w, int n_heads) {
  z.validate();
  const std::int64_t d = w.wq.dim(1);
  if (d % n_heads != 0)
    throw std::invalid_argument("attention: head count must divide width");
  const std::int64_t dh = d / n_heads;
  ad::Tape t;
  ad::Value x = t.leaf(z.tokens);
  ad::Value q = t.add_rowvec(t.matmul(x, t.leaf(w.wq)), t.leaf(w.bq));
  ad::Value k = t.add_rowvec(t.matmul(x, t.leaf(w.wk)), t.leaf(w.bk));
  std::vector<Tensor> probs;
  for (int h = 0; h < n_heads; ++h) {
    ad::Value qi = t.slice_cols(q, h * dh, dh);
    ad::Value ki = t.slice_cols(k, h * dh, dh);
    ad::Value scores = t.scale(t.matmul(qi, t.transpose(ki)),
                               1.0 / std::sqrt(static_cast<double>(dh)));
    probs.push_back(t.val(t.softmax_rows(scores)));
  }
  return probs;
}

ad::Value FlowModel::predict_velocity_on_tape(
    ad::Tape& t, const nn::BoundParams& base, ad::Value zt, double t_time,
    const FlowCondition& cond, const LoraSet* lora,
    const nn::BoundParams* lora_bound) const {
  const std::int64_t ch = cfg_.latent_channels;
  const std::int64_t d = cfg_.d_model;
  const int g = cond.target_grid;
  const std::int64_t nt = static_cast<std::int64_t>(g) * g;

  const Tensor& ztv = t.val(zt);
  if (ztv.ndim() != 2 || ztv.dim(0) != nt || ztv.dim(1) != ch)
    throw std::invalid_argument("flow: target tokens are " + ztv.shape_str() +
                                " but the condition expects [" +
                                std::to_string(nt) + ", " + std::to_string(ch) + "]");

  const std::int64_t nc =
      cond.cond_tokens.numel() == 0 ? 0 : cond.cond_tokens.dim(0);
  if (nc > 0 && cond.cond_tokens.dim(1) != ch)
    throw std::invalid_argument("flow: condition token width mismatch");
  std::vector<std::array<int, 2>> cond_pos = cond.cond_positions;
  if (nc > 0 && cond_pos.empty()) {
    const int gc = static_cast<int>(std::llround(std::sqrt(static_cast<double>(nc))));
    if (static_cast<std::int64_t>(gc) * gc != nc)
      throw std::invalid_argument(
          "flow: condition positions required for non-square token counts");
    cond_pos = grid_positions(gc);
  }
  if (static_cast<std::int64_t>(cond_pos.size()) != nc)
    throw std::invalid_argument("flow: condition position count mismatch");

  const std::int64_t nm =
      cond.mask_tokens.numel() == 0 ? 0 : cond.mask_tokens.dim(0);
  if (nm > 0 && (nm != nt || cond.mask_tokens.dim(1) != 1))
    throw std::invalid_argument("flow: mask tokens must be [target_grid^2, 1]");

  // Segment features in fixed order: condition, target, text, mask.
  std::vector<ad::Value> parts;
  std::vector<SegmentKind> segments;
  std::vector<std::array<int, 2>> positions;
  std::vector<std::int64_t> seg_ids;
  auto push_meta = [&](SegmentKind kind, std::int64_t count,
                       const std::vector<std::array<int, 2>>* pos) {
    for (std::int64_t i = 0; i < count; ++i) {
      segments.push_back(kind);
      positions.push_back(pos != nullptr ? (*pos)[static_cast<std::size_t>(i)]
                                         : std::array<int, 2>{0, 0});
      seg_ids.push_back(static_cast<std::int64_t>(kind));
    }
  };

  if (nc > 0) {
    parts.push_back(t.add_rowvec(
        t.matmul(t.leaf(cond.cond_tokens), base.at("in.latent.w")),
        base.at("in.latent.b")));
    push_meta(SegmentKind::condition, nc, &cond_pos);
  }
  const std::vector<std::array<int, 2>> tgt_pos = grid_positions(g);
  parts.push_back(
      t.add_rowvec(t.matmul(zt, base.at("in.latent.w")), base.at("in.latent.b")));
  push_meta(SegmentKind::target, nt, &tgt_pos);

  {
    // Text: mean-pooled word embeddings plus a field tag, one token per
    // prompt field, then the task slot.
    std::vector<ad::Value> text_rows;
    const std::array<const std::vector<std::int64_t>*, 4> fields = {
        &cond.prompt.field_ids[0], &cond.prompt.field_ids[1],
        &cond.prompt.field_ids[2], &cond.prompt.field_ids[3]};
    for (int f = 0; f < 4; ++f) {
      ad::Value tag = t.gather_rows(base.at("text.field"), {f});
      if (fields[static_cast<std::size_t>(f)]->empty()) {
        text_rows.push_back(tag);
        continue;
      }
      ad::Value words =
          t.gather_rows(base.at("text.vocab"), *fields[static_cast<std::size_t>(f)]);
      const auto n = static_cast<std::int64_t>(fields[static_cast<std::size_t>(f)]->size());
      ad::Value ones = t.leaf(Tensor::full({1, n}, 1.0 / static_cast<double>(n)));
      text_rows.push_back(t.add(t.matmul(ones, words), tag));
    }
    text_rows.push_back(
        t.gather_rows(base.at("text.task"), {static_cast<std::int64_t>(cond.task)}));
    parts.push_back(t.concat_rows(text_rows));
    push_meta(SegmentKind::text, kTextTokens, nullptr);
  }

  if (nm > 0) {
    parts.push_back(t.add_rowvec(
        t.matmul(t.leaf(cond.mask_tokens), base.at("in.mask.w")),
        base.at("in.mask.b")));
    push_meta(SegmentKind::mask, nm, &tgt_pos);
  }

  ad::Value x = t.concat_rows(parts);
  x = t.add(x, t.leaf(positional_features(positions, segments, static_cast<int>(d))));
  x = t.add(x, t.gather_rows(base.at("seg.emb"), seg_ids));

  // Time embedding, added to every token.
  ad::Value tf = t.leaf(Tensor(time_features(t_time, static_cast<int>(d))));
  ad::Value th = t.reshape(tf, {1, d});
  th = t.gelu(t.add_rowvec(t.matmul(th, base.at("time.w1")), base.at("time.b1")));
  th = t.add_rowvec(t.matmul(th, base.at("time.w2")), base.at("time.b2"));
  x = t.add_rowvec(x, t.reshape(th, {d}));

  for (int b = 0; b < cfg_.n_blocks; ++b) {
    const std::string pre = "blk" + std::to_string(b) + ".";
    ad::Value h = t.layer_norm(x, base.at(pre + "ln1.g"), base.at(pre + "ln1.b"));
    ad::Value q = project(t, h, pre + "attn.q", base, lora, lora_bound);
    ad::Value k = project(t, h, pre + "attn.k", base, lora, lora_bound);
    ad::Value v = project(t, h, pre + "attn.v", base, lora, lora_bound);
    ad::Value mixed = multihead_mix(t, q, k, v, cfg_.n_heads);
    x = t.add(x, project(t, mixed, pre + "attn.o", base, lora, lora_bound));

    ad::Value h2 = t.layer_norm(x, base.at(pre + "ln2.g"), base.at(pre + "ln2.b"));
    ad::Value m = t.gelu(
        t.add_rowvec(t.matmul(h2, base.at(pre + "mlp.w1")), base.at(pre + "mlp.b1")));
    m = t.add_rowvec(t.matmul(m, base.at(pre + "mlp.w2")), base.at(pre + "mlp.b2"));
    x = t.add(x, m);
  }

  ad::Value tgt = t.slice_rows(x, nc, nt);
  ad::Value y = t.layer_norm(tgt, base.at("out.ln.g"), base.at("out.ln.b"));
  return t.add_rowvec(t.matmul(y, base.at("out.w")), base.at("out.b"));
}

Tensor FlowModel::predict_velocity(const Tensor& zt, double t,
                                   const FlowCondition& cond,
                                   const LoraSet* lora) const {
  ad::Tape tape;
  nn::BoundParams base = nn::bind(tape, params_, /*requires_grad=*/false);
  nn::BoundParams lora_bound;
  if (lora != nullptr) lora_bound = nn::bind(tape, lora->params, false);
  ad::Value v = predict_velocity_on_tape(tape, base, tape.leaf(zt), t, cond,
                                         lora, lora != nullptr ? &lora_bound : nullptr);
  return tape.val(v);
}

LoraSet FlowModel::make_lora_set(std::uint64_t seed) const {
  LoraSet set;
  set.rank = cfg_.lora_rank;
  set.alpha = cfg_.lora_alpha;
  Rng root(seed);
  const std::int64_t d = cfg_.d_model;
  const std::int64_t r = cfg_.lora_rank;
  for (int b = 0; b < cfg_.n_blocks; ++b) {
    for (const char* p : {"q", "k", "v", "o"}) {
      const std::string w =
          "blk" + std::to_string(b) + ".attn." + p + ".w";
      Rng layer = root.derive(w);
      set.params[w + ".lora_a"] =
          Tensor::randn({r, d}, layer, std::sqrt(1.0 / static_cast<double>(d)));
      set.params[w + ".lora_b"] = Tensor::zeros({d, r});
    }
  }
  return set;
}

FlowModel FlowModel::merge_lora(const LoraSet& lora) const {
  nn::ParamStore merged = params_;
  for (const std::string& name : lora.adapted_weights()) {
    auto it = merged.find(name);
    if (it == merged.end())
      throw std::invalid_argument("flow merge: no base weight named " + name);
    const Tensor& a = lora.params.at(name + ".lora_a");
    const Tensor& b = lora.params.at(name + ".lora_b");
    Tensor update = matmul(b, a);  // [n, m]
    if (update.shape != it->second.shape)
      throw std::invalid_argument("flow merge: adapter shape mismatch on " + name);
    for (std::int64_t i = 0; i < update.numel(); ++i)
      it->second.v[i] += lora.scale() * update.v[i];
  }
  return FlowModel(cfg_, std::move(merged));
}

double flow_loss(const FlowModel& model, const FlowBatch& batch,
                 const LoraSet* lora) {
  Tensor v = model.predict_velocity(batch.zt, batch.t, batch.cond, lora);
  if (!v.same_shape(batch.v_target))
    throw std::invalid_argument("flow loss: velocity shape mismatch");
  double s = 0.0;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    const double d = v.v[i] - batch.v_target.v[i];
    s += d * d;
  }
  return s / static_cast<double>(v.numel());
}

Tensor euler_integrate(Tensor z0, int steps,
                       const std::function<Tensor(const Tensor&, double)>& field) {
  if (steps < 1) throw std::invalid_argument("euler: need at least one step");
  Tensor z = std::move(z0);
  const double dt = 1.0 / static_cast<double>(steps);
  for (int k = 0; k < steps; ++k) {
    Tensor v = field(z, static_cast<double>(k) * dt);
    if (!v.same_shape(z))
      throw std::invalid_argument("euler: field output shape mismatch");
    for (std::int64_t i = 0; i < z.numel(); ++i) z.v[i] += dt * v.v[i];
  }
  return z;
}

Tensor sample_edit(const FlowModel& model, const FlowCondition& cond, int steps,
                   const LoraSet* lora) {
  if (cond.cond_tokens.numel() == 0)
    throw std::invalid_argument("sample_edit: condition latent required");
  return euler_integrate(cond.cond_tokens, steps,
                         [&](const Tensor& z, double t) {
                           return model.predict_velocity(z, t, cond, lora);
                         });
}

Tensor sample_generate(const FlowModel& model, Rng& rng,
                       const HierarchicalPrompt& prompt, int grid, int steps,
                       const LoraSet* lora) {
  FlowCondition cond;
  cond.prompt = embed_prompt(prompt);
  cond.task = FlowTask::t2psd;
  cond.target_grid = grid;
  Tensor z0 = Tensor::randn(
      {static_cast<std::int64_t>(grid) * grid, model.config().latent_channels},
      rng, 1.0);
  return euler_integrate(std::move(z0), steps, [&](const Tensor& z, double t) {
    return model.predict_velocity(z, t, cond, lora);
  });
}

FlowTrainResult train_flow(FlowModel& model, LoraSet* adapters,
                           const std::vector<FlowSample>& dataset,
                           const FlowTrainOptions& opts) {
  if (dataset.empty()) throw std::invalid_argument("train_flow: empty dataset");
  if (opts.steps < 0 || opts.batch_size < 1)
    throw std::invalid_argument("train_flow: bad step or batch settings");
  Rng root(opts.seed);
  nn::Adam::Options adam_opts;
  adam_opts.lr = opts.lr;
  nn::Adam adam(adam_opts);
  FlowTrainResult result;
  result.curve.reserve(static_cast<std::size_t>(opts.steps));
  const int n = static_cast<int>(dataset.size());
  const bool base_trainable = adapters == nullptr;

  for (int step = 0; step < opts.steps; ++step) {
    const auto s64 = static_cast<std::uint64_t>(step);
    Rng pick = root.derive("batch").derive(s64);
    Rng trng = root.derive("t").derive(s64);
    Rng nrng = root.derive("noise").derive(s64);

    ad::Tape tape;
    nn::BoundParams base = nn::bind(tape, model.params(), base_trainable);
    nn::BoundParams lora_bound;
    if (adapters != nullptr) lora_bound = nn::bind(tape, adapters->params, true);

    ad::Value total;
    for (int b = 0; b < opts.batch_size; ++b) {
      const FlowSample& s =
          dataset[static_cast<std::size_t>(pick.uniform_int(0, n - 1))];
      Tensor z0 = s.z0.numel() == 0 ? Tensor::randn(s.z1.shape, nrng, 1.0) : s.z0;
      const double t = trng.uniform();
      auto [zt, vt] = interpolate(z0, s.z1, t);
      ad::Value v = model.predict_velocity_on_tape(
          tape, base, tape.leaf(zt), t, s.cond, adapters,
          adapters != nullptr ? &lora_bound : nullptr);
      ad::Value li = tape.mean_all(tape.square(tape.sub(v, tape.leaf(vt))));
      total = total.valid() ? tape.add(total, li) : li;
    }
    total = tape.scale(total, 1.0 / static_cast<double>(opts.batch_size));
    const double loss = tape.val(total).item();
    if (!std::isfinite(loss)) {
      throw std::runtime_error("train_flow: non-finite loss at step " +
                               std::to_string(step));
    }
    tape.backward(total);
    if (adapters != nullptr) {
      adam.step(adapters->params, lora_bound, tape);
    } else {
      adam.step(model.mutable_params(), base, tape);
    }
    result.curve.push_back(loss);
  }
  return result;
}

void FlowModel::save(const std::filesystem::path& path) const {
  json meta;
  meta["kind"] = "flow_transformer";
  meta["latent_channels"] = cfg_.latent_channels;
  meta["d_model"] = cfg_.d_model;
  meta["n_heads"] = cfg_.n_heads;
  meta["n_blocks"] = cfg_.n_blocks;
  meta["mlp_mult"] = cfg_.mlp_mult;
  meta["lora_rank"] = cfg_.lora_rank;
  meta["lora_alpha"] = cfg_.lora_alpha;
  nn::Checkpoint ckpt;
  ckpt.meta_json = meta.dump();
  ckpt.params = params_;
  nn::save_checkpoint(path, ckpt);
}

FlowModel FlowModel::load(const std::filesystem::path& path) {
  nn::Checkpoint ckpt = nn::load_checkpoint(path);
  try {
    json meta = json::parse(ckpt.meta_json);
    if (meta.at("kind").get<std::string>() != "flow_transformer")
      throw std::runtime_error("not a flow_transformer checkpoint");
    FlowConfig cfg;
    cfg.latent_channels = meta.at("latent_channels").get<int>();
    cfg.d_model = meta.at("d_model").get<int>();
    cfg.n_heads = meta.at("n_heads").get<int>();
    cfg.n_blocks = meta.at("n_blocks").get<int>();
    cfg.mlp_mult = meta.at("mlp_mult").get<int>();
    cfg.lora_rank = meta.at("lora_rank").get<int>();
    cfg.lora_alpha = meta.at("lora_alpha").get<double>();
    return FlowModel(cfg, std::move(ckpt.params));
  } catch (const json::exception& e) {
    throw std::runtime_error("flow load: bad checkpoint metadata: " +
                             std::string(e.what()));
  }
}

void save_lora(const std::filesystem::path& path, const LoraSet& lora,
               FlowTask task) {
  json meta;
  meta["kind"] = "lora_adapter";
  meta["task"] = to_string(task);
  meta["rank"] = lora.rank;
  meta["alpha"] = lora.alpha;
  nn::Checkpoint ckpt;
  ckpt.meta_json = meta.dump();
  ckpt.params = lora.params;
  nn::save_checkpoint(path, ckpt);
}

std::pair<LoraSet, FlowTask> load_lora(const std::filesystem::path& path) {
  nn::Checkpoint ckpt = nn::load_checkpoint(path);
  try {
    json meta = json::parse(ckpt.meta_json);
    if (meta.at("kind").get<std::string>() != "lora_adapter")
      throw std::runtime_error("not a lora_adapter checkpoint");
    LoraSet set;
    set.rank = meta.at("rank").get<int>();
    set.alpha = meta.at("alpha").get<double>();
    set.params = std::move(ckpt.params);
    return {std::move(set), flow_task_from_string(meta.at("task").get<std::string>())};
  } catch (const json::exception& e) {
    throw std::runtime_error("lora load: bad checkpoint metadata: " +
                             std::string(e.what()));
  }
}

Tensor latent_to_tokens(const LatentPair& lat, double latent_scale) {
  if (!(latent_scale > 0.0))
    throw std::invalid_argument("latent_to_tokens: scale must be positive");
  const std::int64_t cr = lat.z_rgb.dim(0);
  const std::int64_t ca = lat.z_a.dim(0);
  const std::int64_t g = lat.z_rgb.dim(1);
  if (lat.z_rgb.dim(2) != g || lat.z_a.dim(1) != g || lat.z_a.dim(2) != g)
    throw std::invalid_argument("latent_to_tokens: latent grids disagree");
  Tensor out({g * g, cr + ca});
  for (std::int64_t y = 0; y < g; ++y) {
    for (std::int64_t x = 0; x < g; ++x) {
      const std::int64_t row = y * g + x;
      for (std::int64_t c = 0; c < cr; ++c)
        out.v[row * (cr + ca) + c] = lat.z_rgb.v[(c * g + y) * g + x] / latent_scale;
      for (std::int64_t c = 0; c < ca; ++c)
        out.v[row * (cr + ca) + cr + c] =
            lat.z_a.v[(c * g + y) * g + x] / latent_scale;
    }
  }
  return out;
}

std::pair<Tensor, Tensor> tokens_to_latent(const Tensor& tokens,
                                           int channels_rgb, int channels_a,
                                           double latent_scale) {
  if (!(latent_scale > 0.0))
    throw std::invalid_argument("tokens_to_latent: scale must be positive");
  if (tokens.ndim() != 2 || tokens.dim(1) != channels_rgb + channels_a)
    throw std::invalid_argument("tokens_to_latent: token width mismatch");
  const std::int64_t n = tokens.dim(0);
  const auto g = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (g * g != n)
    throw std::invalid_argument("tokens_to_latent: token count is not a square");
  const std::int64_t cr = channels_rgb, ca = channels_a;
  Tensor z_rgb({cr, g, g});
  Tensor z_a({ca, g, g});
  for (std::int64_t y = 0; y < g; ++y) {
    for (std::int64_t x = 0; x < g; ++x) {
      const std::int64_t row = y * g + x;
      for (std::int64_t c = 0; c < cr; ++c)
        z_rgb.v[(c * g + y) * g + x] = tokens.v[row * (cr + ca) + c] * latent_scale;
      for (std::int64_t c = 0; c < ca; ++c)
        z_a.v[(c * g + y) * g + x] =
            tokens.v[row * (cr + ca) + cr + c] * latent_scale;
    }
  }
  return {std::move(z_rgb), std::move(z_a)};
}

Tensor mask_to_tokens(const RgbaImage& mask, int grid) {
  if (grid < 1 || mask.width != mask.height || mask.width % grid != 0)
    throw std::invalid_argument("mask_to_tokens: mask size must be a multiple of the grid");
  const int cell = mask.width / grid;
  Tensor out({static_cast<std::int64_t>(grid) * grid, 1});
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      double acc = 0.0;
      for (int y = 0; y < cell; ++y) {
        for (int x = 0; x < cell; ++x) {
          acc += mask.at(gx * cell + x, gy * cell + y)[3];
        }
      }
      out.v[gy * grid + gx] = acc / static_cast<double>(cell * cell);
    }
  }
  return out;
}

}  // namespace layercake
