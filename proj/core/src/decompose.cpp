#include "layercake/decompose.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace layercake {
namespace {

bool images_equal(const RgbaImage& a, const RgbaImage& b, float tol) {
  if (!a.same_size(b)) return false;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    if (std::fabs(a.px[i] - b.px[i]) > tol) return false;
  }
  return true;
}

bool is_extract(TripletTask task) {
  return task == TripletTask::text_extract || task == TripletTask::fg_extract;
}

// Recorded samples are labeled with the extract task of their peel; the erase
// variant reads the same sample's background target.
TripletTask extract_family(TripletTask task) {
  switch (task) {
    case TripletTask::text_erase:
      return TripletTask::text_extract;
    case TripletTask::fg_erase:
      return TripletTask::fg_extract;
    default:
      return task;
  }
}

RgbaImage transparent_like(const RgbaImage& img) {
  return RgbaImage(img.width, img.height);  // zero-initialized pixels
}

RgbaImage ones_mask(int width, int height) {
  RgbaImage m(width, height);
  for (float& v : m.px) v = 1.0f;
  return m;
}

constexpr float kBboxAlpha = 0.05f;  // below this a pixel counts as empty

}  // namespace

OracleModelSet::OracleModelSet(std::vector<TripletSample> triplets)
    : triplets_(std::move(triplets)) {}

bool OracleModelSet::supports(TripletTask task) const {
  // Extractions always "work" (an unmatched one reports an empty layer), and
  // erasures are recorded alongside their extraction.
  (void)task;
  return true;
}

RgbaImage OracleModelSet::run(TripletTask task, const RgbaImage& input,
                              const RgbaImage& mask) {
  (void)mask;  // the recorded input identifies the triplet
  for (const TripletSample& t : triplets_) {
    if (t.task == extract_family(task) && images_equal(t.input, input, 1e-6f)) {
      return is_extract(task) ? t.fg_target : t.bg_target;
    }
  }
  if (is_extract(task)) return transparent_like(input);
  throw std::runtime_error("oracle models: no recorded triplet for task " +
                           to_string(task));
}

FlowModelSet::FlowModelSet(VaeModel vae, FlowModel flow,
                           std::map<FlowTask, LoraSet> adapters,
                           int sampler_steps)
    : vae_(std::move(vae)),
      flow_(std::move(flow)),
      adapters_(std::move(adapters)),
      sampler_steps_(sampler_steps) {
  if (sampler_steps_ < 1)
    throw std::invalid_argument("flow models: sampler steps must be >= 1");
}

bool FlowModelSet::supports(TripletTask task) const {
  return adapters_.count(flow_task_from_triplet(task)) > 0;
}

RgbaImage FlowModelSet::run(TripletTask task, const RgbaImage& input,
                            const RgbaImage& mask) {
  const FlowTask ftask = flow_task_from_triplet(task);
  auto it = adapters_.find(ftask);
  if (it == adapters_.end())
    throw std::runtime_error("flow models: no adapter for task " +
                             to_string(ftask));
  LatentPair lat = vae_.encode_mean(input);
  const int grid = vae_.config().latent_grid;

  FlowCondition cond;
  cond.cond_tokens = latent_to_tokens(lat, vae_.latent_scale());
  cond.mask_tokens = mask_to_tokens(mask, grid);
  cond.prompt = embed_prompt(HierarchicalPrompt{});  // no text at inference
  cond.task = ftask;
  cond.target_grid = grid;

  Tensor out = sample_edit(flow_, cond, sampler_steps_, &it->second);
  auto [z_rgb, z_a] =
      tokens_to_latent(out, vae_.config().channels_rgb,
                       vae_.config().channels_a, vae_.latent_scale());
  return vae_.decode_latents(z_rgb, z_a);
}

double mean_alpha(const RgbaImage& img) {
  if (img.pixel_count() == 0) return 0.0;
  double s = 0.0;
  for (int i = 0; i < img.pixel_count(); ++i) s += img.px[4 * i + 3];
  return s / static_cast<double>(img.pixel_count());
}

LayerDocument decompose(const RgbaImage& img, ModelSet& models,
                        const DecomposeOptions& opts) {
  if (opts.k_max < 1)
    throw std::invalid_argument("decompose: k_max must be >= 1");
  if (!(opts.stop_tau > 0.0 && opts.stop_tau < 1.0))
    throw std::invalid_argument("decompose: stop_tau must lie in (0, 1)");

  for (TripletTask task :
       {TripletTask::text_extract, TripletTask::text_erase,
        TripletTask::fg_extract, TripletTask::fg_erase}) {
    if (!models.supports(task))
      throw std::runtime_error("decompose: no model for task " + to_string(task));
  }

  DecompositionState state;
  state.current = img;
  const RgbaImage mask = ones_mask(img.width, img.height);

  auto record = [&](RgbaImage layer, LayerRole role, TripletTask task) {
    LayerRecord rec;
    rec.role = role;
    rec.bbox = tight_bbox(layer, kBboxAlpha);
    rec.image = std::move(layer);
    rec.visible = true;
    state.extracted.emplace_back(std::move(rec), task);
  };

  // One text round, then foreground rounds.
  RgbaImage text = models.run(TripletTask::text_extract, state.current, mask);
  if (mean_alpha(text) >= opts.stop_tau) {
    record(std::move(text), LayerRole::text, TripletTask::text_extract);
    state.current = models.run(TripletTask::text_erase, state.current, mask);
    state.iteration += 1;
  }
  for (int k = 0; k < opts.k_max; ++k) {
    RgbaImage fg = models.run(TripletTask::fg_extract, state.current, mask);
    if (mean_alpha(fg) < opts.stop_tau) break;
    record(std::move(fg), LayerRole::foreground, TripletTask::fg_extract);
    state.current = models.run(TripletTask::fg_erase, state.current, mask);
    state.iteration += 1;
  }

  // Assemble bottom-first: background, then layers in reverse peel order.
  LayerDocument doc;
  doc.width = img.width;
  doc.height = img.height;
  LayerRecord bg;
  bg.role = LayerRole::background;
  bg.bbox = tight_bbox(state.current, kBboxAlpha);
  bg.image = std::move(state.current);
  bg.z_order = 0;
  doc.layers.push_back(std::move(bg));
  for (auto it = state.extracted.rbegin(); it != state.extracted.rend(); ++it) {
    it->first.z_order = static_cast<int>(doc.layers.size());
    doc.layers.push_back(std::move(it->first));
  }

  std::vector<RgbaImage> stack;
  stack.reserve(doc.layers.size());
  for (const LayerRecord& l : doc.layers) stack.push_back(l.image);
  doc.composite = flatten(stack);
  doc.prompt.poster = "recovered poster";
  doc.prompt.foreground = "recovered foreground layer";
  doc.prompt.midground = "empty midground layer";
  doc.prompt.background = "recovered background";
  return doc;
}

double recompose_error(const LayerDocument& doc, const RgbaImage& original) {
  if (doc.width != original.width || doc.height != original.height)
    throw std::invalid_argument("recompose error: size mismatch");
  std::vector<RgbaImage> stack;
  for (const LayerRecord& l : doc.layers) {
    if (l.visible) stack.push_back(l.image);
  }
  RgbaImage flat = flatten(stack);
  RgbaImage a = composite_on_matte(flat, 1.0f, 1.0f, 1.0f);
  RgbaImage b = composite_on_matte(original, 1.0f, 1.0f, 1.0f);
  double s = 0.0;
  for (int i = 0; i < a.pixel_count(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double d = static_cast<double>(a.px[4 * i + c]) - b.px[4 * i + c];
      s += d * d;
    }
  }
  return s / (3.0 * static_cast<double>(a.pixel_count()));
}

namespace {

class PassthroughTextRecovery : public TextRecovery {
 public:
  std::string name() const override { return "passthrough"; }

  std::vector<TextSpan> recover(const LayerRecord& layer) override {
    if (tight_bbox(layer.image) == BBox{0, 0, 0, 0} &&
        mean_alpha(layer.image) == 0.0) {
      return {};
    }
    TextSpan span;
    span.content = "unknown";
    span.bbox = layer.bbox;
    span.font_id = "unknown";
    return {span};
  }
};

using RecoveryFactory = std::function<std::unique_ptr<TextRecovery>()>;

std::map<std::string, RecoveryFactory>& recovery_registry() {
  static std::map<std::string, RecoveryFactory> reg = [] {
    std::map<std::string, RecoveryFactory> r;
    r["passthrough"] = [] {
      return std::unique_ptr<TextRecovery>(new PassthroughTextRecovery());
    };
    return r;
  }();
  return reg;
}

}  // namespace

std::vector<TextSpan> recover_text(const LayerRecord& layer,
                                   TextRecovery& engine) {
  if (layer.role != LayerRole::text)
    throw std::invalid_argument("recover_text: layer role is " +
                                to_string(layer.role) + ", expected text");
  std::vector<TextSpan> spans;
  try {
    spans = engine.recover(layer);
  } catch (const std::exception& e) {
    throw std::runtime_error("text recovery engine '" + engine.name() +
                             "' failed: " + e.what());
  }
  for (const TextSpan& s : spans) {
    if (s.bbox.x < 0 || s.bbox.y < 0 || s.bbox.w < 0 || s.bbox.h < 0 ||
        s.bbox.x + s.bbox.w > layer.image.width ||
        s.bbox.y + s.bbox.h > layer.image.height) {
      throw std::runtime_error("text recovery engine '" + engine.name() +
                               "' returned an out-of-bounds span");
    }
  }
  return spans;
}

std::unique_ptr<TextRecovery> make_text_recovery(const std::string& name) {
  auto& reg = recovery_registry();
  auto it = reg.find(name);
  if (it == reg.end()) {
    std::string known;
    for (const auto& [n, f] : reg) {
      if (!known.empty()) known += ", ";
      known += n;
    }
    throw std::invalid_argument("unknown text recovery engine '" + name +
                                "' (known: " + known + ")");
  }
  return it->second();
}

void register_text_recovery(const std::string& name, RecoveryFactory factory) {
  recovery_registry()[name] = std::move(factory);
}

std::vector<std::string> text_recovery_engine_names() {
  std::vector<std::string> names;
  for (const auto& [n, f] : recovery_registry()) names.push_back(n);
  return names;
}

}  // namespace layercake
