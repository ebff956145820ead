#include "layercake/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "layercake/decompose.hpp"
#include "layercake/judge.hpp"
#include "layercake/png_io.hpp"
#include "layercake/rng.hpp"

namespace layercake {
namespace fs = std::filesystem;
namespace {

std::string zero_pad(int n, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%0*d", width, n);
  return buf;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << body;
}

std::vector<LayerDocument> load_documents(const fs::path& data_dir) {
  std::vector<LayerDocument> docs;
  for (const fs::path& dir : list_bundles(data_dir)) {
    docs.push_back(load_bundle(dir));
  }
  if (docs.empty())
    throw std::runtime_error("no bundles found under " + data_dir.string());
  return docs;
}

// Mask tensors ride in the alpha channel so the token bridge can pool them.
RgbaImage mask_image(const Tensor& mask) {
  if (mask.shape.size() != 2)
    throw std::invalid_argument("mask tensor must be [H,W]");
  RgbaImage img(static_cast<int>(mask.shape[1]), static_cast<int>(mask.shape[0]));
  for (int i = 0; i < img.pixel_count(); ++i) {
    img.px[4 * i + 3] = static_cast<float>(mask.v[static_cast<std::size_t>(i)]);
  }
  return img;
}

std::string vae_curve_csv(const std::vector<VaeLossBreakdown>& curve) {
  std::ostringstream os;
  os << "step,pixel,patch,perceptual,kl_rgb,kl_a,total\n";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const VaeLossBreakdown& b = curve[i];
    os << i << ',' << fmt_double(b.pixel) << ',' << fmt_double(b.patch) << ','
       << fmt_double(b.perceptual) << ',' << fmt_double(b.kl_rgb) << ','
       << fmt_double(b.kl_a) << ',' << fmt_double(b.total) << '\n';
  }
  return os.str();
}

std::string flow_curve_csv(const std::vector<double>& curve) {
  std::ostringstream os;
  os << "step,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    os << i << ',' << fmt_double(curve[i]) << '\n';
  }
  return os.str();
}

const std::vector<FlowTask>& edit_tasks() {
  static const std::vector<FlowTask> tasks = {
      FlowTask::text_extract, FlowTask::text_erase, FlowTask::fg_extract,
      FlowTask::fg_erase};
  return tasks;
}

FlowModelSet load_model_set(const RunConfig& cfg, const fs::path& models_dir) {
  VaeModel vae = VaeModel::load(models_dir / "vae.ckpt");
  FlowModel flow = FlowModel::load(models_dir / "flow.ckpt");
  std::map<FlowTask, LoraSet> adapters;
  for (FlowTask t : edit_tasks()) {
    const fs::path path = models_dir / ("lora_" + to_string(t) + ".ckpt");
    auto [lora, stored_task] = load_lora(path);
    if (stored_task != t)
      throw std::runtime_error("adapter checkpoint " + path.string() +
                               " holds task " + to_string(stored_task));
    adapters.emplace(t, std::move(lora));
  }
  return FlowModelSet(std::move(vae), std::move(flow), std::move(adapters),
                      cfg.flow.sampler_steps);
}

}  // namespace

std::vector<fs::path> list_bundles(const fs::path& data_dir) {
  if (!fs::is_directory(data_dir))
    throw std::runtime_error("dataset directory missing: " + data_dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(data_dir)) {
    if (entry.is_directory() &&
        entry.path().filename().string().rfind("bundle_", 0) == 0) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<RgbaImage> vae_training_images(
    const std::vector<LayerDocument>& docs) {
  std::vector<RgbaImage> images;
  for (const LayerDocument& doc : docs) {
    for (const LayerRecord& layer : doc.layers) images.push_back(layer.image);
    images.push_back(doc.composite);
  }
  return images;
}

std::vector<FlowSample> edit_task_samples(const VaeModel& vae,
                                          const std::vector<LayerDocument>& docs,
                                          FlowTask task) {
  TripletTask family;
  bool want_extract;
  switch (task) {
    case FlowTask::text_extract:
      family = TripletTask::text_extract;
      want_extract = true;
      break;
    case FlowTask::text_erase:
      family = TripletTask::text_extract;
      want_extract = false;
      break;
    case FlowTask::fg_extract:
      family = TripletTask::fg_extract;
      want_extract = true;
      break;
    case FlowTask::fg_erase:
      family = TripletTask::fg_extract;
      want_extract = false;
      break;
    default:
      throw std::invalid_argument("edit_task_samples: not an edit task: " +
                                  to_string(task));
  }

  const int grid = vae.config().latent_grid;
  const double scale = vae.latent_scale();
  std::vector<FlowSample> samples;
  for (const LayerDocument& doc : docs) {
    for (const TripletSample& t : make_triplets(doc)) {
      if (t.task != family) continue;
      FlowSample s;
      s.cond.cond_tokens = latent_to_tokens(vae.encode_mean(t.input), scale);
      s.cond.mask_tokens = mask_to_tokens(mask_image(t.mask), grid);
      s.cond.prompt = embed_prompt(HierarchicalPrompt{});  // matches inference
      s.cond.task = task;
      s.cond.target_grid = grid;
      s.z0 = s.cond.cond_tokens;
      const RgbaImage& target = want_extract ? t.fg_target : t.bg_target;
      s.z1 = latent_to_tokens(vae.encode_mean(target), scale);
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

std::vector<FlowSample> generation_samples(
    const VaeModel& vae, const std::vector<LayerDocument>& docs) {
  const int size = vae.config().image_size;
  const VaeModel grid_vae = vae.resized(2 * size);
  const int grid = grid_vae.config().latent_grid;
  const double scale = vae.latent_scale();
  std::vector<FlowSample> samples;
  for (const LayerDocument& doc : docs) {
    auto [grid_sample, prompt] = make_grid_sample(doc);
    FlowSample s;
    s.cond.prompt = embed_prompt(prompt);
    s.cond.task = FlowTask::t2psd;
    s.cond.target_grid = grid;
    // z0 left empty: fresh noise per visit.
    s.z1 = latent_to_tokens(grid_vae.encode_mean(grid_sample.grid), scale);
    samples.push_back(std::move(s));
  }
  return samples;
}

HierarchicalPrompt load_prompt_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open prompt file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("prompt file " + path.string() + ": " + e.what());
  }
  HierarchicalPrompt p;
  for (const char* key : {"poster", "foreground", "midground", "background"}) {
    if (!j.contains(key) || !j[key].is_string() ||
        j[key].get<std::string>().empty()) {
      throw std::runtime_error("prompt file " + path.string() +
                               ": missing non-empty field \"" + key + "\"");
    }
  }
  p.poster = j["poster"];
  p.foreground = j["foreground"];
  p.midground = j["midground"];
  p.background = j["background"];
  return p;
}

SynthDataResult cmd_synth_data(const RunConfig& cfg, const fs::path& out_root) {
  SynthDataResult result;
  result.dir = out_root / cfg.dataset.out_dir;
  fs::create_directories(result.dir);
  const Rng stream = Rng(cfg.seed).derive("dataset");
  for (int i = 0; i < cfg.dataset.count; ++i) {
    const std::uint64_t doc_seed =
        stream.derive(static_cast<std::uint64_t>(i)).seed();
    LayerDocument doc = synth_poster(doc_seed, cfg.image_size);
    save_bundle(doc, result.dir / ("bundle_" + zero_pad(i, 3)));
    ++result.count;
  }
  return result;
}

TrainVaeResult cmd_train_vae(const RunConfig& cfg, const fs::path& data_dir,
                             const fs::path& out_root) {
  const std::vector<RgbaImage> images =
      vae_training_images(load_documents(data_dir));
  fs::create_directories(out_root);

  VaeModel model(cfg.vae_config(), Rng(cfg.seed).derive("vae_init").seed());
  VaeTrainOptions opts;
  opts.steps = cfg.vae.steps;
  opts.batch_size = cfg.vae.batch_size;
  opts.lr = cfg.vae.lr;
  opts.seed = Rng(cfg.seed).derive("vae_train").seed();
  const VaeTrainResult train = train_vae(model, images, opts);

  TrainVaeResult result;
  result.checkpoint = out_root / "vae.ckpt";
  result.curve_csv = out_root / "vae_curve.csv";
  model.save(result.checkpoint);
  write_text(result.curve_csv, vae_curve_csv(train.curve));
  result.first = train.curve.front();
  result.last = train.curve.back();
  return result;
}

TrainFlowResult cmd_train_flow(const RunConfig& cfg, const fs::path& data_dir,
                               const fs::path& vae_checkpoint,
                               const fs::path& out_root,
                               const std::string& task) {
  const std::vector<LayerDocument> docs = load_documents(data_dir);
  const VaeModel vae = VaeModel::load(vae_checkpoint);
  fs::create_directories(out_root);
  TrainFlowResult result;

  const bool do_base = task.empty() || task == "base";
  std::vector<FlowTask> adapter_list;
  if (task.empty()) {
    adapter_list = cfg.flow.adapter_tasks;
  } else if (task != "base") {
    adapter_list = {flow_task_from_string(task)};
  }
  for (FlowTask t : adapter_list) {
    if (t == FlowTask::t2psd)
      throw std::runtime_error(
          "train-flow: t2psd is the base model's task, not an adapter");
  }

  FlowModel model = do_base
                        ? FlowModel(cfg.flow_config(),
                                    Rng(cfg.seed).derive("flow_init").seed())
                        : FlowModel::load(out_root / "flow.ckpt");
  if (do_base) {
    const std::vector<FlowSample> samples = generation_samples(vae, docs);
    if (samples.empty())
      throw std::runtime_error("train-flow: dataset yields no grid samples");
    FlowTrainOptions opts;
    opts.steps = cfg.flow.steps;
    opts.batch_size = cfg.flow.batch_size;
    opts.lr = cfg.flow.lr;
    opts.seed = Rng(cfg.seed).derive("flow_train").derive("base").seed();
    const FlowTrainResult train = train_flow(model, nullptr, samples, opts);
    result.base_checkpoint = out_root / "flow.ckpt";
    model.save(result.base_checkpoint);
    write_text(out_root / "flow_base_curve.csv", flow_curve_csv(train.curve));
    result.loss_endpoints["base"] = {train.curve.front(), train.curve.back()};
  }

  for (FlowTask t : adapter_list) {
    const std::string name = to_string(t);
    const std::vector<FlowSample> samples = edit_task_samples(vae, docs, t);
    if (samples.empty())
      throw std::runtime_error("train-flow: dataset yields no samples for task " +
                               name);
    LoraSet lora =
        model.make_lora_set(Rng(cfg.seed).derive("lora_init").derive(name).seed());
    FlowTrainOptions opts;
    opts.steps = cfg.flow.steps;
    opts.batch_size = cfg.flow.batch_size;
    opts.lr = cfg.flow.lr;
    opts.seed = Rng(cfg.seed).derive("flow_train").derive(name).seed();
    const FlowTrainResult train = train_flow(model, &lora, samples, opts);
    const fs::path path = out_root / ("lora_" + name + ".ckpt");
    save_lora(path, lora, t);
    write_text(out_root / ("flow_lora_" + name + "_curve.csv"),
               flow_curve_csv(train.curve));
    result.adapter_checkpoints[t] = path;
    result.loss_endpoints[name] = {train.curve.front(), train.curve.back()};
  }
  return result;
}

DecomposeResult cmd_decompose(const RunConfig& cfg, const fs::path& input_png,
                              const fs::path& models_dir,
                              const fs::path& out_bundle,
                              const fs::path& oracle_bundle) {
  const RgbaImage input = read_png(input_png);
  DecomposeOptions opts;
  opts.k_max = cfg.decompose.k_max;
  opts.stop_tau = cfg.decompose.stop_tau;

  LayerDocument doc;
  if (!oracle_bundle.empty()) {
    const LayerDocument truth = load_bundle(oracle_bundle);
    // Replay in the bundle's own domain: the recorded peel inputs are
    // flattens of the stored (8-bit) layers, which the PNG round trip of the
    // caller's composite matches only approximately. Peeling the stored
    // flatten keeps every lookup bit-exact; the caller's image is restored
    // as the composite afterwards.
    std::vector<RgbaImage> stack;
    for (const LayerRecord& l : truth.layers) {
      if (l.visible) stack.push_back(l.image);
    }
    const RgbaImage replay_input = flatten(stack);
    float input_dev = 0.0f;
    if (!input.same_size(replay_input))
      throw std::runtime_error("decompose: oracle bundle size differs from input");
    for (std::size_t i = 0; i < input.px.size(); ++i) {
      input_dev = std::max(input_dev, std::fabs(input.px[i] - replay_input.px[i]));
    }
    if (input_dev > 0.02f)  // the bundle format's quantization tolerance
      throw std::runtime_error(
          "decompose: oracle bundle does not depict the input image");
    OracleModelSet oracle(make_triplets(truth));
    doc = decompose(replay_input, oracle, opts);
    doc.composite = input;
  } else {
    FlowModelSet models = load_model_set(cfg, models_dir);
    doc = decompose(input, models, opts);
  }

  DecomposeResult result;
  result.bundle_dir = out_bundle;
  result.recompose_mse = recompose_error(doc, input);
  result.layer_count = static_cast<int>(doc.layers.size());
  save_bundle(doc, out_bundle);
  nlohmann::ordered_json j;
  j["recompose_error"] = result.recompose_mse;
  j["layer_count"] = result.layer_count;
  write_text(out_bundle / "recompose.json", j.dump(2) + "\n");
  return result;
}

GenerateResult cmd_generate(const RunConfig& cfg, const fs::path& prompt_json,
                            const fs::path& models_dir,
                            const fs::path& out_bundle) {
  const HierarchicalPrompt prompt = load_prompt_json(prompt_json);
  const VaeModel vae = VaeModel::load(models_dir / "vae.ckpt");
  const FlowModel flow = FlowModel::load(models_dir / "flow.ckpt");

  const VaeModel grid_vae = vae.resized(2 * vae.config().image_size);
  const int grid = grid_vae.config().latent_grid;
  Rng rng = Rng(cfg.seed).derive("generate");
  const Tensor tokens =
      sample_generate(flow, rng, prompt, grid, cfg.flow.sampler_steps);
  const auto [z_rgb, z_a] =
      tokens_to_latent(tokens, vae.config().channels_rgb,
                       vae.config().channels_a, vae.latent_scale());
  const RgbaImage grid_img = grid_vae.decode_latents(z_rgb, z_a);
  const std::array<RgbaImage, 4> quads = split_grid(grid_img);

  // Stack bottom-first: background, second layer, top layer. The composite
  // quadrant itself is advisory; the bundle's composite is re-flattened from
  // the decoded layers so the document is self-consistent.
  LayerDocument doc;
  doc.width = quads[0].width;
  doc.height = quads[0].height;
  const std::array<std::pair<GridRole, LayerRole>, 3> stack = {
      std::make_pair(GridRole::background, LayerRole::background),
      std::make_pair(GridRole::layer_b, LayerRole::midground),
      std::make_pair(GridRole::layer_a, LayerRole::foreground)};
  for (std::size_t i = 0; i < stack.size(); ++i) {
    LayerRecord rec;
    rec.role = stack[i].second;
    rec.image = quads[static_cast<std::size_t>(stack[i].first)];
    if (rec.role == LayerRole::background) {
      // The bottom of the stack must be opaque to anchor compositing.
      for (int p = 0; p < rec.image.pixel_count(); ++p)
        rec.image.px[4 * p + 3] = 1.0f;
    }
    rec.bbox = tight_bbox(rec.image);
    rec.z_order = static_cast<int>(i);
    doc.layers.push_back(std::move(rec));
  }
  std::vector<RgbaImage> images;
  for (const LayerRecord& l : doc.layers) images.push_back(l.image);
  doc.composite = flatten(images);
  doc.prompt = prompt;
  validate_document(doc);

  save_bundle(doc, out_bundle);
  GenerateResult result;
  result.bundle_dir = out_bundle;
  result.layer_count = static_cast<int>(doc.layers.size());
  return result;
}

EvalResult cmd_eval(const RunConfig& cfg, const fs::path& pred_dir,
                    const fs::path& ref_dir, const fs::path& out_root) {
  const std::vector<fs::path> pred_bundles = list_bundles(pred_dir);
  if (pred_bundles.empty())
    throw std::runtime_error("eval: no bundles under " + pred_dir.string());

  std::vector<std::string> ids;
  std::vector<RgbaImage> outputs, references;
  for (const fs::path& bundle : pred_bundles) {
    const std::string name = bundle.filename().string();
    const fs::path ref_bundle = ref_dir / name;
    if (!fs::is_directory(ref_bundle))
      throw std::runtime_error("eval: reference bundle missing: " +
                               ref_bundle.string());
    ids.push_back(name);
    outputs.push_back(load_bundle(bundle).composite);
    references.push_back(load_bundle(ref_bundle).composite);
  }

  MetricReport report =
      make_metric_report(ids, outputs, references, cfg.eval_mattes());
  report.fid = desk_fid(outputs, references);

  const std::string endpoint_override = judge_endpoint_override();
  std::unique_ptr<JudgeClient> client;
  if (!endpoint_override.empty()) {
    client = std::make_unique<HttpJudgeClient>(endpoint_override);
  } else if (!cfg.eval.judge_fixture_dir.empty()) {
    client = std::make_unique<FixtureJudgeClient>(cfg.eval.judge_fixture_dir);
  } else if (!cfg.eval.judge_endpoint.empty()) {
    client = std::make_unique<HttpJudgeClient>(cfg.eval.judge_endpoint);
  }
  if (client) {
    std::vector<JudgeCase> cases;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      JudgeCase c;
      c.id = ids[i];
      c.method_names = {"pred", "ref"};
      c.renders = {outputs[i], references[i]};
      cases.push_back(std::move(c));
    }
    const JudgeOutcome outcome = judge_score(cases, *client);
    report.judge = outcome.scores;
    report.judge_errors = outcome.errors;
  }

  fs::create_directories(out_root);
  EvalResult result;
  result.report_json = out_root / "report.json";
  result.report_csv = out_root / "report.csv";
  write_text(result.report_json, report_to_json(report));
  write_text(result.report_csv, report_to_csv(report));
  result.report = std::move(report);
  return result;
}

PreviewResult cmd_preview(const fs::path& bundle_dir, const fs::path& out_dir) {
  const LayerDocument doc = load_bundle(bundle_dir);
  fs::create_directories(out_dir);
  PreviewResult result;
  result.dir = out_dir;
  for (std::size_t i = 0; i < doc.layers.size(); ++i) {
    write_png(out_dir / ("layer_" + zero_pad(static_cast<int>(i), 2) +
                         "_preview.png"),
              checkerboard_preview(doc.layers[i].image));
    ++result.sheets;
  }
  write_png(out_dir / "composite_preview.png",
            checkerboard_preview(doc.composite));
  ++result.sheets;
  return result;
}

}  // namespace layercake
