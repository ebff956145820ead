#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "layercake/bundle.hpp"
#include "layercake/commands.hpp"
#include "layercake/config.hpp"
#include "layercake/decompose.hpp"
#include "layercake/flow.hpp"
#include "layercake/png_io.hpp"
#include "layercake/rng.hpp"
#include "layercake/vae.hpp"

using namespace layercake;
namespace fs = std::filesystem;

namespace {

// A deliberately tiny run: seed 7 / count 4 is known to produce both text
// and foreground triplets, so every adapter has samples.
RunConfig tiny_config() {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.image_size = 16;
  cfg.dataset.count = 4;
  cfg.vae.hidden = 4;
  cfg.vae.steps = 6;
  cfg.vae.batch_size = 4;
  cfg.flow.d_model = 8;
  cfg.flow.n_heads = 2;
  cfg.flow.n_blocks = 1;
  cfg.flow.mlp_mult = 2;
  cfg.flow.lora_rank = 2;
  cfg.flow.lora_alpha = 2;
  cfg.flow.steps = 4;
  cfg.flow.batch_size = 2;
  cfg.flow.sampler_steps = 2;
  cfg.decompose.k_max = 2;
  return cfg;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "layercake_cmdtest" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const fs::path& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary);
  REQUIRE(os.good());
  os << body;
}

// Sorted relative paths of every regular file under root.
std::vector<std::string> file_listing(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) {
      out.push_back(fs::relative(entry.path(), root).generic_string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void check_trees_identical(const fs::path& a, const fs::path& b) {
  const auto la = file_listing(a);
  const auto lb = file_listing(b);
  REQUIRE(la == lb);
  for (const std::string& rel : la) {
    INFO("file ", rel);
    CHECK(read_bytes(a / rel) == read_bytes(b / rel));
  }
}

// A trained tiny model tree, built once and shared by read-only cases.
const fs::path& trained_tree() {
  static const fs::path root = [] {
    const fs::path dir = scratch("shared_tree");
    const RunConfig cfg = tiny_config();
    cmd_synth_data(cfg, dir);
    cmd_train_vae(cfg, dir / "data", dir);
    cmd_train_flow(cfg, dir / "data", dir / "vae.ckpt", dir);
    return dir;
  }();
  return root;
}

}  // namespace

TEST_CASE("synth-data writes loadable, deterministic bundles") {
  const RunConfig cfg = tiny_config();
  const fs::path root_a = scratch("synth_a");
  const SynthDataResult r = cmd_synth_data(cfg, root_a);
  CHECK(r.count == 4);
  CHECK(r.dir == root_a / "data");

  const auto bundles = list_bundles(r.dir);
  REQUIRE(bundles.size() == 4);
  CHECK(bundles.front().filename().string() == "bundle_000");
  CHECK(bundles.back().filename().string() == "bundle_003");
  for (const fs::path& b : bundles) {
    const LayerDocument doc = load_bundle(b);
    CHECK(doc.width == 16);
    CHECK(!doc.layers.empty());
  }

  // Document seeds fan out from the run seed, so trees are reproducible.
  const fs::path root_b = scratch("synth_b");
  cmd_synth_data(cfg, root_b);
  check_trees_identical(root_a, root_b);

  CHECK_THROWS_AS(list_bundles(root_a / "nope"), std::runtime_error);
}

TEST_CASE("vae_training_images collects layers bottom-up plus composite") {
  std::vector<LayerDocument> docs = {synth_poster(1, 16), synth_poster(2, 16)};
  const auto images = vae_training_images(docs);
  CHECK(images.size() == docs[0].layers.size() + docs[1].layers.size() + 2);
  // First images are doc 0's layers in z order, then its composite.
  const std::size_t n0 = docs[0].layers.size();
  for (std::size_t i = 0; i < n0; ++i) {
    CHECK(images[i].px == docs[0].layers[i].image.px);
  }
  CHECK(images[n0].px == docs[0].composite.px);
}

TEST_CASE("edit_task_samples mirrors triplet families and inference inputs") {
  std::vector<LayerDocument> docs;
  for (std::uint64_t s = 1; s <= 6; ++s) docs.push_back(synth_poster(s, 16));
  std::size_t text_triplets = 0, fg_triplets = 0;
  for (const auto& doc : docs) {
    for (const auto& t : make_triplets(doc)) {
      (t.task == TripletTask::text_extract ? text_triplets : fg_triplets) += 1;
    }
  }
  REQUIRE(fg_triplets > 0);

  VaeConfig vc;
  vc.image_size = 16;
  vc.latent_grid = 4;
  vc.hidden = 4;
  const VaeModel vae(vc, 3);

  const auto fg_extract = edit_task_samples(vae, docs, FlowTask::fg_extract);
  const auto fg_erase = edit_task_samples(vae, docs, FlowTask::fg_erase);
  const auto text_extract = edit_task_samples(vae, docs, FlowTask::text_extract);
  CHECK(fg_extract.size() == fg_triplets);
  CHECK(fg_erase.size() == fg_triplets);
  CHECK(text_extract.size() == text_triplets);

  REQUIRE(!fg_extract.empty());
  const FlowSample& s = fg_extract.front();
  CHECK(s.cond.task == FlowTask::fg_extract);
  CHECK(s.cond.target_grid == 4);
  // Edit flows start at the condition latent.
  CHECK(s.z0.v == s.cond.cond_tokens.v);
  CHECK(s.cond.cond_tokens.shape == std::vector<std::int64_t>{16, 6});
  CHECK(s.cond.mask_tokens.shape == std::vector<std::int64_t>{16, 1});
  // Edit samples carry an empty prompt, matching what inference can supply.
  const PromptEmbedding empty = embed_prompt(HierarchicalPrompt{});
  CHECK(s.cond.prompt.field_ids == empty.field_ids);

  // Extraction and erasure share inputs but regress different targets.
  CHECK(fg_erase.front().z0.v == s.z0.v);
  CHECK(fg_erase.front().z1.v != s.z1.v);

  CHECK_THROWS_AS(edit_task_samples(vae, docs, FlowTask::t2psd),
                  std::invalid_argument);
}

TEST_CASE("generation_samples target the 2x2 grid latent") {
  std::vector<LayerDocument> docs = {synth_poster(1, 16), synth_poster(4, 16)};
  VaeConfig vc;
  vc.image_size = 16;
  vc.latent_grid = 4;
  vc.hidden = 4;
  const VaeModel vae(vc, 3);

  const auto samples = generation_samples(vae, docs);
  REQUIRE(samples.size() == 2);
  for (const FlowSample& s : samples) {
    CHECK(s.cond.task == FlowTask::t2psd);
    CHECK(s.cond.target_grid == 8);  // grid poster is 32x32 -> 8x8 latent
    CHECK(s.z0.v.empty());           // fresh noise per visit
    CHECK(s.cond.cond_tokens.v.empty());
    CHECK(s.z1.shape == std::vector<std::int64_t>{64, 6});
    CHECK(!s.cond.prompt.field_ids[0].empty());
  }
}

TEST_CASE("load_prompt_json validates all four fields") {
  const fs::path dir = scratch("prompts");
  const fs::path good = dir / "good.json";
  write_text_file(good, R"({"poster": "a poster", "foreground": "a dot",)"
                        R"( "midground": "empty", "background": "blue"})");
  const HierarchicalPrompt p = load_prompt_json(good);
  CHECK(p.poster == "a poster");
  CHECK(p.background == "blue");

  const fs::path missing = dir / "missing.json";
  write_text_file(missing, R"({"poster": "x", "foreground": "y", "midground": "z"})");
  CHECK_THROWS_WITH_AS(load_prompt_json(missing),
                       doctest::Contains("background"), std::runtime_error);

  const fs::path empty_field = dir / "empty.json";
  write_text_file(empty_field, R"({"poster": "", "foreground": "y",)"
                               R"( "midground": "z", "background": "w"})");
  CHECK_THROWS_WITH_AS(load_prompt_json(empty_field),
                       doctest::Contains("poster"), std::runtime_error);

  const fs::path bad = dir / "bad.json";
  write_text_file(bad, "{nope");
  CHECK_THROWS_AS(load_prompt_json(bad), std::runtime_error);
  CHECK_THROWS_AS(load_prompt_json(dir / "absent.json"), std::runtime_error);
}

TEST_CASE("train-vae writes a loadable checkpoint and a loss curve") {
  const RunConfig cfg = tiny_config();
  const fs::path root = scratch("train_vae");
  cmd_synth_data(cfg, root);
  const TrainVaeResult r = cmd_train_vae(cfg, root / "data", root);

  CHECK(fs::exists(r.checkpoint));
  const VaeModel restored = VaeModel::load(r.checkpoint);
  CHECK(restored.config().image_size == 16);
  CHECK(restored.config().hidden == 4);
  CHECK(restored.latent_scale() > 0.0);

  const std::string csv = read_bytes(r.curve_csv);
  CHECK(csv.rfind("step,pixel,patch,perceptual,kl_rgb,kl_a,total\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == cfg.vae.steps + 1);
  CHECK(r.first.total > 0.0);
  CHECK(r.last.total > 0.0);

  // Byte-level determinism of checkpoint and curve.
  const fs::path root2 = scratch("train_vae_2");
  cmd_synth_data(cfg, root2);
  const TrainVaeResult r2 = cmd_train_vae(cfg, root2 / "data", root2);
  CHECK(read_bytes(r.checkpoint) == read_bytes(r2.checkpoint));
  CHECK(read_bytes(r.curve_csv) == read_bytes(r2.curve_csv));
}

TEST_CASE("train-flow trains base and adapters with task selection") {
  const RunConfig cfg = tiny_config();
  const fs::path& tree = trained_tree();

  // The shared tree was built with task "": base plus all four adapters.
  CHECK(fs::exists(tree / "flow.ckpt"));
  CHECK(fs::exists(tree / "flow_base_curve.csv"));
  for (const char* name : {"text_extract", "text_erase", "fg_extract", "fg_erase"}) {
    CHECK(fs::exists(tree / ("lora_" + std::string(name) + ".ckpt")));
    CHECK(fs::exists(tree / ("flow_lora_" + std::string(name) + "_curve.csv")));
  }
  const std::string base_csv = read_bytes(tree / "flow_base_curve.csv");
  CHECK(base_csv.rfind("step,loss\n", 0) == 0);
  CHECK(std::count(base_csv.begin(), base_csv.end(), '\n') == cfg.flow.steps + 1);

  // Adapter checkpoints restore with the task they were trained for.
  const auto [lora, task] = load_lora(tree / "lora_fg_erase.ckpt");
  CHECK(task == FlowTask::fg_erase);
  CHECK(!lora.adapted_weights().empty());

  // task "base": only the base model.
  const fs::path base_only = scratch("flow_base_only");
  const TrainFlowResult rb =
      cmd_train_flow(cfg, tree / "data", tree / "vae.ckpt", base_only, "base");
  CHECK(fs::exists(rb.base_checkpoint));
  CHECK(rb.adapter_checkpoints.empty());
  CHECK(rb.loss_endpoints.size() == 1);
  CHECK(rb.loss_endpoints.count("base") == 1);

  // A single adapter task reuses the base checkpoint already in out_root.
  const TrainFlowResult ra = cmd_train_flow(cfg, tree / "data", tree / "vae.ckpt",
                                            base_only, "fg_extract");
  CHECK(ra.base_checkpoint.empty());
  CHECK(ra.adapter_checkpoints.size() == 1);
  CHECK(fs::exists(ra.adapter_checkpoints.at(FlowTask::fg_extract)));

  // t2psd is the base task; asking for it as an adapter is an error.
  CHECK_THROWS_WITH_AS(cmd_train_flow(cfg, tree / "data", tree / "vae.ckpt",
                                      base_only, "t2psd"),
                       doctest::Contains("not an adapter"), std::runtime_error);

  // A corpus with no text layers cannot train a text adapter.
  RunConfig no_text = cfg;
  no_text.seed = 123;
  const fs::path nt = scratch("flow_no_text");
  cmd_synth_data(no_text, nt);
  cmd_train_flow(no_text, nt / "data", tree / "vae.ckpt", nt, "base");
  CHECK_THROWS_WITH_AS(cmd_train_flow(no_text, nt / "data", tree / "vae.ckpt",
                                      nt, "text_extract"),
                       doctest::Contains("no samples for task text_extract"),
                       std::runtime_error);
}

TEST_CASE("decompose oracle mode reconstructs ground truth") {
  const RunConfig cfg = tiny_config();
  const fs::path& tree = trained_tree();
  const fs::path bundle = tree / "data" / "bundle_000";
  const fs::path out = scratch("decomp_oracle") / "bundle_000";

  const DecomposeResult r = cmd_decompose(cfg, bundle / "composite.png",
                                          /*models_dir=*/{}, out, bundle);
  // The peels replay bit-exactly in the stored-layer domain; the leftover
  // error is the PNG quantization gap between that domain and the caller's
  // composite.
  CHECK(r.recompose_mse < 2e-5);
  const LayerDocument truth = load_bundle(bundle);
  CHECK(r.layer_count == static_cast<int>(truth.layers.size()));
  CHECK(read_bytes(out / "composite.png") ==
        read_bytes(bundle / "composite.png"));

  const LayerDocument doc = load_bundle(out);
  CHECK(static_cast<int>(doc.layers.size()) == r.layer_count);
  for (std::size_t i = 0; i < doc.layers.size(); ++i) {
    CHECK(doc.layers[i].image.px == truth.layers[i].image.px);
  }

  // An unrelated poster is rejected instead of silently mis-peeled.
  CHECK_THROWS_WITH_AS(
      cmd_decompose(cfg, tree / "data" / "bundle_002" / "composite.png",
                    /*models_dir=*/{}, scratch("decomp_mismatch") / "b", bundle),
      doctest::Contains("does not depict"), std::runtime_error);

  const nlohmann::json j = nlohmann::json::parse(read_bytes(out / "recompose.json"));
  CHECK(j.at("recompose_error").get<double>() == doctest::Approx(r.recompose_mse));
  CHECK(j.at("layer_count").get<int>() == r.layer_count);
}

TEST_CASE("decompose model mode runs the trained stack deterministically") {
  const RunConfig cfg = tiny_config();
  const fs::path& tree = trained_tree();
  const fs::path input = tree / "data" / "bundle_001" / "composite.png";

  const fs::path out1 = scratch("decomp_model_1") / "bundle";
  const fs::path out2 = scratch("decomp_model_2") / "bundle";
  const DecomposeResult r1 = cmd_decompose(cfg, input, tree, out1);
  cmd_decompose(cfg, input, tree, out2);

  CHECK(r1.layer_count >= 1);
  CHECK(r1.recompose_mse >= 0.0);
  const LayerDocument doc = load_bundle(out1);  // loadable implies valid
  CHECK(doc.width == 16);
  check_trees_identical(out1.parent_path(), out2.parent_path());

  // Without an oracle, the models directory must hold all checkpoints.
  CHECK_THROWS(cmd_decompose(cfg, input, scratch("no_models"),
                             scratch("decomp_fail") / "bundle"));
}

TEST_CASE("generate writes a valid three-layer bundle from a prompt") {
  const RunConfig cfg = tiny_config();
  const fs::path& tree = trained_tree();
  const fs::path dir = scratch("generate");
  const fs::path prompt = dir / "prompt.json";
  write_text_file(prompt, R"({"poster": "a test poster", "foreground": "a dot",)"
                          R"( "midground": "empty", "background": "blue"})");

  const fs::path out1 = dir / "bundle_1";
  const GenerateResult r = cmd_generate(cfg, prompt, tree, out1);
  CHECK(r.layer_count == 3);

  const LayerDocument doc = load_bundle(out1);
  CHECK(doc.width == 16);
  CHECK(doc.layers.size() == 3);
  CHECK(doc.layers[0].role == LayerRole::background);
  CHECK(doc.prompt.poster == "a test poster");
  // The background anchors compositing, so the composite is opaque.
  for (int p = 0; p < doc.composite.pixel_count(); ++p) {
    CHECK(doc.composite.px[4 * p + 3] == 1.0f);
  }

  const fs::path out2 = dir / "bundle_2";
  cmd_generate(cfg, prompt, tree, out2);
  check_trees_identical(out1, out2);
}

TEST_CASE("eval scores prediction bundles against references") {
  const RunConfig cfg = tiny_config();
  const fs::path& tree = trained_tree();
  const fs::path out = scratch("eval_self");

  // Evaluating the dataset against itself: exact match on every metric.
  const EvalResult r = cmd_eval(cfg, tree / "data", tree / "data", out);
  CHECK(r.report.per_sample.size() == 4);
  CHECK(r.report.aggregate.mse == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.report.aggregate.psnr == doctest::Approx(99.0));
  CHECK(r.report.aggregate.ssim == doctest::Approx(1.0).epsilon(1e-9));
  REQUIRE(r.report.fid.has_value());
  CHECK(*r.report.fid < 1e-6);
  CHECK(r.report.judge.empty());

  const std::string json_text = read_bytes(r.report_json);
  CHECK(json_text.find("\"aggregate\"") != std::string::npos);
  const std::string csv_text = read_bytes(r.report_csv);
  CHECK(csv_text.rfind("id,mse,psnr,ssim\n", 0) == 0);
  CHECK(csv_text.find("aggregate") != std::string::npos);

  // Missing reference bundle is an error.
  CHECK_THROWS_WITH_AS(cmd_eval(cfg, tree / "data", scratch("empty_ref"), out),
                       doctest::Contains("reference bundle missing"),
                       std::runtime_error);
}

TEST_CASE("eval consults the configured judge fixture") {
  RunConfig cfg = tiny_config();
  const fs::path& tree = trained_tree();
  const fs::path fixtures = scratch("eval_fixtures");
  // One canned response per bundle, in replay order.
  const char* bodies[] = {
      R"({"pred": 4, "ref": 5})", R"({"pred": 5, "ref": 5})",
      R"({"pred": 4, "ref": 5})", R"({"pred": 3, "ref": 5})"};
  for (int i = 0; i < 4; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03d.json", i);
    write_text_file(fixtures / name, bodies[i]);
  }
  cfg.eval.judge_fixture_dir = fixtures.string();

  const fs::path out = scratch("eval_judged");
  const EvalResult r = cmd_eval(cfg, tree / "data", tree / "data", out);
  REQUIRE(r.report.judge.count("pred") == 1);
  REQUIRE(r.report.judge.count("ref") == 1);
  CHECK(r.report.judge.at("pred") == doctest::Approx(0.8));  // mean 4 / 5
  CHECK(r.report.judge.at("ref") == doctest::Approx(1.0));
  CHECK(r.report.judge_errors == 0);
  CHECK(read_bytes(r.report_json).find("\"judge\"") != std::string::npos);
}

TEST_CASE("preview writes one checkerboard sheet per layer plus composite") {
  const fs::path& tree = trained_tree();
  const fs::path bundle = tree / "data" / "bundle_002";
  const std::size_t layers = load_bundle(bundle).layers.size();

  const fs::path out = scratch("preview");
  const PreviewResult r = cmd_preview(bundle, out);
  CHECK(r.sheets == static_cast<int>(layers) + 1);
  CHECK(fs::exists(out / "composite_preview.png"));
  CHECK(fs::exists(out / "layer_00_preview.png"));
  const RgbaImage sheet = read_png(out / "composite_preview.png");
  CHECK(sheet.width == 16);
  for (int p = 0; p < sheet.pixel_count(); ++p) {
    CHECK(sheet.px[4 * p + 3] == 1.0f);  // previews are opaque
  }
}
