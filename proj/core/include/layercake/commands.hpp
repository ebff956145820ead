#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "layercake/bundle.hpp"
#include "layercake/config.hpp"
#include "layercake/flow.hpp"
#include "layercake/metrics.hpp"
#include "layercake/vae.hpp"

// Command implementations behind the CLI, exposed as functions so tests and
// the acceptance harness can drive them in-process. Artifact bytes are a
// pure function of (config, inputs): no timestamps, sorted traversal, pinned
// serialization. All failures are exceptions; the CLI maps ConfigError to
// exit code 2 and everything else to 1.

namespace layercake {

// Sorted bundle_* subdirectories of a dataset directory.
std::vector<std::filesystem::path> list_bundles(
    const std::filesystem::path& data_dir);

// Training images for the autoencoder: per document, every layer bottom-up,
// then the composite.
std::vector<RgbaImage> vae_training_images(
    const std::vector<LayerDocument>& docs);

// Flow-matching samples for one edit adapter: per matching triplet, the flow
// runs from the flattened input's latent to the extraction (extract tasks)
// or erasure (erase tasks) target latent, conditioned on the input tokens,
// the peel mask, the task token, and an empty prompt.
std::vector<FlowSample> edit_task_samples(const VaeModel& vae,
                                          const std::vector<LayerDocument>& docs,
                                          FlowTask task);

// Text-to-document samples: noise -> 2x2 grid latent, conditioned on the
// document prompt only.
std::vector<FlowSample> generation_samples(
    const VaeModel& vae, const std::vector<LayerDocument>& docs);

// {"poster": ..., "foreground": ..., "midground": ..., "background": ...}
HierarchicalPrompt load_prompt_json(const std::filesystem::path& path);

struct SynthDataResult {
  std::filesystem::path dir;
  int count = 0;
};
// Writes bundle_NNN directories under <out_root>/<dataset.out_dir>.
SynthDataResult cmd_synth_data(const RunConfig& cfg,
                               const std::filesystem::path& out_root);

struct TrainVaeResult {
  std::filesystem::path checkpoint;  // <out_root>/vae.ckpt
  std::filesystem::path curve_csv;   // <out_root>/vae_curve.csv
  VaeLossBreakdown first;
  VaeLossBreakdown last;
};
TrainVaeResult cmd_train_vae(const RunConfig& cfg,
                             const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_root);

struct TrainFlowResult {
  std::filesystem::path base_checkpoint;  // empty when base was not trained
  std::map<FlowTask, std::filesystem::path> adapter_checkpoints;
  std::map<std::string, std::pair<double, double>> loss_endpoints;  // piece -> (first, last)
};
// task "" trains the base then every adapter in config order; "base" trains
// only the base; an edit-task name trains that adapter against the base
// checkpoint already in out_root.
TrainFlowResult cmd_train_flow(const RunConfig& cfg,
                               const std::filesystem::path& data_dir,
                               const std::filesystem::path& vae_checkpoint,
                               const std::filesystem::path& out_root,
                               const std::string& task = "");

struct DecomposeResult {
  std::filesystem::path bundle_dir;
  double recompose_mse = 0.0;
  int layer_count = 0;
};
// oracle_bundle non-empty: replay that bundle's ground-truth peel sequence.
// Otherwise models_dir must hold vae.ckpt, flow.ckpt, and lora_<task>.ckpt
// for all four edit tasks. Also writes <out_bundle>/recompose.json.
DecomposeResult cmd_decompose(const RunConfig& cfg,
                              const std::filesystem::path& input_png,
                              const std::filesystem::path& models_dir,
                              const std::filesystem::path& out_bundle,
                              const std::filesystem::path& oracle_bundle = {});

struct GenerateResult {
  std::filesystem::path bundle_dir;
  int layer_count = 0;
};
// Prompt-conditioned generation: samples a 2x2 grid, splits it into
// (composite, top layer, second layer, background), and writes a bundle
// whose composite is recomputed by flattening the decoded layers.
GenerateResult cmd_generate(const RunConfig& cfg,
                            const std::filesystem::path& prompt_json,
                            const std::filesystem::path& models_dir,
                            const std::filesystem::path& out_bundle);

struct EvalResult {
  std::filesystem::path report_json;
  std::filesystem::path report_csv;
  MetricReport report;
};
// Pairs same-named bundles from pred_dir and ref_dir by composite, scores
// them on the configured mattes, adds the feature distance between the two
// composite sets, and runs the judge when one is configured (the
// LAYERCAKE_JUDGE_ENDPOINT environment variable overrides the config).
EvalResult cmd_eval(const RunConfig& cfg, const std::filesystem::path& pred_dir,
                    const std::filesystem::path& ref_dir,
                    const std::filesystem::path& out_root);

struct PreviewResult {
  std::filesystem::path dir;
  int sheets = 0;
};
// Checkerboard sheets: layer_NN_preview.png per layer + composite_preview.png.
PreviewResult cmd_preview(const std::filesystem::path& bundle_dir,
                          const std::filesystem::path& out_dir);

}  // namespace layercake
