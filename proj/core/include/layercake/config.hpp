#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "layercake/flow.hpp"
#include "layercake/metrics.hpp"
#include "layercake/vae.hpp"

namespace layercake {

// Configuration problems map to CLI exit code 2; everything else is 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  int count = 20;
  std::string out_dir = "data";
};

struct VaeRunConfig {
  int hidden = 16;
  double lambda_pixel = 1.0;
  double lambda_patch = 1.0;
  double lambda_perceptual = 0.1;
  double lambda_kl = 1e-4;
  int steps = 200;
  int batch_size = 8;
  double lr = 1e-3;
};

struct FlowRunConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_blocks = 4;
  int mlp_mult = 4;
  int lora_rank = 8;
  double lora_alpha = 8.0;
  std::vector<FlowTask> adapter_tasks = {FlowTask::text_extract,
                                         FlowTask::text_erase,
                                         FlowTask::fg_extract,
                                         FlowTask::fg_erase};
  int steps = 500;
  int batch_size = 2;
  double lr = 1e-3;
  int sampler_steps = 8;
};

struct DecomposeRunConfig {
  int k_max = 4;
  double stop_tau = 0.01;
};

struct EvalRunConfig {
  std::vector<std::string> mattes = {"white", "black", "checker8"};
  std::string judge_fixture_dir;  // empty = judge off
  std::string judge_endpoint;     // empty = judge off; exclusive with above
};

// The single configuration document shared by all commands. Strict JSON: a
// schema_version field is required and unknown keys anywhere are errors.
struct RunConfig {
  int schema_version = 1;
  std::uint64_t seed = 7;
  int image_size = 32;  // must be even, >= 16, divisible by 4
  DatasetConfig dataset;
  VaeRunConfig vae;
  FlowRunConfig flow;
  DecomposeRunConfig decompose;
  EvalRunConfig eval;

  VaeConfig vae_config() const;    // latent grid is image_size / 4
  FlowConfig flow_config() const;  // latent channels fixed by the autoencoder
  std::vector<Matte> eval_mattes() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

// Canonical form: every field written explicitly, stable order and bytes.
std::string run_config_json(const RunConfig& config);

// Value of LAYERCAKE_JUDGE_ENDPOINT, or empty when unset. The only
// environment override the tool honors.
std::string judge_endpoint_override();

}  // namespace layercake
