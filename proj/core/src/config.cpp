#include "layercake/config.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include "json.hpp"

namespace layercake {
namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError("config: " + section + " must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) known |= item.key() == key;
    if (!known)
      throw ConfigError("config: unknown key \"" + item.key() + "\" in " +
                        section);
  }
}

int get_int(const json& j, const std::string& section, const char* key,
            int fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number_integer())
    throw ConfigError("config: " + section + "." + key + " must be an integer");
  return j[key].get<int>();
}

double get_num(const json& j, const std::string& section, const char* key,
               double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number())
    throw ConfigError("config: " + section + "." + key + " must be a number");
  return j[key].get<double>();
}

std::string get_str(const json& j, const std::string& section, const char* key,
                    const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_string())
    throw ConfigError("config: " + section + "." + key + " must be a string");
  return j[key].get<std::string>();
}

std::vector<std::string> get_str_list(const json& j, const std::string& section,
                                      const char* key,
                                      const std::vector<std::string>& fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_array())
    throw ConfigError("config: " + section + "." + key +
                      " must be an array of strings");
  std::vector<std::string> out;
  for (const auto& v : j[key]) {
    if (!v.is_string())
      throw ConfigError("config: " + section + "." + key +
                        " must be an array of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

void validate(const RunConfig& c) {
  if (c.image_size < 16 || c.image_size % 4 != 0)
    throw ConfigError(
        "config: image_size must be >= 16 and divisible by 4, got " +
        std::to_string(c.image_size));
  if (c.dataset.count < 1)
    throw ConfigError("config: dataset.count must be >= 1");
  if (c.dataset.out_dir.empty())
    throw ConfigError("config: dataset.out_dir must be set");
  if (c.vae.steps < 1 || c.vae.batch_size < 1 || c.vae.lr <= 0.0)
    throw ConfigError("config: vae steps/batch_size/lr out of range");
  if (c.flow.steps < 1 || c.flow.batch_size < 1 || c.flow.lr <= 0.0 ||
      c.flow.sampler_steps < 1)
    throw ConfigError("config: flow steps/batch_size/lr/sampler_steps out of range");
  if (c.flow.adapter_tasks.empty())
    throw ConfigError("config: flow.adapter_tasks must not be empty");
  if (c.decompose.k_max < 1)
    throw ConfigError("config: decompose.k_max must be >= 1");
  if (!(c.decompose.stop_tau > 0.0 && c.decompose.stop_tau < 1.0))
    throw ConfigError("config: decompose.stop_tau must lie in (0, 1)");
  if (c.eval.mattes.empty())
    throw ConfigError("config: eval.mattes must not be empty");
  if (!c.eval.judge_endpoint.empty() && !c.eval.judge_fixture_dir.empty())
    throw ConfigError(
        "config: eval.judge_endpoint and eval.judge_fixture_dir are mutually "
        "exclusive");
  // Surface bad matte names and module-level violations at load time, all
  // as configuration errors (the CLI maps those to exit code 2).
  try {
    c.eval_mattes();
    c.vae_config().validate();
    c.flow_config().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

}  // namespace

VaeConfig RunConfig::vae_config() const {
  VaeConfig v;
  v.image_size = image_size;
  v.latent_grid = image_size / 4;
  v.hidden = vae.hidden;
  v.lambda_pixel = vae.lambda_pixel;
  v.lambda_patch = vae.lambda_patch;
  v.lambda_perceptual = vae.lambda_perceptual;
  v.lambda_kl = vae.lambda_kl;
  return v;
}

FlowConfig RunConfig::flow_config() const {
  FlowConfig f;
  const VaeConfig v = vae_config();
  f.latent_channels = v.channels_rgb + v.channels_a;
  f.d_model = flow.d_model;
  f.n_heads = flow.n_heads;
  f.n_blocks = flow.n_blocks;
  f.mlp_mult = flow.mlp_mult;
  f.lora_rank = flow.lora_rank;
  f.lora_alpha = flow.lora_alpha;
  return f;
}

std::vector<Matte> RunConfig::eval_mattes() const {
  std::vector<Matte> out;
  for (const std::string& name : eval.mattes) {
    bool found = false;
    for (const Matte& m : metric_mattes()) {
      if (matte_name(m) == name) {
        out.push_back(m);
        found = true;
        break;
      }
    }
    if (!found)
      throw ConfigError("config: eval.mattes has unknown matte \"" + name +
                        "\" (known: white, black, checker8)");
  }
  return out;
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(j, "config", {"schema_version", "seed", "image_size", "dataset",
                           "vae", "flow", "decompose", "eval"});
  if (!j.contains("schema_version"))
    throw ConfigError("config: schema_version is required");
  RunConfig c;
  c.schema_version = get_int(j, "config", "schema_version", 1);
  if (c.schema_version != 1)
    throw ConfigError("config: unsupported schema_version " +
                      std::to_string(c.schema_version));

  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer() || j["seed"].get<std::int64_t>() < 0)
      throw ConfigError("config: seed must be a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  c.image_size = get_int(j, "config", "image_size", c.image_size);

  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    check_keys(d, "dataset", {"count", "out_dir"});
    c.dataset.count = get_int(d, "dataset", "count", c.dataset.count);
    c.dataset.out_dir = get_str(d, "dataset", "out_dir", c.dataset.out_dir);
  }

  if (j.contains("vae")) {
    const json& v = j["vae"];
    check_keys(v, "vae",
               {"hidden", "lambda_pixel", "lambda_patch", "lambda_perceptual",
                "lambda_kl", "steps", "batch_size", "lr"});
    c.vae.hidden = get_int(v, "vae", "hidden", c.vae.hidden);
    c.vae.lambda_pixel = get_num(v, "vae", "lambda_pixel", c.vae.lambda_pixel);
    c.vae.lambda_patch = get_num(v, "vae", "lambda_patch", c.vae.lambda_patch);
    c.vae.lambda_perceptual =
        get_num(v, "vae", "lambda_perceptual", c.vae.lambda_perceptual);
    c.vae.lambda_kl = get_num(v, "vae", "lambda_kl", c.vae.lambda_kl);
    c.vae.steps = get_int(v, "vae", "steps", c.vae.steps);
    c.vae.batch_size = get_int(v, "vae", "batch_size", c.vae.batch_size);
    c.vae.lr = get_num(v, "vae", "lr", c.vae.lr);
  }

  if (j.contains("flow")) {
    const json& f = j["flow"];
    check_keys(f, "flow",
               {"d_model", "n_heads", "n_blocks", "mlp_mult", "lora_rank",
                "lora_alpha", "adapter_tasks", "steps", "batch_size", "lr",
                "sampler_steps"});
    c.flow.d_model = get_int(f, "flow", "d_model", c.flow.d_model);
    c.flow.n_heads = get_int(f, "flow", "n_heads", c.flow.n_heads);
    c.flow.n_blocks = get_int(f, "flow", "n_blocks", c.flow.n_blocks);
    c.flow.mlp_mult = get_int(f, "flow", "mlp_mult", c.flow.mlp_mult);
    c.flow.lora_rank = get_int(f, "flow", "lora_rank", c.flow.lora_rank);
    c.flow.lora_alpha = get_num(f, "flow", "lora_alpha", c.flow.lora_alpha);
    if (f.contains("adapter_tasks")) {
      c.flow.adapter_tasks.clear();
      for (const std::string& name :
           get_str_list(f, "flow", "adapter_tasks", {})) {
        try {
          c.flow.adapter_tasks.push_back(flow_task_from_string(name));
        } catch (const std::exception&) {
          throw ConfigError("config: flow.adapter_tasks has unknown task \"" +
                            name + "\"");
        }
      }
    }
    c.flow.steps = get_int(f, "flow", "steps", c.flow.steps);
    c.flow.batch_size = get_int(f, "flow", "batch_size", c.flow.batch_size);
    c.flow.lr = get_num(f, "flow", "lr", c.flow.lr);
    c.flow.sampler_steps =
        get_int(f, "flow", "sampler_steps", c.flow.sampler_steps);
  }

  if (j.contains("decompose")) {
    const json& d = j["decompose"];
    check_keys(d, "decompose", {"k_max", "stop_tau"});
    c.decompose.k_max = get_int(d, "decompose", "k_max", c.decompose.k_max);
    c.decompose.stop_tau =
        get_num(d, "decompose", "stop_tau", c.decompose.stop_tau);
  }

  if (j.contains("eval")) {
    const json& e = j["eval"];
    check_keys(e, "eval", {"mattes", "judge_fixture_dir", "judge_endpoint"});
    c.eval.mattes = get_str_list(e, "eval", "mattes", c.eval.mattes);
    c.eval.judge_fixture_dir =
        get_str(e, "eval", "judge_fixture_dir", c.eval.judge_fixture_dir);
    c.eval.judge_endpoint =
        get_str(e, "eval", "judge_endpoint", c.eval.judge_endpoint);
  }

  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::ostringstream body;
  body << in.rdbuf();
  return parse_run_config(body.str());
}

std::string run_config_json(const RunConfig& config) {
  nlohmann::ordered_json j;
  j["schema_version"] = config.schema_version;
  j["seed"] = config.seed;
  j["image_size"] = config.image_size;
  j["dataset"] = {{"count", config.dataset.count},
                  {"out_dir", config.dataset.out_dir}};
  j["vae"] = {{"hidden", config.vae.hidden},
              {"lambda_pixel", config.vae.lambda_pixel},
              {"lambda_patch", config.vae.lambda_patch},
              {"lambda_perceptual", config.vae.lambda_perceptual},
              {"lambda_kl", config.vae.lambda_kl},
              {"steps", config.vae.steps},
              {"batch_size", config.vae.batch_size},
              {"lr", config.vae.lr}};
  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (FlowTask t : config.flow.adapter_tasks) tasks.push_back(to_string(t));
  j["flow"] = {{"d_model", config.flow.d_model},
               {"n_heads", config.flow.n_heads},
               {"n_blocks", config.flow.n_blocks},
               {"mlp_mult", config.flow.mlp_mult},
               {"lora_rank", config.flow.lora_rank},
               {"lora_alpha", config.flow.lora_alpha},
               {"adapter_tasks", tasks},
               {"steps", config.flow.steps},
               {"batch_size", config.flow.batch_size},
               {"lr", config.flow.lr},
               {"sampler_steps", config.flow.sampler_steps}};
  j["decompose"] = {{"k_max", config.decompose.k_max},
                    {"stop_tau", config.decompose.stop_tau}};
  nlohmann::ordered_json mattes = nlohmann::ordered_json::array();
  for (const std::string& m : config.eval.mattes) mattes.push_back(m);
  nlohmann::ordered_json eval;
  eval["mattes"] = mattes;
  if (!config.eval.judge_fixture_dir.empty())
    eval["judge_fixture_dir"] = config.eval.judge_fixture_dir;
  if (!config.eval.judge_endpoint.empty())
    eval["judge_endpoint"] = config.eval.judge_endpoint;
  j["eval"] = eval;
  return j.dump(2) + "\n";
}

std::string judge_endpoint_override() {
  const char* value = std::getenv("LAYERCAKE_JUDGE_ENDPOINT");
  return value ? value : "";
}

}  // namespace layercake
