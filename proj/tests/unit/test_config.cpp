#include "layercake/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

using namespace layercake;
namespace fs = std::filesystem;

namespace {

std::string minimal = R"({"schema_version": 1})";

}  // namespace

TEST_CASE("minimal config takes defaults") {
  RunConfig c = parse_run_config(minimal);
  CHECK(c.seed == 7);
  CHECK(c.image_size == 32);
  CHECK(c.dataset.count == 20);
  CHECK(c.vae.steps == 200);
  CHECK(c.flow.adapter_tasks.size() == 4);
  CHECK(c.decompose.k_max == 4);
  CHECK(c.eval.mattes.size() == 3);
  CHECK(c.eval.judge_endpoint.empty());
}

TEST_CASE("canonical serialization roundtrips") {
  RunConfig c = parse_run_config(minimal);
  c.seed = 99;
  c.image_size = 64;
  c.flow.adapter_tasks = {FlowTask::fg_extract};
  c.eval.judge_fixture_dir = "fixtures";
  const std::string text = run_config_json(c);
  CHECK(text == run_config_json(c));  // stable bytes
  RunConfig back = parse_run_config(text);
  CHECK(back.seed == 99);
  CHECK(back.image_size == 64);
  REQUIRE(back.flow.adapter_tasks.size() == 1);
  CHECK(back.flow.adapter_tasks[0] == FlowTask::fg_extract);
  CHECK(back.eval.judge_fixture_dir == "fixtures");
  CHECK(run_config_json(back) == text);
}

TEST_CASE("field parsing") {
  RunConfig c = parse_run_config(R"({
    "schema_version": 1,
    "seed": 123,
    "image_size": 16,
    "dataset": {"count": 5, "out_dir": "corpus"},
    "vae": {"hidden": 8, "lambda_kl": 0.001, "steps": 50, "batch_size": 4, "lr": 0.01},
    "flow": {"d_model": 16, "n_heads": 2, "n_blocks": 1, "adapter_tasks": ["fg_extract", "fg_erase"], "sampler_steps": 4},
    "decompose": {"k_max": 2, "stop_tau": 0.05},
    "eval": {"mattes": ["white"]}
  })");
  CHECK(c.seed == 123);
  CHECK(c.dataset.out_dir == "corpus");
  CHECK(c.vae.hidden == 8);
  CHECK(c.vae.lambda_kl == doctest::Approx(0.001));
  CHECK(c.vae.lambda_pixel == 1.0);  // untouched default
  CHECK(c.flow.d_model == 16);
  REQUIRE(c.flow.adapter_tasks.size() == 2);
  CHECK(c.flow.adapter_tasks[1] == FlowTask::fg_erase);
  CHECK(c.decompose.stop_tau == doctest::Approx(0.05));
  REQUIRE(c.eval.mattes.size() == 1);

  VaeConfig v = c.vae_config();
  CHECK(v.image_size == 16);
  CHECK(v.latent_grid == 4);
  CHECK(v.hidden == 8);
  FlowConfig f = c.flow_config();
  CHECK(f.latent_channels == v.channels_rgb + v.channels_a);
  CHECK(f.d_model == 16);
  auto mattes = c.eval_mattes();
  REQUIRE(mattes.size() == 1);
  CHECK_FALSE(mattes[0].checker);
  CHECK(mattes[0].r == 1.0f);
}

TEST_CASE("unknown keys are rejected with their location") {
  auto expect_error = [](const std::string& text, const std::string& needle) {
    try {
      parse_run_config(text);
      FAIL_CHECK("expected ConfigError for: " << text);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  expect_error(R"({"schema_version": 1, "sed": 3})", "\"sed\"");
  expect_error(R"({"schema_version": 1, "vae": {"hiden": 8}})", "\"hiden\"");
  expect_error(R"({"schema_version": 1, "vae": {"hiden": 8}})", "vae");
  expect_error(R"({"schema_version": 1, "eval": {"judge": "x"}})", "eval");
  expect_error(R"({"schema_version": 1, "decompose": {"kmax": 1}})", "decompose");
}

TEST_CASE("schema and type errors") {
  CHECK_THROWS_AS(parse_run_config("{}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"schema_version": 2})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[1,2]"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"schema_version": 1, "seed": -4})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"schema_version": 1, "seed": 1.5})"),
                  ConfigError);
  CHECK_THROWS_AS(
      parse_run_config(R"({"schema_version": 1, "vae": {"lr": "fast"}})"),
      ConfigError);
  CHECK_THROWS_AS(
      parse_run_config(R"({"schema_version": 1, "dataset": {"count": "many"}})"),
      ConfigError);
  CHECK_THROWS_AS(
      parse_run_config(R"({"schema_version": 1, "eval": {"mattes": [1]}})"),
      ConfigError);
}

TEST_CASE("semantic validation") {
  auto with = [](const std::string& body) {
    return parse_run_config(R"({"schema_version": 1, )" + body + "}");
  };
  CHECK_THROWS_AS(with(R"("image_size": 12)"), ConfigError);
  CHECK_THROWS_AS(with(R"("image_size": 18)"), ConfigError);  // not /4
  CHECK_THROWS_AS(with(R"("dataset": {"count": 0})"), ConfigError);
  CHECK_THROWS_AS(with(R"("vae": {"lr": 0})"), ConfigError);
  CHECK_THROWS_AS(with(R"("flow": {"sampler_steps": 0})"), ConfigError);
  CHECK_THROWS_AS(with(R"("flow": {"adapter_tasks": []})"), ConfigError);
  CHECK_THROWS_AS(with(R"("flow": {"adapter_tasks": ["bogus"]})"), ConfigError);
  CHECK_THROWS_AS(with(R"("flow": {"d_model": 10})"), ConfigError);  // heads
  CHECK_THROWS_AS(with(R"("decompose": {"stop_tau": 1.0})"), ConfigError);
  CHECK_THROWS_AS(with(R"("eval": {"mattes": []})"), ConfigError);
  CHECK_THROWS_AS(with(R"("eval": {"mattes": ["sepia"]})"), ConfigError);
  CHECK_THROWS_AS(
      with(R"("eval": {"judge_endpoint": "http://h:1/j", "judge_fixture_dir": "d"})"),
      ConfigError);
  // ... and the passing variants of the same shapes.
  CHECK_NOTHROW(with(R"("eval": {"judge_endpoint": "http://h:1/j"})"));
  CHECK_NOTHROW(with(R"("eval": {"mattes": ["checker8", "black"]})"));
  CHECK_NOTHROW(with(R"("image_size": 16)"));
}

TEST_CASE("config file loading") {
  fs::path dir = fs::temp_directory_path() / "layercake_test_config";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path path = dir / "run.json";
  {
    std::ofstream os(path, std::ios::binary);
    os << R"({"schema_version": 1, "seed": 5})";
  }
  RunConfig c = load_run_config(path);
  CHECK(c.seed == 5);
  CHECK_THROWS_AS(load_run_config(dir / "absent.json"), ConfigError);
}

TEST_CASE("judge endpoint environment override") {
  unsetenv("LAYERCAKE_JUDGE_ENDPOINT");
  CHECK(judge_endpoint_override().empty());
  setenv("LAYERCAKE_JUDGE_ENDPOINT", "http://127.0.0.1:9999/judge", 1);
  CHECK(judge_endpoint_override() == "http://127.0.0.1:9999/judge");
  unsetenv("LAYERCAKE_JUDGE_ENDPOINT");
  CHECK(judge_endpoint_override().empty());
}
