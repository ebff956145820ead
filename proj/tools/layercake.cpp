// Command-line front end. Every subcommand is a thin wrapper over the
// corresponding command function; configuration problems exit with 2,
// anything else that throws exits with 1.

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "layercake/commands.hpp"
#include "layercake/config.hpp"
#include "layercake/selfcheck.hpp"

namespace {

using layercake::RunConfig;

RunConfig load_config(const std::string& path) {
  return layercake::load_run_config(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layered poster pipeline: synthesis, training, decomposition, evaluation"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, in_path, models_dir, vae_ckpt;
  std::string task, prompt_path, pred_dir, ref_dir, oracle_dir;
  bool full = false;
  std::string selfcheck_work, selfcheck_cli;

  CLI::App* synth = app.add_subcommand("synth-data", "write a procedural layered-poster dataset");
  synth->add_option("--config", config_path, "run configuration JSON")->required();
  synth->add_option("--out", out_dir, "output tree root")->required();

  CLI::App* trainv = app.add_subcommand("train-vae", "train the RGBA autoencoder");
  trainv->add_option("--config", config_path)->required();
  trainv->add_option("--data", data_dir, "dataset directory of bundle_* folders")->required();
  trainv->add_option("--out", out_dir, "checkpoint + curve output root")->required();

  CLI::App* trainf = app.add_subcommand("train-flow", "train the flow transformer and adapters");
  trainf->add_option("--config", config_path)->required();
  trainf->add_option("--data", data_dir)->required();
  trainf->add_option("--vae", vae_ckpt, "trained autoencoder checkpoint")->required();
  trainf->add_option("--out", out_dir)->required();
  trainf->add_option("--task", task,
                     "\"base\", one adapter task name, or omit for base plus all adapters");

  CLI::App* decomp = app.add_subcommand("decompose", "peel a flat poster into a layer bundle");
  decomp->add_option("--config", config_path)->required();
  decomp->add_option("--in", in_path, "input composite PNG")->required();
  decomp->add_option("--out", out_dir, "output bundle directory")->required();
  decomp->add_option("--models", models_dir, "directory holding vae/flow/adapter checkpoints");
  decomp->add_option("--oracle", oracle_dir, "ground-truth bundle for oracle replay");

  CLI::App* gen = app.add_subcommand("generate", "sample a layer bundle from a prompt");
  gen->add_option("--config", config_path)->required();
  gen->add_option("--prompt", prompt_path, "hierarchical prompt JSON")->required();
  gen->add_option("--models", models_dir)->required();
  gen->add_option("--out", out_dir, "output bundle directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "score prediction bundles against references");
  eval->add_option("--config", config_path)->required();
  eval->add_option("--pred", pred_dir, "directory of predicted bundle_* folders")->required();
  eval->add_option("--ref", ref_dir, "directory of reference bundle_* folders")->required();
  eval->add_option("--out", out_dir, "report output root")->required();

  CLI::App* preview = app.add_subcommand("preview", "write checkerboard sheets for a bundle");
  preview->add_option("--in", in_path, "bundle directory")->required();
  preview->add_option("--out", out_dir, "sheet output directory")->required();

  CLI::App* selftest = app.add_subcommand("selftest", "run the release verification suite");
  selftest->add_flag("--full", full, "full-scale convergence probes (minutes of CPU)");
  selftest->add_option("--work", selfcheck_work, "scratch directory");
  selftest->add_option("--cli", selfcheck_cli,
                       "drive this binary for the determinism check instead of in-process calls");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const auto r = layercake::cmd_synth_data(load_config(config_path), out_dir);
      std::printf("wrote %d bundles under %s\n", r.count, r.dir.string().c_str());
    } else if (trainv->parsed()) {
      const auto r = layercake::cmd_train_vae(load_config(config_path), data_dir, out_dir);
      std::printf("vae: pixel L1 %.4f -> %.4f, checkpoint %s\n", r.first.pixel,
                  r.last.pixel, r.checkpoint.string().c_str());
    } else if (trainf->parsed()) {
      const auto r = layercake::cmd_train_flow(load_config(config_path), data_dir,
                                               vae_ckpt, out_dir, task);
      for (const auto& [piece, endpoints] : r.loss_endpoints) {
        std::printf("flow %s: loss %.4f -> %.4f\n", piece.c_str(),
                    endpoints.first, endpoints.second);
      }
    } else if (decomp->parsed()) {
      const auto r = layercake::cmd_decompose(load_config(config_path), in_path,
                                              models_dir, out_dir, oracle_dir);
      std::printf("decomposed into %d layers, recompose error %.3g, bundle %s\n",
                  r.layer_count, r.recompose_mse, r.bundle_dir.string().c_str());
    } else if (gen->parsed()) {
      const auto r = layercake::cmd_generate(load_config(config_path), prompt_path,
                                             models_dir, out_dir);
      std::printf("generated %d layers into %s\n", r.layer_count,
                  r.bundle_dir.string().c_str());
    } else if (eval->parsed()) {
      const auto r = layercake::cmd_eval(load_config(config_path), pred_dir,
                                         ref_dir, out_dir);
      std::printf("eval: mse %.6g psnr %.2f ssim %.4f", r.report.aggregate.mse,
                  r.report.aggregate.psnr, r.report.aggregate.ssim);
      if (r.report.fid) std::printf(" feature-distance %.4g", *r.report.fid);
      for (const auto& [method, score] : r.report.judge) {
        std::printf(" judge[%s] %.4f", method.c_str(), score);
      }
      std::printf("\nreport %s\n", r.report_json.string().c_str());
    } else if (preview->parsed()) {
      const auto r = layercake::cmd_preview(in_path, out_dir);
      std::printf("wrote %d preview sheets to %s\n", r.sheets, r.dir.string().c_str());
    } else if (selftest->parsed()) {
      layercake::SelfcheckOptions opts;
      opts.full = full;
      opts.work_dir = selfcheck_work;
      opts.cli = selfcheck_cli;
      const auto results = layercake::run_selfcheck(opts);
      if (!layercake::all_passed(results)) {
        std::fprintf(stderr, "selftest: FAILED\n");
        return 1;
      }
      std::printf("selftest: all %zu checks passed\n", results.size());
    }
  } catch (const layercake::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
