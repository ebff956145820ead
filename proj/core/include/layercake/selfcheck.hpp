#pragma once

#include <filesystem>
#include <string>
#include <vector>

// Release-gate verification suite. Each check covers one pinned contract —
// compositing algebra, loss oracles, gradient agreement, sampler exactness,
// adapter identities, convergence probes, decomposition closure, metric and
// judge arithmetic, and end-to-end byte determinism — and prints exactly one
// PASS/FAIL line. Tolerances live here in code and are not configurable.

namespace layercake {

struct CheckResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;  // measured values backing the verdict
  double seconds = 0.0;
};

struct SelfcheckOptions {
  // Full-scale convergence/overfit probes (minutes of CPU). When false those
  // two checks run a short smoke schedule that only demands improvement.
  bool full = false;
  // Scratch root for artifacts; defaults to a fixed directory under the
  // system temp path. Contents are overwritten.
  std::filesystem::path work_dir;
  // When set, the reproducibility check shells out to this CLI binary;
  // otherwise it drives the command functions in-process.
  std::string cli;
};

// Runs all checks in order, printing one line per check to stdout.
std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& opts);

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace layercake
