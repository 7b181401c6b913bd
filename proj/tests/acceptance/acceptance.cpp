// Acceptance run: one PASS/FAIL line per criterion, exit 0 only if all pass.
//
//   acceptance --config configs/desk.json --out build/acceptance [--only 1,2,8] [--expect-fail 8]
//
// Criteria 1-7 and 9 are the oracle suites; criterion 8 trains a shared
// teacher plus paired students and compares their metrics.
//
// --expect-fail lists criteria known to fail. They still print FAIL, and the
// exit code is 0 only if the failing set matches the list exactly.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <iostream>
#include <string>
#include <vector>

#include "rest/pipeline.hpp"
#include "rest/verify/suites.hpp"

using namespace rest;

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config, out = "acceptance";
  std::vector<int> only, expect_fail;
  app.add_option("--config", config, "run config for the ablation criterion")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out, "artifact directory");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_option("--expect-fail", expect_fail, "criteria known to fail")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  std::vector<verify::Suite> suites;
  for (auto& s : verify::oracle_suites())
    if (wanted(s.criterion)) suites.push_back(s);
  std::vector<verify::SuiteResult> results = verify::run_suites(suites, rest_threads());

  if (wanted(8)) {
    const auto t0 = std::chrono::steady_clock::now();
    verify::SuiteResult r{8, "directional ablations", false, "", 0.0};
    try {
      const RunConfig cfg = RunConfig::load(config);
      const auto log = [](const std::string& m) { std::cerr << "[acceptance] " << m << std::endl; };
      const Experiment ex = prepare_experiment(cfg, out, log);
      const auto outcomes = run_ablation(ex, {"full", "no_id_sink", "no_context_cache", "no_asd", "no_contrastive"}, out, rest_threads(), log);
      write_text(std::filesystem::path(out) / "ablation.json", ablation_json(outcomes));
      r = verify::ablation_directions(outcomes);
    } catch (const std::exception& e) {
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results.push_back(r);
  }

  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.criterion < b.criterion; });
  std::cout << verify::format_table(results);
  const bool all = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  std::cout << (all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << std::endl;
  if (expect_fail.empty()) return all ? 0 : 1;

  bool matches = true;
  for (const auto& r : results) {
    const bool expected = std::find(expect_fail.begin(), expect_fail.end(), r.criterion) != expect_fail.end();
    if (expected == r.passed) {
      std::cout << "criterion " << r.criterion << (r.passed ? " passed but was expected to fail" : " failed unexpectedly") << std::endl;
      matches = false;
    }
  }
  if (matches) std::cout << "failures match the expected list" << std::endl;
  return matches ? 0 : 1;
}
