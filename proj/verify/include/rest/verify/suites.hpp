#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rest/pipeline.hpp"

// Oracle suites shared by the `verify` command and the acceptance binary.
// Each suite is single-threaded and pins its own tolerances.

namespace rest::verify {

struct SuiteResult {
  int criterion = 0;
  std::string name;
  bool passed = false;
  std::string detail;  // measured values against their tolerances
  double seconds = 0.0;
};

struct Suite {
  int criterion;
  std::string name;
  std::function<SuiteResult()> run;
  bool exclusive = false;  // measures wall time, so runs alone
};

SuiteResult cache_equivalence();
SuiteResult streaming_equivalence();
SuiteResult gradient_checks();
SuiteResult flow_exactness();
SuiteResult scheduler_laws();
SuiteResult streaming_causality();
SuiteResult scaling();
SuiteResult determinism_and_formats();

/// Every suite above, in criterion order.
std::vector<Suite> oracle_suites();

/// Runs suites on up to `threads` workers, then the exclusive ones one at a
/// time. Exceptions become failures.
std::vector<SuiteResult> run_suites(const std::vector<Suite>& suites, int threads);

/// Directional checks over paired ablation runs: no_id_sink worse identity,
/// no_context_cache and no_asd worse boundaries, no_contrastive worse sync.
SuiteResult ablation_directions(const std::vector<VariantOutcome>& outcomes);

/// Fixed-width pass/fail table.
std::string format_table(const std::vector<SuiteResult>& results);

}  // namespace rest::verify
