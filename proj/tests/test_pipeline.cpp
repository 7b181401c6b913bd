#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <string>

#include "rest/error.hpp"
#include "rest/pipeline.hpp"
#include "rest/tensor_io.hpp"
#include "rest/verify/suites.hpp"

using namespace rest;
namespace fs = std::filesystem;

TEST_CASE("config round trip and defaults") {
  RunConfig d;
  d.resolve();
  const std::string text = d.to_json();
  CHECK(RunConfig::from_json(text).to_json() == text);
  CHECK(RunConfig::from_json(R"({"schema_version": 1})").to_json() == text);
  CHECK(text.find("\"lr\": 1e-05") != std::string::npos);

  RunConfig c = RunConfig::from_json(R"({"schema_version": 1, "seed": 9, "model": {"blocks": 2, "chunk_len": 5},
      "corpus": {"frames": 33, "motion": {"voices": 3}}, "student": {"no_asd": true, "tau": 0.5}, "eval": {"frames": 65}})");
  CHECK(c.seed == 9);
  CHECK(c.model.blocks == 2);
  CHECK(c.corpus.motion.voices == 3);
  CHECK(c.student.no_asd);
  CHECK(c.student.tau == 0.5f);
  CHECK(c.teacher.seed == 9 + 101);
  CHECK(c.model.h == 4);
  CHECK(RunConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("config rejects unknown keys, wrong versions and bad values") {
  CHECK_THROWS_AS(RunConfig::from_json(R"({"schema_version": 1, "colour": 1})"), UsageError);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"schema_version": 1, "model": {"depth": 2}})"), UsageError);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"schema_version": 1, "corpus": {"motion": {"speed": 2}}})"), UsageError);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"schema_version": 1, "teacher": {"lambda_con": 2}})"), UsageError);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"model": {}})"), UsageError);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"schema_version": 2})"), UsageError);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"schema_version": 1, "model": {"blocks": "four"}})"), UsageError);
  CHECK_THROWS_AS(RunConfig::from_json("{not json"), UsageError);
  // 37 pixel frames give 10 latent frames, which do not tile into chunks of 5.
  CHECK_THROWS_AS(RunConfig::from_json(R"({"schema_version": 1, "model": {"chunk_len": 5}})"), LayoutError);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"schema_version": 1, "student": {"lr": -1}})"), DomainError);
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/config.json"), IoError);
  try {
    RunConfig::from_json(R"({"schema_version": 1, "model": {"depth": 2}})");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("model.depth") != std::string::npos);
  }
}

TEST_CASE("ablation flags") {
  RunConfig c;
  c.apply_flags({"full", "no_id_sink", "no_smooth"});
  CHECK(c.student.no_id_sink);
  CHECK(c.student.no_smooth);
  CHECK_FALSE(c.student.no_asd);
  CHECK(c.student_model().no_id_sink);
  CHECK_FALSE(c.model.no_id_sink);
  CHECK_THROWS_AS(c.apply_flags({"no_everything"}), UsageError);
}

TEST_CASE("REST_THREADS caps workers") {
  ::setenv("REST_THREADS", "3", 1);
  CHECK(rest_threads() == 3);
  ::setenv("REST_THREADS", "0", 1);
  CHECK(rest_threads() >= 1);
  ::unsetenv("REST_THREADS");
  CHECK(rest_threads() >= 1);
}

TEST_CASE("tiny experiment end to end") {
  RunConfig c = RunConfig::from_json(R"({"schema_version": 1, "seed": 4,
      "corpus": {"n_train": 2, "n_heldout": 1, "frames": 13}, "codec": {"epochs": 2},
      "model": {"blocks": 1, "d_model": 16, "heads": 2, "t_dim": 8},
      "teacher": {"lr": 0.001, "steps": 3}, "student": {"lr": 0.001, "steps": 3},
      "generate": {"steps": 2}, "eval": {"frames": 25, "seeds": 2}})");
  const fs::path out = fs::temp_directory_path() / "rest_pipeline_test";
  fs::remove_all(out);
  const Experiment ex = prepare_experiment(c, out);
  CHECK(fs::exists(out / "resolved_config.json"));
  CHECK(fs::exists(out / "teacher" / "loss.csv"));
  REQUIRE(ex.eval.size() == 1);
  CHECK(ex.eval[0].video.dim(0) == 25);

  const Codecs back = Codecs::load(out / "codecs.ckpt");
  const Tensor z = ex.codecs.video.encode(ex.eval[0].video);
  CHECK(content_hash(back.video.encode(ex.eval[0].video)) == content_hash(z));

  const auto a = run_ablation(ex, {"full", "no_id_sink"}, out, 2);
  const auto b = run_ablation(ex, {"full", "no_id_sink"}, {}, 1);
  REQUIRE(a.size() == 2);
  CHECK(a[1].variant == "no_id_sink");
  CHECK(a[0].eval.clips.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a[i].eval.boundary_discontinuity == b[i].eval.boundary_discontinuity);
    CHECK(a[i].eval.identity_drift == b[i].eval.identity_drift);
  }
  CHECK(fs::exists(out / "no_id_sink" / "metrics.json"));
  const std::string j = ablation_json(a);
  CHECK(j.find("\"no_id_sink\"") != std::string::npos);

  // The directional checker reports missing variants as failures.
  const auto dir = verify::ablation_directions(a);
  CHECK_FALSE(dir.passed);
  CHECK(dir.detail.find("no_context_cache missing") != std::string::npos);
  fs::remove_all(out);
}
