#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "doctest.h"
#include "patronus/errors.hpp"
#include "patronus/pipeline.hpp"

using namespace patronus;
namespace fs = std::filesystem;

namespace {

fs::path write_config(const char* name, const nlohmann::json& j) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream os(p);
  os << j.dump(2);
  return p;
}

// the smallest legal run: 8x8 images, minimum pool sizes, single-digit iters
nlohmann::json micro_json(const std::string& out_dir) {
  return {
      {"run_id", "micro"},
      {"out_dir", out_dir},
      {"seed", 3},
      {"data", {{"image_size", 8}, {"n_per_class", 32}, {"n_benign_classes", 2}}},
      {"pretrain", {{"ae_iters", 4}, {"diff_iters", 4}, {"probe_iters", 4}, {"batch", 8}}},
      {"moderator", {{"n1", 2}, {"feature_refresh", 2}, {"feature_set_size", 4}, {"batch", 4}}},
      {"align", {{"iters", 2}}},
      {"nft_decoder",
       {{"n2", 1}, {"feature_set_size", 4}, {"eval_batch", 4}, {"bpp_batch", 4},
        {"bag", {{"K", 2}, {"batches", {4}}}}}},
      {"nft_diffusion",
       {{"n2", 1}, {"feature_set_size", 4}, {"eval_batch", 4}, {"bpp_batch", 4},
        {"bag", {{"K", 2}, {"batches", {4}}}}}},
      {"attack",
       {{"max_iters", 2}, {"finetune_size", 8}, {"pool_size", 32}, {"eval_samples", 2},
        {"eval_every", 2}, {"batch", 4}}},
      {"eval", {{"seeds", 1}, {"samples", 2}}},
  };
}

}  // namespace

TEST_CASE("stage names roundtrip") {
  for (Stage s : {Stage::gen_data, Stage::pretrain, Stage::moderate, Stage::align, Stage::harden,
                  Stage::attack, Stage::evaluate, Stage::report})
    CHECK(stage_from_string(to_string(s)) == s);
  CHECK(std::string(to_string(Stage::gen_data)) == "gen-data");
  CHECK_THROWS_AS(stage_from_string("deploy"), ConfigError);
}

TEST_CASE("config parsing: defaults, overrides and wrong-type diagnostics") {
  RunConfig def = default_run_config();
  CHECK(def.run_id == "default");
  CHECK(def.data.image_size == 32);

  const fs::path p = write_config("pipe_ok.json", micro_json("out_test"));
  RunConfig c = load_run_config(p.string());
  CHECK(c.run_id == "micro");
  CHECK(c.data.image_size == 8);
  CHECK(c.data.n_per_class == 32);
  CHECK(c.pretrain.ae_iters == 4);
  CHECK(c.attack_base.max_iters == 2);
  // unset fields keep their defaults
  CHECK(c.data.channels == 3);
  CHECK(c.align_lr == def.align_lr);
  fs::remove(p);

  nlohmann::json bad = micro_json("out_test");
  bad["pretrain"]["ae_iters"] = "lots";
  const fs::path pb = write_config("pipe_bad.json", bad);
  try {
    load_run_config(pb.string());
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("pretrain.ae_iters") != std::string::npos);
  }
  fs::remove(pb);

  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), IoError);
}

TEST_CASE("seed resolution fans out and is deterministic") {
  RunConfig a = default_run_config();
  a.seed = 5;
  a.resolve_seeds();
  RunConfig b = default_run_config();
  b.seed = 5;
  b.resolve_seeds();
  CHECK(a.data.seed == b.data.seed);
  CHECK(a.pretrain.seed == b.pretrain.seed);
  // distinct stages get distinct streams
  CHECK(a.data.seed != a.pretrain.seed);
  CHECK(a.moderator.seed != a.pretrain.seed);
  CHECK(a.nft_decoder.seed != a.nft_diffusion.seed);
  b.seed = 6;
  b.resolve_seeds();
  CHECK(a.data.seed != b.data.seed);
}

TEST_CASE("config hash covers substantive fields but not force/jobs") {
  RunConfig a = default_run_config();
  RunConfig b = a;
  CHECK(a.config_hash() == b.config_hash());
  b.force = true;
  b.jobs = 8;
  CHECK(a.config_hash() == b.config_hash());
  b = a;
  b.seed = 99;
  b.resolve_seeds();
  CHECK(a.config_hash() != b.config_hash());
  b = a;
  b.pretrain.ae_iters += 1;
  CHECK(a.config_hash() != b.config_hash());
  b = a;
  b.attack_base.lr *= 2.0;
  CHECK(a.config_hash() != b.config_hash());
}

TEST_CASE("PATRONUS_OUT overrides the configured output directory") {
  const fs::path p = write_config("pipe_env.json", micro_json("ignored_dir"));
  setenv("PATRONUS_OUT", "env_dir", 1);
  RunConfig c = load_run_config(p.string());
  unsetenv("PATRONUS_OUT");
  CHECK(c.out_dir == "env_dir");
  CHECK(load_run_config(p.string()).out_dir == "ignored_dir");
  fs::remove(p);
}

TEST_CASE("running a stage before its dependencies is a dependency error") {
  const fs::path out = fs::temp_directory_path() / "pipe_deps";
  fs::remove_all(out);
  const fs::path p = write_config("pipe_dep.json", micro_json(out.string()));
  RunConfig c = load_run_config(p.string());
  CHECK_THROWS_AS(run_stage(Stage::moderate, c), DependencyError);
  CHECK_THROWS_AS(run_stage(Stage::report, c), DependencyError);
  // the failed attempt must not leave partial outputs behind
  CHECK_FALSE(fs::exists(out / "micro" / "checkpoints"));
  fs::remove_all(out);
  fs::remove(p);
}

TEST_CASE("stages run, are skipped when up to date, and rerun on force") {
  const fs::path out = fs::temp_directory_path() / "pipe_run";
  fs::remove_all(out);
  const fs::path p = write_config("pipe_run.json", micro_json(out.string()));
  RunConfig c = load_run_config(p.string());

  StageResult r1 = run_stage(Stage::gen_data, c);
  CHECK_FALSE(r1.skipped);
  CHECK(fs::exists(out / "micro" / "manifest.json"));
  StageResult r2 = run_stage(Stage::gen_data, c);
  CHECK(r2.skipped);

  StageResult r3 = run_stage(Stage::pretrain, c);
  CHECK_FALSE(r3.skipped);
  CHECK(fs::exists(out / "micro" / "checkpoints" / "encoder.ptrn"));
  CHECK(run_stage(Stage::pretrain, c).skipped);

  // forced rerun reproduces bit-identical checkpoints
  const uint64_t h = file_hash((out / "micro" / "checkpoints" / "encoder.ptrn").string());
  RunConfig forced = c;
  forced.force = true;
  CHECK_FALSE(run_stage(Stage::pretrain, forced).skipped);
  CHECK(file_hash((out / "micro" / "checkpoints" / "encoder.ptrn").string()) == h);

  // a config change invalidates downstream staleness checks
  RunConfig changed = c;
  changed.pretrain.ae_iters += 1;
  CHECK_FALSE(run_stage(Stage::pretrain, changed).skipped);

  // manifest records the stage with hashes and timing
  std::ifstream is(out / "micro" / "manifest.json");
  nlohmann::json m = nlohmann::json::parse(is);
  CHECK(m.at("run_id") == "micro");
  REQUIRE(m.at("stages").contains("pretrain"));
  const auto& st = m.at("stages").at("pretrain");
  CHECK(st.contains("config_hash"));
  CHECK(st.at("outputs").size() > 0);
  CHECK(st.at("wall_seconds").get<double>() >= 0.0);
  fs::remove_all(out);
  fs::remove(p);
}
