#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "patronus/errors.hpp"
#include "patronus/pipeline.hpp"

using namespace patronus;

int main(int argc, char** argv) {
  CLI::App app{"patronus: moderated text-to-image pipeline trainer and red-team harness"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_path;
  uint64_t seed = 0;
  bool have_seed = false, force = false;
  int jobs = 1;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override the global seed")->each([&](const std::string&) {
    have_seed = true;
  });
  app.add_flag("--force", force, "rerun stages even when outputs are up to date");
  app.add_option("--jobs", jobs, "worker threads for the attack sweep")
      ->check(CLI::PositiveNumber);

  std::vector<std::pair<std::string, CLI::App*>> cmds;
  for (const char* name : {"gen-data", "pretrain", "moderate", "align", "harden", "attack",
                           "evaluate", "report", "run"})
    cmds.emplace_back(name, app.add_subcommand(
                                name, name == std::string("run")
                                          ? "all stages in order"
                                          : std::string("run the ") + name + " stage"));

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = config_path.empty() ? default_run_config() : load_run_config(config_path);
    if (config_path.empty())
      if (const char* env = std::getenv("PATRONUS_OUT"); env && *env) cfg.out_dir = env;
    if (have_seed) {
      cfg.seed = seed;
      cfg.resolve_seeds();
    }
    cfg.force = force;
    cfg.jobs = jobs;
    cfg.validate();

    for (const auto& [name, sub] : cmds) {
      if (!sub->parsed()) continue;
      if (name == "run") {
        run_all(cfg);
        std::printf("run complete: %s\n", cfg.run_dir().c_str());
      } else {
        StageResult r = run_stage(stage_from_string(name), cfg);
        if (r.skipped)
          std::printf("%s: up to date (use --force to rerun)\n", name.c_str());
        else
          std::printf("%s: done in %.1fs\n", name.c_str(), r.wall_seconds);
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
  return 0;
}
