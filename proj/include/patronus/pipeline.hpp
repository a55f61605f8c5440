#pragma once

#include <cstdint>
#include <string>

#include "patronus/models.hpp"
#include "patronus/moderator.hpp"
#include "patronus/nft.hpp"
#include "patronus/redteam.hpp"
#include "patronus/synthdata.hpp"

namespace patronus {

// Stage DAG: gen-data -> pretrain -> moderate -> align -> harden -> attack
// -> evaluate -> report. Each stage records config hash, input/output
// content hashes and wall time in <run>/manifest.json and is skipped on
// re-run while those match (unless forced).

enum class Stage { gen_data, pretrain, moderate, align, harden, attack, evaluate, report };

const char* to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct RunConfig {
  std::string run_id = "default";
  std::string out_dir = "out";
  uint64_t seed = 0;

  DataConfig data;
  SplitSpec split_spec;
  PretrainConfig pretrain;
  ModeratorConfig moderator;
  int align_iters = 800;
  double align_lr = 1e-3;
  NftConfig nft_decoder;
  NftConfig nft_diffusion;
  AttackConfig attack_base;  // the default grids vary each axis off this
  int attack_pool_size = 2000;
  int eval_seeds = 5;
  int eval_samples = 64;

  bool force = false;  // rerun stages even when up to date
  int jobs = 1;

  void validate() const;
  // global seed fans out to per-stage seeds (splitmix derivation)
  void resolve_seeds();
  uint64_t config_hash() const;  // covers every field except force/jobs
  std::string run_dir() const { return out_dir + "/" + run_id; }
};

// parse + validate + resolve_seeds; PATRONUS_OUT overrides out_dir
RunConfig load_run_config(const std::string& path);
RunConfig default_run_config();

struct StageResult {
  bool skipped = false;
  double wall_seconds = 0.0;
};

// runs one stage (dependency-checked against the manifest)
StageResult run_stage(Stage s, const RunConfig& cfg);

// all stages in DAG order
void run_all(const RunConfig& cfg);

// FNV-1a over the file bytes, as recorded in manifests
uint64_t file_hash(const std::string& path);

}  // namespace patronus
