#pragma once

#include <functional>
#include <string>
#include <vector>

#include "patronus/losses.hpp"
#include "patronus/models.hpp"
#include "patronus/optim.hpp"

namespace patronus {

// one sampled inner-loop adversary configuration (phi ~ Phi)
struct FineTuneStrategy {
  OptKind optimizer = OptKind::adam;
  double lr = 1e-4;
  int batch = 16;
};

struct StrategyBag {
  std::vector<OptKind> optimizers{OptKind::momentum, OptKind::adam};
  std::vector<double> lrs{5e-5, 1e-4, 1e-3, 1e-2};
  std::vector<int> batches{4, 8, 12, 16, 20, 24, 30};
  int K = 20;  // inner steps

  void validate() const;
};

enum class NftTarget { decoder, diffusion };

struct NftConfig {
  int n2 = 1500;            // outer iterations
  double lr_alpha2 = 1e-5;  // outer Adam lr
  StrategyBag bag;
  NftTarget target = NftTarget::decoder;
  int eval_batch = 16;      // X_eval batch per outer step
  int bpp_batch = 16;
  int feature_set_size = 64;
  uint64_t seed = 0;

  void validate() const;
};

struct NftLogRow {
  int outer_iter;
  OptKind optimizer;
  double lr;
  int batch;
  double l_ftr, l_bpp, gamma;
  bool skipped;
};

// uniform independent draw per field
FineTuneStrategy sample_strategy(const StrategyBag& bag, Rng& rng);

// adversary objective evaluated on a fresh tune batch at inner step k;
// returns the loss and accumulates gradients when the tree pointer is set
using InnerObjective = std::function<double(const ParamTree&, int k, ParamTree*)>;
// outer objective (L_r / L_bpp) at fixed data
using Objective = std::function<double(const ParamTree&, ParamTree*)>;

struct PseudoFinetuneResult {
  ParamTree final_params;
  std::vector<double> inner_losses;
  bool failed = false;  // non-finite inner loss encountered
};

// K simulated fine-tuning steps on a COPY of m; the caller's tree is never
// mutated. on_state is invoked at every visited state M_1..M_K.
PseudoFinetuneResult pseudo_finetune(
    const ParamTree& m, const FineTuneStrategy& strategy, int K, const InnerObjective& objective,
    const std::function<void(const ParamTree&, int)>& on_state = nullptr);

// two-task min-norm point on the simplex (closed form):
// gamma* = clip(((g_bpp - g_ftr) . g_bpp) / |g_ftr - g_bpp|^2, 0, 1)
std::pair<double, double> mgda_weights(const std::vector<double>& g_ftr,
                                       const std::vector<double>& g_bpp);

// one outer update: pseudo-finetune, first-order L_ftr gradient averaged
// over the K inner states, L_bpp at M0, MGDA weighting, one Adam step.
// Returns the log row; on a failed trajectory the update is skipped.
NftLogRow nft_outer_step(ParamTree& m0, const FineTuneStrategy& strategy, int K,
                         const InnerObjective& inner, const Objective& outer_ftr,
                         const Objective& bpp, Optimizer& outer_opt, int outer_iter);

// diffusion alignment starting point: 0.5 * predict-zero-noise on unsafe +
// 0.5 * standard denoising on benign
ParamTree align_diffusion(const ParamTree& den0_tree, const ImageBatch& unsafe_data,
                          const ImageBatch& benign, const ParamTree& enc_tree,
                          const DiffusionSchedule& sched, int image_size, int channels,
                          int iters, double lr, uint64_t seed);

// full stage-2 hardening loop for one target
ParamTree train_nft(const ParamTree& m_start, NftTarget target, const ParamTree& enc_tree,
                    const ParamTree& den_tree_for_features, const ParamTree& dec0_tree,
                    const ParamTree& perc_tree, const ImageBatch& x_tune_pool,
                    const ImageBatch& x_eval_pool, const ImageBatch& benign,
                    const DiffusionSchedule& sched, int image_size, int channels,
                    const NftConfig& cfg, std::vector<NftLogRow>* log = nullptr);

void write_nft_log(const std::vector<NftLogRow>& log, const std::string& path);

}  // namespace patronus
