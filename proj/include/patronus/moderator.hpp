#pragma once

#include <string>

#include "patronus/losses.hpp"
#include "patronus/models.hpp"

namespace patronus {

struct ModeratorConfig {
  int n1 = 1200;           // stage-1 iterations
  double lr_alpha1 = 5e-5;
  int batch = 16;          // images per family per step
  LossWeights weights;     // alpha / beta mixing for L_im
  int feature_refresh = 200;
  int feature_set_size = 64;
  uint64_t seed = 0;

  void validate() const;
};

struct ModeratorLogRow {
  int iteration;
  double l_cd, l_fc, unsafe_rate, benign_mse;
};

// unsafe- and benign-conditioned diffusion features sampled through the
// full reverse chain (the F_u / F_n sets)
void build_feature_sets(const Denoiser& den, const ParamTree& den_tree,
                        const DiffusionSchedule& sched, int n_benign_classes, int n_each,
                        uint64_t seed, Tensor* f_u, Tensor* f_n);

// stage-1 training: joint conditional decoding + feature-space calibration;
// returns the conditional decoder (E, U, P untouched)
ParamTree train_moderator(const ParamTree& dec0_tree, const ParamTree& enc_tree,
                          const ParamTree& den_tree, const ParamTree& perc_tree,
                          const ImageBatch& benign, const ImageBatch& unsafe_data,
                          const DiffusionSchedule& sched, int image_size, int channels,
                          const ModeratorConfig& cfg,
                          std::vector<ModeratorLogRow>* log = nullptr,
                          const ParamTree* probe_tree = nullptr);

void write_moderator_log(const std::vector<ModeratorLogRow>& log, const std::string& path);

}  // namespace patronus
