#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patronus/checkpoint.hpp"
#include "patronus/nets.hpp"
#include "patronus/schedule.hpp"
#include "patronus/synthdata.hpp"

namespace patronus {

struct PretrainConfig {
  int ae_iters = 6000;
  double ae_lr = 3e-3;
  int diff_iters = 4000;
  double diff_lr = 2e-3;
  int probe_iters = 2000;
  double probe_lr = 1e-3;
  int batch = 32;
  double latent_l2 = 1e-5;  // stands in for the usual KL regulariser
  uint64_t seed = 0;
};

struct PretrainMetrics {
  double recon_mse = 0.0;          // held-out autoencoder MSE (baseline_recon)
  double denoise_mse = 0.0;        // final diffusion training loss
  double probe_accuracy = 0.0;     // held-out
  double unsafe_sample_rate = 0.0; // probe unsafe rate on unsafe-conditioned samples
  double benign_sample_acc = 0.0;  // probe accuracy on benign-conditioned samples
  double latent_mean = 0.0, latent_std = 1.0;
};

// aborts with TrainingFailure after 100 consecutive iterations above
// 10x the initial loss, or on any non-finite loss
class DivergenceGuard {
 public:
  explicit DivergenceGuard(std::string what) : what_(std::move(what)) {}
  void check(double loss);

 private:
  std::string what_;
  double initial_ = -1.0;
  int streak_ = 0;
};

// draw `count` indices uniformly from [0, n)
std::vector<int> sample_indices(int n, int count, Rng& rng);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) z, elementwise per item timestep
Tensor noise_latents(const Tensor& x0, const Tensor& z, const std::vector<int>& ts,
                     const DiffusionSchedule& sched);

// encode then standardise by the denoiser's latent_mean/latent_std
Tensor encode_normalized(const Encoder& enc, const ParamTree& enc_tree,
                         const ParamTree& den_tree, const Tensor& images);

// full ancestral reverse chain under class conditioning; returns latents in
// the decoder's (denormalised) latent space, deterministic per seed
Tensor sample_latents(const Denoiser& den, const ParamTree& den_tree,
                      const DiffusionSchedule& sched, const std::vector<int>& class_ids,
                      uint64_t seed);

// reconstruction + small latent L2; returns encoder and decoder trees
void pretrain_autoencoder(const ImageBatch& train, const ImageBatch& held_out,
                          const PretrainConfig& cfg, int image_size, int channels,
                          ParamTree* enc_tree, ParamTree* dec_tree, PretrainMetrics* metrics);

// standard epsilon-prediction objective over both families; fills the
// latent standardisation constants and freezes the class-embedding table
void pretrain_diffusion(const ParamTree& enc_tree, const ImageBatch& train,
                        const PretrainConfig& cfg, int image_size, int channels, int n_classes,
                        const DiffusionSchedule& sched, ParamTree* den_tree,
                        PretrainMetrics* metrics);

// cross-entropy classifier; metrics->probe_accuracy is held-out accuracy.
// When enc_tree/dec_tree are given, half of each batch is replaced by its
// autoencoder reconstruction so decoder artefacts read as class-preserving.
void train_probe(const ImageBatch& train, const ImageBatch& held_out, const PretrainConfig& cfg,
                 int image_size, int channels, int n_classes, ParamTree* probe_tree,
                 PretrainMetrics* metrics, const ParamTree* enc_tree = nullptr,
                 const ParamTree* dec_tree = nullptr);

}  // namespace patronus
