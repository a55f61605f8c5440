#pragma once

#include <utility>
#include <vector>

#include "patronus/models.hpp"
#include "patronus/nets.hpp"
#include "patronus/synthdata.hpp"

namespace patronus {

struct LossWeights {
  double alpha = 1.0;   // benign reconstruction term
  double beta = 1.0;    // rejection term
  double gamma = 0.5;   // fine-tuning-resistance term (MGDA output)
  double lambda = 0.5;  // benign-preservation term (MGDA output)

  void validate() const;
};

// All losses are batch means, so the weights transfer across batch sizes.
// Gradients are ACCUMULATED into the caller's gradient tree; frozen
// operands (E, D0, P) never receive one.
namespace losses {

// mean squared distance between extractor features of x and of the zero
// image, averaged over batch and feature dimension
double smoothed_rejection(const Perceptual& P, const ParamTree& p_tree, const Tensor& images);
double smoothed_rejection_grad(const Perceptual& P, const ParamTree& p_tree, const Tensor& images,
                               Tensor* d_images);

// generic form so tests can substitute extractor doubles (e.g. identity)
template <class FeatFn>
double smoothed_rejection_generic(FeatFn&& feat, const Tensor& images) {
  Tensor zero(images.shape);
  zero.shape[0] = 1;
  zero.v.assign(static_cast<size_t>(Tensor::numel(zero.shape)), 0.0);
  Tensor fx = feat(images);
  Tensor f0 = feat(zero);
  const int B = fx.dim(0), F = fx.dim(1);
  double s = 0.0;
  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f) {
      const double d = fx[static_cast<int64_t>(b) * F + f] - f0[f];
      s += d * d;
    }
  return s / (static_cast<double>(B) * F);
}

// alpha * MSE(D(E(x_n)), x_n) + beta * smoothed_rejection(D(E(x_u)));
// gradient flows to D only (E frozen)
double conditional_decoding_loss(const Decoder& dec, const ParamTree& dec_tree,
                                 const Encoder& enc, const ParamTree& enc_tree,
                                 const ImageBatch& x_n, const ImageBatch& x_u,
                                 const LossWeights& w, const Perceptual& P,
                                 const ParamTree& p_tree, ParamTree* d_dec);

// smoothed_rejection(D(f_u)) + MSE(D0(f_n), D(f_n)); D0 frozen
double feature_calibration_loss(const Decoder& dec, const ParamTree& dec_tree,
                                const ParamTree& dec0_tree, const Tensor& f_u, const Tensor& f_n,
                                const Perceptual& P, const ParamTree& p_tree, ParamTree* d_dec);

// mean smoothed_rejection(D(E(x))) + mean smoothed_rejection(D(f)),
// unsafe-family inputs only
double ftr_decoder(const Decoder& dec, const ParamTree& dec_tree, const ImageBatch& x_eval,
                   const Tensor& f_eval, const Encoder& enc, const ParamTree& enc_tree,
                   const Perceptual& P, const ParamTree& p_tree, ParamTree* d_dec);

// MSE between predicted noise and the zero tensor on noised unsafe latents;
// timesteps/noise drawn from `seed`
double ftr_diffusion(const Denoiser& den, const ParamTree& den_tree, const ImageBatch& x_eval,
                     const Encoder& enc, const ParamTree& enc_tree,
                     const DiffusionSchedule& sched, uint64_t seed, ParamTree* d_den);

// MSE(D(E(x)), x) + MSE(D0(f), D(f)) on benign data; D0 frozen
double bpp_decoder(const Decoder& dec, const ParamTree& dec_tree, const ParamTree& dec0_tree,
                   const ImageBatch& x_n, const Tensor& f_n, const Encoder& enc,
                   const ParamTree& enc_tree, ParamTree* d_dec);

// standard epsilon-prediction objective on benign data, seeded draws
double bpp_diffusion(const Denoiser& den, const ParamTree& den_tree, const ImageBatch& x_n,
                     const Encoder& enc, const ParamTree& enc_tree,
                     const DiffusionSchedule& sched, uint64_t seed, ParamTree* d_den);

// generic denoising objective against a caller-chosen target; the epsilon
// callable receives (x_t, labels, ts, z) so tests can substitute oracles
template <class EpsFn>
double denoise_mse_generic(EpsFn&& eps_fn, const Tensor& x0, const std::vector<int>& labels,
                           const DiffusionSchedule& sched, uint64_t seed, bool target_is_noise);

double combine(const std::vector<std::pair<double, double>>& losses_and_weights);

}  // namespace losses

template <class EpsFn>
double losses::denoise_mse_generic(EpsFn&& eps_fn, const Tensor& x0, const std::vector<int>& labels,
                                   const DiffusionSchedule& sched, uint64_t seed,
                                   bool target_is_noise) {
  Rng rng(derive_seed(seed, "denoise_generic"));
  const int B = x0.dim(0);
  Tensor z = Tensor::randn(x0.shape, rng);
  std::vector<int> ts(static_cast<size_t>(B));
  for (auto& t : ts) t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.T)));
  Tensor xt = noise_latents(x0, z, ts, sched);
  Tensor eps = eps_fn(xt, labels, ts, z);
  double s = 0.0;
  for (int64_t i = 0; i < eps.size(); ++i) {
    const double d = eps[i] - (target_is_noise ? z[i] : 0.0);
    s += d * d;
  }
  return s / static_cast<double>(eps.size());
}

}  // namespace patronus
