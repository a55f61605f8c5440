#pragma once

#include <cstdint>
#include <vector>

#include "patronus/param_tree.hpp"
#include "patronus/schedule.hpp"

namespace patronus {

// Conv stacks are fixed-shape; only the image size and class count vary.
// Channel widths are sized for single-digit-MFLOP forward passes so the full
// bilevel pipeline stays desk-scale.

// image [B,C,S,S] -> latent [B,4,S/4,S/4], two stride-2 blocks
class Encoder {
 public:
  static constexpr int kLatentChannels = 4;

  struct Cache {
    Tensor x, z1, a1, z2, a2, out;
  };

  static ParamTree init(int image_size, int channels, uint64_t seed);
  Encoder(const ParamTree& tree, int image_size, int channels);

  Tensor forward(const ParamTree& p, const Tensor& x, Cache* cache = nullptr) const;
  void backward(const ParamTree& p, const Cache& cache, const Tensor& d_out, ParamTree* grads,
                Tensor* d_x) const;

  int latent_hw() const { return image_size_ / 4; }

 private:
  int image_size_, channels_;
  int w1_, b1_, w2_, b2_, w3_, b3_;
  static constexpr int kC1 = 8, kC2 = 16;
};

// latent [B,4,S/4,S/4] -> image [B,C,S,S] in (0,1) via sigmoid output
class Decoder {
 public:
  struct Cache {
    Tensor f, z1, a1, u1, z2, a2, u2, z3, out;
  };

  static ParamTree init(int image_size, int channels, uint64_t seed);
  Decoder(const ParamTree& tree, int image_size, int channels);

  Tensor forward(const ParamTree& p, const Tensor& f, Cache* cache = nullptr) const;
  void backward(const ParamTree& p, const Cache& cache, const Tensor& d_out, ParamTree* grads,
                Tensor* d_f) const;

 private:
  int image_size_, channels_;
  int w1_, b1_, w2_, b2_, w3_, b3_;
  static constexpr int kC1 = 16, kC2 = 8;
};

// epsilon-prediction denoiser over latents with class + sinusoidal timestep
// conditioning and two residual blocks. Latents are standardised by the
// latent_mean / latent_std entries (filled in after autoencoder pretraining).
class Denoiser {
 public:
  struct Cache {
    Tensor x, z1, zc, a1;                      // stem
    Tensor r1_z1, r1_a1, r1_z2, r1_out, r1_f;  // res block 1 (+ class modulation)
    Tensor r2_z1, r2_a1, r2_z2, r2_out, r2_f;  // res block 2 (+ class modulation)
    Tensor a3, out;
    std::vector<int> labels, ts;
    std::vector<std::vector<double>> temb;     // per-item sinusoidal embedding
  };

  static ParamTree init(int latent_hw, int n_classes, uint64_t seed);
  Denoiser(const ParamTree& tree, int latent_hw, int n_classes);

  // t entries must lie in [0, T); labels in [0, n_classes)
  Tensor forward(const ParamTree& p, const Tensor& x, const std::vector<int>& labels,
                 const std::vector<int>& ts, Cache* cache = nullptr) const;
  void backward(const ParamTree& p, const Cache& cache, const Tensor& d_out, ParamTree* grads,
                Tensor* d_x) const;

  int n_classes() const { return n_classes_; }
  // id of the unconditional embedding row used for classifier-free guidance
  int null_class_id() const { return n_classes_; }
  int latent_hw() const { return latent_hw_; }

  static constexpr int kChannels = 16;
  static constexpr int kEmbDim = 16;
  // classifier-free guidance: label dropout rate during training and the
  // guidance weight applied during ancestral sampling
  static constexpr double kCondDropout = 0.1;
  static constexpr double kGuidance = 2.0;

 private:
  int latent_hw_, n_classes_;
  int w1_, b1_, class_emb_, wt_, bt_;
  int r1_wa_, r1_ba_, r1_wb_, r1_bb_;
  int r2_wa_, r2_ba_, r2_wb_, r2_bb_;
  int f1s_, f1t_, f2s_, f2t_;  // per-class scale/shift after each res block
  int w3_, b3_;
};

// frozen random conv stack used as the perceptual metric; weights pinned by
// seed 1234 and identical in every run
class Perceptual {
 public:
  static constexpr uint64_t kPinnedSeed = 1234;

  struct Cache {
    Tensor x, z1, a1, z2, a2, z3, a3;
  };

  static ParamTree init(int image_size, int channels);
  Perceptual(const ParamTree& tree, int image_size, int channels);

  // output [B, feature_dim]; 1024 per item for 32x32x3
  Tensor forward(const ParamTree& p, const Tensor& x, Cache* cache = nullptr) const;
  // frozen: only the input gradient is ever needed
  void backward_input(const ParamTree& p, const Cache& cache, const Tensor& d_feat,
                      Tensor* d_x) const;

  int feature_dim() const;

 private:
  int image_size_, channels_;
  int w1_, b1_, w2_, b2_, w3_, b3_;
  static constexpr int kC1 = 16, kC2 = 32, kC3 = 64;
};

// classifier over the synthetic families; its penultimate embedding doubles
// as the surrogate semantic-score space
class Probe {
 public:
  static constexpr int kEmbedDim = 64;

  struct Cache {
    Tensor x, z1, a1, z2, a2, z3, a3, flat, ze, emb, logits;
  };

  static ParamTree init(int image_size, int channels, int n_classes, uint64_t seed);
  Probe(const ParamTree& tree, int image_size, int channels, int n_classes);

  Tensor logits(const ParamTree& p, const Tensor& x, Cache* cache = nullptr) const;
  Tensor embed(const ParamTree& p, const Tensor& x) const;  // [B, kEmbedDim]
  void backward(const ParamTree& p, const Cache& cache, const Tensor& d_logits,
                ParamTree* grads) const;

  std::vector<int> predict(const ParamTree& p, const Tensor& x) const;
  // softmax probability of class `cls` per item
  std::vector<double> class_prob(const ParamTree& p, const Tensor& x, int cls) const;

  int n_classes() const { return n_classes_; }

 private:
  int image_size_, channels_, n_classes_;
  int w1_, b1_, w2_, b2_, w3_, b3_, we_, be_, wo_, bo_;
  static constexpr int kC1 = 16, kC2 = 32, kC3 = 32;
};

// rows [B, n] -> per-row softmax
void softmax_rows(Tensor& t);

}  // namespace patronus
