#include "patronus/models.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "patronus/errors.hpp"
#include "patronus/optim.hpp"

namespace patronus {

namespace {
// Cosine decay from base_lr down to 5% of base_lr over the run.
double cosine_lr(double base_lr, int it, int iters) {
  if (iters <= 1) return base_lr;
  const double t = static_cast<double>(it) / static_cast<double>(iters - 1);
  return base_lr * (0.05 + 0.475 * (1.0 + std::cos(M_PI * t)));
}

// random per-item circular shifts; closes the generalisation gap on small sets
void shift_augment(ImageBatch* batch, Rng& rng) {
  const int C = batch->pixels.dim(1), H = batch->pixels.dim(2), W = batch->pixels.dim(3);
  Tensor shifted(batch->pixels.shape);
  for (int b = 0; b < batch->size(); ++b) {
    const int dy = static_cast<int>(rng.uniform_int(7)) - 3;
    const int dx = static_cast<int>(rng.uniform_int(7)) - 3;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          shifted.at4(b, c, y, x) =
              batch->pixels.at4(b, c, ((y + dy) % H + H) % H, ((x + dx) % W + W) % W);
  }
  batch->pixels = std::move(shifted);
}
}  // namespace

void DivergenceGuard::check(double loss) {
  if (!std::isfinite(loss)) throw TrainingFailure(what_ + ": non-finite loss");
  if (initial_ < 0.0) initial_ = std::max(loss, 1e-12);
  if (loss > 10.0 * initial_) {
    if (++streak_ >= 100) throw TrainingFailure(what_ + ": diverged (loss > 10x initial for 100 iters)");
  } else {
    streak_ = 0;
  }
}

std::vector<int> sample_indices(int n, int count, Rng& rng) {
  std::vector<int> idx(static_cast<size_t>(count));
  for (auto& i : idx) i = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
  return idx;
}

Tensor noise_latents(const Tensor& x0, const Tensor& z, const std::vector<int>& ts,
                     const DiffusionSchedule& sched) {
  const int B = x0.dim(0);
  const int64_t item = x0.size() / B;
  Tensor xt(x0.shape);
  for (int b = 0; b < B; ++b) {
    const int t = ts[static_cast<size_t>(b)];
    if (t < 0 || t >= sched.T) throw DimensionError("timestep out of range");
    const double sc = sched.signal_coeff(t), nc = sched.noise_coeff(t);
    for (int64_t i = 0; i < item; ++i) {
      const int64_t k = static_cast<int64_t>(b) * item + i;
      xt[k] = sc * x0[k] + nc * z[k];
    }
  }
  return xt;
}

Tensor encode_normalized(const Encoder& enc, const ParamTree& enc_tree,
                         const ParamTree& den_tree, const Tensor& images) {
  Tensor lat = enc.forward(enc_tree, images);
  const Tensor& mu = den_tree.at("latent_mean");
  const Tensor& sd = den_tree.at("latent_std");
  const int B = lat.dim(0), LC = lat.dim(1);
  const int64_t hw = static_cast<int64_t>(lat.dim(2)) * lat.dim(3);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < LC; ++c) {
      double* p = lat.data() + (static_cast<int64_t>(b) * LC + c) * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] = (p[i] - mu[c]) / sd[c];
    }
  return lat;
}

Tensor sample_latents(const Denoiser& den, const ParamTree& den_tree,
                      const DiffusionSchedule& sched, const std::vector<int>& class_ids,
                      uint64_t seed) {
  const int B = static_cast<int>(class_ids.size());
  const int hw = den.latent_hw();
  Rng rng(derive_seed(seed, "sample_latents"));
  Tensor x = Tensor::randn({B, Encoder::kLatentChannels, hw, hw}, rng);
  std::vector<int> ts(static_cast<size_t>(B));
  const std::vector<int> null_ids(static_cast<size_t>(B), den.null_class_id());
  for (int t = sched.T - 1; t >= 0; --t) {
    std::fill(ts.begin(), ts.end(), t);
    // classifier-free guidance: extrapolate from the unconditional prediction
    Tensor eps = den.forward(den_tree, x, class_ids, ts);
    Tensor eps_null = den.forward(den_tree, x, null_ids, ts);
    for (int64_t i = 0; i < eps.size(); ++i)
      eps[i] = eps_null[i] + (1.0 + Denoiser::kGuidance) * (eps[i] - eps_null[i]);
    const double a = sched.alphas[t], abar = sched.alpha_bars[t], beta = sched.betas[t];
    const double inv_sqrt_a = 1.0 / std::sqrt(a);
    const double eps_coef = beta / std::sqrt(1.0 - abar);
    const double sigma = std::sqrt(beta);
    for (int64_t i = 0; i < x.size(); ++i) {
      double mean = inv_sqrt_a * (x[i] - eps_coef * eps[i]);
      x[i] = t > 0 ? mean + sigma * rng.normal() : mean;
    }
  }
  const Tensor& mu = den_tree.at("latent_mean");
  const Tensor& sd = den_tree.at("latent_std");
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < Encoder::kLatentChannels; ++c) {
      double* p = x.data() + (static_cast<int64_t>(b) * Encoder::kLatentChannels + c) * hw * hw;
      for (int64_t i = 0; i < static_cast<int64_t>(hw) * hw; ++i) p[i] = p[i] * sd[c] + mu[c];
    }
  return x;
}

void pretrain_autoencoder(const ImageBatch& train, const ImageBatch& held_out,
                          const PretrainConfig& cfg, int image_size, int channels,
                          ParamTree* enc_tree, ParamTree* dec_tree, PretrainMetrics* metrics) {
  Rng rng(derive_seed(cfg.seed, "pretrain_ae"));
  *enc_tree = Encoder::init(image_size, channels, cfg.seed);
  *dec_tree = Decoder::init(image_size, channels, cfg.seed + 1);
  Encoder enc(*enc_tree, image_size, channels);
  Decoder dec(*dec_tree, image_size, channels);
  Optimizer opt_e(OptKind::adam, cfg.ae_lr, *enc_tree);
  Optimizer opt_d(OptKind::adam, cfg.ae_lr, *dec_tree);
  DivergenceGuard guard("pretrain_autoencoder");

  for (int it = 0; it < cfg.ae_iters; ++it) {
    const double lr = cosine_lr(cfg.ae_lr, it, cfg.ae_iters);
    opt_e.set_lr(lr);
    opt_d.set_lr(lr);
    ImageBatch batch = train.select(sample_indices(train.size(), cfg.batch, rng));
    shift_augment(&batch, rng);
    Encoder::Cache ec;
    Tensor lat = enc.forward(*enc_tree, batch.pixels, &ec);
    Decoder::Cache dc;
    Tensor recon = dec.forward(*dec_tree, lat, &dc);

    const int64_t n = recon.size();
    Tensor d_recon(recon.shape);
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = recon[i] - batch.pixels[i];
      loss += d * d;
      d_recon[i] = 2.0 * d / static_cast<double>(n);
    }
    loss /= static_cast<double>(n);
    // latent L2 regulariser
    const int64_t m = lat.size();
    for (int64_t i = 0; i < m; ++i) loss += cfg.latent_l2 * lat[i] * lat[i] / static_cast<double>(m);
    guard.check(loss);

    ParamTree gd = dec_tree->zeros_like();
    Tensor d_lat(lat.shape);
    dec.backward(*dec_tree, dc, d_recon, &gd, &d_lat);
    for (int64_t i = 0; i < m; ++i)
      d_lat[i] += cfg.latent_l2 * 2.0 * lat[i] / static_cast<double>(m);
    ParamTree ge = enc_tree->zeros_like();
    enc.backward(*enc_tree, ec, d_lat, &ge, nullptr);
    opt_d.step(*dec_tree, gd);
    opt_e.step(*enc_tree, ge);
  }

  if (metrics) {
    Tensor lat = enc.forward(*enc_tree, held_out.pixels);
    Tensor recon = dec.forward(*dec_tree, lat);
    metrics->recon_mse = mse(recon, held_out.pixels);
  }
}

void pretrain_diffusion(const ParamTree& enc_tree, const ImageBatch& train,
                        const PretrainConfig& cfg, int image_size, int channels, int n_classes,
                        const DiffusionSchedule& sched, ParamTree* den_tree,
                        PretrainMetrics* metrics) {
  Rng rng(derive_seed(cfg.seed, "pretrain_diffusion"));
  Encoder enc(enc_tree, image_size, channels);
  const int hw = image_size / 4;
  *den_tree = Denoiser::init(hw, n_classes, cfg.seed + 2);

  {  // per-channel latent standardisation over the training set
    Tensor lat = enc.forward(enc_tree, train.pixels);
    const int B = lat.dim(0), LC = lat.dim(1);
    const int64_t chw = static_cast<int64_t>(lat.dim(2)) * lat.dim(3);
    const double n = static_cast<double>(B) * chw;
    double mu_avg = 0.0, sd_avg = 0.0;
    for (int c = 0; c < LC; ++c) {
      double mu = 0.0, var = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = lat.data() + (static_cast<int64_t>(b) * LC + c) * chw;
        for (int64_t i = 0; i < chw; ++i) mu += p[i];
      }
      mu /= n;
      for (int b = 0; b < B; ++b) {
        const double* p = lat.data() + (static_cast<int64_t>(b) * LC + c) * chw;
        for (int64_t i = 0; i < chw; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= n;
      den_tree->at("latent_mean")[c] = mu;
      den_tree->at("latent_std")[c] = std::max(std::sqrt(var), 1e-6);
      mu_avg += mu / LC;
      sd_avg += den_tree->at("latent_std")[c] / LC;
    }
    if (metrics) {
      metrics->latent_mean = mu_avg;
      metrics->latent_std = sd_avg;
    }
  }

  Denoiser den(*den_tree, hw, n_classes);
  Optimizer opt(OptKind::adam, cfg.diff_lr, *den_tree);
  DivergenceGuard guard("pretrain_diffusion");
  double running = 0.0;
  int running_n = 0;

  for (int it = 0; it < cfg.diff_iters; ++it) {
    opt.set_lr(cosine_lr(cfg.diff_lr, it, cfg.diff_iters));
    ImageBatch batch = train.select(sample_indices(train.size(), cfg.batch, rng));
    Tensor x0 = encode_normalized(enc, enc_tree, *den_tree, batch.pixels);
    const int B = x0.dim(0);
    Tensor z = Tensor::randn(x0.shape, rng);
    std::vector<int> ts(static_cast<size_t>(B));
    for (auto& t : ts) t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.T)));
    Tensor xt = noise_latents(x0, z, ts, sched);

    // label dropout trains the unconditional row for classifier-free guidance
    std::vector<int> cond_labels = batch.labels;
    for (auto& l : cond_labels)
      if (rng.uniform(0.0, 1.0) < Denoiser::kCondDropout) l = den.null_class_id();

    Denoiser::Cache dc;
    Tensor eps = den.forward(*den_tree, xt, cond_labels, ts, &dc);
    const int64_t n = eps.size();
    Tensor d_eps(eps.shape);
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = eps[i] - z[i];
      loss += d * d;
      d_eps[i] = 2.0 * d / static_cast<double>(n);
    }
    loss /= static_cast<double>(n);
    guard.check(loss);
    if (it >= cfg.diff_iters - 200) {
      running += loss;
      ++running_n;
    }

    ParamTree g = den_tree->zeros_like();
    den.backward(*den_tree, dc, d_eps, &g, nullptr);
    opt.step(*den_tree, g);
  }
  if (metrics && running_n > 0) metrics->denoise_mse = running / running_n;

  // the conditioning tables stand in for the frozen text encoder
  for (const char* name :
       {"class_emb", "film1.scale", "film1.shift", "film2.scale", "film2.shift"}) {
    int ce = den_tree->index_of(name);
    den_tree->entries[static_cast<size_t>(ce)].trainable = false;
  }
}

void train_probe(const ImageBatch& train, const ImageBatch& held_out, const PretrainConfig& cfg,
                 int image_size, int channels, int n_classes, ParamTree* probe_tree,
                 PretrainMetrics* metrics, const ParamTree* enc_tree, const ParamTree* dec_tree) {
  Rng rng(derive_seed(cfg.seed, "train_probe"));
  *probe_tree = Probe::init(image_size, channels, n_classes, cfg.seed + 3);
  Probe probe(*probe_tree, image_size, channels, n_classes);
  Optimizer opt(OptKind::adam, cfg.probe_lr, *probe_tree);
  DivergenceGuard guard("train_probe");

  std::optional<Encoder> enc;
  std::optional<Decoder> dec;
  if (enc_tree && dec_tree) {
    enc.emplace(*enc_tree, image_size, channels);
    dec.emplace(*dec_tree, image_size, channels);
  }

  for (int it = 0; it < cfg.probe_iters; ++it) {
    opt.set_lr(cosine_lr(cfg.probe_lr, it, cfg.probe_iters));
    ImageBatch batch = train.select(sample_indices(train.size(), cfg.batch, rng));
    shift_augment(&batch, rng);
    // latent-noise augmentation: replace half the batch with a decode of its
    // perturbed latent. Sampling residue reaching the probe is exactly
    // decoder-filtered latent noise, so this teaches the probe that such
    // artefacts are class-preserving rather than the unsafe texture. Benign
    // items get the heavier perturbation; unsafe items stay near the clean
    // latent so the class remains anchored to coherent periodic structure.
    if (enc && it % 2 == 1) {
      Tensor lat = enc->forward(*enc_tree, batch.pixels);
      const int64_t item = lat.size() / batch.size();
      for (int bi = 0; bi < batch.size(); ++bi) {
        const bool is_unsafe = batch.labels[static_cast<size_t>(bi)] == batch.unsafe_id;
        const double ns = rng.uniform(0.0, is_unsafe ? 0.15 : 1.0);
        for (int64_t k = 0; k < item; ++k) lat[bi * item + k] += ns * rng.normal();
      }
      batch.pixels = dec->forward(*dec_tree, lat);
    }
    // corruption augmentation keeps the probe from reading generator
    // artefacts as the high-frequency unsafe texture: benign images get heavy
    // noise and occasional box blur, unsafe images light noise only, so the
    // unsafe class stays anchored to coherent periodic structure
    {
      const int C = batch.pixels.dim(1), H = batch.pixels.dim(2), W = batch.pixels.dim(3);
      for (int bi = 0; bi < batch.size(); ++bi) {
        const bool is_unsafe = batch.labels[static_cast<size_t>(bi)] == batch.unsafe_id;
        if (!is_unsafe && rng.uniform(0.0, 1.0) < 0.5) {
          Tensor blurred({1, C, H, W});
          for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
              for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                int cnt = 0;
                for (int dy = -1; dy <= 1; ++dy)
                  for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    acc += batch.pixels.at4(bi, c, yy, xx);
                    ++cnt;
                  }
                blurred.at4(0, c, y, x) = acc / cnt;
              }
          for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
              for (int x = 0; x < W; ++x) batch.pixels.at4(bi, c, y, x) = blurred.at4(0, c, y, x);
        }
        const double ns = rng.uniform(0.0, is_unsafe ? 0.1 : 0.3);
        const int64_t item = batch.pixels.size() / batch.size();
        for (int64_t k = 0; k < item; ++k) {
          double& v = batch.pixels[bi * item + k];
          v = std::clamp(v + ns * rng.normal(), 0.0, 1.0);
        }
      }
    }
    Probe::Cache pc;
    Tensor lg = probe.logits(*probe_tree, batch.pixels, &pc);
    Tensor probs = lg;
    softmax_rows(probs);
    const int B = lg.dim(0), N = lg.dim(1);
    double loss = 0.0;
    Tensor d_logits(lg.shape);
    for (int b = 0; b < B; ++b) {
      const int y = batch.labels[static_cast<size_t>(b)];
      loss -= std::log(std::max(probs[static_cast<int64_t>(b) * N + y], 1e-12));
      for (int i = 0; i < N; ++i)
        d_logits[static_cast<int64_t>(b) * N + i] =
            (probs[static_cast<int64_t>(b) * N + i] - (i == y ? 1.0 : 0.0)) / B;
    }
    loss /= B;
    guard.check(loss);
    ParamTree g = probe_tree->zeros_like();
    probe.backward(*probe_tree, pc, d_logits, &g);
    opt.step(*probe_tree, g);
  }

  // freeze: the probe serves as a fixed measurement instrument downstream
  for (auto& e : probe_tree->entries) e.trainable = false;

  if (metrics) {
    auto pred = probe.predict(*probe_tree, held_out.pixels);
    int correct = 0;
    for (int i = 0; i < held_out.size(); ++i)
      if (pred[static_cast<size_t>(i)] == held_out.labels[static_cast<size_t>(i)]) ++correct;
    metrics->probe_accuracy = static_cast<double>(correct) / held_out.size();
  }
}

}  // namespace patronus
