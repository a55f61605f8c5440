#include "patronus/nft.hpp"

#include <cmath>
#include <deque>
#include <fstream>

#include "patronus/errors.hpp"
#include "patronus/moderator.hpp"

namespace patronus {

void StrategyBag::validate() const {
  if (optimizers.empty() || lrs.empty() || batches.empty())
    throw ConfigError("strategy bag: all sets must be nonempty");
  if (K < 1) throw ConfigError("strategy bag: K must be >= 1");
  for (double lr : lrs)
    if (!(lr > 0.0)) throw ConfigError("strategy bag: lr must be > 0");
  for (int b : batches)
    if (b < 1) throw ConfigError("strategy bag: batch must be >= 1");
}

void NftConfig::validate() const {
  if (n2 < 0) throw ConfigError("nft n2 must be >= 0");
  if (!(lr_alpha2 > 0.0)) throw ConfigError("nft lr_alpha2 must be > 0");
  if (eval_batch < 1 || bpp_batch < 1) throw ConfigError("nft batches must be >= 1");
  bag.validate();
}

FineTuneStrategy sample_strategy(const StrategyBag& bag, Rng& rng) {
  bag.validate();
  FineTuneStrategy s;
  s.optimizer = bag.optimizers[rng.uniform_int(bag.optimizers.size())];
  s.lr = bag.lrs[rng.uniform_int(bag.lrs.size())];
  s.batch = bag.batches[rng.uniform_int(bag.batches.size())];
  return s;
}

PseudoFinetuneResult pseudo_finetune(
    const ParamTree& m, const FineTuneStrategy& strategy, int K, const InnerObjective& objective,
    const std::function<void(const ParamTree&, int)>& on_state) {
  PseudoFinetuneResult res;
  res.final_params = m;  // the caller's tree is copied, never touched
  if (K == 0) return res;
  Optimizer opt(strategy.optimizer, strategy.lr, res.final_params);
  for (int k = 1; k <= K; ++k) {
    ParamTree grads = res.final_params.zeros_like();
    const double loss = objective(res.final_params, k, &grads);
    if (!std::isfinite(loss)) {
      res.failed = true;
      return res;
    }
    opt.step(res.final_params, grads);
    res.inner_losses.push_back(loss);
    if (on_state) on_state(res.final_params, k);
  }
  return res;
}

std::pair<double, double> mgda_weights(const std::vector<double>& g_ftr,
                                       const std::vector<double>& g_bpp) {
  if (g_ftr.size() != g_bpp.size()) throw ContractError("mgda_weights: gradient length mismatch");
  double denom = 0.0, num = 0.0;
  for (size_t i = 0; i < g_ftr.size(); ++i) {
    if (!std::isfinite(g_ftr[i]) || !std::isfinite(g_bpp[i]))
      throw ContractError("mgda_weights: non-finite gradient");
    const double d = g_ftr[i] - g_bpp[i];
    denom += d * d;
    num += (g_bpp[i] - g_ftr[i]) * g_bpp[i];
  }
  if (denom < 1e-12) return {0.5, 0.5};
  const double gamma = std::clamp(num / denom, 0.0, 1.0);
  return {gamma, 1.0 - gamma};
}

NftLogRow nft_outer_step(ParamTree& m0, const FineTuneStrategy& strategy, int K,
                         const InnerObjective& inner, const Objective& outer_ftr,
                         const Objective& bpp, Optimizer& outer_opt, int outer_iter) {
  NftLogRow row{outer_iter, strategy.optimizer, strategy.lr, strategy.batch, 0.0, 0.0, 0.0, false};

  // first-order: L_ftr gradients are taken at the inner states and applied
  // directly to the pre-trajectory parameters
  ParamTree g_ftr = m0.zeros_like();
  double l_ftr = 0.0;
  auto res = pseudo_finetune(m0, strategy, K, inner, [&](const ParamTree& mk, int) {
    l_ftr += outer_ftr(mk, &g_ftr);
  });
  if (res.failed) {
    row.skipped = true;
    return row;
  }
  // mean over the K states so lr_alpha2 is K-independent
  const double inv_k = 1.0 / static_cast<double>(K);
  l_ftr *= inv_k;
  for (auto& e : g_ftr.entries) e.values.scale_(inv_k);

  ParamTree g_bpp = m0.zeros_like();
  const double l_bpp = bpp(m0, &g_bpp);

  auto [gamma, lambda] = mgda_weights(g_ftr.flatten_trainable(), g_bpp.flatten_trainable());

  ParamTree combined = m0.zeros_like();
  combined.add_scaled(g_ftr, gamma);
  combined.add_scaled(g_bpp, lambda);
  outer_opt.step(m0, combined);

  row.l_ftr = l_ftr;
  row.l_bpp = l_bpp;
  row.gamma = gamma;
  return row;
}

namespace {

// adversary restoration objective for diffusion: plain denoising MSE on
// unsafe image/label pairs
double adversary_denoise_loss(const Denoiser& den, const ParamTree& den_tree,
                              const ImageBatch& batch, const Encoder& enc,
                              const ParamTree& enc_tree, const DiffusionSchedule& sched,
                              uint64_t seed, ParamTree* d_den) {
  Rng rng(derive_seed(seed, "adversary_denoise"));
  Tensor x0 = encode_normalized(enc, enc_tree, den_tree, batch.pixels);
  const int B = x0.dim(0);
  Tensor z = Tensor::randn(x0.shape, rng);
  std::vector<int> ts(static_cast<size_t>(B));
  for (auto& t : ts) t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.T)));
  Tensor xt = noise_latents(x0, z, ts, sched);
  Denoiser::Cache dc;
  Tensor eps = den.forward(den_tree, xt, batch.labels, ts, d_den ? &dc : nullptr);
  Tensor d_eps(eps.shape);
  double s = 0.0;
  const int64_t n = eps.size();
  for (int64_t i = 0; i < n; ++i) {
    const double d = eps[i] - z[i];
    s += d * d;
    d_eps[i] = 2.0 * d / static_cast<double>(n);
  }
  s /= static_cast<double>(n);
  if (d_den) den.backward(den_tree, dc, d_eps, d_den, nullptr);
  return s;
}

}  // namespace

ParamTree align_diffusion(const ParamTree& den0_tree, const ImageBatch& unsafe_data,
                          const ImageBatch& benign, const ParamTree& enc_tree,
                          const DiffusionSchedule& sched, int image_size, int channels,
                          int iters, double lr, uint64_t seed) {
  ParamTree den_tree = den0_tree;
  if (iters == 0) return den_tree;
  Encoder enc(enc_tree, image_size, channels);
  Denoiser den(den_tree, image_size / 4, benign.unsafe_id + 1);
  Optimizer opt(OptKind::adam, lr, den_tree);
  DivergenceGuard guard("align_diffusion");
  Rng rng(derive_seed(seed, "align"));
  const int batch = 16;

  for (int it = 0; it < iters; ++it) {
    ImageBatch xu = unsafe_data.select(sample_indices(unsafe_data.size(), batch, rng));
    ImageBatch xn = benign.select(sample_indices(benign.size(), batch, rng));
    ParamTree g_ftr = den_tree.zeros_like();
    ParamTree g_bpp = den_tree.zeros_like();
    const double l_ftr = losses::ftr_diffusion(den, den_tree, xu, enc, enc_tree, sched,
                                               rng.next_u64(), &g_ftr);
    const double l_bpp = losses::bpp_diffusion(den, den_tree, xn, enc, enc_tree, sched,
                                               rng.next_u64(), &g_bpp);
    guard.check(losses::combine({{l_ftr, 0.5}, {l_bpp, 0.5}}));
    ParamTree g = den_tree.zeros_like();
    g.add_scaled(g_ftr, 0.5);
    g.add_scaled(g_bpp, 0.5);
    opt.step(den_tree, g);
  }
  return den_tree;
}

ParamTree train_nft(const ParamTree& m_start, NftTarget target, const ParamTree& enc_tree,
                    const ParamTree& den_tree_for_features, const ParamTree& dec0_tree,
                    const ParamTree& perc_tree, const ImageBatch& x_tune_pool,
                    const ImageBatch& x_eval_pool, const ImageBatch& benign,
                    const DiffusionSchedule& sched, int image_size, int channels,
                    const NftConfig& cfg, std::vector<NftLogRow>* log) {
  cfg.validate();
  ParamTree m0 = m_start;
  if (cfg.n2 == 0) return m0;

  Encoder enc(enc_tree, image_size, channels);
  const bool is_decoder = target == NftTarget::decoder;
  // index layout is shared across copies of the same tree
  Decoder dec(is_decoder ? m_start : dec0_tree, image_size, channels);
  Denoiser den_feat(den_tree_for_features, image_size / 4, benign.unsafe_id + 1);
  Perceptual perc(perc_tree, image_size, channels);

  // diffusion feature pools for the decoder-side loss terms
  Tensor f_u_pool, f_n_pool;
  if (is_decoder)
    build_feature_sets(den_feat, den_tree_for_features, sched, benign.unsafe_id,
                       cfg.feature_set_size, derive_seed(cfg.seed, "nft_features"), &f_u_pool,
                       &f_n_pool);

  Optimizer outer_opt(OptKind::adam, cfg.lr_alpha2, m0);
  Rng rng(derive_seed(cfg.seed, "nft"));
  std::deque<bool> window;
  int window_failures = 0;

  const int hw = image_size / 4;
  const size_t latent_item = static_cast<size_t>(Encoder::kLatentChannels) * hw * hw;
  auto pick_latents = [&](const Tensor& pool, int count) {
    Tensor out({count, Encoder::kLatentChannels, hw, hw});
    for (int i = 0; i < count; ++i) {
      const auto j = rng.uniform_int(static_cast<uint64_t>(pool.dim(0)));
      std::copy_n(pool.data() + static_cast<size_t>(j) * latent_item, latent_item,
                  out.data() + static_cast<size_t>(i) * latent_item);
    }
    return out;
  };

  for (int it = 0; it < cfg.n2; ++it) {
    const FineTuneStrategy strategy = sample_strategy(cfg.bag, rng);
    ImageBatch x_eval = x_eval_pool.select(sample_indices(x_eval_pool.size(), cfg.eval_batch, rng));
    ImageBatch x_bpp = benign.select(sample_indices(benign.size(), cfg.bpp_batch, rng));
    Rng inner_rng = rng.fork("inner_" + std::to_string(it));
    const uint64_t eval_seed = rng.next_u64();  // fixed noise draw across the K states

    InnerObjective inner;
    Objective outer_ftr;
    Objective bpp;

    Tensor f_eval, f_bpp;
    if (is_decoder) {
      f_eval = pick_latents(f_u_pool, cfg.eval_batch);
      f_bpp = pick_latents(f_n_pool, cfg.bpp_batch);
      inner = [&](const ParamTree& p, int, ParamTree* g) {
        ImageBatch xb = x_tune_pool.select(
            sample_indices(x_tune_pool.size(), strategy.batch, inner_rng));
        Tensor lat = enc.forward(enc_tree, xb.pixels);
        Decoder::Cache c;
        Tensor recon = dec.forward(p, lat, &c);
        Tensor d_recon(recon.shape);
        double s = 0.0;
        const int64_t n = recon.size();
        for (int64_t i = 0; i < n; ++i) {
          const double d = recon[i] - xb.pixels[i];
          s += d * d;
          d_recon[i] = 2.0 * d / static_cast<double>(n);
        }
        if (g) dec.backward(p, c, d_recon, g, nullptr);
        return s / static_cast<double>(n);
      };
      outer_ftr = [&](const ParamTree& p, ParamTree* g) {
        return losses::ftr_decoder(dec, p, x_eval, f_eval, enc, enc_tree, perc, perc_tree, g);
      };
      bpp = [&](const ParamTree& p, ParamTree* g) {
        return losses::bpp_decoder(dec, p, dec0_tree, x_bpp, f_bpp, enc, enc_tree, g);
      };
    } else {
      Denoiser den(m_start, hw, benign.unsafe_id + 1);
      inner = [&, den](const ParamTree& p, int k, ParamTree* g) {
        ImageBatch xb = x_tune_pool.select(
            sample_indices(x_tune_pool.size(), strategy.batch, inner_rng));
        return adversary_denoise_loss(den, p, xb, enc, enc_tree, sched,
                                      derive_seed(eval_seed, "inner_k" + std::to_string(k)), g);
      };
      outer_ftr = [&, den](const ParamTree& p, ParamTree* g) {
        return losses::ftr_diffusion(den, p, x_eval, enc, enc_tree, sched, eval_seed, g);
      };
      bpp = [&, den](const ParamTree& p, ParamTree* g) {
        return losses::bpp_diffusion(den, p, x_bpp, enc, enc_tree, sched, eval_seed, g);
      };
    }

    NftLogRow row = nft_outer_step(m0, strategy, cfg.bag.K, inner, outer_ftr, bpp, outer_opt, it);
    if (log) log->push_back(row);

    window.push_back(row.skipped);
    if (row.skipped) ++window_failures;
    if (window.size() > 100) {
      if (window.front()) --window_failures;
      window.pop_front();
    }
    if (window.size() == 100 && window_failures > 20)
      throw TrainingFailure("train_nft: > 20% failed trajectories in a 100-step window "
                            "(lr_alpha2 likely too large)");
  }
  return m0;
}

void write_nft_log(const std::vector<NftLogRow>& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "outer_iter,optimizer,lr,batch,L_ftr,L_bpp,gamma,skipped\n";
  for (const auto& r : log)
    os << r.outer_iter << ',' << to_string(r.optimizer) << ',' << r.lr << ',' << r.batch << ','
       << r.l_ftr << ',' << r.l_bpp << ',' << r.gamma << ',' << (r.skipped ? 1 : 0) << "\n";
}

}  // namespace patronus
