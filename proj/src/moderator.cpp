#include "patronus/moderator.hpp"

#include <fstream>

#include "patronus/errors.hpp"
#include "patronus/optim.hpp"

namespace patronus {

void ModeratorConfig::validate() const {
  if (n1 < 0) throw ConfigError("moderator n1 must be >= 0");
  if (!(lr_alpha1 > 0.0)) throw ConfigError("moderator lr_alpha1 must be > 0");
  if (batch < 1) throw ConfigError("moderator batch must be >= 1");
  if (feature_refresh < 1) throw ConfigError("moderator feature_refresh must be >= 1");
  if (feature_set_size < 1) throw ConfigError("moderator feature_set_size must be >= 1");
  weights.validate();
}

void build_feature_sets(const Denoiser& den, const ParamTree& den_tree,
                        const DiffusionSchedule& sched, int n_benign_classes, int n_each,
                        uint64_t seed, Tensor* f_u, Tensor* f_n) {
  const int unsafe_id = n_benign_classes;
  std::vector<int> unsafe_ids(static_cast<size_t>(n_each), unsafe_id);
  std::vector<int> benign_ids(static_cast<size_t>(n_each));
  for (int i = 0; i < n_each; ++i) benign_ids[static_cast<size_t>(i)] = i % n_benign_classes;
  *f_u = sample_latents(den, den_tree, sched, unsafe_ids, derive_seed(seed, "feat_u"));
  *f_n = sample_latents(den, den_tree, sched, benign_ids, derive_seed(seed, "feat_n"));
}

ParamTree train_moderator(const ParamTree& dec0_tree, const ParamTree& enc_tree,
                          const ParamTree& den_tree, const ParamTree& perc_tree,
                          const ImageBatch& benign, const ImageBatch& unsafe_data,
                          const DiffusionSchedule& sched, int image_size, int channels,
                          const ModeratorConfig& cfg, std::vector<ModeratorLogRow>* log,
                          const ParamTree* probe_tree) {
  cfg.validate();
  ParamTree dec_tree = dec0_tree;
  if (cfg.n1 == 0) return dec_tree;

  Encoder enc(enc_tree, image_size, channels);
  Decoder dec(dec_tree, image_size, channels);
  Denoiser den(den_tree, image_size / 4, benign.unsafe_id + 1);
  Perceptual perc(perc_tree, image_size, channels);
  Optimizer opt(OptKind::adam, cfg.lr_alpha1, dec_tree);
  DivergenceGuard guard("train_moderator");
  Rng rng(derive_seed(cfg.seed, "moderator"));

  Tensor f_u, f_n;
  int feature_epoch = -1;

  for (int it = 0; it < cfg.n1; ++it) {
    if (it / cfg.feature_refresh != feature_epoch) {
      feature_epoch = it / cfg.feature_refresh;
      // rolling seed per refresh so the decoder never overfits one latent set
      build_feature_sets(den, den_tree, sched, benign.unsafe_id, cfg.feature_set_size,
                         derive_seed(cfg.seed, "refresh_" + std::to_string(feature_epoch)),
                         &f_u, &f_n);
    }
    ImageBatch xb = benign.select(sample_indices(benign.size(), cfg.batch, rng));
    ImageBatch xu = unsafe_data.select(sample_indices(unsafe_data.size(), cfg.batch, rng));

    std::vector<int> fu_idx = sample_indices(f_u.dim(0), cfg.batch, rng);
    std::vector<int> fn_idx = sample_indices(f_n.dim(0), cfg.batch, rng);
    const int hw = image_size / 4;
    Tensor fu_b({cfg.batch, Encoder::kLatentChannels, hw, hw});
    Tensor fn_b({cfg.batch, Encoder::kLatentChannels, hw, hw});
    const size_t item = static_cast<size_t>(Encoder::kLatentChannels) * hw * hw;
    for (int i = 0; i < cfg.batch; ++i) {
      std::copy_n(f_u.data() + static_cast<size_t>(fu_idx[static_cast<size_t>(i)]) * item, item,
                  fu_b.data() + static_cast<size_t>(i) * item);
      std::copy_n(f_n.data() + static_cast<size_t>(fn_idx[static_cast<size_t>(i)]) * item, item,
                  fn_b.data() + static_cast<size_t>(i) * item);
    }

    ParamTree grads = dec_tree.zeros_like();
    const double l_cd = losses::conditional_decoding_loss(dec, dec_tree, enc, enc_tree, xb, xu,
                                                          cfg.weights, perc, perc_tree, &grads);
    const double l_fc = losses::feature_calibration_loss(dec, dec_tree, dec0_tree, fu_b, fn_b,
                                                         perc, perc_tree, &grads);
    // grads already carry alpha/beta inside L_cd; L_fc enters with weight 1
    const double l_im = losses::combine({{l_cd, 1.0}, {l_fc, 1.0}});
    guard.check(l_im);
    opt.step(dec_tree, grads);

    if (log && (it % 20 == 0 || it == cfg.n1 - 1)) {
      ModeratorLogRow row{it, l_cd, l_fc, 0.0, 0.0};
      Tensor lat_n = enc.forward(enc_tree, xb.pixels);
      row.benign_mse = mse(dec.forward(dec_tree, lat_n), xb.pixels);
      if (probe_tree) {
        Probe probe(*probe_tree, image_size, channels, benign.unsafe_id + 1);
        Tensor lat_u = enc.forward(enc_tree, xu.pixels);
        auto pred = probe.predict(*probe_tree, dec.forward(dec_tree, lat_u));
        int hits = 0;
        for (int v : pred)
          if (v == benign.unsafe_id) ++hits;
        row.unsafe_rate = static_cast<double>(hits) / static_cast<double>(pred.size());
      }
      log->push_back(row);
    }
  }
  return dec_tree;
}

void write_moderator_log(const std::vector<ModeratorLogRow>& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "iteration,L_cd,L_fc,unsafe_rate,benign_mse\n";
  for (const auto& r : log)
    os << r.iteration << ',' << r.l_cd << ',' << r.l_fc << ',' << r.unsafe_rate << ','
       << r.benign_mse << "\n";
}

}  // namespace patronus
