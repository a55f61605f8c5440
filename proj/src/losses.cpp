#include "patronus/losses.hpp"

#include <cmath>

#include "patronus/errors.hpp"

namespace patronus {

void LossWeights::validate() const {
  for (double v : {alpha, beta, gamma, lambda})
    if (!std::isfinite(v) || v < 0.0) throw ContractError("loss weights must be finite and >= 0");
}

namespace losses {

namespace {

// MSE plus gradient wrt `a`; gradient accumulated into d_a when present
double mse_grad(const Tensor& a, const Tensor& b, Tensor* d_a, double weight = 1.0) {
  const int64_t n = a.size();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
    if (d_a) (*d_a)[i] += weight * 2.0 * d / static_cast<double>(n);
  }
  return s / static_cast<double>(n);
}

void require_unsafe(const ImageBatch& b, const char* what) {
  if (!b.all_unsafe()) throw ContractError(std::string(what) + ": benign items present");
}
void require_benign(const ImageBatch& b, const char* what) {
  if (!b.all_benign()) throw ContractError(std::string(what) + ": unsafe items present");
}

}  // namespace

double smoothed_rejection(const Perceptual& P, const ParamTree& p_tree, const Tensor& images) {
  return smoothed_rejection_grad(P, p_tree, images, nullptr);
}

double smoothed_rejection_grad(const Perceptual& P, const ParamTree& p_tree, const Tensor& images,
                               Tensor* d_images) {
  Perceptual::Cache pc;
  Tensor fx = P.forward(p_tree, images, &pc);
  Tensor zero_img(images.shape);
  zero_img.shape[0] = 1;
  zero_img.v.assign(static_cast<size_t>(Tensor::numel(zero_img.shape)), 0.0);
  Tensor f0 = P.forward(p_tree, zero_img);

  const int B = fx.dim(0), F = fx.dim(1);
  double s = 0.0;
  Tensor d_fx(fx.shape);
  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f) {
      const double d = fx[static_cast<int64_t>(b) * F + f] - f0[f];
      s += d * d;
      d_fx[static_cast<int64_t>(b) * F + f] = 2.0 * d / (static_cast<double>(B) * F);
    }
  if (d_images) P.backward_input(p_tree, pc, d_fx, d_images);
  return s / (static_cast<double>(B) * F);
}

double conditional_decoding_loss(const Decoder& dec, const ParamTree& dec_tree,
                                 const Encoder& enc, const ParamTree& enc_tree,
                                 const ImageBatch& x_n, const ImageBatch& x_u,
                                 const LossWeights& w, const Perceptual& P,
                                 const ParamTree& p_tree, ParamTree* d_dec) {
  w.validate();
  if (x_n.size() == 0 || x_u.size() == 0)
    throw ConfigError("conditional_decoding_loss: empty batch");

  // benign reconstruction term (E frozen: no encoder gradient)
  Tensor lat_n = enc.forward(enc_tree, x_n.pixels);
  Decoder::Cache dc_n;
  Tensor recon = dec.forward(dec_tree, lat_n, &dc_n);
  Tensor d_recon(recon.shape);
  const double recon_term = mse_grad(recon, x_n.pixels, d_dec ? &d_recon : nullptr, w.alpha);
  if (d_dec) dec.backward(dec_tree, dc_n, d_recon, d_dec, nullptr);

  // unsafe rejection term
  Tensor lat_u = enc.forward(enc_tree, x_u.pixels);
  Decoder::Cache dc_u;
  Tensor out_u = dec.forward(dec_tree, lat_u, &dc_u);
  Tensor d_out_u(out_u.shape);
  const double rej_term =
      smoothed_rejection_grad(P, p_tree, out_u, d_dec ? &d_out_u : nullptr);
  if (d_dec) {
    d_out_u.scale_(w.beta);
    dec.backward(dec_tree, dc_u, d_out_u, d_dec, nullptr);
  }
  return w.alpha * recon_term + w.beta * rej_term;
}

double feature_calibration_loss(const Decoder& dec, const ParamTree& dec_tree,
                                const ParamTree& dec0_tree, const Tensor& f_u, const Tensor& f_n,
                                const Perceptual& P, const ParamTree& p_tree, ParamTree* d_dec) {
  if (f_u.shape.empty() || f_u.dim(0) == 0 || f_n.shape.empty() || f_n.dim(0) == 0)
    throw ConfigError("feature_calibration_loss: empty feature set");

  Decoder::Cache dc_u;
  Tensor out_u = dec.forward(dec_tree, f_u, &dc_u);
  Tensor d_out_u(out_u.shape);
  const double rej_term = smoothed_rejection_grad(P, p_tree, out_u, d_dec ? &d_out_u : nullptr);
  if (d_dec) dec.backward(dec_tree, dc_u, d_out_u, d_dec, nullptr);

  Decoder::Cache dc_n;
  Tensor out_n = dec.forward(dec_tree, f_n, &dc_n);
  Tensor ref = dec.forward(dec0_tree, f_n);  // frozen original decoder
  Tensor d_out_n(out_n.shape);
  const double consist_term = mse_grad(out_n, ref, d_dec ? &d_out_n : nullptr);
  if (d_dec) dec.backward(dec_tree, dc_n, d_out_n, d_dec, nullptr);

  return rej_term + consist_term;
}

double ftr_decoder(const Decoder& dec, const ParamTree& dec_tree, const ImageBatch& x_eval,
                   const Tensor& f_eval, const Encoder& enc, const ParamTree& enc_tree,
                   const Perceptual& P, const ParamTree& p_tree, ParamTree* d_dec) {
  if (x_eval.size() == 0 || f_eval.shape.empty() || f_eval.dim(0) == 0)
    throw ConfigError("ftr_decoder: empty evaluation set");
  require_unsafe(x_eval, "ftr_decoder");

  Tensor lat = enc.forward(enc_tree, x_eval.pixels);
  Decoder::Cache dc_x;
  Tensor out_x = dec.forward(dec_tree, lat, &dc_x);
  Tensor d_out_x(out_x.shape);
  const double enc_term = smoothed_rejection_grad(P, p_tree, out_x, d_dec ? &d_out_x : nullptr);
  if (d_dec) dec.backward(dec_tree, dc_x, d_out_x, d_dec, nullptr);

  Decoder::Cache dc_f;
  Tensor out_f = dec.forward(dec_tree, f_eval, &dc_f);
  Tensor d_out_f(out_f.shape);
  const double feat_term = smoothed_rejection_grad(P, p_tree, out_f, d_dec ? &d_out_f : nullptr);
  if (d_dec) dec.backward(dec_tree, dc_f, d_out_f, d_dec, nullptr);

  return enc_term + feat_term;
}

double ftr_diffusion(const Denoiser& den, const ParamTree& den_tree, const ImageBatch& x_eval,
                     const Encoder& enc, const ParamTree& enc_tree,
                     const DiffusionSchedule& sched, uint64_t seed, ParamTree* d_den) {
  if (x_eval.size() == 0) throw ConfigError("ftr_diffusion: empty evaluation set");
  require_unsafe(x_eval, "ftr_diffusion");

  Rng rng(derive_seed(seed, "ftr_diffusion"));
  Tensor x0 = encode_normalized(enc, enc_tree, den_tree, x_eval.pixels);
  const int B = x0.dim(0);
  Tensor z = Tensor::randn(x0.shape, rng);
  std::vector<int> ts(static_cast<size_t>(B));
  for (auto& t : ts) t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.T)));
  Tensor xt = noise_latents(x0, z, ts, sched);

  Denoiser::Cache dc;
  Tensor eps = den.forward(den_tree, xt, x_eval.labels, ts, d_den ? &dc : nullptr);
  Tensor zero(eps.shape);
  Tensor d_eps(eps.shape);
  const double loss = mse_grad(eps, zero, d_den ? &d_eps : nullptr);
  if (d_den) den.backward(den_tree, dc, d_eps, d_den, nullptr);
  return loss;
}

double bpp_decoder(const Decoder& dec, const ParamTree& dec_tree, const ParamTree& dec0_tree,
                   const ImageBatch& x_n, const Tensor& f_n, const Encoder& enc,
                   const ParamTree& enc_tree, ParamTree* d_dec) {
  if (x_n.size() == 0 || f_n.shape.empty() || f_n.dim(0) == 0)
    throw ConfigError("bpp_decoder: empty batch");
  require_benign(x_n, "bpp_decoder");

  Tensor lat = enc.forward(enc_tree, x_n.pixels);
  Decoder::Cache dc_x;
  Tensor recon = dec.forward(dec_tree, lat, &dc_x);
  Tensor d_recon(recon.shape);
  const double recon_term = mse_grad(recon, x_n.pixels, d_dec ? &d_recon : nullptr);
  if (d_dec) dec.backward(dec_tree, dc_x, d_recon, d_dec, nullptr);

  Decoder::Cache dc_f;
  Tensor out_f = dec.forward(dec_tree, f_n, &dc_f);
  Tensor ref = dec.forward(dec0_tree, f_n);
  Tensor d_out_f(out_f.shape);
  const double consist_term = mse_grad(out_f, ref, d_dec ? &d_out_f : nullptr);
  if (d_dec) dec.backward(dec_tree, dc_f, d_out_f, d_dec, nullptr);

  return recon_term + consist_term;
}

double bpp_diffusion(const Denoiser& den, const ParamTree& den_tree, const ImageBatch& x_n,
                     const Encoder& enc, const ParamTree& enc_tree,
                     const DiffusionSchedule& sched, uint64_t seed, ParamTree* d_den) {
  if (x_n.size() == 0) throw ConfigError("bpp_diffusion: empty batch");
  require_benign(x_n, "bpp_diffusion");

  Rng rng(derive_seed(seed, "bpp_diffusion"));
  Tensor x0 = encode_normalized(enc, enc_tree, den_tree, x_n.pixels);
  const int B = x0.dim(0);
  Tensor z = Tensor::randn(x0.shape, rng);
  std::vector<int> ts(static_cast<size_t>(B));
  for (auto& t : ts) t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.T)));
  Tensor xt = noise_latents(x0, z, ts, sched);

  Denoiser::Cache dc;
  Tensor eps = den.forward(den_tree, xt, x_n.labels, ts, d_den ? &dc : nullptr);
  Tensor d_eps(eps.shape);
  const double loss = mse_grad(eps, z, d_den ? &d_eps : nullptr);
  if (d_den) den.backward(den_tree, dc, d_eps, d_den, nullptr);
  return loss;
}

double combine(const std::vector<std::pair<double, double>>& losses_and_weights) {
  double s = 0.0;
  for (const auto& [value, weight] : losses_and_weights) {
    if (!std::isfinite(weight) || weight < 0.0)
      throw ContractError("combine: weights must be finite and >= 0");
    s += value * weight;
  }
  return s;
}

}  // namespace losses
}  // namespace patronus
