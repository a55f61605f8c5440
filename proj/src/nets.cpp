#include "patronus/nets.hpp"

#include <cmath>

#include "patronus/errors.hpp"
#include "patronus/kernels.hpp"
#include "patronus/rng.hpp"

namespace patronus {

namespace {

Tensor conv_init(int co, int ci, Rng& rng) {
  return Tensor::randn({co, ci, 3, 3}, rng, std::sqrt(1.0 / (ci * 9)));
}

Tensor linear_init(int out, int in, Rng& rng) {
  return Tensor::randn({out, in}, rng, std::sqrt(1.0 / in));
}

// out[b,o] = w[o,i] x[b,i] + bias[o]
void linear_forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& out) {
  const int B = x.dim(0), I = x.dim(1), O = w.dim(0);
  for (int bi = 0; bi < B; ++bi)
    for (int o = 0; o < O; ++o) {
      double acc = b[o];
      const double* xp = x.data() + static_cast<size_t>(bi) * I;
      const double* wp = w.data() + static_cast<size_t>(o) * I;
      for (int i = 0; i < I; ++i) acc += wp[i] * xp[i];
      out[static_cast<int64_t>(bi) * O + o] = acc;
    }
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dw, Tensor* db,
                     Tensor* dx) {
  const int B = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (dx) dx->fill(0.0);
  for (int bi = 0; bi < B; ++bi) {
    const double* xp = x.data() + static_cast<size_t>(bi) * I;
    const double* dyp = dy.data() + static_cast<size_t>(bi) * O;
    for (int o = 0; o < O; ++o) {
      const double g = dyp[o];
      if (db) (*db)[o] += g;
      if (dw) {
        double* dwp = dw->data() + static_cast<size_t>(o) * I;
        for (int i = 0; i < I; ++i) dwp[i] += g * xp[i];
      }
      if (dx) {
        double* dxp = dx->data() + static_cast<size_t>(bi) * I;
        const double* wp = w.data() + static_cast<size_t>(o) * I;
        for (int i = 0; i < I; ++i) dxp[i] += g * wp[i];
      }
    }
  }
}

Tensor conv_out_shape(const Tensor& in, int co, int stride) {
  const int B = in.dim(0), H = in.dim(2), W = in.dim(3);
  return Tensor({B, co, (H + 2 - 3) / stride + 1, (W + 2 - 3) / stride + 1});
}

}  // namespace

void softmax_rows(Tensor& t) {
  const int B = t.dim(0), N = t.dim(1);
  for (int b = 0; b < B; ++b) {
    double* p = t.data() + static_cast<size_t>(b) * N;
    double mx = p[0];
    for (int i = 1; i < N; ++i) mx = std::max(mx, p[i]);
    double sum = 0.0;
    for (int i = 0; i < N; ++i) {
      p[i] = std::exp(p[i] - mx);
      sum += p[i];
    }
    for (int i = 0; i < N; ++i) p[i] /= sum;
  }
}

// ---------------------------------------------------------------- Encoder

ParamTree Encoder::init(int image_size, int channels, uint64_t seed) {
  (void)image_size;
  Rng rng(derive_seed(seed, "encoder"));
  ParamTree t;
  t.add("conv1.w", conv_init(kC1, channels, rng));
  t.add("conv1.b", Tensor({kC1}));
  t.add("conv2.w", conv_init(kC2, kC1, rng));
  t.add("conv2.b", Tensor({kC2}));
  t.add("conv3.w", conv_init(kLatentChannels, kC2, rng));
  t.add("conv3.b", Tensor({kLatentChannels}));
  return t;
}

Encoder::Encoder(const ParamTree& tree, int image_size, int channels)
    : image_size_(image_size), channels_(channels) {
  w1_ = tree.index_of("conv1.w");
  b1_ = tree.index_of("conv1.b");
  w2_ = tree.index_of("conv2.w");
  b2_ = tree.index_of("conv2.b");
  w3_ = tree.index_of("conv3.w");
  b3_ = tree.index_of("conv3.b");
  if (w1_ < 0 || b3_ < 0) throw ContractError("encoder parameter tree is incomplete");
}

Tensor Encoder::forward(const ParamTree& p, const Tensor& x, Cache* cache) const {
  if (x.dim(1) != channels_ || x.dim(2) != image_size_ || x.dim(3) != image_size_)
    throw DimensionError("encoder input shape mismatch");
  Cache local;
  Cache& c = cache ? *cache : local;
  c.x = x;
  c.z1 = conv_out_shape(x, kC1, 2);
  kernels::conv3x3_forward(x, p[w1_], p[b1_], c.z1, 2);
  c.a1 = Tensor(c.z1.shape);
  kernels::silu_forward(c.z1, c.a1);
  c.z2 = conv_out_shape(c.a1, kC2, 2);
  kernels::conv3x3_forward(c.a1, p[w2_], p[b2_], c.z2, 2);
  c.a2 = Tensor(c.z2.shape);
  kernels::silu_forward(c.z2, c.a2);
  c.out = conv_out_shape(c.a2, kLatentChannels, 1);
  kernels::conv3x3_forward(c.a2, p[w3_], p[b3_], c.out, 1);
  return c.out;
}

void Encoder::backward(const ParamTree& p, const Cache& c, const Tensor& d_out, ParamTree* grads,
                       Tensor* d_x) const {
  Tensor d_a2(c.a2.shape);
  if (grads) kernels::conv3x3_backward_params(c.a2, d_out, (*grads)[w3_], (*grads)[b3_], 1);
  kernels::conv3x3_backward_input(p[w3_], d_out, d_a2, 1);
  Tensor d_z2(c.z2.shape);
  kernels::silu_backward(c.z2, d_a2, d_z2);
  Tensor d_a1(c.a1.shape);
  if (grads) kernels::conv3x3_backward_params(c.a1, d_z2, (*grads)[w2_], (*grads)[b2_], 2);
  kernels::conv3x3_backward_input(p[w2_], d_z2, d_a1, 2);
  Tensor d_z1(c.z1.shape);
  kernels::silu_backward(c.z1, d_a1, d_z1);
  if (grads) kernels::conv3x3_backward_params(c.x, d_z1, (*grads)[w1_], (*grads)[b1_], 2);
  if (d_x) kernels::conv3x3_backward_input(p[w1_], d_z1, *d_x, 2);
}

// ---------------------------------------------------------------- Decoder

ParamTree Decoder::init(int image_size, int channels, uint64_t seed) {
  (void)image_size;
  Rng rng(derive_seed(seed, "decoder"));
  ParamTree t;
  t.add("conv1.w", conv_init(kC1, Encoder::kLatentChannels, rng));
  t.add("conv1.b", Tensor({kC1}));
  t.add("conv2.w", conv_init(kC2, kC1, rng));
  t.add("conv2.b", Tensor({kC2}));
  t.add("conv3.w", conv_init(channels, kC2, rng));
  t.add("conv3.b", Tensor({channels}));
  return t;
}

Decoder::Decoder(const ParamTree& tree, int image_size, int channels)
    : image_size_(image_size), channels_(channels) {
  w1_ = tree.index_of("conv1.w");
  b1_ = tree.index_of("conv1.b");
  w2_ = tree.index_of("conv2.w");
  b2_ = tree.index_of("conv2.b");
  w3_ = tree.index_of("conv3.w");
  b3_ = tree.index_of("conv3.b");
  if (w1_ < 0 || b3_ < 0) throw ContractError("decoder parameter tree is incomplete");
}

Tensor Decoder::forward(const ParamTree& p, const Tensor& f, Cache* cache) const {
  const int hw = image_size_ / 4;
  if (f.dim(1) != Encoder::kLatentChannels || f.dim(2) != hw || f.dim(3) != hw)
    throw DimensionError("decoder latent shape mismatch");
  Cache local;
  Cache& c = cache ? *cache : local;
  const int B = f.dim(0);
  c.f = f;
  c.z1 = conv_out_shape(f, kC1, 1);
  kernels::conv3x3_forward(f, p[w1_], p[b1_], c.z1, 1);
  c.a1 = Tensor(c.z1.shape);
  kernels::silu_forward(c.z1, c.a1);
  c.u1 = Tensor({B, kC1, hw * 2, hw * 2});
  kernels::upsample2x_forward(c.a1, c.u1);
  c.z2 = conv_out_shape(c.u1, kC2, 1);
  kernels::conv3x3_forward(c.u1, p[w2_], p[b2_], c.z2, 1);
  c.a2 = Tensor(c.z2.shape);
  kernels::silu_forward(c.z2, c.a2);
  c.u2 = Tensor({B, kC2, hw * 4, hw * 4});
  kernels::upsample2x_forward(c.a2, c.u2);
  c.z3 = conv_out_shape(c.u2, channels_, 1);
  kernels::conv3x3_forward(c.u2, p[w3_], p[b3_], c.z3, 1);
  c.out = Tensor(c.z3.shape);
  kernels::sigmoid_forward(c.z3, c.out);
  return c.out;
}

void Decoder::backward(const ParamTree& p, const Cache& c, const Tensor& d_out, ParamTree* grads,
                       Tensor* d_f) const {
  Tensor d_z3(c.z3.shape);
  kernels::sigmoid_backward(c.out, d_out, d_z3);
  Tensor d_u2(c.u2.shape);
  if (grads) kernels::conv3x3_backward_params(c.u2, d_z3, (*grads)[w3_], (*grads)[b3_], 1);
  kernels::conv3x3_backward_input(p[w3_], d_z3, d_u2, 1);
  Tensor d_a2(c.a2.shape);
  kernels::upsample2x_backward(d_u2, d_a2);
  Tensor d_z2(c.z2.shape);
  kernels::silu_backward(c.z2, d_a2, d_z2);
  Tensor d_u1(c.u1.shape);
  if (grads) kernels::conv3x3_backward_params(c.u1, d_z2, (*grads)[w2_], (*grads)[b2_], 1);
  kernels::conv3x3_backward_input(p[w2_], d_z2, d_u1, 1);
  Tensor d_a1(c.a1.shape);
  kernels::upsample2x_backward(d_u1, d_a1);
  Tensor d_z1(c.z1.shape);
  kernels::silu_backward(c.z1, d_a1, d_z1);
  if (grads) kernels::conv3x3_backward_params(c.f, d_z1, (*grads)[w1_], (*grads)[b1_], 1);
  if (d_f) kernels::conv3x3_backward_input(p[w1_], d_z1, *d_f, 1);
}

// --------------------------------------------------------------- Denoiser

namespace {
std::vector<double> sinusoidal_emb(int t, int dim) {
  std::vector<double> e(static_cast<size_t>(dim));
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e[static_cast<size_t>(2 * i)] = std::sin(t * freq);
    e[static_cast<size_t>(2 * i + 1)] = std::cos(t * freq);
  }
  return e;
}
}  // namespace

ParamTree Denoiser::init(int latent_hw, int n_classes, uint64_t seed) {
  (void)latent_hw;
  Rng rng(derive_seed(seed, "denoiser"));
  ParamTree t;
  t.add("conv1.w", conv_init(kChannels, Encoder::kLatentChannels, rng));
  t.add("conv1.b", Tensor({kChannels}));
  // one extra row serves as the unconditional ("null") embedding used for
  // classifier-free guidance at sampling time
  t.add("class_emb", Tensor::randn({n_classes + 1, kChannels}, rng, 0.1));
  t.add("time_proj.w", linear_init(kChannels, kEmbDim, rng));
  t.add("time_proj.b", Tensor({kChannels}));
  t.add("res1.conv_a.w", conv_init(kChannels, kChannels, rng));
  t.add("res1.conv_a.b", Tensor({kChannels}));
  t.add("res1.conv_b.w", conv_init(kChannels, kChannels, rng));
  t.add("res1.conv_b.b", Tensor({kChannels}));
  t.add("res2.conv_a.w", conv_init(kChannels, kChannels, rng));
  t.add("res2.conv_a.b", Tensor({kChannels}));
  t.add("res2.conv_b.w", conv_init(kChannels, kChannels, rng));
  t.add("res2.conv_b.b", Tensor({kChannels}));
  // per-class feature modulation after each res block; zero-init keeps the
  // network an identity on these paths at the start of training
  t.add("film1.scale", Tensor({n_classes + 1, kChannels}));
  t.add("film1.shift", Tensor({n_classes + 1, kChannels}));
  t.add("film2.scale", Tensor({n_classes + 1, kChannels}));
  t.add("film2.shift", Tensor({n_classes + 1, kChannels}));
  t.add("conv_out.w", conv_init(Encoder::kLatentChannels, kChannels, rng));
  t.add("conv_out.b", Tensor({Encoder::kLatentChannels}));
  // latent standardisation constants, filled after autoencoder pretraining
  t.add("latent_mean", Tensor({Encoder::kLatentChannels}, 0.0), /*trainable=*/false);
  t.add("latent_std", Tensor({Encoder::kLatentChannels}, 1.0), /*trainable=*/false);
  return t;
}

Denoiser::Denoiser(const ParamTree& tree, int latent_hw, int n_classes)
    : latent_hw_(latent_hw), n_classes_(n_classes) {
  w1_ = tree.index_of("conv1.w");
  b1_ = tree.index_of("conv1.b");
  class_emb_ = tree.index_of("class_emb");
  wt_ = tree.index_of("time_proj.w");
  bt_ = tree.index_of("time_proj.b");
  r1_wa_ = tree.index_of("res1.conv_a.w");
  r1_ba_ = tree.index_of("res1.conv_a.b");
  r1_wb_ = tree.index_of("res1.conv_b.w");
  r1_bb_ = tree.index_of("res1.conv_b.b");
  r2_wa_ = tree.index_of("res2.conv_a.w");
  r2_ba_ = tree.index_of("res2.conv_a.b");
  r2_wb_ = tree.index_of("res2.conv_b.w");
  r2_bb_ = tree.index_of("res2.conv_b.b");
  f1s_ = tree.index_of("film1.scale");
  f1t_ = tree.index_of("film1.shift");
  f2s_ = tree.index_of("film2.scale");
  f2t_ = tree.index_of("film2.shift");
  w3_ = tree.index_of("conv_out.w");
  b3_ = tree.index_of("conv_out.b");
  if (w1_ < 0 || b3_ < 0 || class_emb_ < 0 || f1s_ < 0 || f1t_ < 0 || f2s_ < 0 || f2t_ < 0)
    throw ContractError("denoiser parameter tree is incomplete");
}

Tensor Denoiser::forward(const ParamTree& p, const Tensor& x, const std::vector<int>& labels,
                         const std::vector<int>& ts, Cache* cache) const {
  const int B = x.dim(0);
  if (x.dim(1) != Encoder::kLatentChannels || x.dim(2) != latent_hw_ || x.dim(3) != latent_hw_)
    throw DimensionError("denoiser latent shape mismatch");
  if (static_cast<int>(labels.size()) != B || static_cast<int>(ts.size()) != B)
    throw DimensionError("denoiser conditioning batch mismatch");
  for (int b = 0; b < B; ++b) {
    // id == n_classes_ selects the unconditional embedding row
    if (labels[static_cast<size_t>(b)] < 0 || labels[static_cast<size_t>(b)] > n_classes_)
      throw DimensionError("denoiser class id out of range");
    if (ts[static_cast<size_t>(b)] < 0)
      throw DimensionError("denoiser timestep out of range");
  }

  Cache local;
  Cache& c = cache ? *cache : local;
  c.x = x;
  c.labels = labels;
  c.ts = ts;
  c.z1 = conv_out_shape(x, kChannels, 1);
  kernels::conv3x3_forward(x, p[w1_], p[b1_], c.z1, 1);

  c.temb.resize(static_cast<size_t>(B));
  c.zc = c.z1;
  const int HW = latent_hw_ * latent_hw_;
  for (int b = 0; b < B; ++b) {
    c.temb[static_cast<size_t>(b)] = sinusoidal_emb(ts[static_cast<size_t>(b)], kEmbDim);
    const double* emb_row =
        p[class_emb_].data() + static_cast<size_t>(labels[static_cast<size_t>(b)]) * kChannels;
    for (int ch = 0; ch < kChannels; ++ch) {
      double cond = emb_row[ch] + p[bt_][ch];
      const double* wrow = p[wt_].data() + static_cast<size_t>(ch) * kEmbDim;
      for (int j = 0; j < kEmbDim; ++j) cond += wrow[j] * c.temb[static_cast<size_t>(b)][static_cast<size_t>(j)];
      double* zp = c.zc.data() + (static_cast<size_t>(b) * kChannels + ch) * HW;
      for (int i = 0; i < HW; ++i) zp[i] += cond;
    }
  }
  c.a1 = Tensor(c.zc.shape);
  kernels::silu_forward(c.zc, c.a1);

  auto res = [&](const Tensor& rin, int wa, int ba, int wb, int bb, Tensor& rz1, Tensor& ra1,
                 Tensor& rz2, Tensor& rout) {
    rz1 = conv_out_shape(rin, kChannels, 1);
    kernels::conv3x3_forward(rin, p[wa], p[ba], rz1, 1);
    ra1 = Tensor(rz1.shape);
    kernels::silu_forward(rz1, ra1);
    rz2 = conv_out_shape(ra1, kChannels, 1);
    kernels::conv3x3_forward(ra1, p[wb], p[bb], rz2, 1);
    rout = rz2;
    rout.add_(rin);
  };
  auto film = [&](const Tensor& h, int fs, int ft, Tensor& out) {
    out = Tensor(h.shape);
    for (int b = 0; b < B; ++b) {
      const size_t row = static_cast<size_t>(labels[static_cast<size_t>(b)]) * kChannels;
      for (int ch = 0; ch < kChannels; ++ch) {
        const double s = 1.0 + p[fs][static_cast<int64_t>(row) + ch];
        const double t = p[ft][static_cast<int64_t>(row) + ch];
        const double* hp = h.data() + (static_cast<size_t>(b) * kChannels + ch) * HW;
        double* op = out.data() + (static_cast<size_t>(b) * kChannels + ch) * HW;
        for (int i = 0; i < HW; ++i) op[i] = s * hp[i] + t;
      }
    }
  };
  res(c.a1, r1_wa_, r1_ba_, r1_wb_, r1_bb_, c.r1_z1, c.r1_a1, c.r1_z2, c.r1_out);
  film(c.r1_out, f1s_, f1t_, c.r1_f);
  res(c.r1_f, r2_wa_, r2_ba_, r2_wb_, r2_bb_, c.r2_z1, c.r2_a1, c.r2_z2, c.r2_out);
  film(c.r2_out, f2s_, f2t_, c.r2_f);

  c.a3 = Tensor(c.r2_f.shape);
  kernels::silu_forward(c.r2_f, c.a3);
  c.out = conv_out_shape(c.a3, Encoder::kLatentChannels, 1);
  kernels::conv3x3_forward(c.a3, p[w3_], p[b3_], c.out, 1);
  return c.out;
}

void Denoiser::backward(const ParamTree& p, const Cache& c, const Tensor& d_out, ParamTree* grads,
                        Tensor* d_x) const {
  const int B = c.x.dim(0);
  const int HW = latent_hw_ * latent_hw_;

  Tensor d_a3(c.a3.shape);
  if (grads) kernels::conv3x3_backward_params(c.a3, d_out, (*grads)[w3_], (*grads)[b3_], 1);
  kernels::conv3x3_backward_input(p[w3_], d_out, d_a3, 1);

  auto film_bwd = [&](const Tensor& h, int fs, int ft, const Tensor& d_f, Tensor& d_h) {
    d_h = Tensor(h.shape);
    for (int b = 0; b < B; ++b) {
      const size_t row = static_cast<size_t>(c.labels[static_cast<size_t>(b)]) * kChannels;
      for (int ch = 0; ch < kChannels; ++ch) {
        const double s = 1.0 + p[fs][static_cast<int64_t>(row) + ch];
        const double* hp = h.data() + (static_cast<size_t>(b) * kChannels + ch) * HW;
        const double* dfp = d_f.data() + (static_cast<size_t>(b) * kChannels + ch) * HW;
        double* dhp = d_h.data() + (static_cast<size_t>(b) * kChannels + ch) * HW;
        double ds = 0.0, dt = 0.0;
        for (int i = 0; i < HW; ++i) {
          dhp[i] = s * dfp[i];
          ds += dfp[i] * hp[i];
          dt += dfp[i];
        }
        if (grads) {
          (*grads)[fs][static_cast<int64_t>(row) + ch] += ds;
          (*grads)[ft][static_cast<int64_t>(row) + ch] += dt;
        }
      }
    }
  };

  Tensor d_r2_f(c.r2_f.shape);
  kernels::silu_backward(c.r2_f, d_a3, d_r2_f);
  Tensor d_r2_out;
  film_bwd(c.r2_out, f2s_, f2t_, d_r2_f, d_r2_out);

  auto res_bwd = [&](const Tensor& rin, const Tensor& rz1, const Tensor& ra1,
                     int wa, int ba, int wb, int bb, const Tensor& d_rout, Tensor& d_rin) {
    Tensor d_ra1(ra1.shape);
    if (grads) kernels::conv3x3_backward_params(ra1, d_rout, (*grads)[wb], (*grads)[bb], 1);
    kernels::conv3x3_backward_input(p[wb], d_rout, d_ra1, 1);
    Tensor d_rz1(rz1.shape);
    kernels::silu_backward(rz1, d_ra1, d_rz1);
    if (grads) kernels::conv3x3_backward_params(rin, d_rz1, (*grads)[wa], (*grads)[ba], 1);
    kernels::conv3x3_backward_input(p[wa], d_rz1, d_rin, 1);
    d_rin.add_(d_rout);  // skip connection
  };

  Tensor d_r1_f(c.r1_f.shape);
  res_bwd(c.r1_f, c.r2_z1, c.r2_a1, r2_wa_, r2_ba_, r2_wb_, r2_bb_, d_r2_out, d_r1_f);
  Tensor d_r1_out;
  film_bwd(c.r1_out, f1s_, f1t_, d_r1_f, d_r1_out);
  Tensor d_a1(c.a1.shape);
  res_bwd(c.a1, c.r1_z1, c.r1_a1, r1_wa_, r1_ba_, r1_wb_, r1_bb_, d_r1_out, d_a1);

  Tensor d_zc(c.zc.shape);
  kernels::silu_backward(c.zc, d_a1, d_zc);

  if (grads) {
    for (int b = 0; b < B; ++b) {
      double* demb_row = (*grads)[class_emb_].data() +
                         static_cast<size_t>(c.labels[static_cast<size_t>(b)]) * kChannels;
      for (int ch = 0; ch < kChannels; ++ch) {
        const double* dzp = d_zc.data() + (static_cast<size_t>(b) * kChannels + ch) * HW;
        double dcond = 0.0;
        for (int i = 0; i < HW; ++i) dcond += dzp[i];
        demb_row[ch] += dcond;
        (*grads)[bt_][ch] += dcond;
        double* dwrow = (*grads)[wt_].data() + static_cast<size_t>(ch) * kEmbDim;
        for (int j = 0; j < kEmbDim; ++j)
          dwrow[j] += dcond * c.temb[static_cast<size_t>(b)][static_cast<size_t>(j)];
      }
    }
    kernels::conv3x3_backward_params(c.x, d_zc, (*grads)[w1_], (*grads)[b1_], 1);
  }
  if (d_x) kernels::conv3x3_backward_input(p[w1_], d_zc, *d_x, 1);
}

// ------------------------------------------------------------- Perceptual

ParamTree Perceptual::init(int image_size, int channels) {
  (void)image_size;
  Rng rng(derive_seed(kPinnedSeed, "perceptual"));
  ParamTree t;
  t.add("conv1.w", conv_init(kC1, channels, rng), false);
  t.add("conv1.b", Tensor({kC1}), false);
  t.add("conv2.w", conv_init(kC2, kC1, rng), false);
  t.add("conv2.b", Tensor({kC2}), false);
  t.add("conv3.w", conv_init(kC3, kC2, rng), false);
  t.add("conv3.b", Tensor({kC3}), false);
  return t;
}

Perceptual::Perceptual(const ParamTree& tree, int image_size, int channels)
    : image_size_(image_size), channels_(channels) {
  w1_ = tree.index_of("conv1.w");
  b1_ = tree.index_of("conv1.b");
  w2_ = tree.index_of("conv2.w");
  b2_ = tree.index_of("conv2.b");
  w3_ = tree.index_of("conv3.w");
  b3_ = tree.index_of("conv3.b");
  if (w1_ < 0 || b3_ < 0) throw ContractError("perceptual parameter tree is incomplete");
}

int Perceptual::feature_dim() const {
  const int s = image_size_ / 8;
  return kC3 * s * s;
}

Tensor Perceptual::forward(const ParamTree& p, const Tensor& x, Cache* cache) const {
  if (x.dim(2) != image_size_ || x.dim(3) != image_size_)
    throw DimensionError("perceptual input shape mismatch");
  Cache local;
  Cache& c = cache ? *cache : local;
  c.x = x;
  c.z1 = conv_out_shape(x, kC1, 2);
  kernels::conv3x3_forward(x, p[w1_], p[b1_], c.z1, 2);
  c.a1 = Tensor(c.z1.shape);
  kernels::tanh_forward(c.z1, c.a1);
  c.z2 = conv_out_shape(c.a1, kC2, 2);
  kernels::conv3x3_forward(c.a1, p[w2_], p[b2_], c.z2, 2);
  c.a2 = Tensor(c.z2.shape);
  kernels::tanh_forward(c.z2, c.a2);
  c.z3 = conv_out_shape(c.a2, kC3, 2);
  kernels::conv3x3_forward(c.a2, p[w3_], p[b3_], c.z3, 2);
  c.a3 = Tensor(c.z3.shape);
  kernels::tanh_forward(c.z3, c.a3);

  Tensor feat({x.dim(0), feature_dim()});
  feat.v = c.a3.v;
  return feat;
}

void Perceptual::backward_input(const ParamTree& p, const Cache& c, const Tensor& d_feat,
                                Tensor* d_x) const {
  Tensor d_a3(c.a3.shape);
  d_a3.v = d_feat.v;
  Tensor d_z3(c.z3.shape);
  kernels::tanh_backward(c.a3, d_a3, d_z3);
  Tensor d_a2(c.a2.shape);
  kernels::conv3x3_backward_input(p[w3_], d_z3, d_a2, 2);
  Tensor d_z2(c.z2.shape);
  kernels::tanh_backward(c.a2, d_a2, d_z2);
  Tensor d_a1(c.a1.shape);
  kernels::conv3x3_backward_input(p[w2_], d_z2, d_a1, 2);
  Tensor d_z1(c.z1.shape);
  kernels::tanh_backward(c.a1, d_a1, d_z1);
  if (d_x) kernels::conv3x3_backward_input(p[w1_], d_z1, *d_x, 2);
}

// ------------------------------------------------------------------ Probe

ParamTree Probe::init(int image_size, int channels, int n_classes, uint64_t seed) {
  Rng rng(derive_seed(seed, "probe"));
  const int s = image_size / 8;
  ParamTree t;
  t.add("conv1.w", conv_init(kC1, channels, rng));
  t.add("conv1.b", Tensor({kC1}));
  t.add("conv2.w", conv_init(kC2, kC1, rng));
  t.add("conv2.b", Tensor({kC2}));
  t.add("conv3.w", conv_init(kC3, kC2, rng));
  t.add("conv3.b", Tensor({kC3}));
  t.add("embed.w", linear_init(kEmbedDim, kC3 * s * s, rng));
  t.add("embed.b", Tensor({kEmbedDim}));
  t.add("head.w", linear_init(n_classes, kEmbedDim, rng));
  t.add("head.b", Tensor({n_classes}));
  return t;
}

Probe::Probe(const ParamTree& tree, int image_size, int channels, int n_classes)
    : image_size_(image_size), channels_(channels), n_classes_(n_classes) {
  w1_ = tree.index_of("conv1.w");
  b1_ = tree.index_of("conv1.b");
  w2_ = tree.index_of("conv2.w");
  b2_ = tree.index_of("conv2.b");
  w3_ = tree.index_of("conv3.w");
  b3_ = tree.index_of("conv3.b");
  we_ = tree.index_of("embed.w");
  be_ = tree.index_of("embed.b");
  wo_ = tree.index_of("head.w");
  bo_ = tree.index_of("head.b");
  if (w1_ < 0 || bo_ < 0) throw ContractError("probe parameter tree is incomplete");
}

Tensor Probe::logits(const ParamTree& p, const Tensor& x, Cache* cache) const {
  if (x.dim(2) != image_size_ || x.dim(3) != image_size_)
    throw DimensionError("probe input shape mismatch");
  Cache local;
  Cache& c = cache ? *cache : local;
  const int B = x.dim(0);
  c.x = x;
  c.z1 = conv_out_shape(x, kC1, 2);
  kernels::conv3x3_forward(x, p[w1_], p[b1_], c.z1, 2);
  c.a1 = Tensor(c.z1.shape);
  kernels::silu_forward(c.z1, c.a1);
  c.z2 = conv_out_shape(c.a1, kC2, 2);
  kernels::conv3x3_forward(c.a1, p[w2_], p[b2_], c.z2, 2);
  c.a2 = Tensor(c.z2.shape);
  kernels::silu_forward(c.z2, c.a2);
  c.z3 = conv_out_shape(c.a2, kC3, 2);
  kernels::conv3x3_forward(c.a2, p[w3_], p[b3_], c.z3, 2);
  c.a3 = Tensor(c.z3.shape);
  kernels::silu_forward(c.z3, c.a3);
  c.flat = Tensor({B, static_cast<int>(c.a3.size() / B)});
  c.flat.v = c.a3.v;
  c.ze = Tensor({B, kEmbedDim});
  linear_forward(c.flat, p[we_], p[be_], c.ze);
  c.emb = Tensor(c.ze.shape);
  kernels::silu_forward(c.ze, c.emb);
  c.logits = Tensor({B, n_classes_});
  linear_forward(c.emb, p[wo_], p[bo_], c.logits);
  return c.logits;
}

Tensor Probe::embed(const ParamTree& p, const Tensor& x) const {
  Cache c;
  logits(p, x, &c);
  return c.emb;
}

void Probe::backward(const ParamTree& p, const Cache& c, const Tensor& d_logits,
                     ParamTree* grads) const {
  Tensor d_emb(c.emb.shape);
  linear_backward(c.emb, p[wo_], d_logits, &(*grads)[wo_], &(*grads)[bo_], &d_emb);
  Tensor d_ze(c.ze.shape);
  kernels::silu_backward(c.ze, d_emb, d_ze);
  Tensor d_flat(c.flat.shape);
  linear_backward(c.flat, p[we_], d_ze, &(*grads)[we_], &(*grads)[be_], &d_flat);
  Tensor d_a3(c.a3.shape);
  d_a3.v = d_flat.v;
  Tensor d_z3(c.z3.shape);
  kernels::silu_backward(c.z3, d_a3, d_z3);
  Tensor d_a2(c.a2.shape);
  kernels::conv3x3_backward_params(c.a2, d_z3, (*grads)[w3_], (*grads)[b3_], 2);
  kernels::conv3x3_backward_input(p[w3_], d_z3, d_a2, 2);
  Tensor d_z2(c.z2.shape);
  kernels::silu_backward(c.z2, d_a2, d_z2);
  kernels::conv3x3_backward_params(c.a1, d_z2, (*grads)[w2_], (*grads)[b2_], 2);
  Tensor d_a1(c.a1.shape);
  kernels::conv3x3_backward_input(p[w2_], d_z2, d_a1, 2);
  Tensor d_z1(c.z1.shape);
  kernels::silu_backward(c.z1, d_a1, d_z1);
  kernels::conv3x3_backward_params(c.x, d_z1, (*grads)[w1_], (*grads)[b1_], 2);
}

std::vector<int> Probe::predict(const ParamTree& p, const Tensor& x) const {
  Tensor lg = logits(p, x);
  const int B = lg.dim(0), N = lg.dim(1);
  std::vector<int> out(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    int best = 0;
    for (int i = 1; i < N; ++i)
      if (lg[static_cast<int64_t>(b) * N + i] > lg[static_cast<int64_t>(b) * N + best]) best = i;
    out[static_cast<size_t>(b)] = best;
  }
  return out;
}

std::vector<double> Probe::class_prob(const ParamTree& p, const Tensor& x, int cls) const {
  Tensor lg = logits(p, x);
  softmax_rows(lg);
  const int B = lg.dim(0), N = lg.dim(1);
  std::vector<double> out(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) out[static_cast<size_t>(b)] = lg[static_cast<int64_t>(b) * N + cls];
  return out;
}

}  // namespace patronus
