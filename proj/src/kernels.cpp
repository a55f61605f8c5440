#include "patronus/kernels.hpp"

#include <algorithm>
#include <cassert>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace patronus::kernels {

bool& parallel_flag() {
  thread_local bool flag = true;
  return flag;
}

namespace {

// per-(batch, out-channel) plane; the interior column range is unrolled
// branch-free, only the one or two edge columns take the guarded path
inline void conv_fwd_one(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out,
                         int stride, int bi, int co) {
  const int Ci = in.dim(1), H = in.dim(2), W = in.dim(3);
  const int Ho = out.dim(2), Wo = out.dim(3);
  const double* wbase = w.data() + static_cast<size_t>(co) * Ci * 9;
  double* oplane = out.data() + ((static_cast<size_t>(bi) * out.dim(1) + co) * Ho) * Wo;
  const double bias = b[co];
  for (size_t i = 0; i < static_cast<size_t>(Ho) * Wo; ++i) oplane[i] = bias;

  // interior ow: stride*ow-1 >= 0 and stride*ow+1 <= W-1
  const int owlo = 1;
  const int owhi = (W - 2) / stride;  // inclusive

  for (int ci = 0; ci < Ci; ++ci) {
    const double* ip = in.data() + ((static_cast<size_t>(bi) * Ci + ci) * H) * W;
    const double* wp = wbase + static_cast<size_t>(ci) * 9;
    const double w00 = wp[0], w01 = wp[1], w02 = wp[2];
    const double w10 = wp[3], w11 = wp[4], w12 = wp[5];
    const double w20 = wp[6], w21 = wp[7], w22 = wp[8];
    for (int oh = 0; oh < Ho; ++oh) {
      const int ih0 = oh * stride - 1;
      const double* r0 = (ih0 >= 0 && ih0 < H) ? ip + static_cast<size_t>(ih0) * W : nullptr;
      const double* r1 = (ih0 + 1 >= 0 && ih0 + 1 < H) ? ip + static_cast<size_t>(ih0 + 1) * W
                                                       : nullptr;
      const double* r2 = (ih0 + 2 < H) ? ip + static_cast<size_t>(ih0 + 2) * W : nullptr;
      double* orow = oplane + static_cast<size_t>(oh) * Wo;

      auto edge = [&](int ow) {
        const int iw0 = ow * stride - 1;
        double t = 0.0;
        for (int kw = 0; kw < 3; ++kw) {
          const int iw = iw0 + kw;
          if (iw < 0 || iw >= W) continue;
          if (r0) t += wp[kw] * r0[iw];
          if (r1) t += wp[3 + kw] * r1[iw];
          if (r2) t += wp[6 + kw] * r2[iw];
        }
        orow[ow] += t;
      };

      for (int ow = 0; ow < std::min(owlo, Wo); ++ow) edge(ow);
      if (r0 && r1 && r2) {
        for (int ow = owlo; ow <= owhi && ow < Wo; ++ow) {
          const int iw0 = ow * stride - 1;
          orow[ow] += w00 * r0[iw0] + w01 * r0[iw0 + 1] + w02 * r0[iw0 + 2] + w10 * r1[iw0] +
                      w11 * r1[iw0 + 1] + w12 * r1[iw0 + 2] + w20 * r2[iw0] + w21 * r2[iw0 + 1] +
                      w22 * r2[iw0 + 2];
        }
      } else {
        for (int ow = owlo; ow <= owhi && ow < Wo; ++ow) {
          const int iw0 = ow * stride - 1;
          double t = 0.0;
          if (r0) t += w00 * r0[iw0] + w01 * r0[iw0 + 1] + w02 * r0[iw0 + 2];
          if (r1) t += w10 * r1[iw0] + w11 * r1[iw0 + 1] + w12 * r1[iw0 + 2];
          if (r2) t += w20 * r2[iw0] + w21 * r2[iw0 + 1] + w22 * r2[iw0 + 2];
          orow[ow] += t;
        }
      }
      for (int ow = owhi + 1; ow < Wo; ++ow) edge(ow);
    }
  }
}

inline void conv_bwd_in_one(const Tensor& w, const Tensor& dout, Tensor& din, int stride, int bi) {
  const int Co = dout.dim(1), Ho = dout.dim(2), Wo = dout.dim(3);
  const int Ci = din.dim(1), H = din.dim(2), W = din.dim(3);
  double* dbase = din.data() + static_cast<size_t>(bi) * Ci * H * W;
  for (size_t i = 0; i < static_cast<size_t>(Ci) * H * W; ++i) dbase[i] = 0.0;
  const int owlo = 1;
  const int owhi = (W - 2) / stride;  // inclusive
  for (int co = 0; co < Co; ++co) {
    const double* dop = dout.data() + ((static_cast<size_t>(bi) * Co + co) * Ho) * Wo;
    const double* wbase = w.data() + static_cast<size_t>(co) * Ci * 9;
    for (int ci = 0; ci < Ci; ++ci) {
      double* dip = dbase + static_cast<size_t>(ci) * H * W;
      const double* wp = wbase + static_cast<size_t>(ci) * 9;
      const double w00 = wp[0], w01 = wp[1], w02 = wp[2];
      const double w10 = wp[3], w11 = wp[4], w12 = wp[5];
      const double w20 = wp[6], w21 = wp[7], w22 = wp[8];
      for (int oh = 0; oh < Ho; ++oh) {
        const int ih0 = oh * stride - 1;
        double* r0 = (ih0 >= 0 && ih0 < H) ? dip + static_cast<size_t>(ih0) * W : nullptr;
        double* r1 = (ih0 + 1 < H) ? dip + static_cast<size_t>(ih0 + 1) * W : nullptr;
        double* r2 = (ih0 + 2 < H) ? dip + static_cast<size_t>(ih0 + 2) * W : nullptr;
        const double* grow = dop + static_cast<size_t>(oh) * Wo;

        auto edge = [&](int ow) {
          const double g = grow[ow];
          if (g == 0.0) return;
          const int iw0 = ow * stride - 1;
          for (int kw = 0; kw < 3; ++kw) {
            const int iw = iw0 + kw;
            if (iw < 0 || iw >= W) continue;
            if (r0) r0[iw] += wp[kw] * g;
            if (r1) r1[iw] += wp[3 + kw] * g;
            if (r2) r2[iw] += wp[6 + kw] * g;
          }
        };

        for (int ow = 0; ow < std::min(owlo, Wo); ++ow) edge(ow);
        if (r0 && r1 && r2) {
          for (int ow = owlo; ow <= owhi && ow < Wo; ++ow) {
            const double g = grow[ow];
            if (g == 0.0) continue;
            const int iw0 = ow * stride - 1;
            r0[iw0] += w00 * g;
            r0[iw0 + 1] += w01 * g;
            r0[iw0 + 2] += w02 * g;
            r1[iw0] += w10 * g;
            r1[iw0 + 1] += w11 * g;
            r1[iw0 + 2] += w12 * g;
            r2[iw0] += w20 * g;
            r2[iw0 + 1] += w21 * g;
            r2[iw0 + 2] += w22 * g;
          }
        } else {
          for (int ow = owlo; ow <= owhi && ow < Wo; ++ow) {
            const double g = grow[ow];
            if (g == 0.0) continue;
            const int iw0 = ow * stride - 1;
            if (r0) {
              r0[iw0] += w00 * g;
              r0[iw0 + 1] += w01 * g;
              r0[iw0 + 2] += w02 * g;
            }
            if (r1) {
              r1[iw0] += w10 * g;
              r1[iw0 + 1] += w11 * g;
              r1[iw0 + 2] += w12 * g;
            }
            if (r2) {
              r2[iw0] += w20 * g;
              r2[iw0 + 1] += w21 * g;
              r2[iw0 + 2] += w22 * g;
            }
          }
        }
        for (int ow = owhi + 1; ow < Wo; ++ow) edge(ow);
      }
    }
  }
}

inline void conv_bwd_params_one(const Tensor& in, const Tensor& dout, Tensor& dw, Tensor& db,
                                int stride, int co) {
  const int B = in.dim(0), Ci = in.dim(1), H = in.dim(2), W = in.dim(3);
  const int Co = dout.dim(1), Ho = dout.dim(2), Wo = dout.dim(3);
  double* dwp = dw.data() + static_cast<size_t>(co) * Ci * 9;
  const int owlo = 1;
  const int owhi = (W - 2) / stride;  // inclusive

  double dbacc = 0.0;
  for (int bi = 0; bi < B; ++bi) {
    const double* dop = dout.data() + ((static_cast<size_t>(bi) * Co + co) * Ho) * Wo;
    for (size_t i = 0; i < static_cast<size_t>(Ho) * Wo; ++i) dbacc += dop[i];
  }
  db[co] += dbacc;

  for (int ci = 0; ci < Ci; ++ci) {
    double a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0, a21 = 0, a22 = 0;
    double* wp = dwp + static_cast<size_t>(ci) * 9;
    for (int bi = 0; bi < B; ++bi) {
      const double* dop = dout.data() + ((static_cast<size_t>(bi) * Co + co) * Ho) * Wo;
      const double* ip = in.data() + ((static_cast<size_t>(bi) * Ci + ci) * H) * W;
      for (int oh = 0; oh < Ho; ++oh) {
        const int ih0 = oh * stride - 1;
        const double* r0 = (ih0 >= 0 && ih0 < H) ? ip + static_cast<size_t>(ih0) * W : nullptr;
        const double* r1 = (ih0 + 1 < H) ? ip + static_cast<size_t>(ih0 + 1) * W : nullptr;
        const double* r2 = (ih0 + 2 < H) ? ip + static_cast<size_t>(ih0 + 2) * W : nullptr;
        const double* grow = dop + static_cast<size_t>(oh) * Wo;

        auto edge = [&](int ow) {
          const double g = grow[ow];
          if (g == 0.0) return;
          const int iw0 = ow * stride - 1;
          for (int kw = 0; kw < 3; ++kw) {
            const int iw = iw0 + kw;
            if (iw < 0 || iw >= W) continue;
            if (r0) wp[kw] += r0[iw] * g;
            if (r1) wp[3 + kw] += r1[iw] * g;
            if (r2) wp[6 + kw] += r2[iw] * g;
          }
        };

        for (int ow = 0; ow < std::min(owlo, Wo); ++ow) edge(ow);
        if (r0 && r1 && r2) {
          for (int ow = owlo; ow <= owhi && ow < Wo; ++ow) {
            const double g = grow[ow];
            const int iw0 = ow * stride - 1;
            a00 += r0[iw0] * g;
            a01 += r0[iw0 + 1] * g;
            a02 += r0[iw0 + 2] * g;
            a10 += r1[iw0] * g;
            a11 += r1[iw0 + 1] * g;
            a12 += r1[iw0 + 2] * g;
            a20 += r2[iw0] * g;
            a21 += r2[iw0 + 1] * g;
            a22 += r2[iw0 + 2] * g;
          }
        } else {
          for (int ow = owlo; ow <= owhi && ow < Wo; ++ow) {
            const double g = grow[ow];
            const int iw0 = ow * stride - 1;
            if (r0) {
              a00 += r0[iw0] * g;
              a01 += r0[iw0 + 1] * g;
              a02 += r0[iw0 + 2] * g;
            }
            if (r1) {
              a10 += r1[iw0] * g;
              a11 += r1[iw0 + 1] * g;
              a12 += r1[iw0 + 2] * g;
            }
            if (r2) {
              a20 += r2[iw0] * g;
              a21 += r2[iw0 + 1] * g;
              a22 += r2[iw0 + 2] * g;
            }
          }
        }
        for (int ow = owhi + 1; ow < Wo; ++ow) edge(ow);
      }
    }
    wp[0] += a00;
    wp[1] += a01;
    wp[2] += a02;
    wp[3] += a10;
    wp[4] += a11;
    wp[5] += a12;
    wp[6] += a20;
    wp[7] += a21;
    wp[8] += a22;
  }
}

}  // namespace

void conv3x3_forward_serial(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out,
                            int stride) {
  const int B = in.dim(0), Co = out.dim(1);
  for (int bi = 0; bi < B; ++bi)
    for (int co = 0; co < Co; ++co) conv_fwd_one(in, w, b, out, stride, bi, co);
}

void conv3x3_forward_omp(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out,
                         int stride) {
  const int B = in.dim(0), Co = out.dim(1);
#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < B; ++bi)
    for (int co = 0; co < Co; ++co) conv_fwd_one(in, w, b, out, stride, bi, co);
}

void conv3x3_forward(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out, int stride) {
  if (parallel_flag())
    conv3x3_forward_omp(in, w, b, out, stride);
  else
    conv3x3_forward_serial(in, w, b, out, stride);
}

void conv3x3_backward_input_serial(const Tensor& w, const Tensor& dout, Tensor& din, int stride) {
  const int B = din.dim(0);
  for (int bi = 0; bi < B; ++bi) conv_bwd_in_one(w, dout, din, stride, bi);
}

void conv3x3_backward_input_omp(const Tensor& w, const Tensor& dout, Tensor& din, int stride) {
  const int B = din.dim(0);
#pragma omp parallel for schedule(static)
  for (int bi = 0; bi < B; ++bi) conv_bwd_in_one(w, dout, din, stride, bi);
}

void conv3x3_backward_input(const Tensor& w, const Tensor& dout, Tensor& din, int stride) {
  if (parallel_flag())
    conv3x3_backward_input_omp(w, dout, din, stride);
  else
    conv3x3_backward_input_serial(w, dout, din, stride);
}

void conv3x3_backward_params_serial(const Tensor& in, const Tensor& dout, Tensor& dw, Tensor& db,
                                    int stride) {
  const int Co = dout.dim(1);
  for (int co = 0; co < Co; ++co) conv_bwd_params_one(in, dout, dw, db, stride, co);
}

void conv3x3_backward_params_omp(const Tensor& in, const Tensor& dout, Tensor& dw, Tensor& db,
                                 int stride) {
  const int Co = dout.dim(1);
#pragma omp parallel for schedule(static)
  for (int co = 0; co < Co; ++co) conv_bwd_params_one(in, dout, dw, db, stride, co);
}

void conv3x3_backward_params(const Tensor& in, const Tensor& dout, Tensor& dw, Tensor& db,
                             int stride) {
  if (parallel_flag())
    conv3x3_backward_params_omp(in, dout, dw, db, stride);
  else
    conv3x3_backward_params_serial(in, dout, dw, db, stride);
}

void upsample2x_forward(const Tensor& in, Tensor& out) {
  const int B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const double x = in.at4(bi, c, h, w);
          out.at4(bi, c, 2 * h, 2 * w) = x;
          out.at4(bi, c, 2 * h, 2 * w + 1) = x;
          out.at4(bi, c, 2 * h + 1, 2 * w) = x;
          out.at4(bi, c, 2 * h + 1, 2 * w + 1) = x;
        }
}

void upsample2x_backward(const Tensor& dout, Tensor& din) {
  const int B = din.dim(0), C = din.dim(1), H = din.dim(2), W = din.dim(3);
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
          din.at4(bi, c, h, w) = dout.at4(bi, c, 2 * h, 2 * w) + dout.at4(bi, c, 2 * h, 2 * w + 1) +
                                 dout.at4(bi, c, 2 * h + 1, 2 * w) +
                                 dout.at4(bi, c, 2 * h + 1, 2 * w + 1);
}

void silu_forward(const Tensor& x, Tensor& y) {
  for (int64_t i = 0; i < x.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
}

void silu_backward(const Tensor& x, const Tensor& dy, Tensor& dx) {
  for (int64_t i = 0; i < x.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    dx[i] = dy[i] * (s + x[i] * s * (1.0 - s));
  }
}

void tanh_forward(const Tensor& x, Tensor& y) {
  for (int64_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
}

void tanh_backward(const Tensor& y, const Tensor& dy, Tensor& dx) {
  for (int64_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * (1.0 - y[i] * y[i]);
}

void sigmoid_forward(const Tensor& x, Tensor& y) {
  for (int64_t i = 0; i < x.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
}

void sigmoid_backward(const Tensor& y, const Tensor& dy, Tensor& dx) {
  for (int64_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
}

}  // namespace patronus::kernels
