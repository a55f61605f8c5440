#pragma once

#include "patronus/tensor.hpp"

// 3x3 convolution (pad 1, stride 1 or 2), nearest upsample and pointwise
// activations. Every kernel has a serial reference and an OpenMP variant
// with identical per-element accumulation order, so outputs are
// bit-identical regardless of thread count.
namespace patronus::kernels {

// thread-local switch; the sweep worker pool turns this off to avoid
// nested oversubscription.
bool& parallel_flag();

// out must be preshaped [B, Co, Ho, Wo] with Ho = (H + 2 - 3)/stride + 1.
void conv3x3_forward_serial(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out,
                            int stride);
void conv3x3_forward_omp(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out,
                         int stride);
void conv3x3_forward(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out, int stride);

// din is overwritten.
void conv3x3_backward_input_serial(const Tensor& w, const Tensor& dout, Tensor& din, int stride);
void conv3x3_backward_input_omp(const Tensor& w, const Tensor& dout, Tensor& din, int stride);
void conv3x3_backward_input(const Tensor& w, const Tensor& dout, Tensor& din, int stride);

// dw/db are accumulated into.
void conv3x3_backward_params_serial(const Tensor& in, const Tensor& dout, Tensor& dw, Tensor& db,
                                    int stride);
void conv3x3_backward_params_omp(const Tensor& in, const Tensor& dout, Tensor& dw, Tensor& db,
                                 int stride);
void conv3x3_backward_params(const Tensor& in, const Tensor& dout, Tensor& dw, Tensor& db,
                             int stride);

void upsample2x_forward(const Tensor& in, Tensor& out);
void upsample2x_backward(const Tensor& dout, Tensor& din);

// y = x * sigmoid(x); smooth, so finite-difference checks are clean.
void silu_forward(const Tensor& x, Tensor& y);
void silu_backward(const Tensor& x, const Tensor& dy, Tensor& dx);

void tanh_forward(const Tensor& x, Tensor& y);
void tanh_backward(const Tensor& y, const Tensor& dy, Tensor& dx);

void sigmoid_forward(const Tensor& x, Tensor& y);
void sigmoid_backward(const Tensor& y, const Tensor& dy, Tensor& dx);

}  // namespace patronus::kernels
