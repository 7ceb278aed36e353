#pragma once

#include <cstdint>
#include <vector>

#include "dsp/tensor.hpp"

namespace dsp {

// All ops are strict about shapes: no implicit broadcasting except the
// explicit scalar forms (scale, add_scalar). Every op is differentiable
// where mathematically defined; gradients accumulate additively.

// input [B,Cin,H,W] * weight [Cout,Cin,Kh,Kw] (+ bias [Cout]) -> [B,Cout,H',W']
// H' = (H + 2*padding - Kh) / stride + 1 (floor), same for W'.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::int64_t stride, std::int64_t padding);

// Per-group convolution with channel gather. Group g applies weights[g]
// (shape [Cout_g, |gather[g]|, Kh, Kw]) to the input channels listed in
// gather[g]; gather lists may overlap across groups. Output channels are the
// concatenation of the per-group outputs.
Tensor grouped_conv2d(const Tensor& input, const std::vector<Tensor>& weights,
                      const std::vector<std::vector<std::int64_t>>& gather,
                      std::int64_t stride, std::int64_t padding);

// x [B,C,H,W] + bias [C], broadcast over batch and space.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// input [B,F] * weight [O,F]^T + bias [O] -> [B,O]
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);

// kernel x kernel window, stride defaults to kernel; ties resolve to the
// first (row-major) maximal element so backward routing is deterministic.
Tensor maxpool2d(const Tensor& x, std::int64_t kernel, std::int64_t stride = 0);

enum class BatchNormMode {
    Train,              // batch statistics; running stats updated
    TrainFrozenStats,   // batch statistics; running stats left untouched
    Eval,               // running statistics
};

// x [B,C,H,W]; gamma/beta [C]. running_mean/var are buffers mutated only in
// Train mode (momentum 0.1 convention: r = (1-m)*r + m*batch, unbiased var).
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& running_mean, std::vector<double>& running_var,
                   BatchNormMode mode, double eps = 1e-5, double momentum = 0.1);

// logits [B,C], labels in [0,C). Mean negative log-likelihood; the log is
// clamped at 1e-12.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor reduce_sum(const Tensor& a); // -> scalar

Tensor sqrt(const Tensor& a);                 // domain error on negatives; subgradient 0 at 0
Tensor pow(const Tensor& a, double exponent); // fractional exponents require non-negative input
Tensor log(const Tensor& a);                  // domain error on non-positives

// m [R,C] -> softmax over each row.
Tensor softmax_rows(const Tensor& m);

Tensor reshape(const Tensor& a, Shape shape);
Tensor flatten(const Tensor& a); // [B, ...] -> [B, prod(...)]

} // namespace dsp
