#include "dsp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

#include "dsp/errors.hpp"

namespace dsp {

namespace {

using std::int64_t;

// ---- small dense kernels ---------------------------------------------------
// Deterministic fixed-order accumulation; sizes at desk scale, -O3 vectorizes.

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c) {
    for (int64_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
void gemm_nt(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c) {
    for (int64_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
void gemm_tn(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c) {
    for (int64_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const double av = ai[p];
            double* cp = c + p * n;
            for (int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

// x [C,H,W] -> cols [C*Kh*Kw, OH*OW], zero padding
void im2col(const double* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, double* cols) {
    const int64_t plane = oh * ow;
    for (int64_t ch = 0; ch < c; ++ch) {
        const double* xc = x + ch * h * w;
        for (int64_t i = 0; i < kh; ++i) {
            for (int64_t j = 0; j < kw; ++j) {
                double* row = cols + ((ch * kh + i) * kw + j) * plane;
                for (int64_t r = 0; r < oh; ++r) {
                    const int64_t ih = r * stride - pad + i;
                    double* dst = row + r * ow;
                    if (ih < 0 || ih >= h) {
                        std::fill(dst, dst + ow, 0.0);
                        continue;
                    }
                    const double* src = xc + ih * w;
                    for (int64_t s = 0; s < ow; ++s) {
                        const int64_t iw = s * stride - pad + j;
                        dst[s] = (iw >= 0 && iw < w) ? src[iw] : 0.0;
                    }
                }
            }
        }
    }
}

// cols [C*Kh*Kw, OH*OW] accumulated back into dx [C,H,W]
void col2im(const double* cols, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, double* dx) {
    const int64_t plane = oh * ow;
    for (int64_t ch = 0; ch < c; ++ch) {
        double* xc = dx + ch * h * w;
        for (int64_t i = 0; i < kh; ++i) {
            for (int64_t j = 0; j < kw; ++j) {
                const double* row = cols + ((ch * kh + i) * kw + j) * plane;
                for (int64_t r = 0; r < oh; ++r) {
                    const int64_t ih = r * stride - pad + i;
                    if (ih < 0 || ih >= h) continue;
                    const double* src = row + r * ow;
                    double* dst = xc + ih * w;
                    for (int64_t s = 0; s < ow; ++s) {
                        const int64_t iw = s * stride - pad + j;
                        if (iw >= 0 && iw < w) dst[iw] += src[s];
                    }
                }
            }
        }
    }
}

void accumulate(const std::shared_ptr<detail::TensorNode>& node, const std::vector<double>& g) {
    node->ensure_grad();
    double* dst = node->grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

void check_conv_args(int64_t stride, int64_t padding) {
    if (stride < 1) throw DomainError("conv stride must be >= 1, got " + std::to_string(stride));
    if (padding < 0) throw DomainError("conv padding must be >= 0, got " + std::to_string(padding));
}

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int64_t stride,
              int64_t padding) {
    check_conv_args(stride, padding);
    if (input.rank() != 4 || weight.rank() != 4) {
        throw ShapeError("conv2d expects 4-d input and weight, got " +
                         shape_to_string(input.shape()) + " and " + shape_to_string(weight.shape()));
    }
    if (input.dim(1) != weight.dim(1)) {
        throw ShapeError("conv2d channel mismatch: input " + shape_to_string(input.shape()) +
                         " vs weight " + shape_to_string(weight.shape()));
    }
    const int64_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (h + 2 * padding < kh || w + 2 * padding < kw) {
        throw ShapeError("conv2d kernel larger than padded input: input " +
                         shape_to_string(input.shape()) + " vs weight " +
                         shape_to_string(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
        throw ShapeError("conv2d bias shape " + shape_to_string(bias.shape()) +
                         " does not match weight " + shape_to_string(weight.shape()));
    }
    const int64_t oh = conv_out_extent(h, kh, stride, padding);
    const int64_t ow = conv_out_extent(w, kw, stride, padding);
    const int64_t plane = oh * ow;
    const int64_t kdim = cin * kh * kw;

    std::vector<double> out(static_cast<std::size_t>(batch * cout * plane), 0.0);
    std::vector<double> cols(static_cast<std::size_t>(kdim * plane));
    const double* x = input.data().data();
    const double* wt = weight.data().data();
    for (int64_t b = 0; b < batch; ++b) {
        im2col(x + b * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow, cols.data());
        gemm_nn(cout, plane, kdim, wt, cols.data(), out.data() + b * cout * plane);
    }
    if (bias.defined()) {
        const double* bv = bias.data().data();
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t c = 0; c < cout; ++c) {
                double* dst = out.data() + (b * cout + c) * plane;
                for (int64_t i = 0; i < plane; ++i) dst[i] += bv[c];
            }
        }
    }

    std::vector<Tensor> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    return Tensor::make(
        {batch, cout, oh, ow}, std::move(out), inputs,
        [input, weight, bias, stride, padding, batch, cin, h, w, cout, kh, kw, oh,
         ow](detail::TensorNode& self) {
            const int64_t plane = oh * ow;
            const int64_t kdim = cin * kh * kw;
            const double* dy = self.grad.data();
            const double* x = input.data().data();
            const double* wt = weight.data().data();
            std::vector<double> cols(static_cast<std::size_t>(kdim * plane));
            std::vector<double> dw, dcols;
            if (weight.requires_grad()) dw.assign(weight.data().size(), 0.0);
            const bool need_dx = input.requires_grad();
            if (need_dx) {
                input.node()->ensure_grad();
                dcols.assign(static_cast<std::size_t>(kdim * plane), 0.0);
            }
            for (int64_t b = 0; b < batch; ++b) {
                const double* dyb = dy + b * cout * plane;
                if (weight.requires_grad() || need_dx) {
                    im2col(x + b * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow,
                           cols.data());
                }
                if (weight.requires_grad()) {
                    gemm_nt(cout, kdim, plane, dyb, cols.data(), dw.data());
                }
                if (need_dx) {
                    std::fill(dcols.begin(), dcols.end(), 0.0);
                    gemm_tn(cout, plane, kdim, wt, dyb, dcols.data());
                    col2im(dcols.data(), cin, h, w, kh, kw, stride, padding, oh, ow,
                           input.node()->grad.data() + b * cin * h * w);
                }
            }
            if (weight.requires_grad()) accumulate(weight.node(), dw);
            if (bias.defined() && bias.requires_grad()) {
                std::vector<double> db(static_cast<std::size_t>(cout), 0.0);
                for (int64_t b = 0; b < batch; ++b) {
                    for (int64_t c = 0; c < cout; ++c) {
                        const double* src = dy + (b * cout + c) * plane;
                        double s = 0.0;
                        for (int64_t i = 0; i < plane; ++i) s += src[i];
                        db[c] += s;
                    }
                }
                accumulate(bias.node(), db);
            }
        });
}

Tensor grouped_conv2d(const Tensor& input, const std::vector<Tensor>& weights,
                      const std::vector<std::vector<int64_t>>& gather, int64_t stride,
                      int64_t padding) {
    check_conv_args(stride, padding);
    if (weights.empty()) throw ShapeError("grouped_conv2d requires at least one group");
    if (weights.size() != gather.size()) {
        throw ShapeError("grouped_conv2d: " + std::to_string(weights.size()) + " weight groups vs " +
                         std::to_string(gather.size()) + " gather lists");
    }
    if (input.rank() != 4) {
        throw ShapeError("grouped_conv2d expects 4-d input, got " + shape_to_string(input.shape()));
    }
    const int64_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int64_t kh = weights[0].dim(2), kw = weights[0].dim(3);
    int64_t cout_total = 0;
    for (std::size_t g = 0; g < weights.size(); ++g) {
        const Tensor& wg = weights[g];
        if (wg.rank() != 4 || wg.dim(2) != kh || wg.dim(3) != kw) {
            throw ShapeError("grouped_conv2d: group " + std::to_string(g) + " weight shape " +
                             shape_to_string(wg.shape()) + " inconsistent with group 0");
        }
        if (wg.dim(1) != static_cast<int64_t>(gather[g].size())) {
            throw ShapeError("grouped_conv2d: group " + std::to_string(g) + " weight " +
                             shape_to_string(wg.shape()) + " expects " + std::to_string(wg.dim(1)) +
                             " channels but gather list has " + std::to_string(gather[g].size()));
        }
        for (const int64_t idx : gather[g]) {
            if (idx < 0 || idx >= cin) {
                throw IndexError("grouped_conv2d: gather index " + std::to_string(idx) +
                                 " out of range for " + std::to_string(cin) + " input channels");
            }
        }
        cout_total += wg.dim(0);
    }
    if (h + 2 * padding < kh || w + 2 * padding < kw) {
        throw ShapeError("grouped_conv2d kernel larger than padded input");
    }
    const int64_t oh = conv_out_extent(h, kh, stride, padding);
    const int64_t ow = conv_out_extent(w, kw, stride, padding);
    const int64_t plane = oh * ow;

    std::size_t max_gs = 0;
    for (const auto& gl : gather) max_gs = std::max(max_gs, gl.size());

    std::vector<double> out(static_cast<std::size_t>(batch * cout_total * plane), 0.0);
    std::vector<double> xg(max_gs * static_cast<std::size_t>(h * w));
    std::vector<double> cols(max_gs * static_cast<std::size_t>(kh * kw * plane));
    const double* x = input.data().data();
    for (int64_t b = 0; b < batch; ++b) {
        int64_t offset = 0;
        for (std::size_t g = 0; g < weights.size(); ++g) {
            const int64_t gs = static_cast<int64_t>(gather[g].size());
            const int64_t cg = weights[g].dim(0);
            for (int64_t c = 0; c < gs; ++c) {
                std::memcpy(xg.data() + c * h * w, x + (b * cin + gather[g][c]) * h * w,
                            static_cast<std::size_t>(h * w) * sizeof(double));
            }
            im2col(xg.data(), gs, h, w, kh, kw, stride, padding, oh, ow, cols.data());
            gemm_nn(cg, plane, gs * kh * kw, weights[g].data().data(), cols.data(),
                    out.data() + (b * cout_total + offset) * plane);
            offset += cg;
        }
    }

    std::vector<Tensor> inputs{input};
    for (const auto& wg : weights) inputs.push_back(wg);
    return Tensor::make(
        {batch, cout_total, oh, ow}, std::move(out), inputs,
        [input, weights, gather, stride, padding, batch, cin, h, w, kh, kw, oh, ow,
         cout_total](detail::TensorNode& self) {
            const int64_t plane = oh * ow;
            std::size_t max_gs = 0;
            for (const auto& gl : gather) max_gs = std::max(max_gs, gl.size());
            std::vector<double> xg(max_gs * static_cast<std::size_t>(h * w));
            std::vector<double> cols(max_gs * static_cast<std::size_t>(kh * kw * plane));
            std::vector<double> dcols, dxg;
            const bool need_dx = input.requires_grad();
            if (need_dx) {
                input.node()->ensure_grad();
                dcols.resize(cols.size());
                dxg.resize(xg.size());
            }
            std::vector<std::vector<double>> dw(weights.size());
            for (std::size_t g = 0; g < weights.size(); ++g) {
                if (weights[g].requires_grad()) dw[g].assign(weights[g].data().size(), 0.0);
            }
            const double* x = input.data().data();
            const double* dy = self.grad.data();
            for (int64_t b = 0; b < batch; ++b) {
                int64_t offset = 0;
                for (std::size_t g = 0; g < weights.size(); ++g) {
                    const int64_t gs = static_cast<int64_t>(gather[g].size());
                    const int64_t cg = weights[g].dim(0);
                    const int64_t kdim = gs * kh * kw;
                    const double* dyb = dy + (b * cout_total + offset) * plane;
                    if (weights[g].requires_grad() || need_dx) {
                        for (int64_t c = 0; c < gs; ++c) {
                            std::memcpy(xg.data() + c * h * w,
                                        x + (b * cin + gather[g][c]) * h * w,
                                        static_cast<std::size_t>(h * w) * sizeof(double));
                        }
                        im2col(xg.data(), gs, h, w, kh, kw, stride, padding, oh, ow, cols.data());
                    }
                    if (weights[g].requires_grad()) {
                        gemm_nt(cg, kdim, plane, dyb, cols.data(), dw[g].data());
                    }
                    if (need_dx && gs > 0) {
                        std::fill(dcols.begin(), dcols.begin() + kdim * plane, 0.0);
                        gemm_tn(cg, plane, kdim, weights[g].data().data(), dyb, dcols.data());
                        std::fill(dxg.begin(), dxg.begin() + gs * h * w, 0.0);
                        col2im(dcols.data(), gs, h, w, kh, kw, stride, padding, oh, ow, dxg.data());
                        double* dx = input.node()->grad.data() + b * cin * h * w;
                        for (int64_t c = 0; c < gs; ++c) {
                            double* dst = dx + gather[g][c] * h * w;
                            const double* src = dxg.data() + c * h * w;
                            for (int64_t i = 0; i < h * w; ++i) dst[i] += src[i];
                        }
                    }
                    offset += cg;
                }
            }
            for (std::size_t g = 0; g < weights.size(); ++g) {
                if (weights[g].requires_grad()) accumulate(weights[g].node(), dw[g]);
            }
        });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
        throw ShapeError("add_channel_bias: x " + shape_to_string(x.shape()) + " vs bias " +
                         shape_to_string(bias.shape()));
    }
    const int64_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    std::vector<double> out(x.data());
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t ch = 0; ch < c; ++ch) {
            double* dst = out.data() + (b * c + ch) * plane;
            const double bv = bias.data()[ch];
            for (int64_t i = 0; i < plane; ++i) dst[i] += bv;
        }
    }
    return Tensor::make(x.shape(), std::move(out), {x, bias},
                        [x, bias, batch, c, plane](detail::TensorNode& self) {
                            if (x.requires_grad()) accumulate(x.node(), self.grad);
                            if (bias.requires_grad()) {
                                std::vector<double> db(static_cast<std::size_t>(c), 0.0);
                                for (int64_t b = 0; b < batch; ++b) {
                                    for (int64_t ch = 0; ch < c; ++ch) {
                                        const double* src = self.grad.data() + (b * c + ch) * plane;
                                        double s = 0.0;
                                        for (int64_t i = 0; i < plane; ++i) s += src[i];
                                        db[ch] += s;
                                    }
                                }
                                accumulate(bias.node(), db);
                            }
                        });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.rank() != 2 || weight.rank() != 2 || input.dim(1) != weight.dim(1)) {
        throw ShapeError("linear: input " + shape_to_string(input.shape()) + " vs weight " +
                         shape_to_string(weight.shape()));
    }
    const int64_t batch = input.dim(0), feat = input.dim(1), outdim = weight.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outdim)) {
        throw ShapeError("linear bias shape " + shape_to_string(bias.shape()) +
                         " does not match weight " + shape_to_string(weight.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(batch * outdim), 0.0);
    gemm_nt(batch, outdim, feat, input.data().data(), weight.data().data(), out.data());
    if (bias.defined()) {
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t o = 0; o < outdim; ++o) out[b * outdim + o] += bias.data()[o];
        }
    }
    std::vector<Tensor> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    return Tensor::make({batch, outdim}, std::move(out), inputs,
                        [input, weight, bias, batch, feat, outdim](detail::TensorNode& self) {
                            const double* dy = self.grad.data();
                            if (input.requires_grad()) {
                                std::vector<double> dx(input.data().size(), 0.0);
                                gemm_nn(batch, feat, outdim, dy, weight.data().data(), dx.data());
                                accumulate(input.node(), dx);
                            }
                            if (weight.requires_grad()) {
                                std::vector<double> dw(weight.data().size(), 0.0);
                                gemm_tn(batch, feat, outdim, dy, input.data().data(), dw.data());
                                accumulate(weight.node(), dw);
                            }
                            if (bias.defined() && bias.requires_grad()) {
                                std::vector<double> db(static_cast<std::size_t>(outdim), 0.0);
                                for (int64_t b = 0; b < batch; ++b) {
                                    for (int64_t o = 0; o < outdim; ++o) db[o] += dy[b * outdim + o];
                                }
                                accumulate(bias.node(), db);
                            }
                        });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    return Tensor::make(x.shape(), std::move(out), {x}, [x](detail::TensorNode& self) {
        if (!x.requires_grad()) return;
        std::vector<double> dx(x.data().size());
        for (std::size_t i = 0; i < dx.size(); ++i) {
            dx[i] = x.data()[i] > 0.0 ? self.grad[i] : 0.0;
        }
        accumulate(x.node(), dx);
    });
}

Tensor maxpool2d(const Tensor& x, int64_t kernel, int64_t stride) {
    if (stride == 0) stride = kernel;
    if (x.rank() != 4) throw ShapeError("maxpool2d expects 4-d input, got " + shape_to_string(x.shape()));
    if (kernel < 1 || stride < 1) throw DomainError("maxpool2d kernel and stride must be >= 1");
    const int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < kernel || w < kernel) {
        throw ShapeError("maxpool2d window larger than input " + shape_to_string(x.shape()));
    }
    const int64_t oh = (h - kernel) / stride + 1;
    const int64_t ow = (w - kernel) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(batch * c * oh * ow));
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const double* xv = x.data().data();
    std::size_t oi = 0;
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const double* plane = xv + (b * c + ch) * h * w;
            for (int64_t r = 0; r < oh; ++r) {
                for (int64_t s = 0; s < ow; ++s, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t best_idx = 0;
                    for (int64_t i = 0; i < kernel; ++i) {
                        for (int64_t j = 0; j < kernel; ++j) {
                            const int64_t idx = (r * stride + i) * w + (s * stride + j);
                            if (plane[idx] > best) {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oi] = best;
                    (*argmax)[oi] = (b * c + ch) * h * w + best_idx;
                }
            }
        }
    }
    return Tensor::make({batch, c, oh, ow}, std::move(out), {x},
                        [x, argmax](detail::TensorNode& self) {
                            if (!x.requires_grad()) return;
                            x.node()->ensure_grad();
                            double* dx = x.node()->grad.data();
                            for (std::size_t i = 0; i < argmax->size(); ++i) {
                                dx[(*argmax)[i]] += self.grad[i];
                            }
                        });
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& running_mean, std::vector<double>& running_var,
                   BatchNormMode mode, double eps, double momentum) {
    if (x.rank() != 4) throw ShapeError("batchnorm2d expects 4-d input, got " + shape_to_string(x.shape()));
    const int64_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c ||
        static_cast<int64_t>(running_mean.size()) != c ||
        static_cast<int64_t>(running_var.size()) != c) {
        throw ShapeError("batchnorm2d parameter size mismatch for input " +
                         shape_to_string(x.shape()));
    }
    const int64_t n = batch * plane;
    const double* xv = x.data().data();

    auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c), 0.0);
    auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c), 0.0);
    const bool use_batch_stats = mode != BatchNormMode::Eval;
    if (use_batch_stats) {
        for (int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int64_t b = 0; b < batch; ++b) {
                const double* p = xv + (b * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) s += p[i];
            }
            const double mu = s / static_cast<double>(n);
            double var = 0.0;
            for (int64_t b = 0; b < batch; ++b) {
                const double* p = xv + (b * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const double d = p[i] - mu;
                    var += d * d;
                }
            }
            var /= static_cast<double>(n);
            (*mean)[ch] = mu;
            (*inv)[ch] = 1.0 / std::sqrt(var + eps);
            if (mode == BatchNormMode::Train) {
                const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1) : var;
                running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu;
                running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
            }
        }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            (*mean)[ch] = running_mean[ch];
            (*inv)[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
        }
    }

    std::vector<double> out(x.data().size());
    const double* gv = gamma.data().data();
    const double* bv = beta.data().data();
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const double* p = xv + (b * c + ch) * plane;
            double* q = out.data() + (b * c + ch) * plane;
            const double mu = (*mean)[ch], iv = (*inv)[ch];
            for (int64_t i = 0; i < plane; ++i) q[i] = gv[ch] * (p[i] - mu) * iv + bv[ch];
        }
    }

    return Tensor::make(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, mean, inv, use_batch_stats, batch, c, plane](detail::TensorNode& self) {
            const int64_t n = batch * plane;
            const double* xv = x.data().data();
            const double* dy = self.grad.data();
            const double* gv = gamma.data().data();
            std::vector<double> dgamma(static_cast<std::size_t>(c), 0.0);
            std::vector<double> dbeta(static_cast<std::size_t>(c), 0.0);
            std::vector<double> sum_dy(static_cast<std::size_t>(c), 0.0);
            std::vector<double> sum_dy_xhat(static_cast<std::size_t>(c), 0.0);
            for (int64_t b = 0; b < batch; ++b) {
                for (int64_t ch = 0; ch < c; ++ch) {
                    const double* p = xv + (b * c + ch) * plane;
                    const double* g = dy + (b * c + ch) * plane;
                    const double mu = (*mean)[ch], iv = (*inv)[ch];
                    double sd = 0.0, sx = 0.0;
                    for (int64_t i = 0; i < plane; ++i) {
                        sd += g[i];
                        sx += g[i] * (p[i] - mu) * iv;
                    }
                    sum_dy[ch] += sd;
                    sum_dy_xhat[ch] += sx;
                }
            }
            for (int64_t ch = 0; ch < c; ++ch) {
                dgamma[ch] = sum_dy_xhat[ch];
                dbeta[ch] = sum_dy[ch];
            }
            if (x.requires_grad()) {
                x.node()->ensure_grad();
                double* dx = x.node()->grad.data();
                for (int64_t b = 0; b < batch; ++b) {
                    for (int64_t ch = 0; ch < c; ++ch) {
                        const double* p = xv + (b * c + ch) * plane;
                        const double* g = dy + (b * c + ch) * plane;
                        double* d = dx + (b * c + ch) * plane;
                        const double mu = (*mean)[ch], iv = (*inv)[ch];
                        if (use_batch_stats) {
                            const double k = gv[ch] * iv / static_cast<double>(n);
                            for (int64_t i = 0; i < plane; ++i) {
                                const double xhat = (p[i] - mu) * iv;
                                d[i] += k * (static_cast<double>(n) * g[i] - sum_dy[ch] -
                                             xhat * sum_dy_xhat[ch]);
                            }
                        } else {
                            const double k = gv[ch] * iv;
                            for (int64_t i = 0; i < plane; ++i) d[i] += k * g[i];
                        }
                    }
                }
            }
            if (gamma.requires_grad()) accumulate(gamma.node(), dgamma);
            if (beta.requires_grad()) accumulate(beta.node(), dbeta);
        });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
    if (logits.rank() != 2) {
        throw ShapeError("softmax_cross_entropy expects [batch, classes] logits, got " +
                         shape_to_string(logits.shape()));
    }
    const int64_t batch = logits.dim(0), classes = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != batch) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
    }
    auto probs = std::make_shared<std::vector<double>>(logits.data().size());
    const double* lv = logits.data().data();
    double loss = 0.0;
    for (int64_t b = 0; b < batch; ++b) {
        const int64_t y = labels[b];
        if (y < 0 || y >= classes) {
            throw IndexError("label " + std::to_string(y) + " out of range for " +
                             std::to_string(classes) + " classes");
        }
        const double* row = lv + b * classes;
        double m = row[0];
        for (int64_t cIdx = 1; cIdx < classes; ++cIdx) m = std::max(m, row[cIdx]);
        double z = 0.0;
        for (int64_t cIdx = 0; cIdx < classes; ++cIdx) z += std::exp(row[cIdx] - m);
        double* prow = probs->data() + b * classes;
        for (int64_t cIdx = 0; cIdx < classes; ++cIdx) prow[cIdx] = std::exp(row[cIdx] - m) / z;
        loss += -std::log(std::max(prow[y], 1e-12));
    }
    loss /= static_cast<double>(batch);
    auto labels_copy = std::make_shared<std::vector<int64_t>>(labels);
    return Tensor::make({}, {loss}, {logits},
                        [logits, probs, labels_copy, batch, classes](detail::TensorNode& self) {
                            if (!logits.requires_grad()) return;
                            const double go = self.grad[0] / static_cast<double>(batch);
                            std::vector<double> dl(logits.data().size());
                            for (int64_t b = 0; b < batch; ++b) {
                                const double* prow = probs->data() + b * classes;
                                double* drow = dl.data() + b * classes;
                                const int64_t y = (*labels_copy)[b];
                                for (int64_t cIdx = 0; cIdx < classes; ++cIdx) {
                                    drow[cIdx] = go * (prow[cIdx] - (cIdx == y ? 1.0 : 0.0));
                                }
                            }
                            accumulate(logits.node(), dl);
                        });
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor::make(a.shape(), std::move(out), {a, b}, [a, b](detail::TensorNode& self) {
        if (a.requires_grad()) accumulate(a.node(), self.grad);
        if (b.requires_grad()) accumulate(b.node(), self.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor::make(a.shape(), std::move(out), {a, b}, [a, b](detail::TensorNode& self) {
        if (a.requires_grad()) accumulate(a.node(), self.grad);
        if (b.requires_grad()) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
            accumulate(b.node(), g);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor::make(a.shape(), std::move(out), {a, b}, [a, b](detail::TensorNode& self) {
        if (a.requires_grad()) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * b.data()[i];
            accumulate(a.node(), g);
        }
        if (b.requires_grad()) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * a.data()[i];
            accumulate(b.node(), g);
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return Tensor::make(a.shape(), std::move(out), {a}, [a, c](detail::TensorNode& self) {
        if (!a.requires_grad()) return;
        std::vector<double> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * c;
        accumulate(a.node(), g);
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    return Tensor::make(a.shape(), std::move(out), {a}, [a](detail::TensorNode& self) {
        if (a.requires_grad()) accumulate(a.node(), self.grad);
    });
}

Tensor reduce_sum(const Tensor& a) {
    double s = 0.0;
    for (const double v : a.data()) s += v;
    return Tensor::make({}, {s}, {a}, [a](detail::TensorNode& self) {
        if (!a.requires_grad()) return;
        std::vector<double> g(a.data().size(), self.grad[0]);
        accumulate(a.node(), g);
    });
}

Tensor sqrt(const Tensor& a) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a.data()[i] < 0.0) {
            throw DomainError("sqrt of negative value " + std::to_string(a.data()[i]));
        }
        out[i] = std::sqrt(a.data()[i]);
    }
    return Tensor::make(a.shape(), std::move(out), {a}, [a](detail::TensorNode& self) {
        if (!a.requires_grad()) return;
        std::vector<double> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            // subgradient 0 at the origin
            g[i] = self.data[i] > 0.0 ? self.grad[i] * 0.5 / self.data[i] : 0.0;
        }
        accumulate(a.node(), g);
    });
}

Tensor pow(const Tensor& a, double exponent) {
    const bool integral = exponent == std::floor(exponent);
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!integral && a.data()[i] < 0.0) {
            throw DomainError("pow with fractional exponent of negative value " +
                              std::to_string(a.data()[i]));
        }
        out[i] = std::pow(a.data()[i], exponent);
    }
    return Tensor::make(a.shape(), std::move(out), {a}, [a, exponent](detail::TensorNode& self) {
        if (!a.requires_grad()) return;
        std::vector<double> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = a.data()[i];
            if (x == 0.0 && exponent < 1.0) {
                g[i] = 0.0; // subgradient at the boundary
            } else {
                g[i] = self.grad[i] * exponent * std::pow(x, exponent - 1.0);
            }
        }
        accumulate(a.node(), g);
    });
}

Tensor log(const Tensor& a) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a.data()[i] <= 0.0) {
            throw DomainError("log of non-positive value " + std::to_string(a.data()[i]));
        }
        out[i] = std::log(a.data()[i]);
    }
    return Tensor::make(a.shape(), std::move(out), {a}, [a](detail::TensorNode& self) {
        if (!a.requires_grad()) return;
        std::vector<double> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] / a.data()[i];
        accumulate(a.node(), g);
    });
}

Tensor softmax_rows(const Tensor& m) {
    if (m.rank() != 2) {
        throw ShapeError("softmax_rows expects a matrix, got " + shape_to_string(m.shape()));
    }
    const int64_t rows = m.dim(0), cols = m.dim(1);
    std::vector<double> out(m.data().size());
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = m.data().data() + r * cols;
        double* dst = out.data() + r * cols;
        double mx = src[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, src[j]);
        double z = 0.0;
        for (int64_t j = 0; j < cols; ++j) z += std::exp(src[j] - mx);
        for (int64_t j = 0; j < cols; ++j) dst[j] = std::exp(src[j] - mx) / z;
    }
    return Tensor::make(m.shape(), std::move(out), {m}, [m, rows, cols](detail::TensorNode& self) {
        if (!m.requires_grad()) return;
        std::vector<double> g(self.grad.size());
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * cols;
            const double* dy = self.grad.data() + r * cols;
            double dot = 0.0;
            for (int64_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
            double* dst = g.data() + r * cols;
            for (int64_t j = 0; j < cols; ++j) dst[j] = y[j] * (dy[j] - dot);
        }
        accumulate(m.node(), g);
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape from " + shape_to_string(a.shape()) + " to " +
                         shape_to_string(shape) + " changes element count");
    }
    return Tensor::make(std::move(shape), a.data(), {a}, [a](detail::TensorNode& self) {
        if (a.requires_grad()) accumulate(a.node(), self.grad);
    });
}

Tensor flatten(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("flatten expects at least rank 1");
    const int64_t batch = a.dim(0);
    return reshape(a, {batch, a.numel() / batch});
}

} // namespace dsp
