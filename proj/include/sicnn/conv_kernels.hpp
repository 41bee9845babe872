#pragma once

#include <cblas.h>

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace sicnn {

/// Valid-convolution output extent for one axis.
inline int conv_out_extent(int n, int k, int stride) {
    if (k > n) throw std::invalid_argument("conv_out_extent: kernel larger than input");
    if (stride < 1) throw std::invalid_argument("conv_out_extent: stride must be positive");
    return (n - k) / stride + 1;
}

/// Unroll one (C,H,W) image into a (C*k*k) x P patch matrix, P = out_h*out_w.
/// Row r = (ch*k + ki)*k + kj holds the (ki,kj) kernel tap of channel ch for
/// every output position, so a convolution becomes one GEMM.
inline void im2col(const double* src, int channels, int h, int w, int k, int stride,
                   double* col) {
    const int out_h = conv_out_extent(h, k, stride);
    const int out_w = conv_out_extent(w, k, stride);
    const std::int64_t patch = static_cast<std::int64_t>(out_h) * out_w;
    std::int64_t row = 0;
    for (int ch = 0; ch < channels; ++ch) {
        const double* plane = src + static_cast<std::int64_t>(ch) * h * w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj, ++row) {
                double* dst = col + row * patch;
                for (int oy = 0; oy < out_h; ++oy) {
                    const double* line = plane + (oy * stride + ki) * w + kj;
                    if (stride == 1) {
                        for (int ox = 0; ox < out_w; ++ox) dst[ox] = line[ox];
                    } else {
                        for (int ox = 0; ox < out_w; ++ox) dst[ox] = line[ox * stride];
                    }
                    dst += out_w;
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add a patch matrix back onto the image grid.
inline void col2im(const double* col, int channels, int h, int w, int k, int stride,
                   double* dst) {
    const int out_h = conv_out_extent(h, k, stride);
    const int out_w = conv_out_extent(w, k, stride);
    const std::int64_t patch = static_cast<std::int64_t>(out_h) * out_w;
    std::int64_t row = 0;
    for (int ch = 0; ch < channels; ++ch) {
        double* plane = dst + static_cast<std::int64_t>(ch) * h * w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj, ++row) {
                const double* src = col + row * patch;
                for (int oy = 0; oy < out_h; ++oy) {
                    double* line = plane + (oy * stride + ki) * w + kj;
                    for (int ox = 0; ox < out_w; ++ox) line[ox * stride] += src[ox];
                    src += out_w;
                }
            }
        }
    }
}

/// out(m,P) = W(m,ckk) * col(ckk,P)
inline void gemm_forward(const double* w_mat, const double* col, double* out, int m,
                         int ckk, std::int64_t patch) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, static_cast<int>(patch), ckk,
                1.0, w_mat, ckk, col, static_cast<int>(patch), 0.0, out,
                static_cast<int>(patch));
}

/// dW(m,ckk) += g(m,P) * col(ckk,P)^T
inline void gemm_weight_grad(const double* g, const double* col, double* dw, int m, int ckk,
                             std::int64_t patch) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, ckk, static_cast<int>(patch),
                1.0, g, static_cast<int>(patch), col, static_cast<int>(patch), 1.0, dw, ckk);
}

/// colgrad(ckk,P) = W(m,ckk)^T * g(m,P)
inline void gemm_input_grad(const double* w_mat, const double* g, double* colgrad, int m,
                            int ckk, std::int64_t patch) {
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, ckk, static_cast<int>(patch), m,
                1.0, w_mat, ckk, g, static_cast<int>(patch), 0.0, colgrad,
                static_cast<int>(patch));
}

}  // namespace sicnn
