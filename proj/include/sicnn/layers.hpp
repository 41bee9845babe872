#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "sicnn/conv_kernels.hpp"
#include "sicnn/scale_transform.hpp"
#include "sicnn/tensor.hpp"

namespace sicnn {

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvParams {
    Tensor weights;  // out_maps x in_maps x k x k
    Tensor bias;     // out_maps
    int stride = 1;

    ConvParams(int out_maps, int in_maps, int k, int stride_ = 1)
        : weights({out_maps, in_maps, k, k}), bias({out_maps}), stride(stride_) {}

    int out_maps() const { return weights.dim(0); }
    int in_maps() const { return weights.dim(1); }
    int kernel() const { return weights.dim(2); }
};

inline void validate_conv_params(const ConvParams& p) {
    if (p.weights.ndim() != 4 || p.weights.dim(2) != p.weights.dim(3)) {
        throw std::invalid_argument("conv: weights must be out x in x k x k with square kernel");
    }
    if (p.bias.ndim() != 1 || p.bias.dim(0) != p.weights.dim(0)) {
        throw std::invalid_argument("conv: bias length must equal out_maps");
    }
    if (p.stride < 1) throw std::invalid_argument("conv: stride must be positive");
}

struct ConvCache {
    Tensor input;
};

struct ConvGrads {
    Tensor dx;
    Tensor dweights;
    Tensor dbias;
};

/// Valid cross-correlation with shared bias per output map.
inline Tensor conv_forward(const Tensor& x, const ConvParams& p, ConvCache* cache = nullptr) {
    validate_conv_params(p);
    if (x.ndim() != 4) throw std::invalid_argument("conv_forward: input must be NCHW");
    if (x.dim(1) != p.in_maps()) {
        throw std::invalid_argument("conv_forward: input channels " + std::to_string(x.dim(1)) +
                                    " != kernel in_maps " + std::to_string(p.in_maps()));
    }
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int k = p.kernel(), m = p.out_maps();
    const int out_h = conv_out_extent(h, k, p.stride);
    const int out_w = conv_out_extent(w, k, p.stride);
    const std::int64_t patch = static_cast<std::int64_t>(out_h) * out_w;
    const int ckk = c * k * k;

    Tensor out({n, m, out_h, out_w});
    std::vector<double> col(static_cast<std::size_t>(ckk) * patch);
    for (int img = 0; img < n; ++img) {
        const double* src = x.data() + static_cast<std::int64_t>(img) * c * h * w;
        double* dst = out.data() + static_cast<std::int64_t>(img) * m * patch;
        im2col(src, c, h, w, k, p.stride, col.data());
        gemm_forward(p.weights.data(), col.data(), dst, m, ckk, patch);
        for (int map = 0; map < m; ++map) {
            const double b = p.bias.data()[map];
            double* row = dst + static_cast<std::int64_t>(map) * patch;
            for (std::int64_t i = 0; i < patch; ++i) row[i] += b;
        }
    }
    if (cache) cache->input = x;
    return out;
}

inline ConvGrads conv_backward(const Tensor& g, const ConvCache& cache, const ConvParams& p) {
    validate_conv_params(p);
    const Tensor& x = cache.input;
    if (x.size() == 0) throw std::invalid_argument("conv_backward: cache missing input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int k = p.kernel(), m = p.out_maps();
    const int out_h = conv_out_extent(h, k, p.stride);
    const int out_w = conv_out_extent(w, k, p.stride);
    if (g.ndim() != 4 || g.dim(0) != n || g.dim(1) != m || g.dim(2) != out_h ||
        g.dim(3) != out_w) {
        throw std::invalid_argument("conv_backward: error shape " + shape_to_string(g.shape()) +
                                    " does not match forward output");
    }
    const std::int64_t patch = static_cast<std::int64_t>(out_h) * out_w;
    const int ckk = c * k * k;

    ConvGrads grads{Tensor(x.shape()), Tensor(p.weights.shape()), Tensor(p.bias.shape())};
    std::vector<double> col(static_cast<std::size_t>(ckk) * patch);
    std::vector<double> colgrad(static_cast<std::size_t>(ckk) * patch);
    for (int img = 0; img < n; ++img) {
        const double* gsrc = g.data() + static_cast<std::int64_t>(img) * m * patch;
        const double* xsrc = x.data() + static_cast<std::int64_t>(img) * c * h * w;
        im2col(xsrc, c, h, w, k, p.stride, col.data());
        gemm_weight_grad(gsrc, col.data(), grads.dweights.data(), m, ckk, patch);
        gemm_input_grad(p.weights.data(), gsrc, colgrad.data(), m, ckk, patch);
        col2im(colgrad.data(), c, h, w, k, p.stride,
               grads.dx.data() + static_cast<std::int64_t>(img) * c * h * w);
        for (int map = 0; map < m; ++map) {
            const double* row = gsrc + static_cast<std::int64_t>(map) * patch;
            double acc = 0.0;
            for (std::int64_t i = 0; i < patch; ++i) acc += row[i];
            grads.dbias.data()[map] += acc;
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Scale-invariant convolution
// ---------------------------------------------------------------------------

struct SIConvConfig {
    std::vector<double> scales;  // ascending, exactly one entry equals 1.0
    ConvParams conv;

    SIConvConfig(std::vector<double> scales_, ConvParams conv_)
        : scales(std::move(scales_)), conv(std::move(conv_)) {}
};

inline void validate_siconv_config(const SIConvConfig& cfg) {
    validate_conv_params(cfg.conv);
    if (cfg.scales.empty()) throw std::invalid_argument("siconv: scale list empty");
    int ones = 0;
    for (std::size_t i = 0; i < cfg.scales.size(); ++i) {
        if (!(cfg.scales[i] > 0)) throw std::invalid_argument("siconv: scales must be positive");
        if (i > 0 && cfg.scales[i] <= cfg.scales[i - 1]) {
            throw std::invalid_argument("siconv: scales must be strictly ascending");
        }
        if (cfg.scales[i] == 1.0) ++ones;
    }
    if (ones != 1) throw std::invalid_argument("siconv: exactly one scale must equal 1.0");
}

/// Per-scale plumbing saved by the forward pass. `scaled_inputs` keeps each
/// branch's resampled input (needed for shared-weight gradients); the index
/// tensor records which scale won each output position.
struct SIConvCache {
    Tensor input;
    std::vector<Tensor> scaled_inputs;
    IndexTensor scale_argmax;
    struct Branch {
        double scale = 1.0;
        std::shared_ptr<const ScaleOperator> fwd;  // null for the identity branch
        std::shared_ptr<const ScaleOperator> inv;
        AlignmentSpec align;
    };
    std::vector<Branch> branches;
};

/// Pyramid forward pass: resample the input to every scale, convolve with the
/// shared kernel (bias added inside each branch), map each response back to
/// the canonical grid with the branch's inverse operator, crop/pad to the
/// unscaled branch's output size, then take the per-position max over scales.
inline Tensor siconv_forward(const Tensor& x, const SIConvConfig& cfg, OperatorCache& ops,
                             SIConvCache* cache = nullptr) {
    validate_siconv_config(cfg);
    if (x.ndim() != 4) throw std::invalid_argument("siconv_forward: input must be NCHW");
    const int h = x.dim(2), w = x.dim(3);
    const int k = cfg.conv.kernel();
    for (double s : cfg.scales) {
        if (scaled_extent(s, h) < k || scaled_extent(s, w) < k) {
            throw std::invalid_argument("siconv_forward: scale " + std::to_string(s) +
                                        " shrinks input below the kernel size");
        }
    }
    const int canon_h = conv_out_extent(h, k, cfg.conv.stride);
    const int canon_w = conv_out_extent(w, k, cfg.conv.stride);

    std::vector<Tensor> responses;
    responses.reserve(cfg.scales.size());
    if (cache) {
        cache->input = x;
        cache->scaled_inputs.clear();
        cache->branches.clear();
    }
    for (double s : cfg.scales) {
        SIConvCache::Branch br;
        br.scale = s;
        Tensor aligned({1});
        if (s == 1.0) {
            br.align = make_alignment({canon_h, canon_w}, {canon_h, canon_w});
            aligned = conv_forward(x, cfg.conv);
            if (cache) cache->scaled_inputs.push_back(x);
        } else {
            br.fwd = ops.get(s, {h, w});
            Tensor xi = apply(*br.fwd, x);
            Tensor zi = conv_forward(xi, cfg.conv);
            br.inv = ops.get(1.0 / s, {zi.dim(2), zi.dim(3)});
            Tensor zt = apply(*br.inv, zi);
            br.align = make_alignment({br.inv->out_h, br.inv->out_w}, {canon_h, canon_w});
            aligned = align(zt, br.align);
            if (cache) cache->scaled_inputs.push_back(std::move(xi));
        }
        responses.push_back(std::move(aligned));
        if (cache) cache->branches.push_back(std::move(br));
    }
    auto pooled = argmax_stack(responses);
    if (cache) cache->scale_argmax = std::move(pooled.indices);
    return pooled.values;
}

inline ConvGrads siconv_backward(const Tensor& g, const SIConvCache& cache,
                                 const SIConvConfig& cfg) {
    validate_siconv_config(cfg);
    if (cache.branches.size() != cfg.scales.size() ||
        cache.scaled_inputs.size() != cfg.scales.size()) {
        throw std::invalid_argument("siconv_backward: cache missing or from another config");
    }
    if (g.shape() != cache.scale_argmax.shape) {
        throw std::invalid_argument("siconv_backward: error shape " +
                                    shape_to_string(g.shape()) + " does not match forward");
    }
    ConvGrads grads{Tensor(cache.input.shape()), Tensor(cfg.conv.weights.shape()),
                    Tensor(cfg.conv.bias.shape())};
    for (std::size_t i = 0; i < cfg.scales.size(); ++i) {
        // Un-pool: this branch receives error only where it won the max.
        Tensor gi(g.shape());
        bool any = false;
        for (std::int64_t p = 0; p < g.size(); ++p) {
            if (cache.scale_argmax.idx[p] == static_cast<std::int32_t>(i)) {
                gi.data()[p] = g.data()[p];
                any = any || g.data()[p] != 0.0;
            }
        }
        if (!any) continue;
        const auto& br = cache.branches[i];
        ConvCache cc{cache.scaled_inputs[i]};
        if (br.scale == 1.0) {
            ConvGrads cg = conv_backward(gi, cc, cfg.conv);
            grads.dx = elementwise(grads.dx, cg.dx, EwOp::Add);
            grads.dweights = elementwise(grads.dweights, cg.dweights, EwOp::Add);
            grads.dbias = elementwise(grads.dbias, cg.dbias, EwOp::Add);
        } else {
            Tensor gt = align_backward(gi, br.align);
            Tensor gz = apply_adjoint(*br.inv, gt);
            ConvGrads cg = conv_backward(gz, cc, cfg.conv);
            grads.dweights = elementwise(grads.dweights, cg.dweights, EwOp::Add);
            grads.dbias = elementwise(grads.dbias, cg.dbias, EwOp::Add);
            Tensor dxi = apply_adjoint(*br.fwd, cg.dx);
            grads.dx = elementwise(grads.dx, dxi, EwOp::Add);
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

struct ReluCache {
    std::vector<std::uint8_t> mask;
};

inline Tensor relu_forward(const Tensor& x, ReluCache* cache = nullptr) {
    Tensor out(x.shape());
    if (cache) cache->mask.assign(static_cast<std::size_t>(x.size()), 0);
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const bool on = x.data()[i] > 0.0;
        out.data()[i] = on ? x.data()[i] : 0.0;
        if (cache && on) cache->mask[static_cast<std::size_t>(i)] = 1;
    }
    return out;
}

inline Tensor relu_backward(const Tensor& g, const ReluCache& cache) {
    if (static_cast<std::int64_t>(cache.mask.size()) != g.size()) {
        throw std::invalid_argument("relu_backward: cache/error size mismatch");
    }
    Tensor dx(g.shape());
    for (std::int64_t i = 0; i < g.size(); ++i) {
        dx.data()[i] = cache.mask[static_cast<std::size_t>(i)] ? g.data()[i] : 0.0;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Spatial max-pooling
// ---------------------------------------------------------------------------

struct PoolCache {
    Shape in_shape;
    IndexTensor argmax;  // flat spatial index into the input plane, per output
};

inline Tensor maxpool_forward(const Tensor& x, int window, int stride,
                              PoolCache* cache = nullptr) {
    if (x.ndim() != 4) throw std::invalid_argument("maxpool_forward: input must be NCHW");
    if (window < 1 || stride < 1) {
        throw std::invalid_argument("maxpool_forward: window and stride must be positive");
    }
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (window > h || window > w) {
        throw std::invalid_argument("maxpool_forward: window exceeds input");
    }
    const int out_h = (h - window) / stride + 1;
    const int out_w = (w - window) / stride + 1;
    Tensor out({n, c, out_h, out_w});
    if (cache) {
        cache->in_shape = x.shape();
        cache->argmax.shape = out.shape();
        cache->argmax.idx.assign(static_cast<std::size_t>(out.size()), 0);
    }
    std::int64_t o = 0;
    for (int img = 0; img < n; ++img) {
        for (int ch = 0; ch < c; ++ch) {
            const double* plane =
                x.data() + (static_cast<std::int64_t>(img) * c + ch) * h * w;
            for (int oy = 0; oy < out_h; ++oy) {
                for (int ox = 0; ox < out_w; ++ox, ++o) {
                    double best = plane[(oy * stride) * w + ox * stride];
                    int best_at = (oy * stride) * w + ox * stride;
                    for (int ky = 0; ky < window; ++ky) {
                        const int y = oy * stride + ky;
                        for (int kx = 0; kx < window; ++kx) {
                            const int at = y * w + ox * stride + kx;
                            if (plane[at] > best) {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    out.data()[o] = best;
                    if (cache) cache->argmax.idx[static_cast<std::size_t>(o)] = best_at;
                }
            }
        }
    }
    return out;
}

inline Tensor maxpool_backward(const Tensor& g, const PoolCache& cache) {
    if (g.shape() != cache.argmax.shape) {
        throw std::invalid_argument("maxpool_backward: error shape does not match forward");
    }
    Tensor dx(cache.in_shape);
    const int c = cache.in_shape[1], h = cache.in_shape[2], w = cache.in_shape[3];
    const std::int64_t out_plane =
        static_cast<std::int64_t>(g.dim(2)) * g.dim(3);
    std::int64_t o = 0;
    for (int img = 0; img < g.dim(0); ++img) {
        for (int ch = 0; ch < c; ++ch) {
            double* plane = dx.data() + (static_cast<std::int64_t>(img) * c + ch) * h * w;
            for (std::int64_t i = 0; i < out_plane; ++i, ++o) {
                plane[cache.argmax.idx[static_cast<std::size_t>(o)]] += g.data()[o];
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

struct FcParams {
    Tensor weights;  // out x in
    Tensor bias;     // out

    FcParams(int out, int in) : weights({out, in}), bias({out}) {}
    int out_features() const { return weights.dim(0); }
    int in_features() const { return weights.dim(1); }
};

struct FcCache {
    Tensor input;  // flattened N x in
};

struct FcGrads {
    Tensor dx;  // N x in
    Tensor dweights;
    Tensor dbias;
};

/// Accepts NCHW or N x in; flattens everything after the batch axis.
inline Tensor fc_forward(const Tensor& x, const FcParams& p, FcCache* cache = nullptr) {
    if (x.ndim() < 2) throw std::invalid_argument("fc_forward: input must have a batch axis");
    const int n = x.dim(0);
    const std::int64_t in = x.size() / n;
    if (in != p.in_features()) {
        throw std::invalid_argument("fc_forward: flattened input size " + std::to_string(in) +
                                    " != weight in_features " +
                                    std::to_string(p.in_features()));
    }
    const int out = p.out_features();
    Tensor y({n, out});
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, n, out, static_cast<int>(in), 1.0,
                x.data(), static_cast<int>(in), p.weights.data(), static_cast<int>(in), 0.0,
                y.data(), out);
    for (int img = 0; img < n; ++img) {
        for (int j = 0; j < out; ++j) y.at(img, j) += p.bias.data()[j];
    }
    if (cache) {
        Tensor flat({n, static_cast<int>(in)});
        std::copy(x.data(), x.data() + x.size(), flat.data());
        cache->input = std::move(flat);
    }
    return y;
}

inline FcGrads fc_backward(const Tensor& g, const FcCache& cache, const FcParams& p) {
    const Tensor& x = cache.input;
    if (x.size() == 0) throw std::invalid_argument("fc_backward: cache missing input");
    const int n = x.dim(0);
    const int in = x.dim(1);
    const int out = p.out_features();
    if (g.ndim() != 2 || g.dim(0) != n || g.dim(1) != out) {
        throw std::invalid_argument("fc_backward: error shape does not match forward");
    }
    FcGrads grads{Tensor({n, in}), Tensor(p.weights.shape()), Tensor(p.bias.shape())};
    // dW = g^T x, dx = g W
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, out, in, n, 1.0, g.data(), out,
                x.data(), in, 0.0, grads.dweights.data(), in);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, n, in, out, 1.0, g.data(), out,
                p.weights.data(), in, 0.0, grads.dx.data(), in);
    for (int img = 0; img < n; ++img) {
        for (int j = 0; j < out; ++j) grads.dbias.data()[j] += g.at(img, j);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy loss
// ---------------------------------------------------------------------------

struct SoftmaxResult {
    double loss = 0.0;   // mean negative log-likelihood over the batch
    Tensor dlogits;      // (softmax - onehot) / batch
};

inline SoftmaxResult softmax_loss(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw std::invalid_argument("softmax_loss: logits must be N x K");
    const int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) {
        throw std::invalid_argument("softmax_loss: label count does not match batch");
    }
    SoftmaxResult res;
    res.dlogits = Tensor({n, k});
    double total = 0.0;
    for (int img = 0; img < n; ++img) {
        const int y = labels[static_cast<std::size_t>(img)];
        if (y < 0 || y >= k) throw std::invalid_argument("softmax_loss: label out of range");
        const double* row = logits.data() + static_cast<std::int64_t>(img) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double logz = std::log(z) + mx;
        total += logz - row[y];
        double* drow = res.dlogits.data() + static_cast<std::int64_t>(img) * k;
        for (int j = 0; j < k; ++j) drow[j] = std::exp(row[j] - logz) / n;
        drow[y] -= 1.0 / n;
    }
    res.loss = total / n;
    return res;
}

}  // namespace sicnn
