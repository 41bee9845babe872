#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include "sicnn/tensor.hpp"

namespace sicnn {

/// Scaled extent rule: round(s*n), half up. Deterministic so pyramid shapes
/// are reproducible.
inline int scaled_extent(double s, int n) {
    const int e = static_cast<int>(std::floor(s * n + 0.5));
    return e < 1 ? 1 : e;
}

/// Precomputed bilinear resampling operator for one (scale, in, out) triple.
///
/// Output pixel x samples the input at s^-1 x per axis, so s > 1 enlarges.
/// Each output pixel keeps at most 4 nonzero coefficients; source points
/// outside the input contribute zero (border weights stay unnormalized).
struct ScaleOperator {
    double scale = 1.0;
    int in_h = 0, in_w = 0;
    int out_h = 0, out_w = 0;
    // CSR over output pixels: row p covers coeffs [row_offset[p], row_offset[p+1]).
    std::vector<std::int32_t> row_offset;
    std::vector<std::int32_t> col_index;  // flat input index
    std::vector<double> weight;

    std::int64_t out_pixels() const { return static_cast<std::int64_t>(out_h) * out_w; }
    std::int64_t in_pixels() const { return static_cast<std::int64_t>(in_h) * in_w; }
};

inline ScaleOperator build_operator(double s, std::pair<int, int> in_shape,
                                    std::pair<int, int> out_shape) {
    if (!(s > 0.0)) throw std::invalid_argument("build_operator: scale must be positive");
    const auto [in_h, in_w] = in_shape;
    const auto [out_h, out_w] = out_shape;
    if (in_h < 1 || in_w < 1 || out_h < 1 || out_w < 1) {
        throw std::invalid_argument("build_operator: shapes must be at least 1x1");
    }

    ScaleOperator op;
    op.scale = s;
    op.in_h = in_h;
    op.in_w = in_w;
    op.out_h = out_h;
    op.out_w = out_w;
    op.row_offset.reserve(static_cast<std::size_t>(op.out_pixels()) + 1);
    op.row_offset.push_back(0);
    op.col_index.reserve(static_cast<std::size_t>(op.out_pixels()) * 4);
    op.weight.reserve(static_cast<std::size_t>(op.out_pixels()) * 4);

    const double inv_s = 1.0 / s;

    for (int r = 0; r < out_h; ++r) {
        const double y = r * inv_s;
        const int i0 = static_cast<int>(std::floor(y));
        const double dy = y - i0;
        for (int c = 0; c < out_w; ++c) {
            const double x = c * inv_s;
            const int j0 = static_cast<int>(std::floor(x));
            const double dx = x - j0;
            const int is[2] = {i0, i0 + 1};
            const int js[2] = {j0, j0 + 1};
            const double wy[2] = {1.0 - dy, dy};
            const double wx[2] = {1.0 - dx, dx};
            for (int a = 0; a < 2; ++a) {
                if (is[a] < 0 || is[a] >= in_h || wy[a] == 0.0) continue;
                for (int b = 0; b < 2; ++b) {
                    if (js[b] < 0 || js[b] >= in_w || wx[b] == 0.0) continue;
                    const double w = wy[a] * wx[b];
                    if (w == 0.0) continue;
                    op.col_index.push_back(static_cast<std::int32_t>(is[a]) * in_w + js[b]);
                    op.weight.push_back(w);
                }
            }
            op.row_offset.push_back(static_cast<std::int32_t>(op.weight.size()));
        }
    }
    return op;
}

/// Natural output shape: round(s * in) per axis.
inline ScaleOperator build_operator(double s, std::pair<int, int> in_shape) {
    return build_operator(
        s, in_shape, {scaled_extent(s, in_shape.first), scaled_extent(s, in_shape.second)});
}

namespace detail {

inline void check_spatial(const Tensor& x, int h, int w, const char* what) {
    const int nd = x.ndim();
    if (nd < 2 || x.dim(nd - 2) != h || x.dim(nd - 1) != w) {
        throw std::invalid_argument(std::string(what) + ": spatial dims of " +
                                    shape_to_string(x.shape()) + " do not match (" +
                                    std::to_string(h) + "," + std::to_string(w) + ")");
    }
}

inline Shape with_spatial(const Shape& in, int h, int w) {
    Shape out = in;
    out[out.size() - 2] = h;
    out[out.size() - 1] = w;
    return out;
}

}  // namespace detail

/// Apply T to every (batch, channel) plane of x. Linear in x.
inline Tensor apply(const ScaleOperator& op, const Tensor& x) {
    detail::check_spatial(x, op.in_h, op.in_w, "apply");
    Tensor out(detail::with_spatial(x.shape(), op.out_h, op.out_w));
    const std::int64_t planes = x.size() / op.in_pixels();
    const std::int64_t in_stride = op.in_pixels();
    const std::int64_t out_stride = op.out_pixels();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const double* src = x.data() + pl * in_stride;
        double* dst = out.data() + pl * out_stride;
        for (std::int64_t p = 0; p < out_stride; ++p) {
            double acc = 0.0;
            for (std::int32_t k = op.row_offset[p]; k < op.row_offset[p + 1]; ++k) {
                acc += op.weight[k] * src[op.col_index[k]];
            }
            dst[p] = acc;
        }
    }
    return out;
}

/// Apply the adjoint T^t: scatter each output-pixel error back through the
/// coefficients. Satisfies <g, T x> == <T^t g, x>.
inline Tensor apply_adjoint(const ScaleOperator& op, const Tensor& g) {
    detail::check_spatial(g, op.out_h, op.out_w, "apply_adjoint");
    Tensor out(detail::with_spatial(g.shape(), op.in_h, op.in_w));
    const std::int64_t planes = g.size() / op.out_pixels();
    const std::int64_t in_stride = op.in_pixels();
    const std::int64_t out_stride = op.out_pixels();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const double* src = g.data() + pl * out_stride;
        double* dst = out.data() + pl * in_stride;
        for (std::int64_t p = 0; p < out_stride; ++p) {
            const double gv = src[p];
            if (gv == 0.0) continue;
            for (std::int32_t k = op.row_offset[p]; k < op.row_offset[p + 1]; ++k) {
                dst[op.col_index[k]] += op.weight[k] * gv;
            }
        }
    }
    return out;
}

/// Alignment of a per-scale response back to the canonical grid: center crop
/// when larger, symmetric zero-pad when smaller. Off-by-one extras go to the
/// bottom/right.
struct AlignmentSpec {
    enum class Mode { Exact, Crop, ZeroPad };
    int raw_h = 0, raw_w = 0;
    int canon_h = 0, canon_w = 0;
    Mode mode = Mode::Exact;
};

inline AlignmentSpec make_alignment(std::pair<int, int> raw, std::pair<int, int> canonical) {
    AlignmentSpec spec;
    spec.raw_h = raw.first;
    spec.raw_w = raw.second;
    spec.canon_h = canonical.first;
    spec.canon_w = canonical.second;
    if (spec.raw_h == spec.canon_h && spec.raw_w == spec.canon_w) {
        spec.mode = AlignmentSpec::Mode::Exact;
    } else if (spec.raw_h >= spec.canon_h && spec.raw_w >= spec.canon_w) {
        spec.mode = AlignmentSpec::Mode::Crop;
    } else if (spec.raw_h <= spec.canon_h && spec.raw_w <= spec.canon_w) {
        spec.mode = AlignmentSpec::Mode::ZeroPad;
    } else {
        throw std::invalid_argument("make_alignment: mixed crop/pad alignment unsupported");
    }
    return spec;
}

inline Tensor align(const Tensor& x, const AlignmentSpec& spec) {
    detail::check_spatial(x, spec.raw_h, spec.raw_w, "align");
    if (spec.mode == AlignmentSpec::Mode::Exact) return x;
    Tensor out(detail::with_spatial(x.shape(), spec.canon_h, spec.canon_w));
    const std::int64_t planes =
        x.size() / (static_cast<std::int64_t>(spec.raw_h) * spec.raw_w);
    // Source offset when cropping, destination offset when padding.
    const int off_h = std::abs(spec.raw_h - spec.canon_h) / 2;
    const int off_w = std::abs(spec.raw_w - spec.canon_w) / 2;
    const bool crop = spec.mode == AlignmentSpec::Mode::Crop;
    const int copy_h = crop ? spec.canon_h : spec.raw_h;
    const int copy_w = crop ? spec.canon_w : spec.raw_w;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const double* src = x.data() + pl * spec.raw_h * spec.raw_w;
        double* dst = out.data() + pl * spec.canon_h * spec.canon_w;
        for (int r = 0; r < copy_h; ++r) {
            const double* s = crop ? src + (r + off_h) * spec.raw_w + off_w : src + r * spec.raw_w;
            double* d = crop ? dst + r * spec.canon_w : dst + (r + off_h) * spec.canon_w + off_w;
            for (int c = 0; c < copy_w; ++c) d[c] = s[c];
        }
    }
    return out;
}

/// Exact adjoint of align: a crop's adjoint zero-embeds, a pad's adjoint crops.
inline Tensor align_backward(const Tensor& g, const AlignmentSpec& spec) {
    detail::check_spatial(g, spec.canon_h, spec.canon_w, "align_backward");
    if (spec.mode == AlignmentSpec::Mode::Exact) return g;
    AlignmentSpec adj;
    adj.raw_h = spec.canon_h;
    adj.raw_w = spec.canon_w;
    adj.canon_h = spec.raw_h;
    adj.canon_w = spec.raw_w;
    adj.mode = spec.mode == AlignmentSpec::Mode::Crop ? AlignmentSpec::Mode::ZeroPad
                                                      : AlignmentSpec::Mode::Crop;
    return align(g, adj);
}

/// Operators are immutable once built; the cache synchronizes insertion so
/// prebuilt tables can be shared read-only across workers.
class OperatorCache {
public:
    std::shared_ptr<const ScaleOperator> get(double s, std::pair<int, int> in_shape,
                                             std::pair<int, int> out_shape) {
        const Key key{s, in_shape.first, in_shape.second, out_shape.first, out_shape.second};
        std::lock_guard<std::mutex> lock(mu_);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        auto op = std::make_shared<const ScaleOperator>(build_operator(s, in_shape, out_shape));
        cache_.emplace(key, op);
        return op;
    }

    std::shared_ptr<const ScaleOperator> get(double s, std::pair<int, int> in_shape) {
        return get(s, in_shape,
                   {scaled_extent(s, in_shape.first), scaled_extent(s, in_shape.second)});
    }

private:
    using Key = std::tuple<double, int, int, int, int>;
    std::map<Key, std::shared_ptr<const ScaleOperator>> cache_;
    std::mutex mu_;
};

}  // namespace sicnn
