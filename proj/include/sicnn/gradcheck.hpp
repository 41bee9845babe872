#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "sicnn/layers.hpp"
#include "sicnn/rng.hpp"
#include "sicnn/tensor.hpp"

namespace sicnn {

struct GradCheckReport {
    std::string layer_name;
    std::string param_name;
    double max_relative_error = 0.0;
    std::int64_t worst_coordinate = -1;
    std::int64_t skipped_ties = 0;
    std::int64_t checked = 0;
    double tolerance = 0.0;
    bool pass = false;
};

/// One forward evaluation: the output tensor plus a hash of every discrete
/// decision taken (relu masks, pool argmax, scale argmax). Central differences
/// are only valid when both perturbed evaluations made identical decisions.
struct FdEval {
    Tensor out;
    std::uint64_t signature = 0;
};

inline std::uint64_t fnv1a_bytes(const void* data, std::size_t len,
                                 std::uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t signature_of(const IndexTensor& t, std::uint64_t h = 1469598103934665603ULL) {
    return fnv1a_bytes(t.idx.data(), t.idx.size() * sizeof(std::int32_t), h);
}

inline std::uint64_t signature_of(const std::vector<std::uint8_t>& mask,
                                  std::uint64_t h = 1469598103934665603ULL) {
    return fnv1a_bytes(mask.data(), mask.size(), h);
}

inline double projection(const Tensor& direction, const Tensor& out) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) acc += direction.data()[i] * out.data()[i];
    return acc;
}

/// Central-difference check of `analytic` (the gradient of <direction, fwd()>
/// with respect to `target`) against (f(x+eps) - f(x-eps)) / 2eps coordinate
/// by coordinate. Coordinates whose perturbed evaluations disagree on any
/// discrete decision are skipped and counted, not judged.
template <class Fwd>
GradCheckReport fd_check(const std::string& layer, const std::string& param, Fwd&& fwd,
                         const Tensor& direction, Tensor& target, const Tensor& analytic,
                         double tolerance, double eps = 1e-5) {
    GradCheckReport report;
    report.layer_name = layer;
    report.param_name = param;
    report.tolerance = tolerance;
    for (std::int64_t j = 0; j < target.size(); ++j) {
        const double saved = target.data()[j];
        target.data()[j] = saved + eps;
        FdEval plus = fwd();
        target.data()[j] = saved - eps;
        FdEval minus = fwd();
        target.data()[j] = saved;
        plus.out.require_finite("gradcheck forward (+eps)");
        minus.out.require_finite("gradcheck forward (-eps)");
        if (plus.signature != minus.signature) {
            ++report.skipped_ties;
            continue;
        }
        const double numeric =
            (projection(direction, plus.out) - projection(direction, minus.out)) / (2.0 * eps);
        const double a = analytic.data()[j];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        const double rel = std::abs(a - numeric) / denom;
        ++report.checked;
        if (rel > report.max_relative_error) {
            report.max_relative_error = rel;
            report.worst_coordinate = j;
        }
    }
    report.pass = report.max_relative_error <= tolerance;
    return report;
}

namespace detail {

inline Tensor random_like(const Shape& shape, Rng& rng, double scale = 1.0) {
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = scale * rng.gaussian();
    return t;
}

}  // namespace detail

/// Standard battery: every layer type at toy shapes, one report per
/// (layer, target tensor). Deterministic in (master_seed, seed index).
inline std::vector<GradCheckReport> run_layer_gradchecks(std::uint64_t master_seed, int seed_index,
                                                         double tolerance) {
    std::vector<GradCheckReport> reports;

    {  // plain convolution: dx, dW, db
        Rng rng(derive_seed(derive_seed(master_seed, "gradcheck/conv"),
                            static_cast<std::uint64_t>(seed_index)));
        Tensor x = detail::random_like({2, 2, 9, 9}, rng);
        ConvParams p(3, 2, 3);
        p.weights = detail::random_like(p.weights.shape(), rng, 0.5);
        p.bias = detail::random_like(p.bias.shape(), rng, 0.1);
        ConvCache cache;
        Tensor out = conv_forward(x, p, &cache);
        Tensor direction = detail::random_like(out.shape(), rng);
        ConvGrads grads = conv_backward(direction, cache, p);
        auto fwd = [&]() { return FdEval{conv_forward(x, p), 0}; };
        reports.push_back(fd_check("conv", "input", fwd, direction, x, grads.dx, tolerance));
        reports.push_back(
            fd_check("conv", "weights", fwd, direction, p.weights, grads.dweights, tolerance));
        reports.push_back(fd_check("conv", "bias", fwd, direction, p.bias, grads.dbias, tolerance));
    }

    for (int variant = 0; variant < 2; ++variant) {  // scale pyramids: 3 and 6 scales
        const std::string name = variant == 0 ? "siconv3" : "siconv6";
        Rng rng(derive_seed(derive_seed(master_seed, "gradcheck/" + name),
                            static_cast<std::uint64_t>(seed_index)));
        const std::vector<double> scales =
            variant == 0 ? std::vector<double>{0.79, 1.0, 1.26}
                         : std::vector<double>{0.62988, 0.79365, 1.0, 1.26, 1.5876, 2.000376};
        const Shape in_shape = variant == 0 ? Shape{1, 1, 9, 9} : Shape{1, 2, 12, 12};
        ConvParams conv(2, in_shape[1], 3);
        for (int attempt = 0;; ++attempt) {
            Tensor x = detail::random_like(in_shape, rng);
            conv.weights = detail::random_like(conv.weights.shape(), rng, 0.5);
            conv.bias = detail::random_like(conv.bias.shape(), rng, 0.1);
            SIConvConfig cfg(scales, conv);
            OperatorCache ops;
            SIConvCache cache;
            Tensor out = siconv_forward(x, cfg, ops, &cache);

            // Finite differences are meaningless near a max tie; if any output
            // position has its top two scale responses within 1e-6, redraw.
            double min_gap = 1e300;
            {
                std::vector<Tensor> branch;
                for (std::size_t i = 0; i < scales.size(); ++i) {
                    Tensor zi = conv_forward(cache.scaled_inputs[i], cfg.conv);
                    if (scales[i] == 1.0) {
                        branch.push_back(zi);
                    } else {
                        Tensor zt = apply(*cache.branches[i].inv, zi);
                        branch.push_back(align(zt, cache.branches[i].align));
                    }
                }
                for (std::int64_t pos = 0; pos < out.size(); ++pos) {
                    double best = -1e300, second = -1e300;
                    for (const auto& b : branch) {
                        const double v = b.data()[pos];
                        if (v > best) {
                            second = best;
                            best = v;
                        } else if (v > second) {
                            second = v;
                        }
                    }
                    if (branch.size() > 1) min_gap = std::min(min_gap, best - second);
                }
            }
            if (min_gap < 1e-6 && attempt < 50) continue;

            Tensor direction = detail::random_like(out.shape(), rng);
            ConvGrads grads = siconv_backward(direction, cache, cfg);
            auto fwd = [&]() {
                OperatorCache local_ops;
                SIConvCache local;
                Tensor o = siconv_forward(x, cfg, local_ops, &local);
                return FdEval{std::move(o), signature_of(local.scale_argmax)};
            };
            reports.push_back(
                fd_check(name, "input", fwd, direction, x, grads.dx, tolerance));
            reports.push_back(fd_check(name, "weights", fwd, direction, cfg.conv.weights,
                                       grads.dweights, tolerance));
            reports.push_back(
                fd_check(name, "bias", fwd, direction, cfg.conv.bias, grads.dbias, tolerance));
            break;
        }
    }

    {  // relu
        Rng rng(derive_seed(derive_seed(master_seed, "gradcheck/relu"),
                            static_cast<std::uint64_t>(seed_index)));
        Tensor x = detail::random_like({2, 3, 5, 5}, rng);
        ReluCache cache;
        Tensor out = relu_forward(x, &cache);
        Tensor direction = detail::random_like(out.shape(), rng);
        Tensor dx = relu_backward(direction, cache);
        auto fwd = [&]() {
            ReluCache local;
            Tensor o = relu_forward(x, &local);
            return FdEval{std::move(o), signature_of(local.mask)};
        };
        reports.push_back(fd_check("relu", "input", fwd, direction, x, dx, tolerance));
    }

    {  // max pooling, both window/stride combinations the nets use
        Rng rng(derive_seed(derive_seed(master_seed, "gradcheck/maxpool"),
                            static_cast<std::uint64_t>(seed_index)));
        for (int cfg_ix = 0; cfg_ix < 2; ++cfg_ix) {
            const int window = cfg_ix == 0 ? 2 : 3;
            const int stride = window;
            Tensor x = detail::random_like({2, 2, 9, 9}, rng);
            PoolCache cache;
            Tensor out = maxpool_forward(x, window, stride, &cache);
            Tensor direction = detail::random_like(out.shape(), rng);
            Tensor dx = maxpool_backward(direction, cache);
            auto fwd = [&]() {
                PoolCache local;
                Tensor o = maxpool_forward(x, window, stride, &local);
                return FdEval{std::move(o), signature_of(local.argmax)};
            };
            reports.push_back(fd_check(window == 2 ? "maxpool2" : "maxpool3", "input", fwd,
                                       direction, x, dx, tolerance));
        }
    }

    {  // fully connected: dx, dW, db
        Rng rng(derive_seed(derive_seed(master_seed, "gradcheck/fc"),
                            static_cast<std::uint64_t>(seed_index)));
        Tensor x = detail::random_like({2, 30}, rng);
        FcParams p(10, 30);
        p.weights = detail::random_like(p.weights.shape(), rng, 0.3);
        p.bias = detail::random_like(p.bias.shape(), rng, 0.1);
        FcCache cache;
        Tensor out = fc_forward(x, p, &cache);
        Tensor direction = detail::random_like(out.shape(), rng);
        FcGrads grads = fc_backward(direction, cache, p);
        auto fwd = [&]() { return FdEval{fc_forward(x, p), 0}; };
        reports.push_back(fd_check("fc", "input", fwd, direction, x, grads.dx, tolerance));
        reports.push_back(
            fd_check("fc", "weights", fwd, direction, p.weights, grads.dweights, tolerance));
        reports.push_back(fd_check("fc", "bias", fwd, direction, p.bias, grads.dbias, tolerance));
    }

    {  // softmax loss: gradient with respect to logits
        Rng rng(derive_seed(derive_seed(master_seed, "gradcheck/softmax"),
                            static_cast<std::uint64_t>(seed_index)));
        Tensor logits = detail::random_like({4, 10}, rng);
        std::vector<int> labels(4);
        for (auto& l : labels) l = static_cast<int>(rng.index(10));
        SoftmaxResult res = softmax_loss(logits, labels);
        Tensor direction({1});
        direction.data()[0] = 1.0;
        auto fwd = [&]() {
            Tensor loss({1});
            loss.data()[0] = softmax_loss(logits, labels).loss;
            return FdEval{std::move(loss), 0};
        };
        reports.push_back(
            fd_check("softmax", "logits", fwd, direction, logits, res.dlogits, tolerance));
    }

    return reports;
}

}  // namespace sicnn
