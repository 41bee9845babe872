#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "sicnn/layers.hpp"
#include "sicnn/rng.hpp"

using namespace sicnn;

namespace {

// Quadruple-loop reference convolution, no GEMM, no patch matrices.
Tensor naive_conv(const Tensor& x, const ConvParams& p) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int m = p.out_maps(), k = p.kernel(), st = p.stride;
    const int out_h = (h - k) / st + 1, out_w = (w - k) / st + 1;
    Tensor out({n, m, out_h, out_w});
    for (int img = 0; img < n; ++img)
        for (int map = 0; map < m; ++map)
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox) {
                    double acc = p.bias.at(map);
                    for (int ch = 0; ch < c; ++ch)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx)
                                acc += p.weights.at(map, ch, ky, kx) *
                                       x.at(img, ch, oy * st + ky, ox * st + kx);
                    out.at(img, map, oy, ox) = acc;
                }
    return out;
}

Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = scale * rng.gaussian();
    return t;
}

ConvParams random_conv(int m, int c, int k, Rng& rng, int stride = 1) {
    ConvParams p(m, c, k, stride);
    p.weights = random_tensor(p.weights.shape(), rng, 0.5);
    p.bias = random_tensor(p.bias.shape(), rng, 0.1);
    return p;
}

const std::vector<double> kPaperScales = {0.62988, 0.79365, 1.0, 1.26, 1.5876, 2.000376};

}  // namespace

TEST(Conv, MatchesNaiveReference) {
    Rng rng(derive_seed(31, "convref"));
    struct Case {
        int n, c, h, w, m, k, stride;
    } cases[] = {{1, 1, 9, 9, 2, 3, 1}, {2, 3, 8, 8, 4, 3, 1}, {2, 2, 11, 11, 3, 5, 1},
                 {1, 2, 10, 10, 2, 3, 2}};
    for (const auto& cs : cases) {
        Tensor x = random_tensor({cs.n, cs.c, cs.h, cs.w}, rng);
        ConvParams p = random_conv(cs.m, cs.c, cs.k, rng, cs.stride);
        Tensor got = conv_forward(x, p);
        Tensor want = naive_conv(x, p);
        ASSERT_TRUE(got.same_shape(want));
        for (std::int64_t i = 0; i < got.size(); ++i)
            EXPECT_NEAR(got.data()[i], want.data()[i], 1e-11);
    }
}

TEST(Conv, OutputShape28To22) {
    Rng rng(derive_seed(31, "shape"));
    Tensor x = random_tensor({1, 1, 28, 28}, rng);
    ConvParams p = random_conv(36, 1, 7, rng);
    Tensor out = conv_forward(x, p);
    EXPECT_EQ(out.dim(2), 22);
    EXPECT_EQ(out.dim(3), 22);
    EXPECT_EQ(out.dim(1), 36);
}

TEST(Conv, ZeroWeightsGiveConstantBiasMaps) {
    Rng rng(derive_seed(31, "bias"));
    Tensor x = random_tensor({2, 1, 9, 9}, rng);
    ConvParams p(3, 1, 3);
    p.bias.at(0) = 0.5;
    p.bias.at(1) = -1.25;
    p.bias.at(2) = 0.0;
    Tensor out = conv_forward(x, p);
    for (int img = 0; img < 2; ++img)
        for (int map = 0; map < 3; ++map)
            for (int oy = 0; oy < out.dim(2); ++oy)
                for (int ox = 0; ox < out.dim(3); ++ox)
                    EXPECT_EQ(out.at(img, map, oy, ox), p.bias.at(map));
}

TEST(Conv, OneByOneUnitKernelIsIdentity) {
    Rng rng(derive_seed(31, "identity"));
    Tensor x = random_tensor({2, 1, 6, 6}, rng);
    ConvParams p(1, 1, 1);
    p.weights.at(0, 0, 0, 0) = 1.0;
    Tensor out = conv_forward(x, p);
    ASSERT_TRUE(out.same_shape(x));
    for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], x.data()[i]);
}

TEST(Conv, ChannelMismatchThrows) {
    Tensor x({1, 2, 9, 9});
    ConvParams p(2, 3, 3);
    EXPECT_THROW(conv_forward(x, p), std::invalid_argument);
}

TEST(Conv, KernelLargerThanInputThrows) {
    Tensor x({1, 1, 4, 4});
    Rng rng(derive_seed(31, "big"));
    ConvParams p = random_conv(1, 1, 5, rng);
    EXPECT_THROW(conv_forward(x, p), std::invalid_argument);
}

TEST(ConvBackward, ZeroErrorGivesZeroGrads) {
    Rng rng(derive_seed(37, "zero"));
    Tensor x = random_tensor({1, 1, 9, 9}, rng);
    ConvParams p = random_conv(2, 1, 3, rng);
    ConvCache cache;
    Tensor out = conv_forward(x, p, &cache);
    Tensor g(out.shape());
    ConvGrads grads = conv_backward(g, cache, p);
    EXPECT_EQ(grads.dx.sum(), 0.0);
    EXPECT_EQ(grads.dweights.sum(), 0.0);
    EXPECT_EQ(grads.dbias.sum(), 0.0);
}

TEST(ConvBackward, BiasGradIsSpatialSum) {
    Rng rng(derive_seed(37, "db"));
    Tensor x = random_tensor({1, 1, 28, 28}, rng);
    ConvParams p = random_conv(3, 1, 7, rng);
    ConvCache cache;
    Tensor out = conv_forward(x, p, &cache);
    Tensor g(out.shape());
    g.fill(1.0);
    ConvGrads grads = conv_backward(g, cache, p);
    for (int map = 0; map < 3; ++map) EXPECT_DOUBLE_EQ(grads.dbias.at(map), 484.0);
}

TEST(ConvBackward, MissingCacheThrows) {
    Rng rng(derive_seed(37, "nocache"));
    ConvParams p = random_conv(2, 1, 3, rng);
    ConvCache empty;
    Tensor g({1, 2, 7, 7});
    EXPECT_THROW(conv_backward(g, empty, p), std::invalid_argument);
}

TEST(SIConv, SingleUnitScaleMatchesConvBitwise) {
    Rng rng(derive_seed(41, "single"));
    OperatorCache ops;
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = random_tensor({2, 2, 9, 9}, rng);
        ConvParams p = random_conv(3, 2, 3, rng);
        SIConvConfig cfg({1.0}, p);
        SIConvCache si_cache;
        ConvCache c_cache;
        Tensor a = siconv_forward(x, cfg, ops, &si_cache);
        Tensor b = conv_forward(x, p, &c_cache);
        ASSERT_TRUE(a.same_shape(b));
        EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
        Tensor g = random_tensor(a.shape(), rng);
        ConvGrads ga = siconv_backward(g, si_cache, cfg);
        ConvGrads gb = conv_backward(g, c_cache, p);
        EXPECT_EQ(std::memcmp(ga.dx.data(), gb.dx.data(), sizeof(double) * ga.dx.size()), 0);
        EXPECT_EQ(std::memcmp(ga.dweights.data(), gb.dweights.data(),
                              sizeof(double) * ga.dweights.size()),
                  0);
        EXPECT_EQ(std::memcmp(ga.dbias.data(), gb.dbias.data(), sizeof(double) * ga.dbias.size()),
                  0);
    }
}

TEST(SIConv, CanonicalOutputShapeRegardlessOfScaleCount) {
    Rng rng(derive_seed(41, "canon"));
    OperatorCache ops;
    Tensor x = random_tensor({1, 1, 28, 28}, rng);
    for (int m : {1, 36}) {
        ConvParams p = random_conv(m, 1, 7, rng);
        SIConvConfig cfg(kPaperScales, p);
        Tensor out = siconv_forward(x, cfg, ops);
        EXPECT_EQ(out.dim(0), 1);
        EXPECT_EQ(out.dim(1), m);
        EXPECT_EQ(out.dim(2), 22);
        EXPECT_EQ(out.dim(3), 22);
    }
}

TEST(SIConv, BranchShapesFollowRoundingChain) {
    Rng rng(derive_seed(41, "chain"));
    OperatorCache ops;
    Tensor x = random_tensor({1, 1, 28, 28}, rng);
    ConvParams p = random_conv(2, 1, 7, rng);
    SIConvConfig cfg(kPaperScales, p);
    SIConvCache cache;
    siconv_forward(x, cfg, ops, &cache);
    // (scaled input, inverse-transformed) extents per scale for the 28/7 setup
    const int want_in[6] = {18, 22, 28, 35, 44, 56};
    const int want_raw[6] = {19, 20, 22, 23, 24, 25};
    for (int i = 0; i < 6; ++i) {
        EXPECT_EQ(cache.scaled_inputs[i].dim(2), want_in[i]) << "scale " << kPaperScales[i];
        EXPECT_EQ(cache.branches[i].align.raw_h, want_raw[i]) << "scale " << kPaperScales[i];
        EXPECT_EQ(cache.branches[i].align.canon_h, 22);
    }
    EXPECT_EQ(cache.branches[0].align.mode, AlignmentSpec::Mode::ZeroPad);
    EXPECT_EQ(cache.branches[1].align.mode, AlignmentSpec::Mode::ZeroPad);
    EXPECT_EQ(cache.branches[2].align.mode, AlignmentSpec::Mode::Exact);
    EXPECT_EQ(cache.branches[3].align.mode, AlignmentSpec::Mode::Crop);
    EXPECT_EQ(cache.branches[5].align.mode, AlignmentSpec::Mode::Crop);
}

TEST(SIConv, AddingScaleNeverDecreasesOutput) {
    Rng rng(derive_seed(41, "superset"));
    OperatorCache ops;
    Tensor x = random_tensor({1, 2, 12, 12}, rng);
    ConvParams p = random_conv(2, 2, 3, rng);
    SIConvConfig small({0.79365, 1.0, 1.26}, p);
    SIConvConfig big({0.5, 0.79365, 1.0, 1.26}, p);
    Tensor a = siconv_forward(x, small, ops);
    Tensor b = siconv_forward(x, big, ops);
    for (std::int64_t i = 0; i < a.size(); ++i) EXPECT_GE(b.data()[i], a.data()[i]);
}

TEST(SIConv, ArgmaxPartitionsOutputPositions) {
    Rng rng(derive_seed(41, "partition"));
    OperatorCache ops;
    Tensor x = random_tensor({2, 1, 12, 12}, rng);
    ConvParams p = random_conv(2, 1, 3, rng);
    SIConvConfig cfg({0.79365, 1.0, 1.26}, p);
    SIConvCache cache;
    Tensor out = siconv_forward(x, cfg, ops, &cache);
    ASSERT_EQ(static_cast<std::int64_t>(cache.scale_argmax.idx.size()), out.size());
    for (std::int64_t i = 0; i < out.size(); ++i) {
        const int idx = cache.scale_argmax.idx[i];
        ASSERT_GE(idx, 0);
        ASSERT_LT(idx, 3);
    }
}

TEST(SIConv, RoutedErrorReachesOnlyWinningBranch) {
    // With one scale forced to win everywhere, gradients must match a plain
    // conv pipeline on that branch and the other branches must contribute 0.
    Rng rng(derive_seed(41, "routing"));
    OperatorCache ops;
    Tensor x = random_tensor({1, 1, 12, 12}, rng);
    ConvParams p = random_conv(2, 1, 3, rng);
    SIConvConfig cfg({1.0, 2.0}, p);
    SIConvCache cache;
    Tensor out = siconv_forward(x, cfg, ops, &cache);
    Tensor g = random_tensor(out.shape(), rng);
    ConvGrads grads = siconv_backward(g, cache, cfg);
    // Rebuild the same routing by hand from the argmax and the two branches.
    Tensor g0(g.shape()), g1(g.shape());
    for (std::int64_t i = 0; i < g.size(); ++i) {
        (cache.scale_argmax.idx[i] == 0 ? g0 : g1).data()[i] = g.data()[i];
    }
    ConvCache cc0{cache.scaled_inputs[0]};
    conv_forward(cache.scaled_inputs[0], p, &cc0);
    ConvGrads b0 = conv_backward(g0, cc0, p);
    Tensor gt = align_backward(g1, cache.branches[1].align);
    Tensor gz = apply_adjoint(*cache.branches[1].inv, gt);
    ConvCache cc1{cache.scaled_inputs[1]};
    conv_forward(cache.scaled_inputs[1], p, &cc1);
    ConvGrads b1 = conv_backward(gz, cc1, p);
    Tensor dx_want =
        elementwise(b0.dx, apply_adjoint(*cache.branches[1].fwd, b1.dx), EwOp::Add);
    for (std::int64_t i = 0; i < dx_want.size(); ++i)
        EXPECT_NEAR(grads.dx.data()[i], dx_want.data()[i], 1e-12);
    Tensor dw_want = elementwise(b0.dweights, b1.dweights, EwOp::Add);
    for (std::int64_t i = 0; i < dw_want.size(); ++i)
        EXPECT_NEAR(grads.dweights.data()[i], dw_want.data()[i], 1e-12);
}

TEST(SIConv, MatchedFilterRespondsAlikeAtBothSizes) {
    // A pattern and its doubled version produce near-equal peak responses
    // when the scale set contains the relating factor.
    Tensor v({5, 5});
    const int on[][2] = {{0, 0}, {0, 4}, {1, 0}, {1, 4}, {2, 1}, {2, 3}, {3, 1}, {3, 3}, {4, 2}};
    for (const auto& rc : on) v.at(rc[0], rc[1]) = 1.0;
    Tensor big = apply(build_operator(2.0, {5, 5}), v);  // 10x10 enlargement

    auto embed = [](const Tensor& patch, int canvas) {
        Tensor x({1, 1, canvas, canvas});
        auto spec = make_alignment({patch.dim(0), patch.dim(1)}, {canvas, canvas});
        Tensor padded = align(patch, spec);
        std::copy(padded.data(), padded.data() + padded.size(), x.data());
        return x;
    };
    Tensor x_small = embed(v, 15);
    Tensor x_big = embed(big, 15);

    ConvParams p(1, 1, 5);
    std::copy(v.data(), v.data() + v.size(), p.weights.data());
    SIConvConfig cfg({0.5, 1.0, 2.0}, p);
    OperatorCache ops;
    auto peak = [](const Tensor& t) {
        double best = t.data()[0];
        for (std::int64_t i = 1; i < t.size(); ++i) best = std::max(best, t.data()[i]);
        return best;
    };
    const double r_small = peak(siconv_forward(x_small, cfg, ops));
    const double r_big = peak(siconv_forward(x_big, cfg, ops));
    const double rel = std::abs(r_small - r_big) / std::max(r_small, r_big);
    EXPECT_LE(rel, 0.15) << "small " << r_small << " big " << r_big;
    // The plain convolution separates the same pair far more.
    const double c_small = peak(conv_forward(x_small, p));
    const double c_big = peak(conv_forward(x_big, p));
    const double rel_conv = std::abs(c_small - c_big) / std::max(c_small, c_big);
    EXPECT_GT(rel_conv, rel) << "small " << c_small << " big " << c_big;
}

TEST(SIConv, TooSmallScaledInputThrows) {
    Tensor x({1, 1, 9, 9});
    ConvParams p(1, 1, 5);
    SIConvConfig cfg({0.3, 1.0}, p);  // round(0.3*9)=3 < 5
    OperatorCache ops;
    EXPECT_THROW(siconv_forward(x, cfg, ops), std::invalid_argument);
}

TEST(SIConv, ConfigValidation) {
    ConvParams p(1, 1, 3);
    OperatorCache ops;
    Tensor x({1, 1, 9, 9});
    EXPECT_THROW(siconv_forward(x, SIConvConfig({}, p), ops), std::invalid_argument);
    EXPECT_THROW(siconv_forward(x, SIConvConfig({0.5, 2.0}, p), ops), std::invalid_argument);
    EXPECT_THROW(siconv_forward(x, SIConvConfig({1.0, 0.5}, p), ops), std::invalid_argument);
    EXPECT_THROW(siconv_forward(x, SIConvConfig({0.5, 1.0, 1.0}, p), ops),
                 std::invalid_argument);
}

TEST(Relu, ForwardAndBackward) {
    Tensor x({1, 1, 1, 2});
    x.data()[0] = -1;
    x.data()[1] = 2;
    ReluCache cache;
    Tensor out = relu_forward(x, &cache);
    EXPECT_EQ(out.data()[0], 0);
    EXPECT_EQ(out.data()[1], 2);
    Tensor g({1, 1, 1, 2});
    g.data()[0] = 5;
    g.data()[1] = 7;
    Tensor dx = relu_backward(g, cache);
    EXPECT_EQ(dx.data()[0], 0);
    EXPECT_EQ(dx.data()[1], 7);
}

TEST(MaxPool, TwoByTwoExample) {
    Tensor x({1, 1, 2, 2});
    x.at(0, 0, 0, 0) = 1;
    x.at(0, 0, 0, 1) = 2;
    x.at(0, 0, 1, 0) = 3;
    x.at(0, 0, 1, 1) = 4;
    PoolCache cache;
    Tensor out = maxpool_forward(x, 2, 2, &cache);
    ASSERT_EQ(out.size(), 1);
    EXPECT_EQ(out.data()[0], 4.0);
    Tensor g({1, 1, 1, 1});
    g.data()[0] = 1.0;
    Tensor dx = maxpool_backward(g, cache);
    EXPECT_EQ(dx.at(0, 0, 1, 1), 1.0);
    EXPECT_EQ(dx.sum(), 1.0);
}

TEST(MaxPool, TruncatesOverhang) {
    Rng rng(derive_seed(43, "pool"));
    Tensor x = random_tensor({1, 1, 7, 7}, rng);
    Tensor out = maxpool_forward(x, 3, 3);
    EXPECT_EQ(out.dim(2), 2);
    EXPECT_EQ(out.dim(3), 2);
    double best = -1e300;
    for (int y = 0; y < 3; ++y)
        for (int xx = 0; xx < 3; ++xx) best = std::max(best, x.at(0, 0, y, xx));
    EXPECT_EQ(out.at(0, 0, 0, 0), best);
}

TEST(MaxPool, WindowExceedingInputThrows) {
    Tensor x({1, 1, 2, 2});
    EXPECT_THROW(maxpool_forward(x, 3, 3), std::invalid_argument);
}

TEST(Fc, MatchesHandLoop) {
    Rng rng(derive_seed(47, "fc"));
    Tensor x = random_tensor({3, 8}, rng);
    FcParams p(4, 8);
    p.weights = random_tensor(p.weights.shape(), rng);
    p.bias = random_tensor(p.bias.shape(), rng);
    Tensor y = fc_forward(x, p);
    for (int img = 0; img < 3; ++img) {
        for (int j = 0; j < 4; ++j) {
            double acc = p.bias.at(j);
            for (int i = 0; i < 8; ++i) acc += p.weights.at(j, i) * x.at(img, i);
            EXPECT_NEAR(y.at(img, j), acc, 1e-12);
        }
    }
}

TEST(Fc, FlattensSpatialInput) {
    Rng rng(derive_seed(47, "flat"));
    Tensor x = random_tensor({2, 3, 2, 2}, rng);
    FcParams p(5, 12);
    p.weights = random_tensor(p.weights.shape(), rng);
    Tensor y = fc_forward(x, p);
    EXPECT_EQ(y.dim(0), 2);
    EXPECT_EQ(y.dim(1), 5);
    EXPECT_THROW(fc_forward(random_tensor({2, 11}, rng), p), std::invalid_argument);
}

TEST(Softmax, UniformLogitsGiveLogTen) {
    Tensor logits({3, 10});
    logits.fill(0.7);
    SoftmaxResult res = softmax_loss(logits, {0, 5, 9});
    EXPECT_NEAR(res.loss, std::log(10.0), 1e-12);
}

TEST(Softmax, GradientRowsSumToZero) {
    Rng rng(derive_seed(47, "softmax"));
    Tensor logits = random_tensor({4, 10}, rng);
    SoftmaxResult res = softmax_loss(logits, {1, 2, 3, 4});
    for (int img = 0; img < 4; ++img) {
        double row = 0;
        for (int j = 0; j < 10; ++j) row += res.dlogits.at(img, j);
        EXPECT_NEAR(row, 0.0, 1e-14);
    }
}

TEST(Softmax, LabelOutOfRangeThrows) {
    Tensor logits({1, 10});
    EXPECT_THROW(softmax_loss(logits, {10}), std::invalid_argument);
    EXPECT_THROW(softmax_loss(logits, {-1}), std::invalid_argument);
    EXPECT_THROW(softmax_loss(logits, {0, 1}), std::invalid_argument);
}
