#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sicnn/analysis.hpp"

using namespace sicnn;

namespace {

std::string mnist_dir() {
    const char* env = std::getenv("SICNN_MNIST_DIR");
    return env ? env : "/root/data/mnist";
}

bool have_mnist() {
    return std::filesystem::exists(mnist_dir() + "/train-images-idx3-ubyte");
}

std::string sweep_cache_dir(const std::string& leaf) {
    const auto root = std::filesystem::temp_directory_path() / "sicnn-sweep-tests" / leaf;
    std::filesystem::create_directories(root);
    return root.string();
}

std::vector<double> default28_scales() { return parse_scales("1.26^[-2:3]"); }

std::vector<double> canvas40_scales() {
    return parse_scales("0.5,0.762199122,1,1.161895004,1.771190704,2.7");
}

Dataset noise_probe(int n, int canvas, std::uint64_t seed) {
    Dataset ds;
    ds.images = Tensor({n, 1, canvas, canvas});
    Rng rng(seed);
    for (std::int64_t i = 0; i < ds.images.size(); ++i) ds.images.data()[i] = rng.uniform();
    ds.labels.assign(static_cast<std::size_t>(n), 0);
    return ds;
}

/// Centered blobs at varying widths and amplitudes: content whose identity is
/// independent of drawing scale, which is what a scale-invariant unit should
/// rank by.
Dataset blob_probe(int n, int canvas, std::uint64_t seed) {
    Dataset ds;
    ds.images = Tensor({n, 1, canvas, canvas});
    ds.labels.assign(static_cast<std::size_t>(n), 0);
    Rng rng(seed);
    const double center = (canvas - 1) / 2.0;
    for (int i = 0; i < n; ++i) {
        const double width = rng.uniform(1.3, 1.9);
        const double amp = rng.uniform(0.3, 1.0);
        double* img = ds.images.data() + static_cast<std::int64_t>(i) * canvas * canvas;
        for (int y = 0; y < canvas; ++y) {
            for (int x = 0; x < canvas; ++x) {
                const double dy = y - center, dx = x - center;
                img[y * canvas + x] =
                    amp * std::exp(-(dy * dy + dx * dx) / (2.0 * width * width));
            }
        }
    }
    return ds;
}

// Zero-mean blob detector: responds to blobs near its own width but not to
// much larger or smaller ones, so firing depends on the presented scale.
Tensor blob_template(int k, double sigma) {
    Tensor t({1, 1, k, k});
    const double c = (k - 1) / 2.0;
    double mean = 0.0;
    for (int y = 0; y < k; ++y) {
        for (int x = 0; x < k; ++x) {
            const double dy = y - c, dx = x - c;
            t.at(0, 0, y, x) = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            mean += t.at(0, 0, y, x);
        }
    }
    mean /= k * k;
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] -= mean;
    return t;
}

int count_increases(const std::vector<double>& xs) {
    int bumps = 0;
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (xs[i] > xs[i - 1] + 1e-12) ++bumps;
    }
    return bumps;
}

}  // namespace

// ---------------------------------------------------------------------------
// Operation counting
// ---------------------------------------------------------------------------

TEST(OpCount, PredictedMultipleMatchesPinnedExample) {
    const double multiple = predicted_conv_multiple({1.26, 5, 2});
    EXPECT_GE(multiple, 9.5);
    EXPECT_LE(multiple, 10.5);
    double by_hand = 0.0;
    for (int j = -2; j <= 3; ++j) by_hand += std::pow(1.26, 2 * j);
    EXPECT_NEAR(multiple, by_hand, 1e-9);
}

TEST(OpCount, PredictedMultipleEdgeCases) {
    EXPECT_DOUBLE_EQ(predicted_conv_multiple({1.26, 0, 0}), 1.0);
    // With a huge step the top level dominates: the multiple approaches
    // s_max squared.
    const OpCountModel huge{1000.0, 4, 1};
    const double s_max = std::pow(huge.s, huge.t - huge.k);
    const double ratio = predicted_conv_multiple(huge) / (s_max * s_max);
    EXPECT_GT(ratio, 1.0);
    EXPECT_LT(ratio, 1.0 + 1e-5);
}

TEST(OpCount, PredictedMultipleRejectsBadModels) {
    EXPECT_THROW(predicted_conv_multiple({1.0, 5, 2}), std::invalid_argument);
    EXPECT_THROW(predicted_conv_multiple({0.9, 5, 2}), std::invalid_argument);
    EXPECT_THROW(predicted_conv_multiple({1.26, 2, 3}), std::invalid_argument);
    EXPECT_THROW(predicted_conv_multiple({1.26, -1, 0}), std::invalid_argument);
}

TEST(OpCount, ClosedFormEqualsTermByTermSum) {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        OpCountModel m;
        m.s = rng.uniform(1.01, 3.0);
        m.t = rng.index(9);
        m.k = m.t ? rng.index(static_cast<std::size_t>(m.t + 1)) : 0;
        double sum = 0.0;
        for (int j = -m.k; j <= m.t - m.k; ++j) sum += std::pow(m.s, 2 * j);
        const double closed = predicted_conv_multiple(m);
        EXPECT_NEAR(closed, sum, 1e-10 * std::max(1.0, sum));
    }
}

TEST(OpCount, MeasuredCountSingleScale) {
    EXPECT_EQ(measured_conv_count({1.0}, 28, 7), 484);
}

TEST(OpCount, MeasuredCountDefaultSetMatchesRoundedLevels) {
    const std::vector<double> scales = default28_scales();
    // Level sides round to 18, 22, 28, 35, 44, 56.
    EXPECT_EQ(measured_conv_count(scales, 28, 7), 5669);
    const double ideal = idealized_conv_count(scales, 28, 7);
    EXPECT_LT(std::abs(measured_conv_count(scales, 28, 7) - ideal) / ideal, 0.05);
}

TEST(OpCount, MeasuredCountScalesQuadratically) {
    const std::vector<double> scales = default28_scales();
    // With a 1-pixel kernel the count is the summed level areas and doubling
    // the side quadruples it up to rounding. A wide kernel shaves a constant
    // off each level side, so small inputs overshoot 4x and approach it from
    // above as n grows.
    const double unit_ratio = static_cast<double>(measured_conv_count(scales, 56, 1)) /
                              static_cast<double>(measured_conv_count(scales, 28, 1));
    EXPECT_GT(unit_ratio, 3.9);
    EXPECT_LT(unit_ratio, 4.1);
    const double small = static_cast<double>(measured_conv_count(scales, 56, 7)) /
                         static_cast<double>(measured_conv_count(scales, 28, 7));
    const double large = static_cast<double>(measured_conv_count(scales, 448, 7)) /
                         static_cast<double>(measured_conv_count(scales, 224, 7));
    EXPECT_GT(small, 4.0);
    EXPECT_LT(small, 5.0);
    EXPECT_GT(large, 3.95);
    EXPECT_LT(large, 4.1);
}

TEST(OpCount, MeasuredCountRejectsLevelsSmallerThanKernel) {
    EXPECT_THROW(measured_conv_count({0.1}, 28, 7), std::invalid_argument);
    EXPECT_THROW(measured_conv_count({}, 28, 7), std::invalid_argument);
}

TEST(OpCount, ShippedConfigsStayWithinRoundingSlack) {
    const std::filesystem::path dir = std::filesystem::path(SICNN_SOURCE_DIR) / "configs";
    ASSERT_TRUE(std::filesystem::exists(dir));
    int checked = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() != ".cfg") continue;
        const ExperimentConfig cfg = load_config(entry.path().string());
        const std::vector<double> scales = cfg.scale_list();
        const NetShapePlan plan = plan_shapes(cfg);
        const struct {
            int n, kernel;
        } layers[] = {{cfg.canvas, cfg.kernel1}, {plan.pool1_out, cfg.kernel2}};
        for (const auto& l : layers) {
            const double measured =
                static_cast<double>(measured_conv_count(scales, l.n, l.kernel));
            const double ideal = idealized_conv_count(scales, l.n, l.kernel);
            EXPECT_LT(std::abs(measured - ideal) / ideal, 0.05)
                << entry.path().filename() << " n=" << l.n << " k=" << l.kernel;
            ++checked;
        }
    }
    EXPECT_GE(checked, 10);
}

// ---------------------------------------------------------------------------
// Response spread probe
// ---------------------------------------------------------------------------

TEST(ResponseSpread, PooledPeaksStayPutWhilePlainPeaksDrift) {
    const SpreadResult r = response_spread(default28_scales(), 28, 7);
    ASSERT_EQ(r.conv_peaks.size(), 6u);
    ASSERT_EQ(r.siconv_peaks.size(), 6u);
    for (double p : r.conv_peaks) EXPECT_GT(p, 0.0);
    for (double p : r.siconv_peaks) EXPECT_GT(p, 0.0);
    EXPECT_LE(r.siconv_spread, 0.15);
    EXPECT_GE(r.conv_spread, 0.50);
}

TEST(ResponseSpread, ProbeIsDeterministic) {
    const SpreadResult a = response_spread(default28_scales(), 28, 7);
    const SpreadResult b = response_spread(default28_scales(), 28, 7);
    EXPECT_EQ(a.conv_peaks, b.conv_peaks);
    EXPECT_EQ(a.siconv_peaks, b.siconv_peaks);
}

// ---------------------------------------------------------------------------
// Invariance scoring
// ---------------------------------------------------------------------------

TEST(Invariance, IdentityUnitFiresAtTheIdentityTransformOnly) {
    // A 1x1 convolution with unit weight makes every output unit a raw input
    // pixel. On noise probes a pixel's above-threshold activations survive
    // only the exact identity transform, so the firing count at s = 1 equals
    // the exceedance count and the local rate over probes stays tiny.
    Network net;
    net.add(std::make_unique<ConvLayer>("conv1", 1, 1, 1));
    std::vector<ParamRef> refs = net.params();
    refs[0].value->data()[0] = 1.0;

    const Dataset probe = noise_probe(600, 28, 11);
    const std::vector<LayerInvariance> report = invariance_score(net, probe);
    ASSERT_EQ(report.size(), 1u);
    const LayerInvariance& li = report[0];
    EXPECT_EQ(li.total_neurons, 28 * 28);
    EXPECT_FALSE(li.dead);

    // Off the resampling grid's resonance lines both upscales interpolate,
    // so only s = 1 reproduces the stored activations. Firing then counts
    // exactly the exceedances: rate = exceedances / (probes * |scales|) and
    // the ratio to recall = exceedances / N collapses to N / (probes *
    // |scales|) = 600 / 300 = 2.
    const std::size_t pixel = 13 * 28 + 17;
    ASSERT_FALSE(std::isnan(li.local_rates[pixel]));
    EXPECT_GT(li.thresholds[pixel], 0.9);
    EXPECT_GT(li.recalls[pixel], 0.01);
    EXPECT_LT(li.recalls[pixel], 0.03);
    EXPECT_GT(li.local_rates[pixel], 0.0);
    EXPECT_LE(li.local_rates[pixel], 0.05);
    EXPECT_NEAR(li.local_rates[pixel] / li.recalls[pixel], 2.0, 0.2);
}

TEST(Invariance, PooledMatchedFilterOutscoresPlainFilter) {
    const Dataset probe = blob_probe(400, 28, 5);
    const Tensor tmpl = blob_template(7, 1.6);

    Network plain;
    plain.add(std::make_unique<ConvLayer>("conv1", 1, 1, 7));
    *plain.params()[0].value = tmpl;

    Network pooled;
    pooled.add(std::make_unique<SIConvLayer>("conv1", default28_scales(), 1, 1, 7));
    *pooled.params()[0].value = tmpl;

    // Each transform scale is the exact inverse of a pooling branch, so the
    // pooled layer can recover every shrunk blob at its preferred size while
    // the plain filter only matches near the original.
    InvarianceOptions opts;
    opts.transform_scales = {1.0 / 2.0, 1.0 / 1.5874, 1.0 / 1.26, 1.0};

    Dataset probe_copy = probe;
    const std::vector<LayerInvariance> plain_report =
        invariance_score(plain, probe_copy, opts);
    const std::vector<LayerInvariance> pooled_report =
        invariance_score(pooled, probe_copy, opts);
    ASSERT_FALSE(plain_report[0].dead);
    ASSERT_FALSE(pooled_report[0].dead);
    EXPECT_GT(pooled_report[0].mean_top_score, plain_report[0].mean_top_score);
}

TEST(Invariance, ScoringIsDeterministic) {
    Network net;
    net.add(std::make_unique<ConvLayer>("conv1", 2, 1, 5));
    Rng rng(3);
    for (ParamRef& p : net.params()) {
        for (std::int64_t i = 0; i < p.value->size(); ++i) {
            p.value->data()[i] = rng.uniform(-0.5, 0.5);
        }
    }
    const Dataset probe = noise_probe(300, 20, 17);
    const std::vector<LayerInvariance> a = invariance_score(net, probe);
    const std::vector<LayerInvariance> b = invariance_score(net, probe);
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(a[0].mean_top_score, b[0].mean_top_score);
    EXPECT_EQ(a[0].scored_neurons, b[0].scored_neurons);
    for (std::size_t j = 0; j < a[0].local_rates.size(); ++j) {
        if (std::isnan(a[0].local_rates[j])) {
            EXPECT_TRUE(std::isnan(b[0].local_rates[j]));
        } else {
            EXPECT_EQ(a[0].local_rates[j], b[0].local_rates[j]);
            EXPECT_EQ(a[0].thresholds[j], b[0].thresholds[j]);
        }
    }
}

TEST(Invariance, ConstantUnitsLeaveTheTapDead) {
    Network net;
    net.add(std::make_unique<ConvLayer>("conv1", 1, 1, 3));  // zero weights and bias
    const Dataset probe = noise_probe(200, 16, 23);
    const std::vector<LayerInvariance> report = invariance_score(net, probe);
    ASSERT_EQ(report.size(), 1u);
    EXPECT_TRUE(report[0].dead);
    EXPECT_EQ(report[0].scored_neurons, 0);
    EXPECT_TRUE(std::isnan(report[0].mean_top_score));
}

TEST(Invariance, NetworkWithoutConvTapsIsRejected) {
    Network net;
    net.add(std::make_unique<FcLayer>("fc1", 4, 16));
    const Dataset probe = noise_probe(100, 4, 29);
    EXPECT_THROW(invariance_score(net, probe), std::invalid_argument);
}

TEST(Invariance, CsvListsOneRowPerTap) {
    Network net;
    net.add(std::make_unique<ConvLayer>("conv1", 1, 1, 1));
    net.params()[0].value->data()[0] = 1.0;
    const Dataset probe = noise_probe(200, 12, 31);
    const std::vector<LayerInvariance> report = invariance_score(net, probe);

    const std::string path =
        (std::filesystem::temp_directory_path() / "sicnn-inv-test.csv").string();
    write_invariance_csv(path, {{"conv", report}});
    std::ifstream in(path);
    std::string header, row;
    ASSERT_TRUE(std::getline(in, header));
    EXPECT_EQ(header, "arch,layer,total_neurons,scored_neurons,dead,mean_top_score");
    ASSERT_TRUE(std::getline(in, row));
    EXPECT_EQ(row.rfind("conv,conv1,144,", 0), 0u);
    std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// Figure sweeps
// ---------------------------------------------------------------------------

TEST(Sweep, UnknownKindIsRejected) {
    ExperimentConfig cfg;
    SweepOptions opt;
    opt.out_dir = sweep_cache_dir("none");
    EXPECT_THROW(run_sweep("volume", cfg, opt), std::invalid_argument);
}

TEST(Sweep, TrainsizeErrorIsWeaklyMonotone) {
    if (!have_mnist()) GTEST_SKIP() << "MNIST not available";
    ExperimentConfig cfg;
    cfg.maps1 = 6;
    cfg.maps2 = 11;
    cfg.fc_hidden = 40;
    cfg.epochs = 3;
    cfg.batch_size = 64;
    cfg.folds = 1;
    cfg.train_size = 3000;
    cfg.test_size = 800;

    SweepOptions opt;
    opt.out_dir = sweep_cache_dir("trainsize");
    opt.mnist_dir = mnist_dir();
    opt.pool_limit = 4000;
    const SweepReport report = run_sweep("trainsize", cfg, opt);

    ASSERT_EQ(report.points.size(), 4u);
    std::vector<double> conv_means, siconv_means, sizes;
    for (const SweepPoint& p : report.points) {
        ASSERT_EQ(p.axis.size(), 1u);
        EXPECT_EQ(p.axis[0].first, "train_size");
        sizes.push_back(p.axis[0].second);
        EXPECT_EQ(p.folds, 1);
        conv_means.push_back(p.conv_mean);
        siconv_means.push_back(p.siconv_mean);
        EXPECT_GT(p.conv_mean, 0.0);
        EXPECT_LT(p.conv_mean, 1.0);
        EXPECT_GT(p.siconv_mean, 0.0);
        EXPECT_LT(p.siconv_mean, 1.0);
    }
    EXPECT_EQ(sizes, (std::vector<double>{300, 600, 1500, 3000}));
    EXPECT_LE(count_increases(conv_means), 1);
    EXPECT_LE(count_increases(siconv_means), 1);
    EXPECT_TRUE(std::filesystem::exists(report.csv_path));

    std::ifstream in(report.csv_path);
    std::string header;
    ASSERT_TRUE(std::getline(in, header));
    EXPECT_EQ(header, "train_size,conv_mean,conv_std,siconv_mean,siconv_std,folds");
}

TEST(Sweep, GaussianTestScaleCoversTheFixedAxis) {
    if (!have_mnist()) GTEST_SKIP() << "MNIST not available";
    ExperimentConfig cfg;
    cfg.canvas = 40;
    cfg.kernel1 = 9;
    cfg.scales = "0.5,0.762199122,1,1.161895004,1.771190704,2.7";
    cfg.variant = "mnist-scale-40";
    cfg.dist = "gaussian:1,0.24";
    cfg.maps1 = 4;
    cfg.maps2 = 8;
    cfg.fc_hidden = 32;
    cfg.epochs = 1;
    cfg.batch_size = 64;
    cfg.folds = 1;
    cfg.train_size = 250;
    cfg.test_size = 150;

    SweepOptions opt;
    opt.out_dir = sweep_cache_dir("gaussian");
    opt.mnist_dir = mnist_dir();
    opt.pool_limit = 600;
    const SweepReport report = run_sweep("gaussian-test-scale", cfg, opt);

    ASSERT_EQ(report.points.size(), 13u);
    for (std::size_t i = 0; i < report.points.size(); ++i) {
        const SweepPoint& p = report.points[i];
        ASSERT_EQ(p.axis.size(), 1u);
        EXPECT_EQ(p.axis[0].first, "test_scale");
        EXPECT_NEAR(p.axis[0].second, 0.4 + 0.1 * i, 1e-12);
        EXPECT_EQ(p.folds, 1);
        EXPECT_GE(p.conv_mean, 0.0);
        EXPECT_LE(p.conv_mean, 1.0);
        EXPECT_GE(p.siconv_mean, 0.0);
        EXPECT_LE(p.siconv_mean, 1.0);
    }
    EXPECT_NE(report.csv_path.find("fig5a.csv"), std::string::npos);
    EXPECT_TRUE(std::filesystem::exists(report.csv_path));
}

TEST(Sweep, UniformRangeWidensAroundOne) {
    if (!have_mnist()) GTEST_SKIP() << "MNIST not available";
    ExperimentConfig cfg;
    cfg.canvas = 40;
    cfg.kernel1 = 9;
    cfg.scales = "0.5,0.762199122,1,1.161895004,1.771190704,2.7";
    cfg.variant = "mnist-scale-40";
    cfg.dist = "uniform:0.2,1.8";
    cfg.maps1 = 4;
    cfg.maps2 = 8;
    cfg.fc_hidden = 32;
    cfg.epochs = 1;
    cfg.batch_size = 64;
    cfg.folds = 1;
    cfg.train_size = 200;
    cfg.test_size = 100;

    SweepOptions opt;
    opt.out_dir = sweep_cache_dir("uniform-range");
    opt.mnist_dir = mnist_dir();
    opt.pool_limit = 500;
    const SweepReport report = run_sweep("uniform-range", cfg, opt);

    ASSERT_EQ(report.points.size(), 5u);
    const double widths[] = {0.0, 0.4, 0.8, 1.2, 1.6};
    for (std::size_t i = 0; i < report.points.size(); ++i) {
        const SweepPoint& p = report.points[i];
        ASSERT_EQ(p.axis.size(), 2u);
        EXPECT_EQ(p.axis[0].first, "range_lo");
        EXPECT_EQ(p.axis[1].first, "range_hi");
        EXPECT_NEAR(p.axis[0].second, 1.0 - widths[i] / 2.0, 1e-12);
        EXPECT_NEAR(p.axis[1].second, 1.0 + widths[i] / 2.0, 1e-12);
        EXPECT_LE(p.conv_mean, 1.0);
        EXPECT_LE(p.siconv_mean, 1.0);
    }
    EXPECT_NE(report.csv_path.find("fig5b.csv"), std::string::npos);
    EXPECT_TRUE(std::filesystem::exists(report.csv_path));
}

TEST(Sweep, FeatmapPointsScaleBothLayersTogether) {
    if (!have_mnist()) GTEST_SKIP() << "MNIST not available";
    ExperimentConfig cfg;
    cfg.maps1 = 6;
    cfg.maps2 = 11;
    cfg.fc_hidden = 32;
    cfg.epochs = 1;
    cfg.batch_size = 64;
    cfg.folds = 1;
    cfg.train_size = 250;
    cfg.test_size = 120;

    SweepOptions opt;
    opt.out_dir = sweep_cache_dir("featmaps");
    opt.mnist_dir = mnist_dir();
    opt.pool_limit = 500;
    const SweepReport report = run_sweep("featmaps", cfg, opt);

    ASSERT_EQ(report.points.size(), 5u);
    std::vector<double> maps1, maps2;
    for (const SweepPoint& p : report.points) {
        ASSERT_EQ(p.axis.size(), 2u);
        maps1.push_back(p.axis[0].second);
        maps2.push_back(p.axis[1].second);
        EXPECT_LE(p.conv_mean, 1.0);
        EXPECT_LE(p.siconv_mean, 1.0);
    }
    EXPECT_EQ(maps1, (std::vector<double>{1, 2, 3, 4, 6}));
    EXPECT_EQ(maps2, (std::vector<double>{2, 4, 6, 7, 11}));
    EXPECT_NE(report.csv_path.find("fig4a.csv"), std::string::npos);
}
