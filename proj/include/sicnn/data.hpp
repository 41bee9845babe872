#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sicnn/idx.hpp"
#include "sicnn/rng.hpp"
#include "sicnn/scale_transform.hpp"
#include "sicnn/tensor.hpp"

namespace sicnn {

struct DatasetMeta {
    std::string variant;
    std::string distribution;
    std::uint64_t seed = 0;
    int fold = -1;
};

struct Dataset {
    Tensor images;  // count x 1 x H x W, values in [0,1] before preprocessing
    std::vector<int> labels;
    DatasetMeta meta;

    int count() const { return images.ndim() == 4 ? images.dim(0) : 0; }
    int height() const { return images.dim(2); }
    int width() const { return images.dim(3); }
};

struct ScaleDistribution {
    enum class Kind { Uniform, Gaussian, Fixed };
    Kind kind = Kind::Uniform;
    double a = 0.3, b = 1.0;  // uniform bounds
    double mean = 1.0, var = 0.24;
    double fixed = 1.0;

    static ScaleDistribution uniform(double a, double b) {
        if (!(a > 0) || !(b >= a)) {
            throw std::invalid_argument("scale distribution: need 0 < a <= b");
        }
        ScaleDistribution d;
        d.kind = Kind::Uniform;
        d.a = a;
        d.b = b;
        return d;
    }
    static ScaleDistribution gaussian(double mean, double var) {
        if (!(var > 0)) throw std::invalid_argument("scale distribution: variance must be > 0");
        ScaleDistribution d;
        d.kind = Kind::Gaussian;
        d.mean = mean;
        d.var = var;
        return d;
    }
    static ScaleDistribution fixed_scale(double s) {
        if (!(s > 0)) throw std::invalid_argument("scale distribution: fixed s must be > 0");
        ScaleDistribution d;
        d.kind = Kind::Fixed;
        d.fixed = s;
        return d;
    }

    double sample(Rng& rng) const {
        switch (kind) {
            case Kind::Uniform:
                return rng.uniform(a, b);
            case Kind::Gaussian: {
                // Non-positive scales are meaningless; redraw tiny samples.
                for (;;) {
                    const double s = rng.gaussian(mean, std::sqrt(var));
                    if (s > 0.05) return s;
                }
            }
            case Kind::Fixed:
                return fixed;
        }
        throw std::logic_error("scale distribution: bad kind");
    }

    std::string describe() const {
        std::ostringstream os;
        switch (kind) {
            case Kind::Uniform:
                os << "uniform:" << a << "," << b;
                break;
            case Kind::Gaussian:
                os << "gaussian:" << mean << "," << var;
                break;
            case Kind::Fixed:
                os << "fixed:" << fixed;
                break;
        }
        return os.str();
    }
};

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    IdxImages img = load_idx_images(images_path);
    std::vector<std::uint8_t> raw_labels = load_idx_labels(labels_path);
    if (static_cast<int>(raw_labels.size()) != img.count) {
        throw std::runtime_error("idx: image/label count mismatch between " + images_path +
                                 " and " + labels_path);
    }
    Dataset ds;
    ds.images = Tensor({img.count, 1, img.height, img.width});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        ds.images.data()[i] = img.pixels[i] / 255.0;
    }
    ds.labels.resize(raw_labels.size());
    for (std::size_t i = 0; i < raw_labels.size(); ++i) {
        const int l = raw_labels[i];
        if (l > 9) throw std::runtime_error("idx: label out of range in " + labels_path);
        ds.labels[i] = l;
    }
    ds.meta.variant = "mnist-raw";
    return ds;
}

namespace detail {

/// Rescale one digit plane by s and composite it centered onto a square
/// canvas, quantized back to bytes so an IDX round trip is lossless.
/// Returns false if any foreground byte would land on or outside the
/// canvas's outermost pixel ring.
inline bool render_scaled_digit(const Tensor& digit, double s, int canvas,
                                std::vector<std::uint8_t>& out) {
    const int src_h = digit.dim(0), src_w = digit.dim(1);
    const int m_h = scaled_extent(s, src_h), m_w = scaled_extent(s, src_w);
    // Random draws rarely repeat a scale, so operators are built ad hoc
    // instead of going through the shared cache.
    const ScaleOperator op = build_operator(s, {src_h, src_w}, {m_h, m_w});
    Tensor scaled = apply(op, digit);

    // Work on a virtual canvas big enough to hold the whole scaled digit, so
    // clipped foreground is detected rather than silently cropped away.
    const int big_h = std::max(m_h, canvas), big_w = std::max(m_w, canvas);
    Tensor embedded = align(scaled, make_alignment({m_h, m_w}, {big_h, big_w}));
    const int off_h = (big_h - canvas) / 2, off_w = (big_w - canvas) / 2;
    for (int r = 0; r < big_h; ++r) {
        for (int c = 0; c < big_w; ++c) {
            const int q = static_cast<int>(std::floor(embedded.at(r, c) * 255.0 + 0.5));
            if (q <= 0) continue;
            // Foreground must fall strictly inside the canvas border ring.
            if (r <= off_h || r >= off_h + canvas - 1 || c <= off_w ||
                c >= off_w + canvas - 1) {
                return false;
            }
        }
    }
    out.assign(static_cast<std::size_t>(canvas) * canvas, 0);
    for (int r = 0; r < canvas; ++r) {
        for (int c = 0; c < canvas; ++c) {
            const double v = embedded.at(r + off_h, c + off_w);
            int q = static_cast<int>(std::floor(v * 255.0 + 0.5));
            q = std::clamp(q, 0, 255);
            out[static_cast<std::size_t>(r) * canvas + c] = static_cast<std::uint8_t>(q);
        }
    }
    return true;
}

}  // namespace detail

/// True if the digit rescaled by s keeps all foreground strictly inside the
/// canvas border ring. Sweeps over fixed test scales use this to drop the few
/// digits whose strokes cannot fit at the largest scale.
inline bool digit_fits(const Tensor& digit, double s, int canvas) {
    std::vector<std::uint8_t> scratch;
    return detail::render_scaled_digit(digit, s, canvas, scratch);
}

/// Dataset restricted to the given image indices, in the given order.
inline Dataset subset_dataset(const Dataset& ds, const std::vector<int>& indices) {
    Dataset out;
    out.images = Tensor({static_cast<int>(indices.size()), ds.images.dim(1), ds.images.dim(2),
                         ds.images.dim(3)});
    out.labels.resize(indices.size());
    const std::int64_t plane = ds.images.dim(1) * ds.images.dim(2) * ds.images.dim(3);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int src = indices[i];
        if (src < 0 || src >= ds.count()) {
            throw std::out_of_range("subset_dataset: index out of range");
        }
        std::copy(ds.images.data() + src * plane, ds.images.data() + (src + 1) * plane,
                  out.images.data() + static_cast<std::int64_t>(i) * plane);
        out.labels[i] = ds.labels[static_cast<std::size_t>(src)];
    }
    out.meta = ds.meta;
    return out;
}

/// Rescale every digit by an independently sampled factor and composite it
/// centered on a zero canvas. A draw whose foreground would touch or leave
/// the canvas border is rejected and redrawn (fresh s), up to 100 attempts.
/// Deterministic: image i consumes only its own derived seed stream.
inline Dataset make_mnist_scale(const Dataset& src, const ScaleDistribution& dist, int canvas,
                                std::uint64_t seed) {
    if (canvas != 28 && canvas != 40) {
        throw std::invalid_argument("make_mnist_scale: canvas must be 28 or 40");
    }
    const int n = src.count();
    Dataset out;
    out.images = Tensor({n, 1, canvas, canvas});
    out.labels = src.labels;
    out.meta.variant = "mnist-scale-" + std::to_string(canvas);
    out.meta.distribution = dist.describe();
    out.meta.seed = seed;
    out.meta.fold = src.meta.fold;

    const std::uint64_t stream = derive_seed(seed, "mnist-scale");
    std::vector<std::uint8_t> bytes;
    Tensor digit({src.height(), src.width()});
    for (int i = 0; i < n; ++i) {
        const double* img =
            src.images.data() + static_cast<std::int64_t>(i) * src.height() * src.width();
        std::copy(img, img + digit.size(), digit.data());
        Rng rng(derive_seed(stream, static_cast<std::uint64_t>(i)));
        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            const double s = dist.sample(rng);
            ok = detail::render_scaled_digit(digit, s, canvas, bytes);
        }
        if (!ok) {
            throw std::runtime_error("make_mnist_scale: no acceptable scale for image " +
                                     std::to_string(i) + " after 100 draws");
        }
        double* dst = out.images.data() + static_cast<std::int64_t>(i) * canvas * canvas;
        for (std::size_t p = 0; p < bytes.size(); ++p) dst[p] = bytes[p] / 255.0;
    }
    return out;
}

inline void apply_mean(Dataset& ds, const Tensor& mean) {
    if (ds.count() == 0) return;
    const std::int64_t plane = ds.images.size() / ds.count();
    if (plane != mean.size()) {
        throw std::invalid_argument("apply_mean: mean shape does not match dataset");
    }
    for (int i = 0; i < ds.count(); ++i) {
        double* img = ds.images.data() + i * plane;
        for (std::int64_t p = 0; p < plane; ++p) img[p] -= mean.data()[p];
    }
}

/// Per-pixel mean image over the training set; subtracted in place from the
/// training set and every other set passed in.
inline Tensor preprocess(Dataset& train, std::vector<Dataset*> others = {}) {
    const int n = train.count();
    if (n == 0) throw std::invalid_argument("preprocess: empty training set");
    const std::int64_t plane = train.images.size() / n;
    Tensor mean({1, train.images.dim(1), train.images.dim(2), train.images.dim(3)});
    for (int i = 0; i < n; ++i) {
        const double* img = train.images.data() + i * plane;
        for (std::int64_t p = 0; p < plane; ++p) mean.data()[p] += img[p];
    }
    for (std::int64_t p = 0; p < plane; ++p) mean.data()[p] /= n;
    apply_mean(train, mean);
    for (Dataset* d : others) {
        if (d) apply_mean(*d, mean);
    }
    return mean;
}

struct Fold {
    Dataset train;
    Dataset test;
    /// Pool row indices behind each split, so callers can re-render the same
    /// underlying digits under a different scaling regime.
    std::vector<int> train_idx;
    std::vector<int> test_idx;
};

/// Pool the sources, shuffle per fold seed, cut train/test prefixes.
inline std::vector<Fold> make_folds(const Dataset& pool, int n_folds, int train_size,
                                    int test_size, std::uint64_t seed) {
    const int n = pool.count();
    if (train_size + test_size > n) {
        throw std::invalid_argument("make_folds: pool of " + std::to_string(n) +
                                    " too small for " + std::to_string(train_size) + "+" +
                                    std::to_string(test_size));
    }
    std::vector<Fold> folds;
    const std::int64_t plane = pool.images.size() / n;
    for (int f = 0; f < n_folds; ++f) {
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(derive_seed(seed, "fold"), static_cast<std::uint64_t>(f)));
        rng.shuffle(order);
        auto take = [&](int offset, int count, std::vector<int>& idx) {
            idx.assign(order.begin() + offset, order.begin() + offset + count);
            Dataset d;
            d.images = Tensor({count, pool.images.dim(1), pool.images.dim(2),
                               pool.images.dim(3)});
            d.labels.resize(static_cast<std::size_t>(count));
            for (int i = 0; i < count; ++i) {
                const int srcix = order[static_cast<std::size_t>(offset + i)];
                std::copy(pool.images.data() + srcix * plane,
                          pool.images.data() + (srcix + 1) * plane,
                          d.images.data() + i * plane);
                d.labels[static_cast<std::size_t>(i)] =
                    pool.labels[static_cast<std::size_t>(srcix)];
            }
            d.meta = pool.meta;
            d.meta.fold = f;
            return d;
        };
        Fold fold;
        fold.train = take(0, train_size, fold.train_idx);
        fold.test = take(train_size, test_size, fold.test_idx);
        folds.push_back(std::move(fold));
    }
    return folds;
}

/// Concatenate datasets with identical image shapes (fold pooling).
inline Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.images.dim(1) != b.images.dim(1) || a.images.dim(2) != b.images.dim(2) ||
        a.images.dim(3) != b.images.dim(3)) {
        throw std::invalid_argument("concat: image shapes differ");
    }
    Dataset out;
    out.images = Tensor({a.count() + b.count(), a.images.dim(1), a.images.dim(2),
                         a.images.dim(3)});
    std::copy(a.images.data(), a.images.data() + a.images.size(), out.images.data());
    std::copy(b.images.data(), b.images.data() + b.images.size(),
              out.images.data() + a.images.size());
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.meta = a.meta;
    return out;
}

inline void save_dataset(const Dataset& ds, const std::string& prefix) {
    IdxImages img;
    img.count = ds.count();
    img.height = ds.height();
    img.width = ds.width();
    img.pixels.resize(static_cast<std::size_t>(ds.images.size()));
    for (std::int64_t i = 0; i < ds.images.size(); ++i) {
        const int q =
            std::clamp(static_cast<int>(std::floor(ds.images.data()[i] * 255.0 + 0.5)), 0, 255);
        img.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(q);
    }
    save_idx_images(prefix + "-images-idx3-ubyte", img);
    std::vector<std::uint8_t> labels(ds.labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<std::uint8_t>(ds.labels[i]);
    }
    save_idx_labels(prefix + "-labels-idx1-ubyte", labels);
    std::ofstream side(prefix + ".meta", std::ios::trunc);
    side << "variant " << ds.meta.variant << "\n"
         << "distribution " << ds.meta.distribution << "\n"
         << "seed " << ds.meta.seed << "\n"
         << "fold " << ds.meta.fold << "\n"
         << "count " << ds.count() << "\n"
         << "canvas " << ds.height() << "\n";
}

inline Dataset load_dataset(const std::string& prefix) {
    Dataset ds = load_idx(prefix + "-images-idx3-ubyte", prefix + "-labels-idx1-ubyte");
    std::ifstream side(prefix + ".meta");
    if (side) {
        std::string key;
        while (side >> key) {
            if (key == "variant") {
                side >> ds.meta.variant;
            } else if (key == "distribution") {
                side >> ds.meta.distribution;
            } else if (key == "seed") {
                side >> ds.meta.seed;
            } else if (key == "fold") {
                side >> ds.meta.fold;
            } else {
                std::string skip;
                side >> skip;
            }
        }
    }
    return ds;
}

}  // namespace sicnn
