#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sicnn/config.hpp"
#include "sicnn/data.hpp"
#include "sicnn/network.hpp"
#include "sicnn/rng.hpp"
#include "sicnn/train.hpp"

namespace sicnn {

inline std::uint64_t hash_bytes(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string config_hash(const ExperimentConfig& cfg) {
    const std::string text = config_to_text(cfg);
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << hash_bytes(text.data(), text.size());
    return os.str();
}

inline std::string default_mnist_dir() {
    if (const char* env = std::getenv("SICNN_MNIST_DIR")) return env;
    return "/root/data/mnist";
}

inline Dataset load_mnist_pool(const std::string& mnist_dir) {
    Dataset train = load_idx(mnist_dir + "/train-images-idx3-ubyte",
                             mnist_dir + "/train-labels-idx1-ubyte");
    Dataset test = load_idx(mnist_dir + "/t10k-images-idx3-ubyte",
                            mnist_dir + "/t10k-labels-idx1-ubyte");
    return concat(train, test);
}

inline ScaleDistribution parse_distribution(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
        throw std::invalid_argument("distribution: expected kind:params in '" + text + "'");
    }
    const std::string kind = text.substr(0, colon);
    std::istringstream ps(text.substr(colon + 1));
    double a = 0, b = 0;
    char comma = 0;
    if (kind == "uniform") {
        if (!(ps >> a >> comma >> b) || comma != ',') {
            throw std::invalid_argument("distribution: uniform needs a,b in '" + text + "'");
        }
        return ScaleDistribution::uniform(a, b);
    }
    if (kind == "gaussian") {
        if (!(ps >> a >> comma >> b) || comma != ',') {
            throw std::invalid_argument("distribution: gaussian needs mean,var in '" + text +
                                        "'");
        }
        return ScaleDistribution::gaussian(a, b);
    }
    if (kind == "fixed") {
        if (!(ps >> a)) {
            throw std::invalid_argument("distribution: fixed needs s in '" + text + "'");
        }
        return ScaleDistribution::fixed_scale(a);
    }
    throw std::invalid_argument("distribution: unknown kind '" + kind + "'");
}

/// Scaled 70k pool (60k train + 10k test sources), cached on disk keyed by
/// variant/distribution/seed so repeated experiment stages share one copy.
/// A nonzero `limit` keeps only the first `limit` source rows; smoke runs use
/// it to avoid rendering the full pool, and limited caches are kept separate.
inline Dataset ensure_scaled_pool(const std::string& out_dir, const std::string& mnist_dir,
                                  const ScaleDistribution& dist, int canvas,
                                  std::uint64_t data_seed, int limit = 0) {
    std::filesystem::create_directories(out_dir + "/data");
    std::ostringstream name;
    name << "pool-" << canvas << "-" << dist.describe() << "-seed" << data_seed;
    if (limit > 0) name << "-n" << limit;
    std::string tag = name.str();
    for (char& c : tag) {
        if (c == ':' || c == ',') c = '_';
    }
    const std::string prefix = out_dir + "/data/" + tag;
    if (std::filesystem::exists(prefix + "-images-idx3-ubyte") &&
        std::filesystem::exists(prefix + ".meta")) {
        Dataset cached = load_dataset(prefix);
        if (cached.meta.seed == data_seed && cached.meta.distribution == dist.describe()) {
            return cached;
        }
    }
    Dataset pool = load_mnist_pool(mnist_dir);
    if (limit > 0 && limit < pool.count()) {
        std::vector<int> head(static_cast<std::size_t>(limit));
        for (int i = 0; i < limit; ++i) head[static_cast<std::size_t>(i)] = i;
        pool = subset_dataset(pool, head);
    }
    Dataset scaled = make_mnist_scale(pool, dist, canvas, data_seed);
    save_dataset(scaled, prefix);
    return scaled;
}

struct CellResult {
    std::string arch;
    int fold = 0;
    double test_error = 1.0;
    double train_loss = 0.0;
    double wall_seconds = 0.0;
    std::string checkpoint_path;
    std::string hash;
};

inline ExperimentConfig cell_config(const ExperimentConfig& base, const std::string& arch,
                                    int fold) {
    ExperimentConfig cfg = base;
    cfg.arch = arch;
    (void)fold;  // fold choice enters through the fold seed stream, not the config
    return cfg;
}

inline std::string cell_row_path(const std::string& out_dir, const std::string& arch, int fold,
                                 const std::string& tag = "") {
    return out_dir + "/cells/" + tag + arch + "-fold" + std::to_string(fold) + ".row";
}

inline std::string cell_checkpoint_path(const std::string& out_dir, const std::string& arch,
                                        int fold, const std::string& tag = "") {
    return out_dir + "/checkpoints/" + tag + arch + "-fold" + std::to_string(fold) + ".ckpt";
}

inline bool load_cell_row(const std::string& path, const std::string& want_hash,
                          CellResult* out) {
    std::ifstream in(path);
    if (!in) return false;
    CellResult r;
    if (!(in >> r.arch >> r.fold >> r.test_error >> r.train_loss >> r.wall_seconds >> r.hash)) {
        return false;
    }
    if (r.hash != want_hash) return false;
    *out = r;
    return true;
}

inline void save_cell_row(const std::string& path, const CellResult& r) {
    std::ofstream out(path, std::ios::trunc);
    out.precision(17);
    out << r.arch << " " << r.fold << " " << r.test_error << " " << r.train_loss << " "
        << r.wall_seconds << " " << r.hash << "\n";
}

/// Trains one (arch, fold) cell, or returns the stored result when a row
/// file with the same config hash already exists.
inline CellResult run_cell(const std::string& out_dir, const ExperimentConfig& base,
                           const std::string& arch, const Fold& fold, int fold_index,
                           bool verbose = false, const std::string& tag = "") {
    const ExperimentConfig cfg = cell_config(base, arch, fold_index);
    const std::string hash = config_hash(cfg);
    const std::string row_path = cell_row_path(out_dir, arch, fold_index, tag);

    CellResult cached;
    if (load_cell_row(row_path, hash, &cached) &&
        std::filesystem::exists(cell_checkpoint_path(out_dir, arch, fold_index, tag))) {
        cached.checkpoint_path = cell_checkpoint_path(out_dir, arch, fold_index, tag);
        return cached;
    }

    std::filesystem::create_directories(out_dir + "/cells");
    std::filesystem::create_directories(out_dir + "/checkpoints");
    std::filesystem::create_directories(out_dir + "/logs");

    Dataset train_ds = fold.train;  // preprocess mutates; keep fold pristine
    Dataset test_ds = fold.test;
    Tensor mean = preprocess(train_ds, {&test_ds});

    Network net = build_network(cfg);
    net.mean() = mean;

    TrainOptions opt;
    opt.log_path =
        out_dir + "/logs/" + tag + arch + "-fold" + std::to_string(fold_index) + "-log.csv";
    opt.checkpoint_path = cell_checkpoint_path(out_dir, arch, fold_index, tag);
    opt.eval_every = 0;  // final-epoch evaluation only; mid-run eval is costly
    opt.verbose = verbose;

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res = train(net, train_ds, test_ds, cfg, opt);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    CellResult r;
    r.arch = arch;
    r.fold = fold_index;
    r.test_error = res.final_eval_error;
    r.train_loss = res.final_train_loss;
    r.wall_seconds = secs;
    r.checkpoint_path = opt.checkpoint_path;
    r.hash = hash;
    save_cell_row(row_path, r);
    return r;
}

struct Table1Summary {
    std::vector<CellResult> cells;
    double conv_mean = 0.0, conv_std = 0.0;
    double si_mean = 0.0, si_std = 0.0;
};

inline void mean_std(const std::vector<double>& xs, double* mean, double* sd) {
    double m = 0;
    for (double x : xs) m += x;
    m /= xs.empty() ? 1 : static_cast<double>(xs.size());
    double v = 0;
    for (double x : xs) v += (x - m) * (x - m);
    *mean = m;
    *sd = xs.size() > 1 ? std::sqrt(v / (static_cast<double>(xs.size()) - 1)) : 0.0;
}

/// Paired conv/siconv training over folds of one scaled pool; emits
/// table1.csv (+ per-fold rows) and a provenance sidecar. Completed cells
/// are reused, so interrupted runs resume where they stopped.
inline Table1Summary run_table1(const std::string& out_dir, const ExperimentConfig& base,
                                const std::string& mnist_dir = default_mnist_dir(),
                                bool verbose = false) {
    std::filesystem::create_directories(out_dir);
    Dataset pool = ensure_scaled_pool(out_dir, mnist_dir, parse_distribution(base.dist),
                                      base.canvas, base.data_seed);
    std::vector<Fold> folds =
        make_folds(pool, base.folds, base.train_size, base.test_size, base.data_seed);
    pool = Dataset{};  // free ~400MB before training

    Table1Summary sum;
    std::vector<double> conv_err, si_err;
    for (int f = 0; f < base.folds; ++f) {
        for (const std::string arch : {"conv", "siconv"}) {
            CellResult r = run_cell(out_dir, base, arch, folds[static_cast<std::size_t>(f)], f,
                                    verbose);
            (arch == "conv" ? conv_err : si_err).push_back(r.test_error);
            sum.cells.push_back(std::move(r));
        }
    }
    mean_std(conv_err, &sum.conv_mean, &sum.conv_std);
    mean_std(si_err, &sum.si_mean, &sum.si_std);

    {
        std::ofstream folds_csv(out_dir + "/table1_folds.csv", std::ios::trunc);
        folds_csv << "arch,fold,test_error,train_loss,wall_seconds\n";
        for (const CellResult& r : sum.cells) {
            folds_csv << r.arch << ',' << r.fold << ',' << r.test_error << ',' << r.train_loss
                      << ',' << r.wall_seconds << '\n';
        }
    }
    {
        std::ofstream table(out_dir + "/table1.csv", std::ios::trunc);
        table << "arch,mean_test_error,std_test_error,folds\n";
        table << "conv," << sum.conv_mean << ',' << sum.conv_std << ',' << base.folds << '\n';
        table << "siconv," << sum.si_mean << ',' << sum.si_std << ',' << base.folds << '\n';
    }
    {
        ExperimentConfig conv_cfg = cell_config(base, "conv", 0);
        ExperimentConfig si_cfg = cell_config(base, "siconv", 0);
        std::ofstream prov(out_dir + "/provenance.txt", std::ios::trunc);
        prov << "experiment table1\n"
             << "config_hash conv " << config_hash(conv_cfg) << "\n"
             << "config_hash siconv " << config_hash(si_cfg) << "\n"
             << "master_seed " << base.seed << "\n"
             << "data_seed " << base.data_seed << "\n"
             << "fold_seed_stream derive(data_seed, \"fold\")\n"
             << "dataset " << base.variant << " dist " << base.dist << " canvas " << base.canvas
             << "\n"
             << "folds " << base.folds << " train_size " << base.train_size << " test_size "
             << base.test_size << " epochs " << base.epochs << "\n";
    }
    return sum;
}

}  // namespace sicnn
