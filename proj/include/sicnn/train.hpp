#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sicnn/config.hpp"
#include "sicnn/data.hpp"
#include "sicnn/network.hpp"
#include "sicnn/rng.hpp"
#include "sicnn/tensor.hpp"

namespace sicnn {

/// Classical momentum with decoupled-from-nothing weight decay folded into
/// the gradient: v <- mu*v - lr*(g + wd*theta), theta <- theta + v.
/// Decay applies only to tensors flagged as weights.
struct SgdState {
    double learning_rate;
    double momentum;
    double weight_decay;
    std::vector<Tensor> velocity;

    SgdState(const std::vector<ParamRef>& params, double lr, double mu, double wd)
        : learning_rate(lr), momentum(mu), weight_decay(wd) {
        velocity.reserve(params.size());
        for (const ParamRef& p : params) velocity.push_back(Tensor::zeros_like(*p.value));
    }

    void step(std::vector<ParamRef>& params) {
        if (params.size() != velocity.size()) {
            throw std::invalid_argument("sgd: parameter list changed size");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& v = velocity[i];
            Tensor& theta = *params[i].value;
            const Tensor& g = *params[i].grad;
            const double wd = params[i].decay ? weight_decay : 0.0;
            double* vd = v.data();
            double* td = theta.data();
            const double* gd = g.data();
            for (int j = 0; j < v.size(); ++j) {
                vd[j] = momentum * vd[j] - learning_rate * (gd[j] + wd * td[j]);
                td[j] += vd[j];
            }
        }
    }
};

inline Tensor gather_batch(const Dataset& ds, const std::vector<int>& order, int begin, int end,
                           std::vector<int>* labels) {
    const int b = end - begin;
    Tensor x({b, 1, ds.height(), ds.width()});
    const int plane = ds.height() * ds.width();
    if (labels) labels->resize(b);
    for (int i = 0; i < b; ++i) {
        const int src = order[begin + i];
        std::memcpy(x.data() + static_cast<std::size_t>(i) * plane,
                    ds.images.data() + static_cast<std::size_t>(src) * plane,
                    sizeof(double) * plane);
        if (labels) (*labels)[i] = ds.labels[src];
    }
    return x;
}

/// Fraction of images whose argmax logit disagrees with the label.
inline double evaluate(Network& net, const Dataset& ds, int batch_size = 256) {
    if (ds.count() == 0) throw std::invalid_argument("evaluate: empty dataset");
    std::vector<int> order(ds.count());
    std::iota(order.begin(), order.end(), 0);
    int wrong = 0;
    std::vector<int> labels;
    for (int begin = 0; begin < ds.count(); begin += batch_size) {
        const int end = std::min(ds.count(), begin + batch_size);
        Tensor x = gather_batch(ds, order, begin, end, &labels);
        Tensor logits = net.forward(x);
        const int classes = logits.shape()[1];
        for (int i = 0; i < end - begin; ++i) {
            int best = 0;
            for (int c = 1; c < classes; ++c) {
                if (logits.at(i, c) > logits.at(i, best)) best = c;
            }
            if (best != labels[i]) ++wrong;
        }
    }
    return static_cast<double>(wrong) / ds.count();
}

struct EpochRow {
    int epoch;
    double train_loss;
    double eval_error;  // NaN on epochs without an evaluation pass
    double wall_seconds;
};

struct TrainOptions {
    std::string log_path;         // CSV; empty disables
    std::string checkpoint_path;  // written after the final epoch; empty disables
    int eval_every = 1;           // 0 disables mid-training eval; final epoch always evals
    bool verbose = false;         // per-epoch progress on stderr
};

struct TrainResult {
    double final_train_loss = 0.0;
    double final_eval_error = 1.0;
    std::vector<EpochRow> log;
};

namespace detail {

inline void copy_params(std::vector<ParamRef>& dst, const std::vector<ParamRef>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        std::memcpy(dst[i].value->data(), src[i].value->data(),
                    sizeof(double) * src[i].value->size());
    }
}

}  // namespace detail

/// Minibatch SGD over a preprocessed training set. The shuffle stream is a
/// pure function of (seed, epoch), so runs with the same config reproduce
/// bit-identically in single-threaded mode; multi-threaded batches shard the
/// batch across workers and reduce gradients in worker order.
inline TrainResult train(Network& net, const Dataset& train_ds, const Dataset& test_ds,
                         const ExperimentConfig& cfg, const TrainOptions& opt = {}) {
    if (train_ds.count() == 0) throw std::invalid_argument("train: empty training set");
    const int threads = std::max(1, cfg.threads);

    std::vector<ParamRef> params = net.params();
    SgdState sgd(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);

    std::vector<Network> workers;
    if (threads > 1) workers.assign(threads, net);

    std::ofstream log;
    if (!opt.log_path.empty()) {
        log.open(opt.log_path);
        if (!log) throw std::runtime_error("train: cannot open log " + opt.log_path);
        log << "epoch,train_loss,eval_error,wall_seconds\n";
    }

    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    const std::uint64_t shuffle_root = derive_seed(cfg.seed, "shuffle");
    std::vector<int> order(train_ds.count());
    TrainResult result;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(shuffle_root, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        for (int begin = 0; begin < train_ds.count(); begin += cfg.batch_size) {
            const int end = std::min(train_ds.count(), begin + cfg.batch_size);
            const int b = end - begin;
            double batch_loss;

            if (threads == 1) {
                std::vector<int> labels;
                Tensor x = gather_batch(train_ds, order, begin, end, &labels);
                batch_loss = net.forward_backward(x, labels);
            } else {
                // Shard the batch contiguously; each worker computes the mean
                // gradient of its shard, then shards are recombined with
                // weights b_w/b in fixed worker order.
                std::vector<std::vector<ParamRef>> wparams(workers.size());
                for (std::size_t w = 0; w < workers.size(); ++w) {
                    wparams[w] = workers[w].params();
                    detail::copy_params(wparams[w], params);
                }
                std::vector<double> wloss(workers.size(), 0.0);
                std::vector<int> wcount(workers.size(), 0);
                std::vector<std::thread> pool;
                const int chunk = (b + threads - 1) / threads;
                for (int w = 0; w < threads; ++w) {
                    const int cb = begin + w * chunk;
                    const int ce = std::min(end, cb + chunk);
                    if (cb >= ce) break;
                    wcount[w] = ce - cb;
                    pool.emplace_back([&, w, cb, ce] {
                        std::vector<int> labels;
                        Tensor x = gather_batch(train_ds, order, cb, ce, &labels);
                        wloss[w] = workers[w].forward_backward(x, labels);
                    });
                }
                for (auto& t : pool) t.join();
                for (std::size_t i = 0; i < params.size(); ++i) params[i].grad->fill(0.0);
                batch_loss = 0.0;
                for (std::size_t w = 0; w < workers.size(); ++w) {
                    if (wcount[w] == 0) continue;
                    const double share = static_cast<double>(wcount[w]) / b;
                    batch_loss += share * wloss[w];
                    for (std::size_t i = 0; i < params.size(); ++i) {
                        double* dst = params[i].grad->data();
                        const double* src = wparams[w][i].grad->data();
                        for (int j = 0; j < params[i].grad->size(); ++j) dst[j] += share * src[j];
                    }
                }
            }

            if (!std::isfinite(batch_loss)) {
                if (!opt.checkpoint_path.empty()) {
                    save_checkpoint(opt.checkpoint_path + ".diverged", net, cfg);
                }
                std::ostringstream msg;
                msg << "train: non-finite loss at epoch " << epoch << " batch offset " << begin;
                if (!opt.checkpoint_path.empty()) {
                    msg << " (state dumped to " << opt.checkpoint_path << ".diverged)";
                }
                throw std::runtime_error(msg.str());
            }
            loss_sum += batch_loss * b;
            sgd.step(params);
        }

        const double train_loss = loss_sum / train_ds.count();
        const bool last = epoch + 1 == cfg.epochs;
        const bool do_eval =
            test_ds.count() > 0 && (last || (opt.eval_every > 0 && epoch % opt.eval_every == 0));
        double eval_error = std::numeric_limits<double>::quiet_NaN();
        if (do_eval) eval_error = evaluate(net, test_ds);

        EpochRow row{epoch, train_loss, eval_error, elapsed()};
        result.log.push_back(row);
        if (log) {
            log << row.epoch << ',' << row.train_loss << ',';
            if (std::isnan(row.eval_error)) {
                log << "";
            } else {
                log << row.eval_error;
            }
            log << ',' << row.wall_seconds << '\n';
            log.flush();
        }
        if (opt.verbose) {
            std::ostringstream line;
            line << "epoch " << epoch << " loss " << train_loss;
            if (!std::isnan(eval_error)) line << " err " << eval_error;
            line << " t " << row.wall_seconds << "s\n";
            std::fputs(line.str().c_str(), stderr);
        }
        result.final_train_loss = train_loss;
        if (!std::isnan(eval_error)) result.final_eval_error = eval_error;
    }

    if (!opt.checkpoint_path.empty()) save_checkpoint(opt.checkpoint_path, net, cfg);
    return result;
}

}  // namespace sicnn
