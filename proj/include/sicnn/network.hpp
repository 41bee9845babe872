#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sicnn/config.hpp"
#include "sicnn/layers.hpp"
#include "sicnn/rng.hpp"
#include "sicnn/tensor.hpp"

namespace sicnn {

/// One trainable tensor, exposed by name so the optimizer and the checkpoint
/// writer can walk the whole network uniformly.
struct ParamRef {
    std::string name;
    Tensor* value = nullptr;
    Tensor* grad = nullptr;
    bool decay = false;  // weight decay applies to weights, never biases
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x) = 0;
    virtual Tensor backward(const Tensor& g) = 0;
    virtual void collect_params(std::vector<ParamRef>& out) { (void)out; }
    virtual std::unique_ptr<Layer> clone() const = 0;
    virtual std::string describe() const = 0;
};

class ConvLayer final : public Layer {
public:
    ConvLayer(std::string name, int out_maps, int in_maps, int k)
        : name_(std::move(name)), params_(out_maps, in_maps, k) {}

    Tensor forward(const Tensor& x) override {
        cache_ = ConvCache{};
        return conv_forward(x, params_, &cache_);
    }

    Tensor backward(const Tensor& g) override {
        ConvGrads grads = conv_backward(g, cache_, params_);
        dweights_ = std::move(grads.dweights);
        dbias_ = std::move(grads.dbias);
        return std::move(grads.dx);
    }

    void collect_params(std::vector<ParamRef>& out) override {
        if (!dweights_.size()) dweights_ = Tensor::zeros_like(params_.weights);
        if (!dbias_.size()) dbias_ = Tensor::zeros_like(params_.bias);
        out.push_back({name_ + ".weights", &params_.weights, &dweights_, true});
        out.push_back({name_ + ".bias", &params_.bias, &dbias_, false});
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<ConvLayer>(*this); }
    std::string describe() const override { return name_; }
    ConvParams& params() { return params_; }

private:
    std::string name_;
    ConvParams params_;
    ConvCache cache_;
    Tensor dweights_, dbias_;
};

class SIConvLayer final : public Layer {
public:
    SIConvLayer(std::string name, std::vector<double> scales, int out_maps, int in_maps, int k)
        : name_(std::move(name)),
          cfg_(std::move(scales), ConvParams(out_maps, in_maps, k)),
          ops_(std::make_shared<OperatorCache>()) {}

    Tensor forward(const Tensor& x) override {
        cache_ = SIConvCache{};
        return siconv_forward(x, cfg_, *ops_, &cache_);
    }

    Tensor backward(const Tensor& g) override {
        ConvGrads grads = siconv_backward(g, cache_, cfg_);
        dweights_ = std::move(grads.dweights);
        dbias_ = std::move(grads.dbias);
        return std::move(grads.dx);
    }

    void collect_params(std::vector<ParamRef>& out) override {
        if (!dweights_.size()) dweights_ = Tensor::zeros_like(cfg_.conv.weights);
        if (!dbias_.size()) dbias_ = Tensor::zeros_like(cfg_.conv.bias);
        out.push_back({name_ + ".weights", &cfg_.conv.weights, &dweights_, true});
        out.push_back({name_ + ".bias", &cfg_.conv.bias, &dbias_, false});
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<SIConvLayer>(*this); }
    std::string describe() const override { return name_; }
    SIConvConfig& config() { return cfg_; }

private:
    std::string name_;
    SIConvConfig cfg_;
    std::shared_ptr<OperatorCache> ops_;  // shared across clones; operators are immutable
    SIConvCache cache_;
    Tensor dweights_, dbias_;
};

class ReluLayer final : public Layer {
public:
    explicit ReluLayer(std::string name) : name_(std::move(name)) {}
    Tensor forward(const Tensor& x) override {
        cache_ = ReluCache{};
        return relu_forward(x, &cache_);
    }
    Tensor backward(const Tensor& g) override { return relu_backward(g, cache_); }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(*this); }
    std::string describe() const override { return name_; }

private:
    std::string name_;
    ReluCache cache_;
};

class MaxPoolLayer final : public Layer {
public:
    MaxPoolLayer(std::string name, int window, int stride)
        : name_(std::move(name)), window_(window), stride_(stride) {}
    Tensor forward(const Tensor& x) override {
        cache_ = PoolCache{};
        return maxpool_forward(x, window_, stride_, &cache_);
    }
    Tensor backward(const Tensor& g) override { return maxpool_backward(g, cache_); }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPoolLayer>(*this); }
    std::string describe() const override { return name_; }

private:
    std::string name_;
    int window_, stride_;
    PoolCache cache_;
};

class FcLayer final : public Layer {
public:
    FcLayer(std::string name, int out_features, int in_features)
        : name_(std::move(name)), params_(out_features, in_features) {}

    Tensor forward(const Tensor& x) override {
        cache_ = FcCache{};
        in_shape_ = x.shape();
        return fc_forward(x, params_, &cache_);
    }

    Tensor backward(const Tensor& g) override {
        FcGrads grads = fc_backward(g, cache_, params_);
        dweights_ = std::move(grads.dweights);
        dbias_ = std::move(grads.dbias);
        // dx comes back flattened; restore the caller's layout.
        Tensor dx(in_shape_);
        std::copy(grads.dx.data(), grads.dx.data() + grads.dx.size(), dx.data());
        return dx;
    }

    void collect_params(std::vector<ParamRef>& out) override {
        if (!dweights_.size()) dweights_ = Tensor::zeros_like(params_.weights);
        if (!dbias_.size()) dbias_ = Tensor::zeros_like(params_.bias);
        out.push_back({name_ + ".weights", &params_.weights, &dweights_, true});
        out.push_back({name_ + ".bias", &params_.bias, &dbias_, false});
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<FcLayer>(*this); }
    std::string describe() const override { return name_; }
    FcParams& params() { return params_; }

private:
    std::string name_;
    FcParams params_;
    FcCache cache_;
    Shape in_shape_;
    Tensor dweights_, dbias_;
};

class Network {
public:
    Network() = default;
    Network(const Network& other) {
        layers_.reserve(other.layers_.size());
        for (const auto& l : other.layers_) layers_.push_back(l->clone());
        mean_ = other.mean_;
    }
    Network& operator=(const Network& other) {
        if (this != &other) {
            Network tmp(other);
            *this = std::move(tmp);
        }
        return *this;
    }
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

    /// Run only the first `upto` layers; used to tap intermediate activations.
    Tensor forward_prefix(const Tensor& x, std::size_t upto) {
        Tensor h = x;
        for (std::size_t i = 0; i < upto && i < layers_.size(); ++i) {
            h = layers_[i]->forward(h);
        }
        return h;
    }

    Tensor forward(const Tensor& x) {
        Tensor h = x;
        for (auto& l : layers_) h = l->forward(h);
        return h;
    }

    /// Returns mean cross-entropy over the batch and leaves per-layer
    /// parameter gradients populated.
    double forward_backward(const Tensor& x, const std::vector<int>& labels) {
        Tensor logits = forward(x);
        SoftmaxResult sm = softmax_loss(logits, labels);
        Tensor g = std::move(sm.dlogits);
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
        return sm.loss;
    }

    std::vector<ParamRef> params() {
        std::vector<ParamRef> out;
        for (auto& l : layers_) l->collect_params(out);
        return out;
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (const auto& p : params()) n += p.value->size();
        return n;
    }

    Tensor& mean() { return mean_; }
    const Tensor& mean() const { return mean_; }
    std::size_t layer_count() const { return layers_.size(); }
    Layer& layer(std::size_t i) { return *layers_.at(i); }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
    Tensor mean_;  // per-pixel train mean subtracted before the first layer
};

inline int pooled_extent(int n, int window, int stride) {
    return (n - window) / stride + 1;
}

/// Spatial footprint after the two conv+pool stages; the FC input size
/// follows from it.
struct NetShapePlan {
    int conv1_out, pool1_out, conv2_out, pool2_out, fc_in;
};

inline NetShapePlan plan_shapes(const ExperimentConfig& cfg) {
    NetShapePlan p{};
    p.conv1_out = cfg.canvas - cfg.kernel1 + 1;
    const int pool1_window = 2, pool1_stride = 2;
    p.pool1_out = pooled_extent(p.conv1_out, pool1_window, pool1_stride);
    p.conv2_out = p.pool1_out - cfg.kernel2 + 1;
    const int pool2_window = 3, pool2_stride = 3;
    p.pool2_out = pooled_extent(p.conv2_out, pool2_window, pool2_stride);
    if (p.conv1_out < 1 || p.pool1_out < 1 || p.conv2_out < 1 || p.pool2_out < 1) {
        throw std::invalid_argument("network: canvas too small for kernel/pool plan");
    }
    p.fc_in = cfg.maps2 * p.pool2_out * p.pool2_out;
    return p;
}

inline void glorot_init(Tensor& w, int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    double* d = w.data();
    for (int i = 0; i < w.size(); ++i) d[i] = rng.uniform(-limit, limit);
}

/// Builds conv/siconv twins that differ only in whether the first two conv
/// stages pool over rescaled copies. Parameter shapes and counts match.
inline Network build_network(const ExperimentConfig& cfg) {
    const NetShapePlan plan = plan_shapes(cfg);
    const bool si = cfg.arch == "siconv";
    std::vector<double> scales;
    if (si) scales = cfg.scale_list();

    Network net;
    if (si) {
        net.add(std::make_unique<SIConvLayer>("conv1", scales, cfg.maps1, 1, cfg.kernel1));
    } else {
        net.add(std::make_unique<ConvLayer>("conv1", cfg.maps1, 1, cfg.kernel1));
    }
    net.add(std::make_unique<ReluLayer>("relu1"));
    net.add(std::make_unique<MaxPoolLayer>("pool1", 2, 2));
    if (si) {
        net.add(std::make_unique<SIConvLayer>("conv2", scales, cfg.maps2, cfg.maps1, cfg.kernel2));
    } else {
        net.add(std::make_unique<ConvLayer>("conv2", cfg.maps2, cfg.maps1, cfg.kernel2));
    }
    net.add(std::make_unique<ReluLayer>("relu2"));
    net.add(std::make_unique<MaxPoolLayer>("pool2", 3, 3));
    net.add(std::make_unique<FcLayer>("fc1", cfg.fc_hidden, plan.fc_in));
    net.add(std::make_unique<ReluLayer>("relu3"));
    net.add(std::make_unique<FcLayer>("fc2", 10, cfg.fc_hidden));

    Rng rng(derive_seed(cfg.seed, "init"));
    for (ParamRef& p : net.params()) {
        if (!p.decay) continue;  // biases start at zero
        const Shape& s = p.value->shape();
        int fan_in = 1, fan_out = 1;
        if (s.size() == 4) {
            fan_in = s[1] * s[2] * s[3];
            fan_out = s[0] * s[2] * s[3];
        } else if (s.size() == 2) {
            fan_in = s[1];
            fan_out = s[0];
        }
        glorot_init(*p.value, fan_in, fan_out, rng);
    }
    return net;
}

// ---------------------------------------------------------------------------
// Checkpoint: text header describing every tensor, then one flat block of
// little-endian float64 payload in header order.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, Network& net,
                            const ExperimentConfig& cfg) {
    std::ostringstream header;
    header << "SICNN-CHECKPOINT v1\n";
    {
        std::istringstream cfg_lines(config_to_text(cfg));
        std::string line;
        while (std::getline(cfg_lines, line)) header << "config " << line << "\n";
    }
    std::vector<ParamRef> refs = net.params();
    std::vector<const Tensor*> payload;
    std::int64_t offset = 0;
    auto describe = [&](const std::string& name, const Tensor& t) {
        header << "param " << name << " ";
        const Shape& s = t.shape();
        for (std::size_t i = 0; i < s.size(); ++i) header << (i ? "x" : "") << s[i];
        header << " offset " << offset << "\n";
        payload.push_back(&t);
        offset += static_cast<std::int64_t>(t.size()) * 8;
    };
    if (net.mean().size()) describe("preprocess.mean", net.mean());
    for (const ParamRef& p : refs) describe(p.name, *p.value);
    header << "end\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const Tensor* t : payload) {
        out.write(reinterpret_cast<const char*>(t->data()),
                  static_cast<std::streamsize>(t->size()) * 8);
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

struct Checkpoint {
    ExperimentConfig config;
    Network network;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "SICNN-CHECKPOINT v1") {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    std::string config_text;
    struct Entry {
        std::string name;
        Shape shape;
        std::int64_t offset;
    };
    std::vector<Entry> entries;
    while (std::getline(in, line)) {
        if (line == "end") break;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "config") {
            std::string rest;
            std::getline(ls, rest);
            if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
            config_text += rest + "\n";
        } else if (tag == "param") {
            Entry e;
            std::string dims, kw;
            if (!(ls >> e.name >> dims >> kw >> e.offset) || kw != "offset") {
                throw std::runtime_error("checkpoint: malformed param line: " + line);
            }
            std::istringstream ds(dims);
            std::string d;
            while (std::getline(ds, d, 'x')) e.shape.push_back(std::stoi(d));
            entries.push_back(std::move(e));
        } else {
            throw std::runtime_error("checkpoint: unexpected header line: " + line);
        }
    }
    const std::streampos payload_start = in.tellg();

    Checkpoint ck;
    ck.config = parse_config_text(config_text, path + " (embedded config)");
    ck.network = build_network(ck.config);

    auto read_into = [&](Tensor& t, const Entry& e) {
        if (t.shape() != e.shape) {
            throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
        }
        in.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size()) * 8);
        if (!in) throw std::runtime_error("checkpoint: truncated payload for " + e.name);
    };

    std::vector<ParamRef> refs = ck.network.params();
    for (const Entry& e : entries) {
        if (e.name == "preprocess.mean") {
            ck.network.mean() = Tensor(e.shape);
            read_into(ck.network.mean(), e);
            continue;
        }
        bool found = false;
        for (ParamRef& p : refs) {
            if (p.name == e.name) {
                read_into(*p.value, e);
                found = true;
                break;
            }
        }
        if (!found) throw std::runtime_error("checkpoint: unknown param " + e.name);
    }
    return ck;
}

}  // namespace sicnn
