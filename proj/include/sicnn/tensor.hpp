#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sicnn {

using Shape = std::vector<int>;

inline std::string shape_to_string(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

/// Dense row-major array of 64-bit floats. 4-D tensors use
/// (batch, channels, height, width) order; lower ranks drop leading dims.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        for (int e : shape_) {
            if (e < 1) {
                throw std::invalid_argument("Tensor: non-positive extent in shape " +
                                            shape_to_string(shape_));
            }
        }
        data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
    }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    double& at(int i) { return data_[static_cast<std::size_t>(i)]; }
    double at(int i) const { return data_[static_cast<std::size_t>(i)]; }
    double& at(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
    double at(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
    double& at(int i, int j, int k) {
        return data_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    double at(int i, int j, int k) const {
        return data_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    double& at(int i, int j, int k, int l) {
        return data_[((static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
    }
    double at(int i, int j, int k, int l) const {
        return data_[((static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
    }

    void fill(double v) { data_.assign(data_.size(), v); }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    /// NaN/Inf is a hard error at engine boundaries, never propagated silently.
    void require_finite(const std::string& context) const {
        if (!all_finite()) {
            throw std::runtime_error("non-finite values in " + context);
        }
    }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
    }
}

enum class EwOp { Add, Sub, Mul, Max };

inline Tensor elementwise(const Tensor& a, const Tensor& b, EwOp op) {
    require_same_shape(a, b, "elementwise");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const std::int64_t n = a.size();
    switch (op) {
        case EwOp::Add:
            for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case EwOp::Sub:
            for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
            break;
        case EwOp::Mul:
            for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
        case EwOp::Max:
            for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] > pb[i] ? pa[i] : pb[i];
            break;
    }
    return out;
}

/// Per-position index of the winning tensor in an argmax over a stack.
struct IndexTensor {
    Shape shape;
    std::vector<std::int32_t> idx;
};

struct ArgmaxStackResult {
    Tensor values;
    IndexTensor indices;
};

/// Per-position max over a stack of same-shaped tensors.
/// Ties go to the lowest stack index so backprop routing is deterministic.
inline ArgmaxStackResult argmax_stack(const std::vector<Tensor>& stack) {
    if (stack.empty()) throw std::invalid_argument("argmax_stack: empty stack");
    for (std::size_t i = 1; i < stack.size(); ++i) {
        require_same_shape(stack[0], stack[i], "argmax_stack");
    }
    ArgmaxStackResult r;
    r.values = stack[0];
    r.indices.shape = stack[0].shape();
    r.indices.idx.assign(static_cast<std::size_t>(stack[0].size()), 0);
    const std::int64_t n = stack[0].size();
    for (std::size_t s = 1; s < stack.size(); ++s) {
        const double* ps = stack[s].data();
        double* pv = r.values.data();
        std::int32_t* pi = r.indices.idx.data();
        for (std::int64_t i = 0; i < n; ++i) {
            if (ps[i] > pv[i]) {
                pv[i] = ps[i];
                pi[i] = static_cast<std::int32_t>(s);
            }
        }
    }
    return r;
}

}  // namespace sicnn
