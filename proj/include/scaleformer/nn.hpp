#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "scaleformer/ops.hpp"
#include "scaleformer/rng.hpp"

namespace scaleformer {

// Named view over a module tree's tensors. Params are optimized and
// checkpointed; buffers (BN running stats) are checkpointed only.
template <typename T>
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor<T>>> params;
    std::vector<std::pair<std::string, Tensor<T>>> buffers;

    void param(const std::string& name, const Tensor<T>& t) { params.emplace_back(name, t); }
    void buffer(const std::string& name, const Tensor<T>& t) { buffers.emplace_back(name, t); }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params) n += t.numel();
        return n;
    }
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

// A tensor with NCHW semantics plus the encoder stage it belongs to.
template <typename T>
struct FeatureMap {
    Tensor<T> map;
    int stage = 0;

    int64_t batch() const { return map.dim(0); }
    int64_t channels() const { return map.dim(1); }
    int64_t height() const { return map.dim(2); }
    int64_t width() const { return map.dim(3); }
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> uniform_init(const Shape& shape, double bound, Rng& rng) {
    std::vector<T> data(static_cast<size_t>(numel_of(shape)));
    for (T& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from_data(shape, std::move(data), true);
}

template <typename T>
Tensor<T> kaiming_uniform(const Shape& shape, int64_t fan_in, Rng& rng) {
    return uniform_init<T>(shape, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

template <typename T>
Tensor<T> xavier_uniform(const Shape& shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
    return uniform_init<T>(shape, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

enum class InitKind { kKaiming, kXavier };

template <typename T>
struct Linear {
    Tensor<T> weight;  // (in, out)
    Tensor<T> bias;    // (out) — undefined when bias-free

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool with_bias = true, InitKind init = InitKind::kXavier) {
        weight = init == InitKind::kXavier ? xavier_uniform<T>({in, out}, in, out, rng)
                                           : kaiming_uniform<T>({in, out}, in, rng);
        if (with_bias) bias = Tensor<T>::zeros({out}, true);
    }

    // x: (rows, in)
    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> y = matmul(x, weight);
        return bias.defined() ? add_bias(y, bias) : y;
    }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        reg.param(join_name(prefix, "weight"), weight);
        if (bias.defined()) reg.param(join_name(prefix, "bias"), bias);
    }
};

template <typename T>
struct Conv2d {
    Tensor<T> weight;  // (OC, IC/groups, KH, KW)
    Tensor<T> bias;
    int64_t stride = 1;
    int64_t pad_h = 0;
    int64_t pad_w = 0;
    int64_t groups = 1;

    Conv2d() = default;
    Conv2d(int64_t in, int64_t out, int64_t kh, int64_t kw, int64_t stride_, int64_t pad_h_, int64_t pad_w_,
           int64_t groups_, Rng& rng, bool with_bias = true)
        : stride(stride_), pad_h(pad_h_), pad_w(pad_w_), groups(groups_) {
        require_config(in % groups == 0 && out % groups == 0, "conv2d: channels not divisible by groups");
        const int64_t fan_in = (in / groups) * kh * kw;
        weight = kaiming_uniform<T>({out, in / groups, kh, kw}, fan_in, rng);
        if (with_bias) bias = Tensor<T>::zeros({out}, true);
    }

    static Conv2d square(int64_t in, int64_t out, int64_t k, int64_t stride, int64_t pad, Rng& rng,
                         bool with_bias = true) {
        return Conv2d(in, out, k, k, stride, pad, pad, 1, rng, with_bias);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return conv2d(x, weight, bias.defined() ? &bias : nullptr, stride, pad_h, pad_w, groups);
    }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        reg.param(join_name(prefix, "weight"), weight);
        if (bias.defined()) reg.param(join_name(prefix, "bias"), bias);
    }
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gamma, beta;
    mutable Tensor<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm2d() = default;
    explicit BatchNorm2d(int64_t channels) {
        gamma = Tensor<T>::ones({channels}, true);
        beta = Tensor<T>::zeros({channels}, true);
        running_mean = Tensor<T>::zeros({channels});
        running_var = Tensor<T>::ones({channels});
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) const {
        return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
    }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        reg.param(join_name(prefix, "gamma"), gamma);
        reg.param(join_name(prefix, "beta"), beta);
        reg.buffer(join_name(prefix, "running_mean"), running_mean);
        reg.buffer(join_name(prefix, "running_var"), running_var);
    }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gamma, beta;
    T eps = T(1e-5);

    LayerNorm() = default;
    explicit LayerNorm(int64_t dim) {
        gamma = Tensor<T>::ones({dim}, true);
        beta = Tensor<T>::zeros({dim}, true);
    }

    Tensor<T> forward(const Tensor<T>& x, int axis) const { return layer_norm(x, gamma, beta, axis, eps); }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        reg.param(join_name(prefix, "gamma"), gamma);
        reg.param(join_name(prefix, "beta"), beta);
    }
};

// ---------------------------------------------------------------------------
// Token layout helpers: NCHW feature map <-> (B, HW, C) token sequence.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
    require_shape(x.rank() == 4, "to_tokens: NCHW tensor expected");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    return reshape(transpose(x, {0, 2, 3, 1}), {B, H * W, C});
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& t, int64_t h, int64_t w) {
    require_shape(t.rank() == 3 && t.dim(1) == h * w, "from_tokens: token count disagrees with spatial size");
    const int64_t B = t.dim(0), C = t.dim(2);
    return transpose(reshape(t, {B, h, w, C}), {0, 3, 1, 2});
}

// (N, L, C) -> (N*heads, L, C/heads)
template <typename T>
Tensor<T> split_heads(const Tensor<T>& t, int64_t heads) {
    const int64_t N = t.dim(0), L = t.dim(1), C = t.dim(2);
    require_config(C % heads == 0, "split_heads: channels not divisible by head count");
    const int64_t dk = C / heads;
    return reshape(transpose(reshape(t, {N, L, heads, dk}), {0, 2, 1, 3}), {N * heads, L, dk});
}

// (N*heads, L, dk) -> (N, L, heads*dk)
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& t, int64_t heads) {
    const int64_t NH = t.dim(0), L = t.dim(1), dk = t.dim(2);
    require_shape(NH % heads == 0, "merge_heads: bad head count");
    const int64_t N = NH / heads;
    return reshape(transpose(reshape(t, {N, heads, L, dk}), {0, 2, 1, 3}), {N, L, heads * dk});
}

}  // namespace scaleformer
