#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "scaleformer/profiling.hpp"
#include "scaleformer/tensor.hpp"

namespace scaleformer {

namespace detail {

inline int normalize_axis(int axis, int rank) {
    if (axis < 0) axis += rank;
    require_shape(axis >= 0 && axis < rank, "axis out of range");
    return axis;
}

// outer * n * inner decomposition around one axis.
inline void axis_spans(const Shape& shape, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    n = shape[static_cast<size_t>(axis)];
    inner = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

// c[i,j] += sum_p a[i,p] * b[p,j]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[i,j] += sum_p a[i,p] * b[j,p]   (b used transposed)
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c[i,j] += sum_p a[p,i] * b[p,j]   (a used transposed)
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
std::vector<int64_t> strides_of(const Shape& shape) {
    std::vector<int64_t> st(shape.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= shape[static_cast<size_t>(i)];
    }
    return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    auto an = a.node(), bn = b.node();
    return make_op<T>(a.shape(), std::move(out), "add", {a, b}, [an, bn](detail::TensorNode<T>& self) {
        if (an->requires_grad) {
            auto& g = grad_of(an);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_of(bn);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.shape() == b.shape(), "sub: shape mismatch");
    std::vector<T> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    auto an = a.node(), bn = b.node();
    return make_op<T>(a.shape(), std::move(out), "sub", {a, b}, [an, bn](detail::TensorNode<T>& self) {
        if (an->requires_grad) {
            auto& g = grad_of(an);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_of(bn);
            for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.shape() == b.shape(), "mul: shape mismatch");
    std::vector<T> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    auto an = a.node(), bn = b.node();
    return make_op<T>(a.shape(), std::move(out), "mul", {a, b}, [an, bn](detail::TensorNode<T>& self) {
        if (an->requires_grad) {
            auto& g = grad_of(an);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_of(bn);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
        }
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.shape() == b.shape(), "div: shape mismatch");
    std::vector<T> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
    auto an = a.node(), bn = b.node();
    return make_op<T>(a.shape(), std::move(out), "div", {a, b}, [an, bn](detail::TensorNode<T>& self) {
        if (an->requires_grad) {
            auto& g = grad_of(an);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_of(bn);
            for (size_t i = 0; i < g.size(); ++i) {
                const T bvv = bn->value[i];
                g[i] -= self.grad[i] * an->value[i] / (bvv * bvv);
            }
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    std::vector<T> out(x.data());
    for (T& v : out) v *= c;
    auto xn = x.node();
    return make_op<T>(x.shape(), std::move(out), "scale", {x}, [xn, c](detail::TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = grad_of(xn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    std::vector<T> out(x.data());
    for (T& v : out) v += c;
    auto xn = x.node();
    return make_op<T>(x.shape(), std::move(out), "add_scalar", {x}, [xn](detail::TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = grad_of(xn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// x rank >= 2, bias length == last dim; bias broadcast over leading dims.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    require_shape(bias.rank() == 1 && bias.numel() == x.shape().back(), "add_bias: bias must match last dim");
    const int64_t n = bias.numel();
    const int64_t rows = x.numel() / n;
    std::vector<T> out(x.data());
    const auto& bv = bias.data();
    for (int64_t r = 0; r < rows; ++r) {
        T* row = out.data() + r * n;
        for (int64_t j = 0; j < n; ++j) row[j] += bv[j];
    }
    auto xn = x.node(), bn = bias.node();
    return make_op<T>(x.shape(), std::move(out), "add_bias", {x, bias}, [xn, bn, rows, n](detail::TensorNode<T>& self) {
        if (xn->requires_grad) {
            auto& g = grad_of(xn);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_of(bn);
            for (int64_t r = 0; r < rows; ++r) {
                const T* row = self.grad.data() + r * n;
                for (int64_t j = 0; j < n; ++j) g[static_cast<size_t>(j)] += row[j];
            }
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.data());
    for (T& v : out) v = v > T(0) ? v : T(0);
    auto xn = x.node();
    return make_op<T>(x.shape(), std::move(out), "relu", {x}, [xn](detail::TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = grad_of(xn);
        for (size_t i = 0; i < g.size(); ++i) {
            if (xn->value[i] > T(0)) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    std::vector<T> out(x.data());
    for (T& v : out) {
        const double d = static_cast<double>(v);
        v = static_cast<T>(0.5 * d * (1.0 + std::erf(d * kInvSqrt2)));
    }
    auto xn = x.node();
    return make_op<T>(x.shape(), std::move(out), "gelu", {x}, [xn](detail::TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = grad_of(xn);
        for (size_t i = 0; i < g.size(); ++i) {
            const double d = static_cast<double>(xn->value[i]);
            const double cdf = 0.5 * (1.0 + std::erf(d * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * d * d);
            g[i] += self.grad[i] * static_cast<T>(cdf + d * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors expected");
    require_shape(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(static_cast<size_t>(m * n), T(0));
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    profiling::add_macs(static_cast<uint64_t>(m) * static_cast<uint64_t>(k) * static_cast<uint64_t>(n));
    auto an = a.node(), bn = b.node();
    return make_op<T>({m, n}, std::move(out), "matmul", {a, b}, [an, bn, m, k, n](detail::TensorNode<T>& self) {
        if (an->requires_grad) detail::gemm_nt(self.grad.data(), bn->value.data(), grad_of(an).data(), m, n, k);
        if (bn->requires_grad) detail::gemm_tn(an->value.data(), self.grad.data(), grad_of(bn).data(), k, m, n);
    });
}

// Batched matmul: (N,m,k) x (N,k,n) -> (N,m,n).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.rank() == 3 && b.rank() == 3, "bmm: rank-3 tensors expected");
    require_shape(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "bmm: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<T> out(static_cast<size_t>(nb * m * n), T(0));
    for (int64_t i = 0; i < nb; ++i) {
        detail::gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, m, k, n);
    }
    profiling::add_macs(static_cast<uint64_t>(nb) * static_cast<uint64_t>(m) * static_cast<uint64_t>(k) *
                        static_cast<uint64_t>(n));
    auto an = a.node(), bn = b.node();
    return make_op<T>({nb, m, n}, std::move(out), "bmm", {a, b}, [an, bn, nb, m, k, n](detail::TensorNode<T>& self) {
        for (int64_t i = 0; i < nb; ++i) {
            const T* g = self.grad.data() + i * m * n;
            if (an->requires_grad) detail::gemm_nt(g, bn->value.data() + i * k * n, grad_of(an).data() + i * m * k, m, n, k);
            if (bn->requires_grad) detail::gemm_tn(an->value.data() + i * m * k, g, grad_of(bn).data() + i * k * n, k, m, n);
        }
    });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    require_shape(numel_of(shape) == x.numel(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto xn = x.node();
    return make_op<T>(std::move(shape), std::vector<T>(x.data()), "reshape", {x}, [xn](detail::TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = grad_of(xn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

namespace detail {
template <typename T>
void permute_copy(const T* src, T* dst, const Shape& in_shape, const std::vector<int>& perm) {
    const int r = static_cast<int>(in_shape.size());
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    const auto in_strides = strides_of<T>(in_shape);
    std::vector<int64_t> src_stride_for_out(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) src_stride_for_out[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    const int64_t total = numel_of(in_shape);
    int64_t src_off = 0;
    for (int64_t o = 0; o < total; ++o) {
        dst[o] = src[src_off];
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            src_off += src_stride_for_out[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
            src_off -= idx[static_cast<size_t>(d)] * src_stride_for_out[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}
}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    require_shape(static_cast<int>(perm.size()) == r, "transpose: permutation rank mismatch");
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
    std::vector<T> out(static_cast<size_t>(x.numel()));
    detail::permute_copy(x.data().data(), out.data(), x.shape(), perm);
    std::vector<int> inv(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
    auto xn = x.node();
    Shape self_shape = out_shape;
    return make_op<T>(std::move(out_shape), std::move(out), "transpose", {x},
                      [xn, inv, self_shape](detail::TensorNode<T>& self) {
                          if (!xn->requires_grad) return;
                          std::vector<T> gi(self.grad.size());
                          detail::permute_copy(self.grad.data(), gi.data(), self_shape, inv);
                          auto& g = grad_of(xn);
                          for (size_t i = 0; i < g.size(); ++i) g[i] += gi[i];
                      });
}

// Swaps the last two axes of a rank-3 tensor (K^T in attention scores).
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    require_shape(x.rank() == 3, "transpose_last2: rank-3 expected");
    return transpose(x, {0, 2, 1});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    require(!parts.empty(), "concat: no inputs");
    const int r = parts[0].rank();
    const int ax = detail::normalize_axis(axis, r);
    Shape out_shape = parts[0].shape();
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        require_shape(p.rank() == r, "concat: rank mismatch");
        for (int i = 0; i < r; ++i) {
            if (i != ax) require_shape(p.dim(i) == out_shape[static_cast<size_t>(i)], "concat: shape mismatch off-axis");
        }
        total_axis += p.dim(ax);
    }
    out_shape[static_cast<size_t>(ax)] = total_axis;
    int64_t outer, n_out, inner;
    detail::axis_spans(out_shape, ax, outer, n_out, inner);
    std::vector<T> out(static_cast<size_t>(numel_of(out_shape)));
    std::vector<int64_t> offsets;  // start of each part along the axis
    int64_t cursor = 0;
    for (const auto& p : parts) {
        offsets.push_back(cursor);
        const int64_t np = p.dim(ax);
        const T* src = p.data().data();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * n_out + cursor) * inner, src + o * np * inner,
                        static_cast<size_t>(np * inner) * sizeof(T));
        }
        cursor += np;
    }
    std::vector<std::shared_ptr<detail::TensorNode<T>>> pnodes;
    std::vector<int64_t> psizes;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        psizes.push_back(p.dim(ax));
    }
    return make_op<T>(out_shape, std::move(out), "concat", parts,
                      [pnodes, psizes, offsets, outer, n_out, inner](detail::TensorNode<T>& self) {
                          for (size_t pi = 0; pi < pnodes.size(); ++pi) {
                              if (!pnodes[pi]->requires_grad) continue;
                              auto& g = grad_of(pnodes[pi]);
                              const int64_t np = psizes[pi];
                              for (int64_t o = 0; o < outer; ++o) {
                                  const T* src = self.grad.data() + (o * n_out + offsets[pi]) * inner;
                                  T* dst = g.data() + o * np * inner;
                                  for (int64_t j = 0; j < np * inner; ++j) dst[j] += src[j];
                              }
                          }
                      });
}

// Splits along an axis into pieces of the given sizes.
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<int64_t>& sizes) {
    const int ax = detail::normalize_axis(axis, x.rank());
    int64_t total = 0;
    for (int64_t s : sizes) total += s;
    require(total == x.dim(ax), "split: sizes do not sum to axis length");
    int64_t outer, n, inner;
    detail::axis_spans(x.shape(), ax, outer, n, inner);
    std::vector<Tensor<T>> pieces;
    int64_t start = 0;
    auto xn = x.node();
    for (int64_t s : sizes) {
        Shape pshape = x.shape();
        pshape[static_cast<size_t>(ax)] = s;
        std::vector<T> out(static_cast<size_t>(outer * s * inner));
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + o * s * inner, x.data().data() + (o * n + start) * inner,
                        static_cast<size_t>(s * inner) * sizeof(T));
        }
        const int64_t piece_start = start;
        pieces.push_back(make_op<T>(pshape, std::move(out), "split", {x},
                                    [xn, piece_start, s, outer, n, inner](detail::TensorNode<T>& self) {
                                        if (!xn->requires_grad) return;
                                        auto& g = grad_of(xn);
                                        for (int64_t o = 0; o < outer; ++o) {
                                            const T* src = self.grad.data() + o * s * inner;
                                            T* dst = g.data() + (o * n + piece_start) * inner;
                                            for (int64_t j = 0; j < s * inner; ++j) dst[j] += src[j];
                                        }
                                    }));
        start += s;
    }
    return pieces;
}

template <typename T>
std::vector<Tensor<T>> split_equal(const Tensor<T>& x, int axis, int64_t parts) {
    const int ax = detail::normalize_axis(axis, x.rank());
    require_shape(x.dim(ax) % parts == 0, "split_equal: axis not divisible");
    return split(x, ax, std::vector<int64_t>(static_cast<size_t>(parts), x.dim(ax) / parts));
}

// ---------------------------------------------------------------------------
// Reductions, normalizations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = 0;
    for (const T v : x.data()) acc += v;  // fixed memory order
    auto xn = x.node();
    return make_op<T>({1}, {acc}, "sum", {x}, [xn](detail::TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = grad_of(xn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis, bool keepdim = true) {
    const int ax = detail::normalize_axis(axis, x.rank());
    int64_t outer, n, inner;
    detail::axis_spans(x.shape(), ax, outer, n, inner);
    std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
    const T* src = x.data().data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t k = 0; k < n; ++k) {
            const T* row = src + (o * n + k) * inner;
            T* dst = out.data() + o * inner;
            for (int64_t j = 0; j < inner; ++j) dst[j] += row[j];
        }
    }
    const T invn = T(1) / static_cast<T>(n);
    for (T& v : out) v *= invn;
    Shape out_shape = x.shape();
    if (keepdim) {
        out_shape[static_cast<size_t>(ax)] = 1;
    } else {
        out_shape.erase(out_shape.begin() + ax);
    }
    auto xn = x.node();
    return make_op<T>(std::move(out_shape), std::move(out), "mean_axis", {x},
                      [xn, outer, n, inner, invn](detail::TensorNode<T>& self) {
                          if (!xn->requires_grad) return;
                          auto& g = grad_of(xn);
                          for (int64_t o = 0; o < outer; ++o) {
                              const T* gs = self.grad.data() + o * inner;
                              for (int64_t k = 0; k < n; ++k) {
                                  T* dst = g.data() + (o * n + k) * inner;
                                  for (int64_t j = 0; j < inner; ++j) dst[j] += gs[j] * invn;
                              }
                          }
                      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const int ax = detail::normalize_axis(axis, x.rank());
    int64_t outer, n, inner;
    detail::axis_spans(x.shape(), ax, outer, n, inner);
    std::vector<T> out(x.data());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t j = 0; j < inner; ++j) {
            T* base = out.data() + o * n * inner + j;
            T m = base[0];
            for (int64_t k = 1; k < n; ++k) m = std::max(m, base[k * inner]);
            T s = 0;
            for (int64_t k = 0; k < n; ++k) {
                const T e = std::exp(base[k * inner] - m);
                base[k * inner] = e;
                s += e;
            }
            const T invs = T(1) / s;
            for (int64_t k = 0; k < n; ++k) base[k * inner] *= invs;
        }
    }
    auto xn = x.node();
    return make_op<T>(x.shape(), std::move(out), "softmax", {x},
                      [xn, outer, n, inner](detail::TensorNode<T>& self) {
                          if (!xn->requires_grad) return;
                          auto& g = grad_of(xn);
                          for (int64_t o = 0; o < outer; ++o) {
                              for (int64_t j = 0; j < inner; ++j) {
                                  const int64_t off = o * n * inner + j;
                                  T dot = 0;
                                  for (int64_t k = 0; k < n; ++k) dot += self.grad[off + k * inner] * self.value[off + k * inner];
                                  for (int64_t k = 0; k < n; ++k) {
                                      const int64_t p = off + k * inner;
                                      g[static_cast<size_t>(p)] += self.value[p] * (self.grad[p] - dot);
                                  }
                              }
                          }
                      });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
    const int ax = detail::normalize_axis(axis, x.rank());
    int64_t outer, n, inner;
    detail::axis_spans(x.shape(), ax, outer, n, inner);
    std::vector<T> out(x.data());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t j = 0; j < inner; ++j) {
            T* base = out.data() + o * n * inner + j;
            T m = base[0];
            for (int64_t k = 1; k < n; ++k) m = std::max(m, base[k * inner]);
            T s = 0;
            for (int64_t k = 0; k < n; ++k) s += std::exp(base[k * inner] - m);
            const T lse = m + std::log(s);
            for (int64_t k = 0; k < n; ++k) base[k * inner] -= lse;
        }
    }
    auto xn = x.node();
    return make_op<T>(x.shape(), std::move(out), "log_softmax", {x},
                      [xn, outer, n, inner](detail::TensorNode<T>& self) {
                          if (!xn->requires_grad) return;
                          auto& g = grad_of(xn);
                          for (int64_t o = 0; o < outer; ++o) {
                              for (int64_t j = 0; j < inner; ++j) {
                                  const int64_t off = o * n * inner + j;
                                  T gsum = 0;
                                  for (int64_t k = 0; k < n; ++k) gsum += self.grad[off + k * inner];
                                  for (int64_t k = 0; k < n; ++k) {
                                      const int64_t p = off + k * inner;
                                      g[static_cast<size_t>(p)] += self.grad[p] - std::exp(self.value[p]) * gsum;
                                  }
                              }
                          }
                      });
}

// Normalizes along one axis; gamma/beta indexed along that axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int axis, T eps = T(1e-5)) {
    const int ax = detail::normalize_axis(axis, x.rank());
    int64_t outer, n, inner;
    detail::axis_spans(x.shape(), ax, outer, n, inner);
    require_shape(gamma.numel() == n && beta.numel() == n, "layer_norm: affine params must match axis length");
    std::vector<T> out(static_cast<size_t>(x.numel()));
    std::vector<T> xhat(static_cast<size_t>(x.numel()));
    std::vector<T> inv_std(static_cast<size_t>(outer * inner));
    const T* src = x.data().data();
    const T* gm = gamma.data().data();
    const T* bt = beta.data().data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t j = 0; j < inner; ++j) {
            const int64_t off = o * n * inner + j;
            T mean = 0;
            for (int64_t k = 0; k < n; ++k) mean += src[off + k * inner];
            mean /= static_cast<T>(n);
            T var = 0;
            for (int64_t k = 0; k < n; ++k) {
                const T d = src[off + k * inner] - mean;
                var += d * d;
            }
            var /= static_cast<T>(n);
            const T istd = T(1) / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(o * inner + j)] = istd;
            for (int64_t k = 0; k < n; ++k) {
                const T h = (src[off + k * inner] - mean) * istd;
                xhat[static_cast<size_t>(off + k * inner)] = h;
                out[static_cast<size_t>(off + k * inner)] = gm[k] * h + bt[k];
            }
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_op<T>(x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
                      [xn, gn, bn, outer, n, inner, xh = std::move(xhat),
                       istdv = std::move(inv_std)](detail::TensorNode<T>& self) {
                          const T invn = T(1) / static_cast<T>(n);
                          for (int64_t o = 0; o < outer; ++o) {
                              for (int64_t j = 0; j < inner; ++j) {
                                  const int64_t off = o * n * inner + j;
                                  const T istd = istdv[static_cast<size_t>(o * inner + j)];
                                  T sum_dxhat = 0, sum_dxhat_xhat = 0;
                                  for (int64_t k = 0; k < n; ++k) {
                                      const int64_t p = off + k * inner;
                                      const T dxhat = self.grad[p] * gn->value[static_cast<size_t>(k)];
                                      sum_dxhat += dxhat;
                                      sum_dxhat_xhat += dxhat * xh[static_cast<size_t>(p)];
                                  }
                                  if (xn->requires_grad) {
                                      auto& g = grad_of(xn);
                                      for (int64_t k = 0; k < n; ++k) {
                                          const int64_t p = off + k * inner;
                                          const T dxhat = self.grad[p] * gn->value[static_cast<size_t>(k)];
                                          g[static_cast<size_t>(p)] +=
                                              istd * (dxhat - invn * sum_dxhat - xh[static_cast<size_t>(p)] * invn * sum_dxhat_xhat);
                                      }
                                  }
                                  if (gn->requires_grad) {
                                      auto& g = grad_of(gn);
                                      for (int64_t k = 0; k < n; ++k) {
                                          const int64_t p = off + k * inner;
                                          g[static_cast<size_t>(k)] += self.grad[p] * xh[static_cast<size_t>(p)];
                                      }
                                  }
                                  if (bn->requires_grad) {
                                      auto& g = grad_of(bn);
                                      for (int64_t k = 0; k < n; ++k) g[static_cast<size_t>(k)] += self.grad[off + k * inner];
                                  }
                              }
                          }
                      });
}

// Per-channel batch norm over (B,H,W) of an NCHW tensor. Training mode uses
// batch statistics and updates the running buffers in place; eval mode uses
// the running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    require_shape(x.rank() == 4, "batch_norm: NCHW tensor expected");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require_shape(gamma.numel() == C && beta.numel() == C, "batch_norm: affine params must have C entries");
    const int64_t plane = H * W;
    const int64_t per_channel = B * plane;
    std::vector<T> mean(static_cast<size_t>(C), T(0)), var(static_cast<size_t>(C), T(0));
    const T* src = x.data().data();
    if (training) {
        for (int64_t c = 0; c < C; ++c) {
            T m = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* p = src + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) m += p[i];
            }
            m /= static_cast<T>(per_channel);
            T v = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* p = src + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const T d = p[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<T>(per_channel);
            mean[static_cast<size_t>(c)] = m;
            var[static_cast<size_t>(c)] = v;
        }
        // Unbiased variance feeds the running estimate.
        auto& rm = running_mean.data();
        auto& rv = running_var.data();
        const T unbias = per_channel > 1 ? static_cast<T>(per_channel) / static_cast<T>(per_channel - 1) : T(1);
        for (int64_t c = 0; c < C; ++c) {
            rm[static_cast<size_t>(c)] = (T(1) - momentum) * rm[static_cast<size_t>(c)] + momentum * mean[static_cast<size_t>(c)];
            rv[static_cast<size_t>(c)] = (T(1) - momentum) * rv[static_cast<size_t>(c)] + momentum * var[static_cast<size_t>(c)] * unbias;
        }
    } else {
        mean = running_mean.data();
        var = running_var.data();
    }
    std::vector<T> inv_std(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) inv_std[static_cast<size_t>(c)] = T(1) / std::sqrt(var[static_cast<size_t>(c)] + eps);
    std::vector<T> out(static_cast<size_t>(x.numel()));
    std::vector<T> xhat(static_cast<size_t>(x.numel()));
    const T* gm = gamma.data().data();
    const T* bt = beta.data().data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const T* p = src + (b * C + c) * plane;
            T* q = out.data() + (b * C + c) * plane;
            T* h = xhat.data() + (b * C + c) * plane;
            const T m = mean[static_cast<size_t>(c)], istd = inv_std[static_cast<size_t>(c)];
            const T gmm = gm[c], btt = bt[c];
            for (int64_t i = 0; i < plane; ++i) {
                h[i] = (p[i] - m) * istd;
                q[i] = gmm * h[i] + btt;
            }
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_op<T>(x.shape(), std::move(out), "batch_norm", {x, gamma, beta},
                      [xn, gn, bn, B, C, plane, training, xh = std::move(xhat),
                       istdv = std::move(inv_std)](detail::TensorNode<T>& self) {
                          const int64_t per_channel = B * plane;
                          const T invn = T(1) / static_cast<T>(per_channel);
                          for (int64_t c = 0; c < C; ++c) {
                              T sum_g = 0, sum_g_xhat = 0;
                              for (int64_t b = 0; b < B; ++b) {
                                  const int64_t off = (b * C + c) * plane;
                                  for (int64_t i = 0; i < plane; ++i) {
                                      sum_g += self.grad[off + i];
                                      sum_g_xhat += self.grad[off + i] * xh[static_cast<size_t>(off + i)];
                                  }
                              }
                              if (gn->requires_grad) grad_of(gn)[static_cast<size_t>(c)] += sum_g_xhat;
                              if (bn->requires_grad) grad_of(bn)[static_cast<size_t>(c)] += sum_g;
                              if (xn->requires_grad) {
                                  auto& g = grad_of(xn);
                                  const T gmm = gn->value[static_cast<size_t>(c)];
                                  const T istd = istdv[static_cast<size_t>(c)];
                                  for (int64_t b = 0; b < B; ++b) {
                                      const int64_t off = (b * C + c) * plane;
                                      for (int64_t i = 0; i < plane; ++i) {
                                          if (training) {
                                              g[static_cast<size_t>(off + i)] +=
                                                  gmm * istd *
                                                  (self.grad[off + i] - invn * sum_g -
                                                   xh[static_cast<size_t>(off + i)] * invn * sum_g_xhat);
                                          } else {
                                              g[static_cast<size_t>(off + i)] += gmm * istd * self.grad[off + i];
                                          }
                                      }
                                  }
                              }
                          }
                      });
}

// ---------------------------------------------------------------------------
// Convolution / resampling
// ---------------------------------------------------------------------------

// Cross-correlation on NCHW input, weight (OC, IC/groups, KH, KW), optional
// bias. Output spatial size floor((in + 2*pad - k)/stride) + 1. MACs are
// counted with the dense convention (padding positions included).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, int64_t stride, int64_t pad_h,
                 int64_t pad_w, int64_t groups = 1) {
    require_shape(x.rank() == 4 && weight.rank() == 4, "conv2d: NCHW input and OIHW weight expected");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t OC = weight.dim(0), ICPG = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
    require_config(groups >= 1 && C % groups == 0 && OC % groups == 0, "conv2d: channels not divisible by groups");
    require_shape(ICPG == C / groups, "conv2d: weight input channels disagree with input/groups");
    if (bias) require_shape(bias->numel() == OC, "conv2d: bias must have OC entries");
    const int64_t OH = (H + 2 * pad_h - KH) / stride + 1;
    const int64_t OW = (W + 2 * pad_w - KW) / stride + 1;
    require_config(OH >= 1 && OW >= 1, "conv2d: output spatial size would drop below 1");
    const int64_t OCPG = OC / groups;
    std::vector<T> out(static_cast<size_t>(B * OC * OH * OW), T(0));
    const T* src = x.data().data();
    const T* wv = weight.data().data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t g = 0; g < groups; ++g) {
            for (int64_t ocg = 0; ocg < OCPG; ++ocg) {
                const int64_t oc = g * OCPG + ocg;
                T* dst = out.data() + (b * OC + oc) * OH * OW;
                for (int64_t icg = 0; icg < ICPG; ++icg) {
                    const int64_t ic = g * ICPG + icg;
                    const T* plane = src + (b * C + ic) * H * W;
                    const T* wk = wv + ((oc * ICPG + icg) * KH) * KW;
                    for (int64_t kh = 0; kh < KH; ++kh) {
                        for (int64_t kw = 0; kw < KW; ++kw) {
                            const T wval = wk[kh * KW + kw];
                            for (int64_t oh = 0; oh < OH; ++oh) {
                                const int64_t ih = oh * stride - pad_h + kh;
                                if (ih < 0 || ih >= H) continue;
                                const T* irow = plane + ih * W;
                                T* orow = dst + oh * OW;
                                for (int64_t ow = 0; ow < OW; ++ow) {
                                    const int64_t iw = ow * stride - pad_w + kw;
                                    if (iw < 0 || iw >= W) continue;
                                    orow[ow] += wval * irow[iw];
                                }
                            }
                        }
                    }
                }
                if (bias) {
                    const T bv = bias->data()[static_cast<size_t>(oc)];
                    for (int64_t i = 0; i < OH * OW; ++i) dst[i] += bv;
                }
            }
        }
    }
    profiling::add_macs(static_cast<uint64_t>(B * OC * OH * OW) * static_cast<uint64_t>(ICPG * KH * KW));
    std::vector<Tensor<T>> parents = {x, weight};
    if (bias) parents.push_back(*bias);
    auto xn = x.node(), wn = weight.node();
    auto bn = bias ? bias->node() : nullptr;
    return make_op<T>(
        {B, OC, OH, OW}, std::move(out), "conv2d", parents,
        [xn, wn, bn, B, C, H, W, OC, ICPG, KH, KW, OH, OW, OCPG, groups, stride, pad_h,
         pad_w](detail::TensorNode<T>& self) {
            const bool need_gx = xn->requires_grad;
            const bool need_gw = wn->requires_grad;
            std::vector<T>* gx = need_gx ? &grad_of(xn) : nullptr;
            std::vector<T>* gw = need_gw ? &grad_of(wn) : nullptr;
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t g = 0; g < groups; ++g) {
                    for (int64_t ocg = 0; ocg < OCPG; ++ocg) {
                        const int64_t oc = g * OCPG + ocg;
                        const T* gy = self.grad.data() + (b * OC + oc) * OH * OW;
                        if (bn && bn->requires_grad) {
                            T acc = 0;
                            for (int64_t i = 0; i < OH * OW; ++i) acc += gy[i];
                            grad_of(bn)[static_cast<size_t>(oc)] += acc;
                        }
                        if (!need_gx && !need_gw) continue;
                        for (int64_t icg = 0; icg < ICPG; ++icg) {
                            const int64_t ic = g * ICPG + icg;
                            const T* plane = xn->value.data() + (b * C + ic) * H * W;
                            T* gplane = need_gx ? gx->data() + (b * C + ic) * H * W : nullptr;
                            const int64_t wbase = (oc * ICPG + icg) * KH * KW;
                            for (int64_t kh = 0; kh < KH; ++kh) {
                                for (int64_t kw = 0; kw < KW; ++kw) {
                                    const T wval = wn->value[static_cast<size_t>(wbase + kh * KW + kw)];
                                    T wacc = 0;
                                    for (int64_t oh = 0; oh < OH; ++oh) {
                                        const int64_t ih = oh * stride - pad_h + kh;
                                        if (ih < 0 || ih >= H) continue;
                                        const T* grow = gy + oh * OW;
                                        const T* irow = plane + ih * W;
                                        T* gxrow = need_gx ? gplane + ih * W : nullptr;
                                        for (int64_t ow = 0; ow < OW; ++ow) {
                                            const int64_t iw = ow * stride - pad_w + kw;
                                            if (iw < 0 || iw >= W) continue;
                                            if (need_gw) wacc += grow[ow] * irow[iw];
                                            if (need_gx) gxrow[iw] += grow[ow] * wval;
                                        }
                                    }
                                    if (need_gw) (*gw)[static_cast<size_t>(wbase + kh * KW + kw)] += wacc;
                                }
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int64_t stride, int64_t pad,
                 int64_t groups = 1) {
    return conv2d(x, weight, &bias, stride, pad, pad, groups);
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    require_shape(x.rank() == 4, "upsample_nearest2x: NCHW tensor expected");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<T> out(static_cast<size_t>(B * C * 4 * H * W));
    const T* src = x.data().data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* p = src + bc * H * W;
        T* q = out.data() + bc * 4 * H * W;
        for (int64_t h = 0; h < H; ++h) {
            for (int64_t w = 0; w < W; ++w) {
                const T v = p[h * W + w];
                const int64_t base = (2 * h) * (2 * W) + 2 * w;
                q[base] = v;
                q[base + 1] = v;
                q[base + 2 * W] = v;
                q[base + 2 * W + 1] = v;
            }
        }
    }
    auto xn = x.node();
    return make_op<T>({B, C, 2 * H, 2 * W}, std::move(out), "upsample2x", {x},
                      [xn, B, C, H, W](detail::TensorNode<T>& self) {
                          if (!xn->requires_grad) return;
                          auto& g = grad_of(xn);
                          for (int64_t bc = 0; bc < B * C; ++bc) {
                              T* gp = g.data() + bc * H * W;
                              const T* gq = self.grad.data() + bc * 4 * H * W;
                              for (int64_t h = 0; h < H; ++h) {
                                  for (int64_t w = 0; w < W; ++w) {
                                      const int64_t base = (2 * h) * (2 * W) + 2 * w;
                                      gp[h * W + w] += gq[base] + gq[base + 1] + gq[base + 2 * W] + gq[base + 2 * W + 1];
                                  }
                              }
                          }
                      });
}

}  // namespace scaleformer
