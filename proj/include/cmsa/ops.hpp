#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "cmsa/tensor.hpp"

namespace cmsa {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

/// out (+)= op(x) * op(y) on raw row-major buffers.
template <class T>
void gemm(bool tx, bool ty, const T* x, std::size_t xr, std::size_t xc, const T* y, std::size_t yr,
          std::size_t yc, T* out, bool accumulate) {
  ConstMap<T> X(x, Eigen::Index(xr), Eigen::Index(xc));
  ConstMap<T> Y(y, Eigen::Index(yr), Eigen::Index(yc));
  const auto m = Eigen::Index(tx ? xc : xr);
  const auto n = Eigen::Index(ty ? yr : yc);
  MutMap<T> O(out, m, n);
  if (!accumulate) O.setZero();
  if (!tx && !ty)
    O.noalias() += X * Y;
  else if (!tx && ty)
    O.noalias() += X * Y.transpose();
  else if (tx && !ty)
    O.noalias() += X.transpose() * Y;
  else
    O.noalias() += X.transpose() * Y.transpose();
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// linear position plus offsets into two operands given by per-axis strides.
template <class F>
void strided_for_each(const Shape& shape, const std::vector<std::size_t>& sa,
                      const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t r = shape.size();
  const std::size_t total = numel(shape);
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  const std::size_t inner = shape[r - 1], ia = sa[r - 1], ib = sb[r - 1];
  for (std::size_t lin = 0; lin < total; lin += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(lin + j, oa + j * ia, ob + j * ib);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < shape[ax]) break;
      oa -= sa[ax] * shape[ax];
      ob -= sb[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

/// Strides of `in` viewed against the broadcast output shape (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  auto s = strides_of(in);
  for (std::size_t i = 0; i < in.size(); ++i)
    if (in[i] == 1 && out[i] != 1) s[i] = 0;
  return s;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size())
    throw DimensionError(std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1)
      out[i] = a[i];
    else if (a[i] == 1)
      out[i] = b[i];
    else
      throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a) + " vs " + to_string(b));
  }
  return out;
}

inline std::size_t check_axis(std::size_t axis, std::size_t rank, const char* op) {
  if (axis >= rank)
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  return axis;
}

/// Generic broadcasting binary op. `da`/`db` give the partial derivatives
/// with respect to each operand at (a, b).
template <class T, class F, class DA, class DB>
Tensor<T> binary(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  Shape out = broadcast_shape(a.shape(), b.shape(), name);
  std::vector<T> data(numel(out));
  auto pa = a.impl(), pb = b.impl();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = f(pa->data[i], pb->data[i]);
  } else {
    auto sa = broadcast_strides(a.shape(), out), sb = broadcast_strides(b.shape(), out);
    strided_for_each(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      data[o] = f(pa->data[ia], pb->data[ib]);
    });
  }
  return make_result<T>(name, out, std::move(data), {&a, &b}, [pa, pb, out, da, db](const Impl<T>& res) {
    const auto& g = res.grad;
    const bool ga = pa->requires_grad, gb = pb->requires_grad;
    T* ra = ga ? pa->ensure_grad().data() : nullptr;
    T* rb = gb ? pb->ensure_grad().data() : nullptr;
    auto visit = [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ra[ia] += g[o] * da(pa->data[ia], pb->data[ib]);
      if (gb) rb[ib] += g[o] * db(pa->data[ia], pb->data[ib]);
    };
    if (pa->shape == pb->shape) {
      for (std::size_t i = 0; i < g.size(); ++i) visit(i, i, i);
    } else {
      strided_for_each(out, broadcast_strides(pa->shape, out), broadcast_strides(pb->shape, out), visit);
    }
  });
}

/// Elementwise unary op whose derivative is expressed through input x and output y.
template <class T, class F, class D>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, D d) {
  auto px = x.impl();
  std::vector<T> data(px->data.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = f(px->data[i]);
  return make_result<T>(name, x.shape(), std::move(data), {&x}, [px, d](const Impl<T>& res) {
    auto& gx = px->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i] * d(px->data[i], res.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

/// Hadamard (elementwise) product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> scalar_mul(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      "scalar_mul", x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

/// 1 - x
template <class T>
Tensor<T> one_minus(const Tensor<T>& x) {
  return detail::unary<T>(
      "one_minus", x, [](T v) { return T(1) - v; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x,
      [](T v) {
        // Split by sign so exp never overflows.
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// op(a) * op(b) for rank-2 tensors, op = transpose when the flag is set.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: rank-2 operands required, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  const std::size_t ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != kb)
    throw DimensionError("matmul: inner extents differ, " + to_string(a.shape()) + (trans_a ? "^T" : "") + " x " +
                         to_string(b.shape()) + (trans_b ? "^T" : ""));
  std::vector<T> data(m * n);
  detail::gemm(trans_a, trans_b, a.data().data(), ar, ac, b.data().data(), br, bc, data.data(), false);
  auto pa = a.impl(), pb = b.impl();
  return detail::make_result<T>("matmul", {m, n}, std::move(data), {&a, &b},
                                [pa, pb, trans_a, trans_b, ar, ac, br, bc, m, n](const detail::Impl<T>& res) {
    const T* g = res.grad.data();
    if (pa->requires_grad) {
      T* ga = pa->ensure_grad().data();
      if (!trans_a)  // dA = dC op(B)^T
        detail::gemm(false, !trans_b, g, m, n, pb->data.data(), br, bc, ga, true);
      else  // dA = op(B) dC^T
        detail::gemm(trans_b, true, pb->data.data(), br, bc, g, m, n, ga, true);
    }
    if (pb->requires_grad) {
      T* gb = pb->ensure_grad().data();
      if (!trans_b)  // dB = op(A)^T dC
        detail::gemm(!trans_a, false, pa->data.data(), ar, ac, g, m, n, gb, true);
      else  // dB = dC^T op(A)
        detail::gemm(true, trans_a, g, m, n, pa->data.data(), ar, ac, gb, true);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalizations

/// Softmax along `axis`. When `valid` is given (one flag per position along
/// the axis), positions flagged 0 are forced to exactly 0 and take no part in
/// the max or the normalizer. At least one position must stay valid.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, std::span<const std::uint8_t> valid = {}) {
  detail::check_axis(axis, x.rank(), "softmax");
  const Shape& sh = x.shape();
  const std::size_t n = sh[axis];
  if (!valid.empty() && valid.size() != n)
    throw DimensionError("softmax: mask length " + std::to_string(valid.size()) + " != axis extent " +
                         std::to_string(n));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  std::vector<std::uint8_t> excluded(n, 0);
  for (std::size_t j = 0; j < valid.size(); ++j) excluded[j] = valid[j] == 0;
  if (std::all_of(excluded.begin(), excluded.end(), [](auto v) { return v != 0; }))
    throw InputError("softmax: every entry along the axis is masked");

  auto px = x.impl();
  std::vector<T> y(px->data.size(), T(0));
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (!excluded[j]) mx = std::max(mx, px->data[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (excluded[j]) continue;
        T e = std::exp(px->data[base + j * inner] - mx);
        y[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= z;
    }
  }
  return detail::make_result<T>("softmax", sh, std::move(y), {&x}, [px, outer, n, inner](const detail::Impl<T>& res) {
    auto& gx = px->ensure_grad();
    const auto& yv = res.data;
    const auto& g = res.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += yv[base + j * inner] * g[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          gx[k] += yv[k] * (g[k] - dot);
        }
      }
    }
  });
}

/// Divides each slice along `axis` by max(||slice||_2, eps).
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, T eps = T(1e-12)) {
  detail::check_axis(axis, x.rank(), "l2_normalize");
  if (!(eps > 0)) throw UsageError("l2_normalize: eps must be positive");
  const Shape& sh = x.shape();
  const std::size_t n = sh[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  auto px = x.impl();
  std::vector<T> y(px->data.size());
  std::vector<T> norms(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T ss = 0;
      for (std::size_t j = 0; j < n; ++j) ss += px->data[base + j * inner] * px->data[base + j * inner];
      const T norm = std::sqrt(ss);
      norms[o * inner + i] = norm;
      const T d = std::max(norm, eps);
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] = px->data[base + j * inner] / d;
    }
  }
  return detail::make_result<T>(
      "l2_normalize", sh, std::move(y), {&x},
      [px, outer, n, inner, eps, norms = std::move(norms)](const detail::Impl<T>& res) {
        auto& gx = px->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            const T norm = norms[o * inner + i];
            if (norm > eps) {
              T dot = 0;
              for (std::size_t j = 0; j < n; ++j) dot += res.data[base + j * inner] * res.grad[base + j * inner];
              for (std::size_t j = 0; j < n; ++j) {
                const std::size_t k = base + j * inner;
                gx[k] += (res.grad[k] - res.data[k] * dot) / norm;
              }
            } else {
              for (std::size_t j = 0; j < n; ++j) gx[base + j * inner] += res.grad[base + j * inner] / eps;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { sum, mean, max };

/// Reduces over `axes`. With keep_dims the reduced extents become 1,
/// otherwise they are dropped (a full reduction yields shape [1]).
template <class T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, std::vector<std::size_t> axes, bool keep_dims = false) {
  const Shape& sh = x.shape();
  std::vector<bool> reduced(sh.size(), false);
  for (auto a : axes) {
    detail::check_axis(a, sh.size(), "reduce");
    if (reduced[a]) throw DimensionError("reduce: axis " + std::to_string(a) + " listed twice");
    reduced[a] = true;
  }
  Shape kept(sh);
  Shape out_shape;
  for (std::size_t i = 0; i < sh.size(); ++i) {
    if (reduced[i]) kept[i] = 1;
    if (!reduced[i] || keep_dims) out_shape.push_back(kept[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  auto out_strides = detail::broadcast_strides(kept, sh);
  auto in_strides = strides_of(sh);
  const std::size_t out_n = numel(kept);
  const std::size_t count = x.numel() / out_n;
  auto px = x.impl();

  std::vector<T> data(out_n, op == ReduceOp::max ? -std::numeric_limits<T>::infinity() : T(0));
  std::vector<std::size_t> argmax(op == ReduceOp::max ? out_n : 0);
  detail::strided_for_each(sh, in_strides, out_strides, [&](std::size_t, std::size_t i, std::size_t o) {
    const T v = px->data[i];
    if (op == ReduceOp::max) {
      if (v > data[o]) {
        data[o] = v;
        argmax[o] = i;
      }
    } else {
      data[o] += v;
    }
  });
  if (op == ReduceOp::mean)
    for (auto& v : data) v /= T(count);

  const char* name = op == ReduceOp::sum ? "sum" : op == ReduceOp::mean ? "mean" : "max";
  return detail::make_result<T>(
      name, out_shape, std::move(data), {&x},
      [px, op, count, in_strides, out_strides, argmax = std::move(argmax)](const detail::Impl<T>& res) {
        auto& gx = px->ensure_grad();
        if (op == ReduceOp::max) {
          for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += res.grad[o];
          return;
        }
        const T scale = op == ReduceOp::mean ? T(1) / T(count) : T(1);
        detail::strided_for_each(px->shape, in_strides, out_strides,
                                 [&](std::size_t, std::size_t i, std::size_t o) { gx[i] += scale * res.grad[o]; });
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::vector<std::size_t> axes, bool keep_dims = false) {
  return reduce(ReduceOp::sum, x, std::move(axes), keep_dims);
}

/// Sum of every element, shape [1].
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  std::vector<std::size_t> all(x.rank());
  std::iota(all.begin(), all.end(), 0);
  return reduce(ReduceOp::sum, x, all, false);
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::vector<std::size_t> axes, bool keep_dims = false) {
  return reduce(ReduceOp::mean, x, std::move(axes), keep_dims);
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
  auto px = x.impl();
  return detail::make_result<T>("reshape", std::move(shape), px->data, {&x}, [px](const detail::Impl<T>& res) {
    auto& gx = px->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i];
  });
}

/// Output axis i is input axis perm[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& sh = x.shape();
  if (perm.size() != sh.size()) throw DimensionError("permute: permutation rank mismatch");
  std::vector<bool> used(sh.size(), false);
  Shape out(sh.size());
  auto in_strides = strides_of(sh);
  std::vector<std::size_t> src(sh.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    detail::check_axis(perm[i], sh.size(), "permute");
    if (used[perm[i]]) throw DimensionError("permute: repeated axis");
    used[perm[i]] = true;
    out[i] = sh[perm[i]];
    src[i] = in_strides[perm[i]];
  }
  auto px = x.impl();
  std::vector<T> data(px->data.size());
  auto contiguous = strides_of(out);
  detail::strided_for_each(out, contiguous, src, [&](std::size_t o, std::size_t, std::size_t i) { data[o] = px->data[i]; });
  return detail::make_result<T>("permute", out, std::move(data), {&x}, [px, out, contiguous, src](const detail::Impl<T>& res) {
    auto& gx = px->ensure_grad();
    detail::strided_for_each(out, contiguous, src, [&](std::size_t o, std::size_t, std::size_t i) { gx[i] += res.grad[o]; });
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: rank-2 tensor required");
  return permute(x, {1, 0});
}

/// Elements [start, start+length) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::check_axis(axis, x.rank(), "slice");
  if (length == 0 || start + length > x.dim(axis))
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of extent " + std::to_string(x.dim(axis)));
  Shape out = x.shape();
  out[axis] = length;
  auto in_strides = strides_of(x.shape());
  const std::size_t offset = start * in_strides[axis];
  auto px = x.impl();
  std::vector<T> data(numel(out));
  auto contiguous = strides_of(out);
  detail::strided_for_each(out, contiguous, in_strides,
                           [&](std::size_t o, std::size_t, std::size_t i) { data[o] = px->data[offset + i]; });
  return detail::make_result<T>("slice", out, std::move(data), {&x},
                                [px, out, contiguous, in_strides, offset](const detail::Impl<T>& res) {
    auto& gx = px->ensure_grad();
    detail::strided_for_each(out, contiguous, in_strides,
                             [&](std::size_t o, std::size_t, std::size_t i) { gx[offset + i] += res.grad[o]; });
  });
}

/// Joins tensors along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& first = parts.front().shape();
  detail::check_axis(axis, first.size(), "concat");
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.dim(i) != first[i])
        throw DimensionError("concat: extent mismatch " + to_string(p.shape()) + " vs " + to_string(first));
    out[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out[i];
  for (std::size_t i = axis + 1; i < out.size(); ++i) inner *= out[i];
  const std::size_t row = out[axis] * inner;
  std::vector<T> data(numel(out));
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * w, w, data.data() + o * row + col);
    col += w;
  }
  std::vector<typename Tensor<T>::ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return detail::make_result_n<T>("concat", out, std::move(data), parts,
                                  [impls, axis, outer, inner, row](const detail::Impl<T>& res) {
    std::size_t c = 0;
    for (const auto& p : impls) {
      const std::size_t w = p->shape[axis] * inner;
      if (p->requires_grad) {
        auto& gp = p->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < w; ++j) gp[o * w + j] += res.grad[o * row + c + j];
      }
      c += w;
    }
  });
}

/// Rows of a [V x D] table selected by `indices`. Positions holding
/// `zero_index` (when given) yield zero rows and send no gradient back.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> indices,
                      std::optional<std::size_t> zero_index = std::nullopt) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
  if (indices.empty()) throw DimensionError("gather_rows: no indices");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<T> data(idx.size() * d, T(0));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows)
      throw DataError("gather_rows: index " + std::to_string(idx[r]) + " out of range for table of " +
                      std::to_string(rows) + " rows");
    if (zero_index && idx[r] == *zero_index) continue;
    std::copy_n(table.data().data() + idx[r] * d, d, data.data() + r * d);
  }
  auto pt = table.impl();
  return detail::make_result<T>("gather_rows", {idx.size(), d}, std::move(data), {&table},
                                [pt, idx, d, zero_index](const detail::Impl<T>& res) {
    auto& gt = pt->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (zero_index && idx[r] == *zero_index) continue;
      for (std::size_t j = 0; j < d; ++j) gt[idx[r] * d + j] += res.grad[r * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops on [C x H x W] maps

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  bool same_padding = true;
};

/// 2-D cross-correlation (no kernel flip) of a [Cin x H x W] map with a
/// [Cout x Cin x k x k] kernel. Same padding zero-pads by dilation*(k-1)/2.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, ConvOptions opt = {}) {
  if (x.rank() != 3) throw DimensionError("conv2d: input must be [C x H x W], got " + to_string(x.shape()));
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
    throw DimensionError("conv2d: kernel must be [Cout x Cin x k x k], got " + to_string(kernel.shape()));
  if (kernel.dim(1) != x.dim(0))
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, map has " +
                         std::to_string(x.dim(0)));
  if (opt.stride == 0 || opt.dilation == 0) throw UsageError("conv2d: stride and dilation must be positive");
  const std::size_t k = kernel.dim(2);
  if (k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = kernel.dim(0);
  const std::size_t span = opt.dilation * (k - 1);
  const std::size_t pad = opt.same_padding ? span / 2 : 0;
  if (h + 2 * pad <= span || w + 2 * pad <= span) throw DimensionError("conv2d: input smaller than kernel footprint");
  const std::size_t ho = (h + 2 * pad - span - 1) / opt.stride + 1;
  const std::size_t wo = (w + 2 * pad - span - 1) / opt.stride + 1;
  const std::size_t patch = cin * k * k, npos = ho * wo;

  // im2col: cols[(c, ky, kx), (oy, ox)]
  auto cols = std::make_shared<std::vector<T>>(patch * npos, T(0));
  const T* xd = x.data().data();
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = cols->data() + ((c * k + ky) * k + kx) * npos;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * opt.stride + ky * opt.dilation) - std::ptrdiff_t(pad);
          if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * opt.stride + kx * opt.dilation) - std::ptrdiff_t(pad);
            if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
            dst[oy * wo + ox] = xd[(c * h + std::size_t(iy)) * w + std::size_t(ix)];
          }
        }
      }
  std::vector<T> data(cout * npos);
  detail::gemm(false, false, kernel.data().data(), cout, patch, cols->data(), patch, npos, data.data(), false);

  auto px = x.impl(), pk = kernel.impl();
  return detail::make_result<T>(
      "conv2d", {cout, ho, wo}, std::move(data), {&x, &kernel},
      [px, pk, cols, opt, k, cin, h, w, cout, ho, wo, pad, patch, npos](const detail::Impl<T>& res) {
        const T* g = res.grad.data();
        if (pk->requires_grad)
          detail::gemm(false, true, g, cout, npos, cols->data(), patch, npos, pk->ensure_grad().data(), true);
        if (!px->requires_grad) return;
        std::vector<T> dcols(patch * npos);
        detail::gemm(true, false, pk->data.data(), cout, patch, g, cout, npos, dcols.data(), false);
        auto& gx = px->ensure_grad();
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const T* src = dcols.data() + ((c * k + ky) * k + kx) * npos;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const std::ptrdiff_t iy = std::ptrdiff_t(oy * opt.stride + ky * opt.dilation) - std::ptrdiff_t(pad);
                if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const std::ptrdiff_t ix = std::ptrdiff_t(ox * opt.stride + kx * opt.dilation) - std::ptrdiff_t(pad);
                  if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
                  gx[(c * h + std::size_t(iy)) * w + std::size_t(ix)] += src[oy * wo + ox];
                }
              }
            }
      });
}

namespace detail {

// Source taps of half-pixel-centred bilinear resampling along one axis.
struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline LinearTaps bilinear_taps(std::size_t in, std::size_t out) {
  LinearTaps t;
  const double scale = double(in) / double(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (double(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, double(in - 1));
    const auto lo = std::size_t(std::floor(src));
    const auto hi = std::min(lo + 1, in - 1);
    t.lo.push_back(lo);
    t.hi.push_back(hi);
    t.frac.push_back(src - double(lo));
  }
  return t;
}

}  // namespace detail

/// Bilinear resize of a [C x H x W] map (half-pixel centres, edge clamp).
template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 3) throw DimensionError("upsample_bilinear: input must be [C x H x W]");
  if (out_h == 0 || out_w == 0) throw DimensionError("upsample_bilinear: empty output size");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto ty = detail::bilinear_taps(h, out_h), tx = detail::bilinear_taps(w, out_w);
  auto px = x.impl();
  std::vector<T> data(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = px->data.data() + ch * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = T(ty.frac[i]);
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = T(tx.frac[j]);
        const T top = src[ty.lo[i] * w + tx.lo[j]] * (1 - fx) + src[ty.lo[i] * w + tx.hi[j]] * fx;
        const T bot = src[ty.hi[i] * w + tx.lo[j]] * (1 - fx) + src[ty.hi[i] * w + tx.hi[j]] * fx;
        data[(ch * out_h + i) * out_w + j] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return detail::make_result<T>("upsample_bilinear", {c, out_h, out_w}, std::move(data), {&x},
                                [px, ty, tx, c, h, w, out_h, out_w](const detail::Impl<T>& res) {
    auto& gx = px->ensure_grad();
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* dst = gx.data() + ch * h * w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const T fy = T(ty.frac[i]);
        for (std::size_t j = 0; j < out_w; ++j) {
          const T fx = T(tx.frac[j]);
          const T g = res.grad[(ch * out_h + i) * out_w + j];
          dst[ty.lo[i] * w + tx.lo[j]] += g * (1 - fy) * (1 - fx);
          dst[ty.lo[i] * w + tx.hi[j]] += g * (1 - fy) * fx;
          dst[ty.hi[i] * w + tx.lo[j]] += g * fy * (1 - fx);
          dst[ty.hi[i] * w + tx.hi[j]] += g * fy * fx;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean binary cross-entropy between probabilities P and binary targets Y.
/// P is clamped to [eps, 1-eps] before the logs; clamped entries get no gradient.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& y, T eps = T(1e-7)) {
  if (p.shape() != y.shape())
    throw DimensionError("bce_loss: prediction " + to_string(p.shape()) + " vs target " + to_string(y.shape()));
  const std::size_t n = p.numel();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::clamp(double(p[i]), double(eps), 1.0 - double(eps));
    total -= double(y[i]) * std::log(pc) + (1.0 - double(y[i])) * std::log(1.0 - pc);
  }
  auto pp = p.impl(), py = y.impl();
  return detail::make_result<T>("bce_loss", {1}, {T(total / double(n))}, {&p}, [pp, py, eps, n](const detail::Impl<T>& res) {
    auto& gp = pp->ensure_grad();
    const T g = res.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T pv = pp->data[i];
      if (pv < eps || pv > T(1) - eps) continue;
      const T yv = py->data[i];
      gp[i] += g * (-(yv / pv) + (T(1) - yv) / (T(1) - pv));
    }
  });
}

}  // namespace cmsa
