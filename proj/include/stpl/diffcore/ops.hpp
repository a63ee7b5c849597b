#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "stpl/diffcore/tape.hpp"
#include "stpl/diffcore/tensor.hpp"

namespace stpl {

/// Scalar loss plus bookkeeping about which samples contributed.
template <class T>
struct LossResult {
  Var<T> loss;
  std::size_t contributing = 0;
  std::size_t excluded = 0;
  /// Set when nothing contributed and `loss` is a constant zero.
  bool sentinel = false;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
void accumulate(Tape<T>& tape, std::size_t id, std::span<const T> g) {
  if (!tape.requires_grad(id)) return;
  auto buf = tape.grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

inline Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

/// For every flat index of `big`, the flat index of `small` it reads from.
/// `small` must have the same rank with each extent equal or 1.
inline std::vector<std::size_t> broadcast_map(const Shape& big, const Shape& small) {
  const Shape sstr = strides_of(small);
  const std::size_t n = numel(big);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(big.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < big.size(); ++a) {
      if (small[a] != 1) off += idx[a] * sstr[a];
    }
    map[i] = off;
    for (std::size_t a = big.size(); a-- > 0;) {
      if (++idx[a] < big[a]) break;
      idx[a] = 0;
    }
  }
  return map;
}

inline bool broadcastable(const Shape& big, const Shape& small) {
  if (big.size() != small.size()) return false;
  for (std::size_t a = 0; a < big.size(); ++a) {
    if (small[a] != big[a] && small[a] != 1) return false;
  }
  return true;
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense layers

/// y = x·W + b for x[N,Din], W[Din,Dout], b[Dout].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  const auto& bs = bias.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0] || numel(bs) != ws[1]) {
    throw DimensionError("linear: x " + to_string(xs) + " incompatible with weight " +
                         to_string(ws) + " / bias " + to_string(bs));
  }
  const auto n = static_cast<Eigen::Index>(xs[0]);
  const auto din = static_cast<Eigen::Index>(xs[1]);
  const auto dout = static_cast<Eigen::Index>(ws[1]);
  Tensor<T> out({xs[0], ws[1]});
  {
    detail::ConstMatMap<T> X(x.value().data().data(), n, din);
    detail::ConstMatMap<T> W(weight.value().data().data(), din, dout);
    detail::MatMap<T> Y(out.data().data(), n, dout);
    Y.noalias() = X * W;
    const auto& b = bias.value();
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index c = 0; c < dout; ++c) Y(r, c) += b[static_cast<std::size_t>(c)];
    }
  }
  const auto xi = x.id(), wi = weight.id(), bi = bias.id();
  return x.tape().record(std::move(out), {x, weight, bias},
                         [xi, wi, bi, n, din, dout](Tape<T>& t, std::span<const T> g) {
                           detail::ConstMatMap<T> G(g.data(), n, dout);
                           if (t.requires_grad(xi)) {
                             detail::ConstMatMap<T> W(t.value(wi).data().data(), din, dout);
                             detail::MatMap<T> dX(t.grad_buffer(xi).data(), n, din);
                             dX.noalias() += G * W.transpose();
                           }
                           if (t.requires_grad(wi)) {
                             detail::ConstMatMap<T> X(t.value(xi).data().data(), n, din);
                             detail::MatMap<T> dW(t.grad_buffer(wi).data(), din, dout);
                             dW.noalias() += X.transpose() * G;
                           }
                           if (t.requires_grad(bi)) {
                             auto db = t.grad_buffer(bi);
                             for (Eigen::Index r = 0; r < n; ++r) {
                               for (Eigen::Index c = 0; c < dout; ++c) {
                                 db[static_cast<std::size_t>(c)] += G(r, c);
                               }
                             }
                           }
                         });
}

/// Cross-correlation of x[C,H,W] with kernel[Cout,C,k,k]; k must be odd.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t padding,
              std::size_t stride = 1) {
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  if (ks.size() == 4 && ks[2] % 2 == 0) {
    throw ConfigError("conv2d: even kernel size " + std::to_string(ks[2]) + " is not supported");
  }
  if (xs.size() != 3 || ks.size() != 4 || ks[1] != xs[0] || ks[2] != ks[3] ||
      numel(bias.shape()) != ks[0]) {
    throw DimensionError("conv2d: input " + to_string(xs) + " incompatible with kernel " +
                         to_string(ks) + " / bias " + to_string(bias.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t C = xs[0], H = xs[1], W = xs[2];
  const std::size_t Co = ks[0], K = ks[2];
  if (H + 2 * padding < K || W + 2 * padding < K) {
    throw DimensionError("conv2d: kernel " + to_string(ks) + " larger than padded input " +
                         to_string(xs));
  }
  const std::size_t Ho = (H + 2 * padding - K) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - K) / stride + 1;
  const std::size_t rows = C * K * K;
  const std::size_t cols_n = Ho * Wo;
  const bool pointwise = (K == 1 && stride == 1 && padding == 0);

  std::vector<T> cols;
  if (!pointwise) {
    cols.assign(rows * cols_n, T{0});
    const auto& xv = x.value();
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t ky = 0; ky < K; ++ky) {
        for (std::size_t kx = 0; kx < K; ++kx) {
          T* row = cols.data() + ((c * K + ky) * K + kx) * cols_n;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            const T* src = xv.data().data() + (c * H + static_cast<std::size_t>(iy)) * W;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              row[oy * Wo + ox] = src[ix];
            }
          }
        }
      }
    }
  }

  Tensor<T> out({Co, Ho, Wo});
  {
    const T* cptr = pointwise ? x.value().data().data() : cols.data();
    detail::ConstMatMap<T> Cm(cptr, static_cast<Eigen::Index>(rows),
                              static_cast<Eigen::Index>(cols_n));
    detail::ConstMatMap<T> Wm(kernel.value().data().data(), static_cast<Eigen::Index>(Co),
                              static_cast<Eigen::Index>(rows));
    detail::MatMap<T> Y(out.data().data(), static_cast<Eigen::Index>(Co),
                        static_cast<Eigen::Index>(cols_n));
    Y.noalias() = Wm * Cm;
    const auto& b = bias.value();
    for (std::size_t o = 0; o < Co; ++o) Y.row(static_cast<Eigen::Index>(o)).array() += b[o];
  }

  const auto xi = x.id(), ki = kernel.id(), bi = bias.id();
  return x.tape().record(
      std::move(out), {x, kernel, bias},
      [=, cols = std::move(cols)](Tape<T>& t, std::span<const T> g) {
        const auto R = static_cast<Eigen::Index>(rows);
        const auto N = static_cast<Eigen::Index>(cols_n);
        const auto O = static_cast<Eigen::Index>(Co);
        detail::ConstMatMap<T> G(g.data(), O, N);
        const T* cptr = pointwise ? t.value(xi).data().data() : cols.data();
        if (t.requires_grad(ki)) {
          detail::ConstMatMap<T> Cm(cptr, R, N);
          detail::MatMap<T> dW(t.grad_buffer(ki).data(), O, R);
          dW.noalias() += G * Cm.transpose();
        }
        if (t.requires_grad(bi)) {
          auto db = t.grad_buffer(bi);
          for (Eigen::Index o = 0; o < O; ++o) db[static_cast<std::size_t>(o)] += G.row(o).sum();
        }
        if (t.requires_grad(xi)) {
          detail::ConstMatMap<T> Wm(t.value(ki).data().data(), O, R);
          auto dx = t.grad_buffer(xi);
          if (pointwise) {
            detail::MatMap<T> dX(dx.data(), R, N);
            dX.noalias() += Wm.transpose() * G;
          } else {
            detail::RowMat<T> dcols = Wm.transpose() * G;
            for (std::size_t c = 0; c < C; ++c) {
              for (std::size_t ky = 0; ky < K; ++ky) {
                for (std::size_t kx = 0; kx < K; ++kx) {
                  const T* row = dcols.data() + ((c * K + ky) * K + kx) * cols_n;
                  for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                              static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    T* dst = dx.data() + (c * H + static_cast<std::size_t>(iy)) * W;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                      const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                static_cast<std::ptrdiff_t>(padding);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                      dst[ix] += row[oy * Wo + ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryKind { kAdd, kMul };

namespace detail {

template <class T>
Var<T> binary(const Var<T>& a_in, const Var<T>& b_in, BinaryKind kind) {
  const char* name = kind == BinaryKind::kAdd ? "add" : "mul";
  Var<T> a = a_in, b = b_in;
  if (a.shape() != b.shape()) {
    if (!broadcastable(a.shape(), b.shape())) {
      if (!broadcastable(b.shape(), a.shape())) {
        throw DimensionError(std::string(name) + ": shapes " + to_string(a.shape()) + " and " +
                             to_string(b.shape()) + " are not broadcastable");
      }
      std::swap(a, b);
    }
  }
  const bool same = a.shape() == b.shape();
  std::vector<std::size_t> map;
  if (!same) map = broadcast_map(a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T bval = bv[same ? i : map[i]];
    out[i] = kind == BinaryKind::kAdd ? av[i] + bval : av[i] * bval;
  }
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b},
                         [=, map = std::move(map)](Tape<T>& t, std::span<const T> g) {
                           const auto& av2 = t.value(ai);
                           const auto& bv2 = t.value(bi);
                           if (t.requires_grad(ai)) {
                             auto da = t.grad_buffer(ai);
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               da[i] += kind == BinaryKind::kAdd ? g[i]
                                                                 : g[i] * bv2[same ? i : map[i]];
                             }
                           }
                           if (t.requires_grad(bi)) {
                             auto db = t.grad_buffer(bi);
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               db[same ? i : map[i]] +=
                                   kind == BinaryKind::kAdd ? g[i] : g[i] * av2[i];
                             }
                           }
                         });
}

}  // namespace detail

/// Elementwise sum. One operand may broadcast over the other when every extent is equal or 1.
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, BinaryKind::kAdd);
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, BinaryKind::kMul);
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  const auto ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai, factor](Tape<T>& t, std::span<const T> g) {
    auto da = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  const auto ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai](Tape<T>& t, std::span<const T> g) {
    const auto& av = t.value(ai);
    auto da = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > T{0}) da[i] += g[i];
    }
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = detail::stable_sigmoid(v);
  const auto ai = a.id();
  auto& tape = a.tape();
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {a}, [ai, self](Tape<T>& t, std::span<const T> g) {
    const auto& y = t.value(self);
    auto da = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (T{1} - y[i]);
  });
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolKind { kAvg, kMax };

/// Named reductions. For a [T,C,H,W] (or [C,H,W]) tensor: spatial = {H,W};
/// channel = every axis before H (so {T,C} or {C}); channel_and_spatial = {C,H,W}.
enum class AxisSet { kSpatial, kChannelAndSpatial, kChannel };

inline std::vector<std::size_t> resolve_axes(AxisSet set, std::size_t rank) {
  if (rank < 3) throw ConfigError("pool: named axis sets need a tensor of rank >= 3");
  std::vector<std::size_t> axes;
  switch (set) {
    case AxisSet::kSpatial:
      axes = {rank - 2, rank - 1};
      break;
    case AxisSet::kChannelAndSpatial:
      axes = {rank - 3, rank - 2, rank - 1};
      break;
    case AxisSet::kChannel:
      for (std::size_t a = 0; a + 2 < rank; ++a) axes.push_back(a);
      break;
  }
  return axes;
}

/// Reduces the listed axes, keeping them as size-1 extents. Max routes its
/// gradient to the first maximal element in row-major order.
template <class T>
Var<T> pool(const Var<T>& x, PoolKind kind, const std::vector<std::size_t>& axes) {
  if (axes.empty()) throw ConfigError("pool: empty reduction set");
  const Shape& xs = x.shape();
  Shape os = xs;
  for (auto a : axes) {
    if (a >= xs.size()) {
      throw ConfigError("pool: axis " + std::to_string(a) + " out of range for " + to_string(xs));
    }
    os[a] = 1;
  }
  const std::vector<std::size_t> map = detail::broadcast_map(xs, os);
  const std::size_t count = numel(xs) / numel(os);
  const auto& xv = x.value();
  Tensor<T> out(os);
  std::vector<std::size_t> argmax;
  if (kind == PoolKind::kAvg) {
    std::vector<CompensatedSum<T>> sums(out.size());
    for (std::size_t i = 0; i < xv.size(); ++i) sums[map[i]].add(xv[i]);
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = sums[o].value() / static_cast<T>(count);
  } else {
    argmax.assign(out.size(), std::numeric_limits<std::size_t>::max());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const std::size_t o = map[i];
      if (argmax[o] == std::numeric_limits<std::size_t>::max() || xv[i] > out[o]) {
        out[o] = xv[i];
        argmax[o] = i;
      }
    }
  }
  const auto xi = x.id();
  return x.tape().record(
      std::move(out), {x},
      [=, map = std::move(map), argmax = std::move(argmax)](Tape<T>& t, std::span<const T> g) {
        auto dx = t.grad_buffer(xi);
        if (kind == PoolKind::kAvg) {
          const T inv = T{1} / static_cast<T>(count);
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[map[i]] * inv;
        } else {
          for (std::size_t o = 0; o < g.size(); ++o) dx[argmax[o]] += g[o];
        }
      });
}

template <class T>
Var<T> pool(const Var<T>& x, PoolKind kind, AxisSet set) {
  return pool(x, kind, resolve_axes(set, x.shape().size()));
}

// ---------------------------------------------------------------------------
// Sampling

/// Samples x[C,H,W] bilinearly at coords[2,Ho,Wo] (channel 0 = column, 1 = row)
/// with zero padding outside the grid. Coordinates are constants.
template <class T>
Var<T> bilinear_sample(const Var<T>& x, const Tensor<T>& coords) {
  const auto& xs = x.shape();
  const auto& cs = coords.shape();
  if (xs.size() != 3 || cs.size() != 3 || cs[0] != 2) {
    throw DimensionError("bilinear_sample: input " + to_string(xs) + " with coords " +
                         to_string(cs));
  }
  const std::size_t C = xs[0], H = xs[1], W = xs[2];
  const std::size_t Ho = cs[1], Wo = cs[2], P = Ho * Wo;
  struct Tap {
    std::size_t idx[4];
    T w[4];
    int n;
  };
  std::vector<Tap> taps(P);
  for (std::size_t p = 0; p < P; ++p) {
    const T sx = coords[p];
    const T sy = coords[P + p];
    if (!std::isfinite(sx) || !std::isfinite(sy)) {
      throw ContractError("bilinear_sample: non-finite coordinate at pixel " + std::to_string(p));
    }
    const T fx0 = std::floor(sx), fy0 = std::floor(sy);
    const T ax = sx - fx0, ay = sy - fy0;
    const auto x0 = static_cast<long long>(fx0), y0 = static_cast<long long>(fy0);
    Tap tap{};
    const long long xsn[2] = {x0, x0 + 1};
    const long long ysn[2] = {y0, y0 + 1};
    const T wx[2] = {T{1} - ax, ax};
    const T wy[2] = {T{1} - ay, ay};
    for (int j = 0; j < 2; ++j) {
      for (int i = 0; i < 2; ++i) {
        const T w = wy[j] * wx[i];
        if (w == T{0}) continue;
        if (xsn[i] < 0 || ysn[j] < 0 || xsn[i] >= static_cast<long long>(W) ||
            ysn[j] >= static_cast<long long>(H)) {
          continue;
        }
        tap.idx[tap.n] = static_cast<std::size_t>(ysn[j]) * W + static_cast<std::size_t>(xsn[i]);
        tap.w[tap.n] = w;
        ++tap.n;
      }
    }
    taps[p] = tap;
  }
  const auto& xv = x.value();
  Tensor<T> out({C, Ho, Wo});
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = xv.data().data() + c * H * W;
    T* dst = out.data().data() + c * P;
    for (std::size_t p = 0; p < P; ++p) {
      const Tap& tap = taps[p];
      if (tap.n == 1 && tap.w[0] == T{1}) {
        dst[p] = src[tap.idx[0]];
        continue;
      }
      T acc{0};
      for (int k = 0; k < tap.n; ++k) acc += tap.w[k] * src[tap.idx[k]];
      dst[p] = acc;
    }
  }
  const auto xi = x.id();
  return x.tape().record(std::move(out), {x},
                         [=, taps = std::move(taps)](Tape<T>& t, std::span<const T> g) {
                           auto dx = t.grad_buffer(xi);
                           for (std::size_t c = 0; c < C; ++c) {
                             T* dst = dx.data() + c * H * W;
                             const T* gs = g.data() + c * P;
                             for (std::size_t p = 0; p < P; ++p) {
                               const Tap& tap = taps[p];
                               for (int k = 0; k < tap.n; ++k) dst[tap.idx[k]] += tap.w[k] * gs[p];
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Losses and reductions

/// Mean negative log-softmax of logits[K,H,W] over masked pixels.
template <class T>
LossResult<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> targets,
                                    std::span<const std::uint8_t> mask) {
  const auto& ls = logits.shape();
  if (ls.size() != 3) throw DimensionError("softmax_cross_entropy: logits " + to_string(ls));
  const std::size_t K = ls[0], P = ls[1] * ls[2];
  if (targets.size() != P || mask.size() != P) {
    throw DimensionError("softmax_cross_entropy: logits " + to_string(ls) + " vs " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries");
  }
  auto& tape = logits.tape();
  std::vector<std::size_t> pixels;
  for (std::size_t p = 0; p < P; ++p) {
    if (!mask[p]) continue;
    if (targets[p] < 0 || static_cast<std::size_t>(targets[p]) >= K) {
      throw ContractError("softmax_cross_entropy: target " + std::to_string(targets[p]) +
                          " outside [0," + std::to_string(K) + ")");
    }
    pixels.push_back(p);
  }
  LossResult<T> result;
  if (pixels.empty()) {
    result.loss = tape.constant(Tensor<T>({1}, T{0}));
    result.excluded = P;
    result.sentinel = true;
    return result;
  }
  const auto& lv = logits.value();
  std::vector<T> probs(pixels.size() * K);
  CompensatedSum<T> total;
  for (std::size_t n = 0; n < pixels.size(); ++n) {
    const std::size_t p = pixels[n];
    T m = lv[p];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, lv[k * P + p]);
    T s{0};
    for (std::size_t k = 0; k < K; ++k) {
      const T e = std::exp(lv[k * P + p] - m);
      probs[n * K + k] = e;
      s += e;
    }
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] /= s;
    const T lse = m + std::log(s);
    total.add(lse - lv[static_cast<std::size_t>(targets[p]) * P + p]);
  }
  const T count = static_cast<T>(pixels.size());
  Tensor<T> out({1}, total.value() / count);
  std::vector<int> tgt(targets.begin(), targets.end());
  const auto li = logits.id();
  result.loss = tape.record(
      std::move(out), {logits},
      [=, probs = std::move(probs), pixels = std::move(pixels), tgt = std::move(tgt)](
          Tape<T>& t, std::span<const T> g) {
        auto dl = t.grad_buffer(li);
        const T s = g[0] / count;
        for (std::size_t n = 0; n < pixels.size(); ++n) {
          const std::size_t p = pixels[n];
          for (std::size_t k = 0; k < K; ++k) {
            T d = probs[n * K + k];
            if (static_cast<int>(k) == tgt[p]) d -= T{1};
            dl[k * P + p] += s * d;
          }
        }
      });
  result.contributing = count > 0 ? static_cast<std::size_t>(count) : 0;
  result.excluded = P - result.contributing;
  return result;
}

template <class T>
Var<T> sum(const Var<T>& x) {
  CompensatedSum<T> s;
  for (auto v : x.value().data()) s.add(v);
  const auto xi = x.id();
  return x.tape().record(Tensor<T>({1}, s.value()), {x}, [xi](Tape<T>& t, std::span<const T> g) {
    auto dx = t.grad_buffer(xi);
    for (auto& v : dx) v += g[0];
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const auto xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi](Tape<T>& t, std::span<const T> g) {
    detail::accumulate(t, xi, g);
  });
}

/// Concatenates two tensors of equal rank along `axis`.
template <class T>
Var<T> concat(const Var<T>& a, const Var<T>& b, std::size_t axis) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool ok = as.size() == bs.size() && axis < as.size();
  for (std::size_t d = 0; ok && d < as.size(); ++d) ok = d == axis || as[d] == bs[d];
  if (!ok) {
    throw DimensionError("concat: " + to_string(as) + " and " + to_string(bs) + " on axis " +
                         std::to_string(axis));
  }
  Shape os = as;
  os[axis] = as[axis] + bs[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= as[d];
  for (std::size_t d = axis + 1; d < as.size(); ++d) inner *= as[d];
  const std::size_t ablk = as[axis] * inner, bblk = bs[axis] * inner;
  Tensor<T> out(os);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data().data() + o * ablk, ablk, out.data().data() + o * (ablk + bblk));
    std::copy_n(bv.data().data() + o * bblk, bblk, out.data().data() + o * (ablk + bblk) + ablk);
  }
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, std::span<const T> g) {
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = g.data() + o * (ablk + bblk);
      if (t.requires_grad(ai)) {
        auto da = t.grad_buffer(ai);
        for (std::size_t i = 0; i < ablk; ++i) da[o * ablk + i] += src[i];
      }
      if (t.requires_grad(bi)) {
        auto db = t.grad_buffer(bi);
        for (std::size_t i = 0; i < bblk; ++i) db[o * bblk + i] += src[ablk + i];
      }
    }
  });
}

/// Stacks equally shaped tensors along a new leading axis.
template <class T>
Var<T> stack(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("stack: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Shape lead = a.shape();
  lead.insert(lead.begin(), 1);
  return concat(reshape(a, lead), reshape(b, lead), 0);
}

/// Sums out the leading axis: [T,...] -> [...].
template <class T>
Var<T> sum_leading(const Var<T>& x) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw DimensionError("sum_leading: rank too small " + to_string(xs));
  Shape os(xs.begin() + 1, xs.end());
  const std::size_t n = numel(os);
  Tensor<T> out(os);
  const auto& xv = x.value();
  for (std::size_t t = 0; t < xs[0]; ++t) {
    for (std::size_t i = 0; i < n; ++i) out[i] += xv[t * n + i];
  }
  const auto xi = x.id();
  const std::size_t lead = xs[0];
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto dx = t.grad_buffer(xi);
    for (std::size_t k = 0; k < lead; ++k) {
      for (std::size_t i = 0; i < n; ++i) dx[k * n + i] += g[i];
    }
  });
}

/// Per-pixel L2 normalization of x[D,H,W] along D: y = x / (|x| + eps).
template <class T>
Var<T> l2_normalize_channels(const Var<T>& x, T eps = T(1e-12)) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw DimensionError("l2_normalize_channels: " + to_string(xs));
  const std::size_t D = xs[0], P = xs[1] * xs[2];
  const auto& xv = x.value();
  std::vector<T> norms(P, T{0});
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t p = 0; p < P; ++p) norms[p] += xv[d * P + p] * xv[d * P + p];
  }
  for (auto& n : norms) n = std::sqrt(n);
  Tensor<T> out(xs);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t p = 0; p < P; ++p) out[d * P + p] = xv[d * P + p] / (norms[p] + eps);
  }
  const auto xi = x.id();
  return x.tape().record(std::move(out), {x},
                         [=, norms = std::move(norms)](Tape<T>& t, std::span<const T> g) {
                           const auto& xv2 = t.value(xi);
                           auto dx = t.grad_buffer(xi);
                           for (std::size_t p = 0; p < P; ++p) {
                             const T r = norms[p];
                             const T n = r + eps;
                             T dot{0};
                             for (std::size_t d = 0; d < D; ++d) dot += g[d * P + p] * xv2[d * P + p];
                             const T coef = r > T{0} ? dot / (r * n * n) : T{0};
                             for (std::size_t d = 0; d < D; ++d) {
                               dx[d * P + p] += g[d * P + p] / n - xv2[d * P + p] * coef;
                             }
                           }
                         });
}

/// Gathers pixel vectors of x[D,H,W] at flat pixel indices into rows [N,D].
template <class T>
Var<T> gather_pixels(const Var<T>& x, std::span<const std::size_t> pixels) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw DimensionError("gather_pixels: " + to_string(xs));
  const std::size_t D = xs[0], P = xs[1] * xs[2];
  for (auto p : pixels) {
    if (p >= P) throw DimensionError("gather_pixels: index " + std::to_string(p) + " >= " + std::to_string(P));
  }
  const std::size_t N = pixels.size();
  if (N == 0) throw ContractError("gather_pixels: empty index set");
  Tensor<T> out({N, D});
  const auto& xv = x.value();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t d = 0; d < D; ++d) out[n * D + d] = xv[d * P + pixels[n]];
  }
  std::vector<std::size_t> idx(pixels.begin(), pixels.end());
  const auto xi = x.id();
  return x.tape().record(std::move(out), {x},
                         [=, idx = std::move(idx)](Tape<T>& t, std::span<const T> g) {
                           auto dx = t.grad_buffer(xi);
                           for (std::size_t n = 0; n < N; ++n) {
                             for (std::size_t d = 0; d < D; ++d) dx[d * P + idx[n]] += g[n * D + d];
                           }
                         });
}

}  // namespace stpl
