#pragma once

#include <random>
#include <string>

#include "stpl/diffcore/ops.hpp"
#include "stpl/params.hpp"

namespace stpl {

/// Fusion operation f combining the propagated previous feature with the current one.
enum class FusionKind { kAdd, kConv1x1, kConcat, kStam, kIdentity };

/// Which single operand Identity fusion passes through.
enum class IdentityOperand { kCurrent, kPrevious };

inline std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::kAdd:
      return "add";
    case FusionKind::kConv1x1:
      return "conv1x1";
    case FusionKind::kConcat:
      return "concat";
    case FusionKind::kStam:
      return "stam";
    case FusionKind::kIdentity:
      return "identity";
  }
  return "?";
}

inline FusionKind parse_fusion(const std::string& s) {
  if (s == "add") return FusionKind::kAdd;
  if (s == "conv1x1") return FusionKind::kConv1x1;
  if (s == "concat") return FusionKind::kConcat;
  if (s == "stam") return FusionKind::kStam;
  if (s == "identity") return FusionKind::kIdentity;
  throw ConfigError("unknown fusion kind '" + s + "'");
}

/// Hidden width of the temporal-attention bottleneck for a T-frame stack.
inline std::size_t stam_hidden(std::size_t frames) { return std::max<std::size_t>(frames, 2); }

inline constexpr std::size_t kStamKernel = 7;
inline constexpr std::size_t kStamFrames = 2;

/// Adds the parameters owned by the fusion block for `kind` (C = feature channels).
template <class T>
void init_fusion_params(ParamMap<T>& params, FusionKind kind, std::size_t C, std::mt19937_64& rng) {
  switch (kind) {
    case FusionKind::kConv1x1:
      params["fuse.conv.weight"] = uniform_init<T>({C, 2 * C, 1, 1}, 2 * C, rng);
      params["fuse.conv.bias"] = uniform_init<T>({C}, 2 * C, rng);
      break;
    case FusionKind::kConcat:
      params["fixed.concat_proj.weight"] = uniform_init<T>({C, 2 * C, 1, 1}, 2 * C, rng);
      params["fixed.concat_proj.bias"] = Tensor<T>({C});
      break;
    case FusionKind::kStam: {
      const std::size_t Tn = kStamFrames, Hd = stam_hidden(Tn);
      params["stam.fc1.weight"] = uniform_init<T>({Tn, Hd}, Tn, rng);
      params["stam.fc1.bias"] = uniform_init<T>({Hd}, Tn, rng);
      params["stam.fc2.weight"] = uniform_init<T>({Hd, Tn}, Hd, rng);
      params["stam.fc2.bias"] = uniform_init<T>({Tn}, Hd, rng);
      const std::size_t fan = 2 * kStamKernel * kStamKernel;
      params["stam.conv.weight"] = uniform_init<T>({1, 2, kStamKernel, kStamKernel}, fan, rng);
      params["stam.conv.bias"] = uniform_init<T>({1}, fan, rng);
      break;
    }
    case FusionKind::kAdd:
    case FusionKind::kIdentity:
      break;
  }
}

/// Average-pools a full-resolution flow [2,H,W] over stride x stride blocks
/// and divides the displacement by the stride.
template <class T, class F>
Tensor<T> downscale_flow(const Tensor<F>& flow, std::size_t stride) {
  if (flow.rank() != 3 || flow.dim(0) != 2) {
    throw DimensionError("downscale_flow: expected [2,H,W], got " + to_string(flow.shape()));
  }
  const std::size_t H = flow.dim(1), W = flow.dim(2);
  if (stride == 0 || H % stride != 0 || W % stride != 0) {
    throw ConfigError("downscale_flow: stride " + std::to_string(stride) + " does not divide " +
                      std::to_string(H) + "x" + std::to_string(W));
  }
  const std::size_t Ho = H / stride, Wo = W / stride;
  Tensor<T> out({2, Ho, Wo});
  const double norm = static_cast<double>(stride * stride) * static_cast<double>(stride);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t x = 0; x < Wo; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < stride; ++dy) {
          for (std::size_t dx = 0; dx < stride; ++dx) {
            acc += static_cast<double>(flow.at(c, y * stride + dy, x * stride + dx));
          }
        }
        out.at(c, y, x) = static_cast<T>(acc / norm);
      }
    }
  }
  return out;
}

/// Backward warp: out(p) = feature(p - flow(p)), bilinear with zero padding.
/// The flow is a constant; gradients reach the feature only.
template <class T>
Var<T> warp(const Var<T>& feature, const Tensor<T>& flow) {
  const auto& fs = feature.shape();
  if (fs.size() != 3 || flow.rank() != 3 || flow.dim(0) != 2 || flow.dim(1) != fs[1] ||
      flow.dim(2) != fs[2]) {
    throw DimensionError("warp: feature " + to_string(fs) + " vs flow " + to_string(flow.shape()));
  }
  const std::size_t H = fs[1], W = fs[2], P = H * W;
  Tensor<T> coords({2, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t p = y * W + x;
      coords[p] = static_cast<T>(x) - flow[p];
      coords[P + p] = static_cast<T>(y) - flow[P + p];
    }
  }
  return bilinear_sample(feature, coords);
}

template <class T>
struct StamResult {
  Var<T> out;           // [C,H,W] after summing the temporal axis
  Var<T> pre_reduction; // [2,C,H,W]
  Var<T> temporal_attention;  // [2,1,1,1]
  Var<T> spatial_attention;   // [1,1,H,W]
};

/// Spatio-temporal attention over a two-frame stack z[2,C,H,W]:
///   A_tem = sigmoid(FC(avg_{C,H,W} z) + FC(max_{C,H,W} z))      [2,1,1,1]
///   m     = A_tem * z
///   A_spa = sigmoid(conv7x7([avg_{T,C} m, max_{T,C} m]))          [1,1,H,W]
///   out   = sum_T (A_spa * m + z)
/// FC is fc2(relu(fc1(.))) with weights shared by both pooling paths.
template <class T>
StamResult<T> stam_apply(const Var<T>& z, const BoundParams<T>& p) {
  const auto& zs = z.shape();
  if (zs.size() != 4) throw DimensionError("stam_apply: expected [T,C,H,W], got " + to_string(zs));
  if (zs[0] != kStamFrames) {
    throw ConfigError("stam_apply: needs a stack of exactly 2 frames, got " + std::to_string(zs[0]));
  }
  const std::size_t Tn = zs[0], H = zs[2], W = zs[3];
  auto fc = [&](const Var<T>& pooled) {
    auto v = reshape(pooled, {1, Tn});
    v = relu(linear(v, p["stam.fc1.weight"], p["stam.fc1.bias"]));
    return linear(v, p["stam.fc2.weight"], p["stam.fc2.bias"]);
  };
  auto avg_t = pool(z, PoolKind::kAvg, AxisSet::kChannelAndSpatial);
  auto max_t = pool(z, PoolKind::kMax, AxisSet::kChannelAndSpatial);
  auto a_tem = reshape(sigmoid(add(fc(avg_t), fc(max_t))), {Tn, 1, 1, 1});
  auto m = mul(z, a_tem);

  auto avg_s = pool(m, PoolKind::kAvg, AxisSet::kChannel);
  auto max_s = pool(m, PoolKind::kMax, AxisSet::kChannel);
  auto desc = reshape(concat(avg_s, max_s, 1), {2, H, W});
  auto conv = conv2d(desc, p["stam.conv.weight"], p["stam.conv.bias"], kStamKernel / 2);
  auto a_spa = reshape(sigmoid(conv), {1, 1, H, W});

  auto pre = add(mul(m, a_spa), z);
  return StamResult<T>{sum_leading(pre), pre, a_tem, a_spa};
}

/// f(z'_{t-1}, z_t) for the selected kind; output is [C,H,W].
template <class T>
Var<T> fuse(const Var<T>& prev_warped, const Var<T>& cur, FusionKind kind, const BoundParams<T>& p,
            IdentityOperand identity = IdentityOperand::kCurrent) {
  if (prev_warped.shape() != cur.shape()) {
    throw DimensionError("fuse: " + to_string(prev_warped.shape()) + " vs " + to_string(cur.shape()));
  }
  switch (kind) {
    case FusionKind::kAdd:
      return add(prev_warped, cur);
    case FusionKind::kConv1x1:
      return conv2d(concat(prev_warped, cur, 0), p["fuse.conv.weight"], p["fuse.conv.bias"], 0);
    case FusionKind::kConcat:
      return conv2d(concat(prev_warped, cur, 0), p["fixed.concat_proj.weight"],
                    p["fixed.concat_proj.bias"], 0);
    case FusionKind::kStam:
      return stam_apply(stack(prev_warped, cur), p).out;
    case FusionKind::kIdentity:
      return identity == IdentityOperand::kCurrent ? cur : prev_warped;
  }
  throw ConfigError("fuse: unknown fusion kind");
}

}  // namespace stpl
