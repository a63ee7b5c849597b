#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stpl/diffcore/ops.hpp"
#include "stpl/segnet.hpp"
#include "stpl/synthvid.hpp"

namespace stpl {

// ---------------------------------------------------------------------------
// Cross-frame augmentation T: photometric only, so pixel positions never move.

struct AugmentSpec {
  double blur_min = 0.0;
  double blur_max = 1.5;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  std::uint64_t seed = 0;
};

inline AugmentSpec zero_augment() {
  AugmentSpec s;
  s.blur_max = 0.0;
  s.brightness = s.contrast = s.saturation = 0.0;
  return s;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Random blur and colour jitter, drawn independently per frame.
inline std::vector<Tensor<float>> augment_frames(const std::vector<Tensor<float>>& frames,
                                                 const AugmentSpec& spec) {
  std::vector<Tensor<float>> out = frames;
  for (std::size_t t = 0; t < out.size(); ++t) {
    std::mt19937_64 rng(mix_seed(spec.seed, t));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto draw = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    const double b = draw(1.0 - spec.brightness, 1.0 + spec.brightness);
    const double c = draw(1.0 - spec.contrast, 1.0 + spec.contrast);
    const double s = draw(1.0 - spec.saturation, 1.0 + spec.saturation);
    const double sigma = draw(spec.blur_min, spec.blur_max);

    auto& f = out[t];
    const std::size_t P = f.dim(1) * f.dim(2);
    bool touched = false;
    if (b != 1.0) {
      for (auto& v : f.data()) v = static_cast<float>(v * b);
      touched = true;
    }
    if (c != 1.0) {
      double mean = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        mean += 0.299 * f[p] + 0.587 * f[P + p] + 0.114 * f[2 * P + p];
      }
      mean /= static_cast<double>(P);
      for (auto& v : f.data()) v = static_cast<float>((v - mean) * c + mean);
      touched = true;
    }
    if (s != 1.0) {
      for (std::size_t p = 0; p < P; ++p) {
        const double g = 0.299 * f[p] + 0.587 * f[P + p] + 0.114 * f[2 * P + p];
        for (std::size_t ch = 0; ch < 3; ++ch) {
          f[ch * P + p] = static_cast<float>(g + (f[ch * P + p] - g) * s);
        }
      }
      touched = true;
    }
    if (sigma > 0.0) {
      synth_detail::gaussian_blur(f, sigma);
      touched = true;
    }
    if (touched) synth_detail::clamp_unit(f);
  }
  return out;
}

/// X~ = T(X); flows (and labels, if any) are copied unchanged.
inline UnlabeledSequence augment_sequence(const UnlabeledSequence& x, const AugmentSpec& spec) {
  return UnlabeledSequence{augment_frames(x.frames, spec), x.flows};
}

inline VideoSequence augment_sequence(const VideoSequence& x, const AugmentSpec& spec) {
  VideoSequence out = x;
  out.frames = augment_frames(x.frames, spec);
  return out;
}

// ---------------------------------------------------------------------------
// Pseudo-labels with confident top-k filtering.

struct PseudoLabels {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> classes;        // argmax
  std::vector<double> confidence;  // max softmax probability
  std::vector<std::uint8_t> mask;  // confident subset
  double k = 1.0;

  std::size_t confident_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

/// floor(k * n), robust to k values like 0.7 that are not exact in binary.
inline std::size_t keep_count(double k, std::size_t n) {
  return static_cast<std::size_t>(std::floor(k * static_cast<double>(n) + 1e-9));
}

/// Keeps the floor(k*N) most confident pixels; ties go to the lower row-major
/// index. With `per_class`, the proportion is applied within each predicted class.
template <class T>
PseudoLabels pseudo_labels(const Tensor<T>& logits, double k, bool per_class = false) {
  if (!(k > 0.0 && k <= 1.0)) {
    throw ConfigError("pseudo_labels: k must lie in (0,1], got " + std::to_string(k));
  }
  if (logits.rank() != 3) throw DimensionError("pseudo_labels: logits " + to_string(logits.shape()));
  const std::size_t K = logits.dim(0), P = logits.dim(1) * logits.dim(2);
  PseudoLabels out;
  out.height = logits.dim(1);
  out.width = logits.dim(2);
  out.k = k;
  out.classes = argmax_classes(logits);
  out.confidence.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    const double m = static_cast<double>(logits[static_cast<std::size_t>(out.classes[p]) * P + p]);
    double s = 0.0;
    for (std::size_t c = 0; c < K; ++c) s += std::exp(static_cast<double>(logits[c * P + p]) - m);
    out.confidence[p] = 1.0 / s;
  }
  out.mask.assign(P, 0);
  auto select = [&](std::vector<std::size_t> idx) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return out.confidence[a] > out.confidence[b];
    });
    const std::size_t n = keep_count(k, idx.size());
    for (std::size_t i = 0; i < n; ++i) out.mask[idx[i]] = 1;
  };
  if (!per_class) {
    std::vector<std::size_t> idx(P);
    std::iota(idx.begin(), idx.end(), 0);
    select(std::move(idx));
  } else {
    for (std::size_t c = 0; c < K; ++c) {
      std::vector<std::size_t> idx;
      for (std::size_t p = 0; p < P; ++p) {
        if (out.classes[p] == static_cast<int>(c)) idx.push_back(p);
      }
      if (!idx.empty()) select(std::move(idx));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Positive/negative sets and the pixel-to-pixel contrastive loss.

/// Confident query and key pixel embeddings. Positives of a query are the
/// keys with the same pseudo-class, negatives the keys with a different one.
template <class T>
struct ContrastBatch {
  Var<T> queries;  // [Nq,D]
  std::vector<int> query_classes;
  std::vector<std::size_t> query_pixels;
  Var<T> keys;  // [Nk,D]
  std::vector<int> key_classes;
  std::vector<std::size_t> key_pixels;
  T tau = T(0.07);
  bool empty = true;
};

/// Confident pixels grouped by class, each class capped at `cap` by seeded
/// uniform subsampling; returned in ascending pixel order.
inline std::vector<std::size_t> select_confident(const PseudoLabels& pl, std::size_t cap,
                                                 std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t p = 0; p < pl.mask.size(); ++p) {
    if (pl.mask[p]) by_class[pl.classes[p]].push_back(p);
  }
  std::vector<std::size_t> out;
  for (auto& [cls, idx] : by_class) {
    if (cap > 0 && idx.size() > cap) {
      std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(cls)));
      for (std::size_t i = 0; i < cap; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
      }
      idx.resize(cap);
    }
    out.insert(out.end(), idx.begin(), idx.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Builds queries from `query_emb` and keys from `key_emb` ([D,h,w], unit norm).
/// `key_pseudo` defaults to the query pseudo-labels (photometric augmentation
/// keeps pixels aligned).
template <class T>
ContrastBatch<T> build_pairs(const Var<T>& query_emb, const PseudoLabels& query_pseudo,
                             const Var<T>& key_emb, const PseudoLabels& key_pseudo, std::size_t cap,
                             std::uint64_t seed, T tau) {
  ContrastBatch<T> b;
  b.tau = tau;
  const std::size_t P = query_pseudo.mask.size();
  if (query_emb.shape().size() != 3 || query_emb.shape()[1] * query_emb.shape()[2] != P ||
      key_emb.shape().size() != 3 || key_emb.shape()[1] * key_emb.shape()[2] != key_pseudo.mask.size()) {
    throw DimensionError("build_pairs: embeddings " + to_string(query_emb.shape()) + " / " +
                         to_string(key_emb.shape()) + " do not match pseudo-label maps");
  }
  b.query_pixels = select_confident(query_pseudo, cap, mix_seed(seed, 1));
  b.key_pixels = select_confident(key_pseudo, cap, mix_seed(seed, 2));
  if (b.query_pixels.empty() || b.key_pixels.empty()) return b;
  for (auto p : b.query_pixels) b.query_classes.push_back(query_pseudo.classes[p]);
  for (auto p : b.key_pixels) b.key_classes.push_back(key_pseudo.classes[p]);
  b.queries = gather_pixels(query_emb, std::span<const std::size_t>(b.query_pixels));
  b.keys = gather_pixels(key_emb, std::span<const std::size_t>(b.key_pixels));
  b.empty = false;
  return b;
}

template <class T>
ContrastBatch<T> build_pairs(const Var<T>& query_emb, const Var<T>& key_emb,
                             const PseudoLabels& pseudo, std::size_t cap, std::uint64_t seed, T tau) {
  return build_pairs(query_emb, pseudo, key_emb, pseudo, cap, seed, tau);
}

struct ContrastOptions {
  /// Adds the positives to the softmax denominator (SupCon-style comparison runs).
  bool positives_in_denominator = false;
};

/// For each query q with non-empty positive set P and negative set N:
///   L_q = -(1/|P|) sum_{p in P} log( exp(q.p/tau) / sum_{n in N} exp(q.n/tau) )
/// and the loss is the mean of L_q over contributing queries. Queries with an
/// empty P (or empty N, unless positives join the denominator) are excluded.
template <class T>
LossResult<T> contrastive_loss(const ContrastBatch<T>& batch, ContrastOptions opts = {}) {
  if (!(batch.tau > T{0})) throw ConfigError("contrastive_loss: temperature must be positive");
  LossResult<T> result;
  if (batch.empty) {
    result.sentinel = true;
    return result;
  }
  auto& tape = batch.queries.tape();
  const auto& qs = batch.queries.shape();
  const auto& ks = batch.keys.shape();
  if (qs.size() != 2 || ks.size() != 2 || qs[1] != ks[1] || qs[0] != batch.query_classes.size() ||
      ks[0] != batch.key_classes.size()) {
    throw DimensionError("contrastive_loss: queries " + to_string(qs) + " / keys " + to_string(ks));
  }
  const auto Nq = static_cast<Eigen::Index>(qs[0]);
  const auto Nk = static_cast<Eigen::Index>(ks[0]);
  const auto D = static_cast<Eigen::Index>(qs[1]);
  const T tau = batch.tau;
  detail::ConstMatMap<T> Q(batch.queries.value().data().data(), Nq, D);
  detail::ConstMatMap<T> K(batch.keys.value().data().data(), Nk, D);
  detail::RowMat<T> S = (Q * K.transpose()) / tau;

  // Coefficients dL/dS (before the 1/count and 1/tau factors).
  detail::RowMat<T> G = detail::RowMat<T>::Zero(Nq, Nk);
  CompensatedSum<T> total;
  std::size_t contributing = 0;
  for (Eigen::Index i = 0; i < Nq; ++i) {
    const int cq = batch.query_classes[static_cast<std::size_t>(i)];
    std::size_t npos = 0, nneg = 0;
    T m = -std::numeric_limits<T>::infinity();
    for (Eigen::Index j = 0; j < Nk; ++j) {
      const bool pos = batch.key_classes[static_cast<std::size_t>(j)] == cq;
      if (pos) ++npos;
      else ++nneg;
      if (!pos || opts.positives_in_denominator) m = std::max(m, S(i, j));
    }
    if (npos == 0 || (nneg == 0 && !opts.positives_in_denominator)) continue;
    T denom{0};
    CompensatedSum<T> pos_sum;
    for (Eigen::Index j = 0; j < Nk; ++j) {
      const bool pos = batch.key_classes[static_cast<std::size_t>(j)] == cq;
      if (!pos || opts.positives_in_denominator) {
        const T e = std::exp(S(i, j) - m);
        G(i, j) = e;
        denom += e;
      }
      if (pos) pos_sum.add(S(i, j));
    }
    const T inv_pos = T{1} / static_cast<T>(npos);
    for (Eigen::Index j = 0; j < Nk; ++j) {
      G(i, j) /= denom;
      if (batch.key_classes[static_cast<std::size_t>(j)] == cq) G(i, j) -= inv_pos;
    }
    total.add(m + std::log(denom) - pos_sum.value() * inv_pos);
    ++contributing;
  }
  result.contributing = contributing;
  result.excluded = static_cast<std::size_t>(Nq) - contributing;
  if (contributing == 0) {
    result.loss = tape.constant(Tensor<T>({1}, T{0}));
    result.sentinel = true;
    return result;
  }
  const T count = static_cast<T>(contributing);
  G /= count * tau;
  const auto qi = batch.queries.id(), ki = batch.keys.id();
  result.loss = tape.record(
      Tensor<T>({1}, total.value() / count), {batch.queries, batch.keys},
      [=, G = std::move(G)](Tape<T>& t, std::span<const T> g) {
        if (t.requires_grad(qi)) {
          detail::ConstMatMap<T> Kv(t.value(ki).data().data(), Nk, D);
          detail::MatMap<T> dQ(t.grad_buffer(qi).data(), Nq, D);
          dQ.noalias() += g[0] * (G * Kv);
        }
        if (t.requires_grad(ki)) {
          detail::ConstMatMap<T> Qv(t.value(qi).data().data(), Nq, D);
          detail::MatMap<T> dK(t.grad_buffer(ki).data(), Nk, D);
          dK.noalias() += g[0] * (G.transpose() * Qv);
        }
      });
  return result;
}

// ---------------------------------------------------------------------------
// Adaptation objectives (the ablation variants share one routing engine).

enum class AdaptObjective { kStpl, kSpatialOnly, kTemporalOnly, kNaiveTS, kDuplicateCL, kVanillaSelfTrain };

inline std::string to_string(AdaptObjective o) {
  switch (o) {
    case AdaptObjective::kStpl:
      return "stpl";
    case AdaptObjective::kSpatialOnly:
      return "spatial";
    case AdaptObjective::kTemporalOnly:
      return "temporal";
    case AdaptObjective::kNaiveTS:
      return "naive";
    case AdaptObjective::kDuplicateCL:
      return "duplicate";
    case AdaptObjective::kVanillaSelfTrain:
      return "selftrain";
  }
  return "?";
}

inline AdaptObjective parse_objective(const std::string& s) {
  if (s == "stpl") return AdaptObjective::kStpl;
  if (s == "spatial") return AdaptObjective::kSpatialOnly;
  if (s == "temporal") return AdaptObjective::kTemporalOnly;
  if (s == "naive") return AdaptObjective::kNaiveTS;
  if (s == "duplicate") return AdaptObjective::kDuplicateCL;
  if (s == "selftrain") return AdaptObjective::kVanillaSelfTrain;
  throw ConfigError("unknown objective '" + s + "'");
}

/// Contrastive objectives leave the classifier frozen; self-training updates it.
inline bool trains_classifier(AdaptObjective o) { return o == AdaptObjective::kVanillaSelfTrain; }

struct ObjectiveHyper {
  double tau = 0.07;
  double k = 0.7;
  std::size_t cap = 256;
  std::uint64_t seed = 0;
  bool positives_in_denominator = false;
  bool per_class_topk = false;
  /// Temporal-only keys from the flow-warped previous feature instead of the raw one.
  bool warp_temporal_keys = false;
};

/// Feature source feeding one side of the contrast.
enum class Branch {
  kFusedOriginal,        // z_{(t-1,t)}
  kFusedAugmented,       // z~_{(t-1,t)}
  kCurrentOriginal,      // z_t through Identity fusion
  kCurrentAugmented,     // z~_t through Identity fusion
  kPreviousOriginal,     // z_{t-1} through Identity fusion
  kPreviousWarpedOriginal,  // z'_{t-1}
};

struct ContrastRoute {
  Branch query;
  Branch key;
};

inline ContrastRoute route_for(AdaptObjective o, bool warp_temporal_keys = false) {
  switch (o) {
    case AdaptObjective::kStpl:
      return {Branch::kFusedOriginal, Branch::kFusedAugmented};
    case AdaptObjective::kSpatialOnly:
      return {Branch::kCurrentOriginal, Branch::kCurrentAugmented};
    case AdaptObjective::kTemporalOnly:
      return {Branch::kCurrentOriginal,
              warp_temporal_keys ? Branch::kPreviousWarpedOriginal : Branch::kPreviousOriginal};
    case AdaptObjective::kDuplicateCL:
      return {Branch::kCurrentOriginal, Branch::kCurrentOriginal};
    default:
      throw ConfigError("route_for: objective " + to_string(o) + " has no single contrast route");
  }
}

/// One adaptation step's forward graph over a two-frame clip X = {x_{t-1}, x_t}.
/// Pseudo-labels always come from the model's prediction on X, computed from
/// values only (no gradient).
template <class T>
class ObjectiveEngine {
 public:
  ObjectiveEngine(const BoundParams<T>& params, const ModelConfig& config, const UnlabeledSequence& x,
                  const AugmentSpec& augment, const ObjectiveHyper& hyper)
      : p_(params), config_(config), x_(x), augment_(augment), hyper_(hyper) {
    if (x.length() != 2) {
      throw ContractError("objective: clips must have exactly 2 frames, got " + std::to_string(x.length()));
    }
    original_ = pair_features(p_, config_, x_.frames[0], x_.frames[1], &x_.flows[0]);
    cur_pseudo_ = pseudo_labels(logits_of(original_.fused.value()), hyper_.k, hyper_.per_class_topk);
  }

  const PairFeatures<T>& original() const { return original_; }
  const PseudoLabels& current_pseudo() const { return cur_pseudo_; }

  /// Prediction for frame t-1 (self-paired with zero motion), as used at evaluation.
  const PseudoLabels& previous_pseudo() {
    if (!prev_pseudo_) {
      Tape<T> tape(false);
      BoundParams<T> frozen(tape, values_of(p_));
      auto z = tape.constant(original_.prev.value());
      auto f = fuse_pair(frozen, config_, z, z, nullptr).fused;
      prev_pseudo_ = pseudo_labels(classify(frozen, f).value(), hyper_.k, hyper_.per_class_topk);
    }
    return *prev_pseudo_;
  }

  const PairFeatures<T>& augmented() {
    if (!augmented_) {
      AugmentSpec spec = augment_;
      const auto xt = augment_sequence(x_, spec);
      augmented_ = pair_features(p_, config_, xt.frames[0], xt.frames[1], &xt.flows[0]);
    }
    return *augmented_;
  }

  /// Branch feature before the projection head.
  Var<T> feature(Branch b) {
    switch (b) {
      case Branch::kFusedOriginal:
        return original_.fused;
      case Branch::kFusedAugmented:
        return augmented().fused;
      case Branch::kCurrentOriginal:
        return fuse(original_.prev_warped, original_.cur, FusionKind::kIdentity, p_,
                    IdentityOperand::kCurrent);
      case Branch::kCurrentAugmented:
        return fuse(augmented().prev_warped, augmented().cur, FusionKind::kIdentity, p_,
                    IdentityOperand::kCurrent);
      case Branch::kPreviousOriginal:
        return fuse(original_.prev, original_.cur, FusionKind::kIdentity, p_,
                    IdentityOperand::kPrevious);
      case Branch::kPreviousWarpedOriginal:
        return original_.prev_warped;
    }
    throw ConfigError("unknown branch");
  }

  const PseudoLabels& pseudo(Branch b) {
    return b == Branch::kPreviousOriginal ? previous_pseudo() : cur_pseudo_;
  }

  Var<T> embedding(Branch b) {
    auto it = embeddings_.find(b);
    if (it != embeddings_.end()) return it->second;
    auto e = project(p_, feature(b));
    embeddings_.emplace(b, e);
    return e;
  }

  LossResult<T> contrast(const ContrastRoute& route, std::uint64_t salt) {
    auto batch = build_pairs(embedding(route.query), pseudo(route.query), embedding(route.key),
                             pseudo(route.key), hyper_.cap, mix_seed(hyper_.seed, salt),
                             static_cast<T>(hyper_.tau));
    auto r = contrastive_loss(batch, ContrastOptions{hyper_.positives_in_denominator});
    if (!r.loss.valid()) r.loss = p_.tape().constant(Tensor<T>({1}, T{0}));
    return r;
  }

  LossResult<T> self_training() {
    auto logits = classify(p_, original_.fused);
    std::vector<int> targets = cur_pseudo_.classes;
    return softmax_cross_entropy(logits, std::span<const int>(targets),
                                 std::span<const std::uint8_t>(cur_pseudo_.mask));
  }

 private:
  Tensor<T> logits_of(const Tensor<T>& fused) const {
    Tape<T> tape(false);
    BoundParams<T> frozen(tape, values_of(p_));
    return classify(frozen, tape.constant(fused)).value();
  }

  static ParamMap<T> values_of(const BoundParams<T>& p) {
    ParamMap<T> out;
    for (const auto& [name, var] : p.vars()) {
      if (name.rfind("cls.", 0) == 0 || name.rfind("stam.", 0) == 0 || name.rfind("fuse.", 0) == 0 ||
          name.rfind("fixed.", 0) == 0) {
        out.emplace(name, var.value());
      }
    }
    return out;
  }

  const BoundParams<T>& p_;
  const ModelConfig& config_;
  const UnlabeledSequence& x_;
  AugmentSpec augment_;
  ObjectiveHyper hyper_;
  PairFeatures<T> original_;
  std::optional<PairFeatures<T>> augmented_;
  PseudoLabels cur_pseudo_;
  std::optional<PseudoLabels> prev_pseudo_;
  std::map<Branch, Var<T>> embeddings_;
};

/// Loss of one clip under `objective`. Skipped (excluded) query counts are summed.
template <class T>
LossResult<T> objective_loss(const BoundParams<T>& params, const ModelConfig& config,
                             const UnlabeledSequence& x, AdaptObjective objective,
                             const ObjectiveHyper& hyper, const AugmentSpec& augment) {
  ObjectiveEngine<T> engine(params, config, x, augment, hyper);
  switch (objective) {
    case AdaptObjective::kVanillaSelfTrain:
      return engine.self_training();
    case AdaptObjective::kNaiveTS: {
      auto spa = engine.contrast(route_for(AdaptObjective::kSpatialOnly), 11);
      auto tem = engine.contrast(route_for(AdaptObjective::kTemporalOnly, hyper.warp_temporal_keys), 12);
      LossResult<T> r;
      r.loss = add(spa.loss, tem.loss);
      r.contributing = spa.contributing + tem.contributing;
      r.excluded = spa.excluded + tem.excluded;
      r.sentinel = spa.sentinel && tem.sentinel;
      return r;
    }
    case AdaptObjective::kSpatialOnly:
      return engine.contrast(route_for(objective), 11);
    case AdaptObjective::kTemporalOnly:
      return engine.contrast(route_for(objective, hyper.warp_temporal_keys), 12);
    case AdaptObjective::kStpl:
      return engine.contrast(route_for(objective), 10);
    case AdaptObjective::kDuplicateCL:
      return engine.contrast(route_for(objective), 13);
  }
  throw ConfigError("objective_loss: unknown objective");
}

}  // namespace stpl
