#pragma once

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "stpl/contrast.hpp"
#include "stpl/diffcore/gradcheck.hpp"
#include "stpl/segnet.hpp"

namespace stpl {

struct GradSuiteRow {
  std::string op;
  std::size_t seeds = 0;
  std::size_t passed = 0;
  double max_rel_error = 0.0;
  std::string first_failure;

  bool ok() const { return seeds > 0 && passed == seeds; }
};

struct GradSuiteReport {
  std::vector<GradSuiteRow> rows;
  double seconds = 0.0;

  bool ok() const {
    for (const auto& r : rows) {
      if (!r.ok()) return false;
    }
    return !rows.empty();
  }
};

namespace gradsuite_detail {

inline Tensor<double> uniform(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Keeps values at least `gap` away from zero so relu stays off its kink.
inline Tensor<double> away_from_zero(const Shape& s, std::mt19937_64& rng, double gap) {
  auto t = uniform(s, rng);
  for (auto& v : t.data()) v = v < 0 ? v - gap : v + gap;
  return t;
}

// One seeded case: inputs plus the function under test.
struct Case {
  GradCheckFn fn;
  std::vector<Tensor<double>> inputs;
};

using CaseFactory = std::function<Case(std::mt19937_64&)>;

inline PseudoLabels striped_labels(std::size_t H, std::size_t W, std::size_t K) {
  PseudoLabels pl;
  pl.height = H;
  pl.width = W;
  for (std::size_t i = 0; i < H * W; ++i) pl.classes.push_back(static_cast<int>(i % K));
  pl.confidence.assign(H * W, 1.0);
  pl.mask.assign(H * W, 1);
  return pl;
}

// Binds `names` to v[offset...] and everything else in `params` to constants.
inline BoundParams<double> bind_some(Tape<double>& tape, const ParamMap<double>& params,
                                     const std::vector<std::string>& names,
                                     const std::vector<Var<double>>& v, std::size_t offset) {
  std::map<std::string, Var<double>> leaves;
  for (const auto& [n, t] : params) leaves.emplace(n, tape.constant(t));
  for (std::size_t i = 0; i < names.size(); ++i) leaves.insert_or_assign(names[i], v[offset + i]);
  return BoundParams<double>(tape, std::move(leaves));
}

inline std::vector<std::pair<std::string, CaseFactory>> factories() {
  std::vector<std::pair<std::string, CaseFactory>> f;
  f.emplace_back("linear", [](std::mt19937_64& rng) {
    return Case{[](Tape<double>&, const std::vector<Var<double>>& v) { return linear(v[0], v[1], v[2]); },
                {uniform({3, 4}, rng), uniform({4, 5}, rng), uniform({5}, rng)}};
  });
  f.emplace_back("conv2d", [](std::mt19937_64& rng) {
    const std::size_t stride = 1 + rng() % 2;
    return Case{[stride](Tape<double>&, const std::vector<Var<double>>& v) {
                  return conv2d(v[0], v[1], v[2], 1, stride);
                },
                {uniform({2, 5, 5}, rng), uniform({3, 2, 3, 3}, rng), uniform({3}, rng)}};
  });
  f.emplace_back("elementwise", [](std::mt19937_64& rng) {
    return Case{[](Tape<double>&, const std::vector<Var<double>>& v) {
                  auto a = add(mul(v[0], v[1]), scale(v[1], 0.5));
                  return add(relu(v[0]), sigmoid(mul(a, v[2])));
                },
                {away_from_zero({2, 3}, rng, 0.2), away_from_zero({2, 3}, rng, 0.2), uniform({2, 3}, rng)}};
  });
  f.emplace_back("pool", [](std::mt19937_64& rng) {
    return Case{[](Tape<double>&, const std::vector<Var<double>>& v) {
                  return add(pool(v[0], PoolKind::kAvg, AxisSet::kSpatial),
                             scale(pool(v[0], PoolKind::kMax, AxisSet::kSpatial), 2.0));
                },
                {uniform({3, 3, 4}, rng)}};
  });
  f.emplace_back("bilinear_sample", [](std::mt19937_64& rng) {
    // Fractional coordinates keep every tap weight differentiable.
    Tensor<double> coords({2, 3, 3});
    std::uniform_real_distribution<double> frac(0.1, 0.9);
    for (std::size_t i = 0; i < 9; ++i) {
      coords[i] = static_cast<double>(rng() % 4) - 0.5 + frac(rng);
      coords[9 + i] = static_cast<double>(rng() % 4) - 0.5 + frac(rng);
    }
    return Case{[coords](Tape<double>&, const std::vector<Var<double>>& v) { return bilinear_sample(v[0], coords); },
                {uniform({2, 4, 4}, rng)}};
  });
  f.emplace_back("softmax_cross_entropy", [](std::mt19937_64& rng) {
    std::vector<int> targets(12);
    std::vector<std::uint8_t> mask(12);
    for (std::size_t i = 0; i < 12; ++i) {
      targets[i] = static_cast<int>(rng() % 4);
      mask[i] = static_cast<std::uint8_t>(i == 0 || rng() % 3 != 0);
    }
    return Case{[targets, mask](Tape<double>&, const std::vector<Var<double>>& v) {
                  return softmax_cross_entropy(v[0], std::span<const int>(targets),
                                               std::span<const std::uint8_t>(mask))
                      .loss;
                },
                {uniform({4, 3, 4}, rng, -3.0, 3.0)}};
  });
  f.emplace_back("stam_apply", [](std::mt19937_64& rng) {
    ParamMap<double> params;
    init_fusion_params(params, FusionKind::kStam, 3, rng);
    for (auto& [n, t] : params) {
      if (!is_buffer(n)) t = uniform(t.shape(), rng, -0.5, 0.5);
    }
    std::vector<std::string> names;
    std::vector<Tensor<double>> inputs{uniform({2, 3, 4, 4}, rng)};
    for (const auto& [n, t] : params) {
      names.push_back(n);
      inputs.push_back(t);
    }
    return Case{[names, params](Tape<double>& tape, const std::vector<Var<double>>& v) {
                  return stam_apply(v[0], bind_some(tape, params, names, v, 1)).out;
                },
                std::move(inputs)};
  });
  f.emplace_back("contrastive_loss", [](std::mt19937_64& rng) {
    const std::size_t K = 2 + rng() % 3;
    auto pl = striped_labels(3, 4, K);
    return Case{[pl](Tape<double>&, const std::vector<Var<double>>& v) {
                  auto b = build_pairs(l2_normalize_channels(v[0]), l2_normalize_channels(v[1]), pl, 0, 0, 0.5);
                  return contrastive_loss(b).loss;
                },
                {uniform({4, 3, 4}, rng), uniform({4, 3, 4}, rng)}};
  });
  f.emplace_back("full_model", [](std::mt19937_64& rng) {
    ModelConfig c;
    c.widths = {3, 3};
    c.num_classes = 3;
    c.proj_dim = 3;
    c.fusion = FusionKind::kStam;
    auto m = make_model<double>(c, rng());
    std::vector<std::string> names;
    std::vector<Tensor<double>> inputs;
    for (auto& [n, t] : m.params) {
      if (is_buffer(n)) continue;
      names.push_back(n);
      inputs.push_back(t);
    }
    auto frame = [&rng] {
      Tensor<float> t({3, 6, 6});
      std::uniform_real_distribution<float> u(0.0f, 1.0f);
      for (auto& v : t.data()) v = u(rng);
      return t;
    };
    const auto f0 = frame(), f1 = frame();
    Tensor<float> flow({2, 6, 6});
    std::uniform_real_distribution<float> fu(-0.8f, 0.8f);
    for (auto& v : flow.data()) v = fu(rng);
    std::vector<int> targets(9);
    for (auto& t : targets) t = static_cast<int>(rng() % 3);
    const std::vector<std::uint8_t> mask(9, 1);
    const auto pl = striped_labels(3, 3, 3);
    return Case{[=, params = m.params](Tape<double>& tape, const std::vector<Var<double>>& v) {
                  auto p = bind_some(tape, params, names, v, 0);
                  auto pf = pair_features(p, c, f0, f1, &flow);
                  auto ce = softmax_cross_entropy(classify(p, pf.fused), std::span<const int>(targets),
                                                  std::span<const std::uint8_t>(mask))
                                .loss;
                  auto b = build_pairs(project(p, pf.fused), project(p, pf.cur), pl, 0, 0, 0.5);
                  return add(ce, contrastive_loss(b).loss);
                },
                std::move(inputs)};
  });
  return f;
}

}  // namespace gradsuite_detail

/// Names of the operations covered by run_grad_suite.
inline std::vector<std::string> grad_suite_ops() {
  std::vector<std::string> out;
  for (const auto& [n, f] : gradsuite_detail::factories()) out.push_back(n);
  return out;
}

/// Central-difference checks of every differentiable operation in float64,
/// `seeds` random cases each. `only` restricts to one op name when non-empty.
inline GradSuiteReport run_grad_suite(std::size_t seeds, std::uint64_t base_seed = 0, double tolerance = 1e-4,
                                      const std::string& only = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  GradSuiteReport rep;
  for (const auto& [name, make] : gradsuite_detail::factories()) {
    if (!only.empty() && only != name) continue;
    GradSuiteRow row;
    row.op = name;
    for (std::size_t s = 0; s < seeds; ++s) {
      std::mt19937_64 rng(mix_seed(base_seed, s * 7919 + row.op.size()));
      auto c = make(rng);
      auto r = grad_check(c.fn, c.inputs, 1e-5, tolerance);
      ++row.seeds;
      row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
      if (r.passed) {
        ++row.passed;
      } else if (row.first_failure.empty()) {
        row.first_failure = "seed " + std::to_string(s) + ": " + r.message;
      }
    }
    rep.rows.push_back(std::move(row));
  }
  if (!only.empty() && rep.rows.empty()) throw ConfigError("gradcheck: unknown op '" + only + "'");
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace stpl
