#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "stpl/contrast.hpp"
#include "stpl/segnet.hpp"

namespace stpl {

/// Base rate for supervised source training; adaptation uses TrainConfig::lr.
inline constexpr double kSourceLearningRate = 1e-2;

struct TrainConfig {
  std::size_t iterations = 1500;
  double lr = 1e-3;
  double momentum = 0.9;
  double power = 0.9;
  std::size_t batch = 1;
  std::uint64_t seed = 0;
  AdaptObjective objective = AdaptObjective::kStpl;
  double tau = 0.07;
  double k = 0.7;
  std::size_t cap = 256;
  bool positives_in_denominator = false;
  bool per_class_topk = false;
  bool warp_temporal_keys = false;
  AugmentSpec augment{};
};

inline void validate(const TrainConfig& c) {
  if (c.iterations == 0) throw ConfigError("train: iterations must be positive");
  if (!(c.lr >= 0.0)) throw ConfigError("train: learning rate must be non-negative");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("train: momentum must be in [0,1)");
  if (!(c.power > 0.0)) throw ConfigError("train: poly power must be positive");
  if (c.batch == 0) throw ConfigError("train: batch must be positive");
  if (!(c.tau > 0.0)) throw ConfigError("train: tau must be positive");
  if (!(c.k > 0.0 && c.k <= 1.0)) throw ConfigError("train: k must be in (0,1]");
}

/// lr = lr0 * (1 - iter/I)^power
inline double lr_schedule(std::size_t iter, const TrainConfig& c) {
  if (iter >= c.iterations) {
    throw ContractError("lr_schedule: iteration " + std::to_string(iter) + " >= " +
                        std::to_string(c.iterations));
  }
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(c.iterations);
  return c.lr * std::pow(frac, c.power);
}

template <class T>
struct OptimizerState {
  ParamMap<T> velocity;
};

/// Momentum SGD: v <- mu*v + g; theta <- theta - lr*v. Only names present in
/// `grads` are updated. Nothing is modified when any gradient is non-finite.
template <class T>
void sgd_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimizerState<T>& state, double lr,
              double momentum, std::size_t iteration = 0) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("sgd_step: unknown parameter " + name);
    if (it->second.shape() != g.shape()) {
      throw DimensionError("sgd_step: gradient of " + name + " has shape " + to_string(g.shape()));
    }
    for (auto v : g.data()) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite gradient in " + name + " at iteration " +
                           std::to_string(iteration));
      }
    }
  }
  const T mu = static_cast<T>(momentum);
  const T step = static_cast<T>(lr);
  for (const auto& [name, g] : grads) {
    auto& theta = params.at(name);
    auto [vit, inserted] = state.velocity.try_emplace(name, Tensor<T>(g.shape()));
    auto& v = vit->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      v[i] = mu * v[i] + g[i];
      theta[i] -= step * v[i];
    }
  }
}

struct LossLogRow {
  std::size_t iter = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::size_t skipped_queries = 0;
};

template <class T>
struct TrainResult {
  SegModel<T> model;
  std::vector<LossLogRow> log;
  bool aborted = false;
  std::string message;
  std::size_t empty_steps = 0;
  std::vector<std::string> warnings;
};

/// Called after every iteration with the iteration index and the current model.
template <class T>
using IterationHook = std::function<void(std::size_t, const SegModel<T>&)>;

/// Visit order: a fresh seeded permutation of the dataset every epoch.
class EpochOrder {
 public:
  EpochOrder(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed ^ 0x3C6EF372FE94F82BULL) {}

  std::size_t next() {
    if (pos_ == order_.size()) {
      order_.resize(n_);
      std::iota(order_.begin(), order_.end(), 0);
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
      ++epoch_;
    }
    return order_[pos_++];
  }

  std::size_t epoch() const { return epoch_; }
  bool epoch_end() const { return pos_ == order_.size(); }

 private:
  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
};

/// Supervised training on labelled source clips: cross-entropy of the fused
/// current-frame logits against the labels downsampled to feature resolution.
template <class T>
TrainResult<T> train_source(SegModel<T> model, const std::vector<VideoSequence>& data,
                            const TrainConfig& config, const IterationHook<T>& hook = {}) {
  validate(config);
  if (data.empty()) throw ConfigError("train_source: empty dataset");
  TrainResult<T> result;
  OptimizerState<T> state;
  EpochOrder order(data.size(), config.seed);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const double lr = lr_schedule(it, config);
    Tape<T> tape;
    BoundParams<T> p(tape, model.params);
    Var<T> total;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const auto& seq = data[order.next()];
      const std::size_t t = seq.length() - 1;
      auto f = pair_features(p, model.config, seq.frames[t - 1], seq.frames[t], &seq.flows[t - 1]);
      auto logits = classify(p, f.fused);
      const auto targets = downsample_labels(seq.labels[t], model.config.stride);
      const std::vector<std::uint8_t> mask(targets.size(), 1);
      auto l = softmax_cross_entropy(logits, std::span<const int>(targets),
                                     std::span<const std::uint8_t>(mask))
                   .loss;
      total = total.valid() ? add(total, l) : l;
    }
    if (config.batch > 1) total = scale(total, static_cast<T>(1.0 / static_cast<double>(config.batch)));
    const double loss = static_cast<double>(total.value()[0]);
    if (!std::isfinite(loss)) {
      result.aborted = true;
      result.message = "loss diverged at iteration " + std::to_string(it);
      break;
    }
    tape.backward(total);
    ParamMap<T> grads;
    for (auto&& [name, g] : p.gradients()) {
      if (!is_buffer(name)) grads.emplace(name, std::move(g));
    }
    try {
      sgd_step(model.params, grads, state, lr, config.momentum, it);
    } catch (const NumericError& e) {
      result.aborted = true;
      result.message = e.what();
      break;
    }
    result.log.push_back({it, loss, lr, 0});
    if (hook) hook(it, model);
  }
  result.model = std::move(model);
  return result;
}

/// Source-free adaptation on unlabelled target clips. The input type carries
/// no labels, and no source data is reachable from here.
template <class T>
TrainResult<T> adapt_sfda(SegModel<T> model, const std::vector<UnlabeledSequence>& target,
                          const TrainConfig& config, const IterationHook<T>& hook = {}) {
  validate(config);
  if (target.empty()) throw ConfigError("adapt_sfda: empty target dataset");
  TrainResult<T> result;
  OptimizerState<T> state;
  EpochOrder order(target.size(), config.seed);
  const bool train_cls = trains_classifier(config.objective);
  auto trainable = [train_cls](const std::string& name) {
    return train_cls || name.rfind("cls.", 0) != 0;
  };
  std::size_t empty_in_epoch = 0, steps_in_epoch = 0;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const double lr = lr_schedule(it, config);
    Tape<T> tape;
    BoundParams<T> p(tape, model.params, trainable);
    Var<T> total;
    std::size_t skipped = 0;
    bool all_empty = true;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const std::size_t idx = order.next();
      ObjectiveHyper hyper{config.tau, config.k, config.cap, mix_seed(config.seed, it * 131 + b),
                           config.positives_in_denominator, config.per_class_topk,
                           config.warp_temporal_keys};
      AugmentSpec aug = config.augment;
      aug.seed = mix_seed(config.seed ^ 0xA5A5A5A5ULL, it * 131 + b);
      auto r = objective_loss(p, model.config, target[idx], config.objective, hyper, aug);
      skipped += r.excluded;
      all_empty = all_empty && r.sentinel;
      total = total.valid() ? add(total, r.loss) : r.loss;
    }
    if (config.batch > 1) total = scale(total, static_cast<T>(1.0 / static_cast<double>(config.batch)));
    const double loss = static_cast<double>(total.value()[0]);
    if (!std::isfinite(loss)) {
      result.aborted = true;
      result.message = "adaptation loss diverged at iteration " + std::to_string(it);
      break;
    }
    ++steps_in_epoch;
    if (all_empty) {
      ++result.empty_steps;
      ++empty_in_epoch;
    } else {
      tape.backward(total);
      ParamMap<T> grads;
      for (auto&& [name, g] : p.gradients()) {
        if (!is_buffer(name) && trainable(name)) grads.emplace(name, std::move(g));
      }
      try {
        sgd_step(model.params, grads, state, lr, config.momentum, it);
      } catch (const NumericError& e) {
        result.aborted = true;
        result.message = e.what();
        break;
      }
    }
    result.log.push_back({it, loss, lr, skipped});
    if (hook) hook(it, model);
    if (order.epoch_end()) {
      if (2 * empty_in_epoch > steps_in_epoch) {
        result.warnings.push_back("epoch " + std::to_string(order.epoch()) + ": " +
                                  std::to_string(empty_in_epoch) + "/" + std::to_string(steps_in_epoch) +
                                  " steps had no confident pairs");
      }
      empty_in_epoch = steps_in_epoch = 0;
    }
  }
  result.model = std::move(model);
  return result;
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossLogRow>& log) {
  std::string s = "iter,loss,lr,skipped_queries\n";
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%zu\n", r.iter, r.loss, r.lr, r.skipped_queries);
    s += buf;
  }
  io::write_text(path, s);
}

}  // namespace stpl
