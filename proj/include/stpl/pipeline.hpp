#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "stpl/metrics.hpp"
#include "stpl/trainer.hpp"

namespace stpl {

/// Adaptation base rate used by RunConfig. TrainConfig keeps its own default.
inline constexpr double kAdaptLearningRate = 1e-5;

struct DataSpec {
  std::size_t train_sequences = 60;
  std::size_t eval_sequences = 20;
  std::size_t T = 2, H = 64, W = 64, K = 4;
};

struct MetricOptions {
  std::vector<std::size_t> ks{1, 5, 10, 20, 50};
  std::size_t per_class = 500;
  Distance distance = Distance::kEuclidean;
};

/// Everything a run depends on. Serialized verbatim into every artifact.
struct RunConfig {
  std::uint64_t seed = 0;
  DataSpec data;
  ModelConfig model;
  TrainConfig source;
  TrainConfig adapt;
  DomainSpec source_domain = stpl::source_domain();
  DomainSpec target_domain = stpl::target_domain(4);
  MetricOptions metrics;

  RunConfig() {
    source.lr = kSourceLearningRate;
    adapt.lr = kAdaptLearningRate;
  }
};

enum class Split { kTrain, kEval };

// ---------------------------------------------------------------------------
// JSON

namespace pipeline_detail {

inline nlohmann::json train_json(const TrainConfig& c, bool adaptation) {
  nlohmann::json j = {{"iterations", c.iterations}, {"lr", c.lr},       {"momentum", c.momentum},
                      {"power", c.power},           {"batch", c.batch}};
  if (!adaptation) return j;
  j["objective"] = to_string(c.objective);
  j["tau"] = c.tau;
  j["k"] = c.k;
  j["cap"] = c.cap;
  j["positives_in_denominator"] = c.positives_in_denominator;
  j["per_class_topk"] = c.per_class_topk;
  j["warp_temporal_keys"] = c.warp_temporal_keys;
  j["augment"] = {{"blur_min", c.augment.blur_min},     {"blur_max", c.augment.blur_max},
                  {"brightness", c.augment.brightness}, {"contrast", c.augment.contrast},
                  {"saturation", c.augment.saturation}};
  return j;
}

inline TrainConfig train_from_json(const nlohmann::json& j, bool adaptation) {
  TrainConfig c;
  c.iterations = j.at("iterations").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.power = j.at("power").get<double>();
  c.batch = j.at("batch").get<std::size_t>();
  if (!adaptation) return c;
  c.objective = parse_objective(j.at("objective").get<std::string>());
  c.tau = j.at("tau").get<double>();
  c.k = j.at("k").get<double>();
  c.cap = j.at("cap").get<std::size_t>();
  c.positives_in_denominator = j.at("positives_in_denominator").get<bool>();
  c.per_class_topk = j.at("per_class_topk").get<bool>();
  c.warp_temporal_keys = j.at("warp_temporal_keys").get<bool>();
  const auto& a = j.at("augment");
  c.augment.blur_min = a.at("blur_min").get<double>();
  c.augment.blur_max = a.at("blur_max").get<double>();
  c.augment.brightness = a.at("brightness").get<double>();
  c.augment.contrast = a.at("contrast").get<double>();
  c.augment.saturation = a.at("saturation").get<double>();
  return c;
}

inline DomainSpec domain_from_json(const nlohmann::json& j) {
  DomainSpec s;
  for (const auto& c : j.at("palette_shift")) {
    if (!c.is_array() || c.size() != 3) throw ConfigError("palette_shift entries need 3 components");
    s.palette_shift.push_back({c[0].get<double>(), c[1].get<double>(), c[2].get<double>()});
  }
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.blur_sigma = j.at("blur_sigma").get<double>();
  s.texture_seed = j.at("texture_seed").get<std::uint64_t>();
  s.max_speed = j.at("max_speed").get<double>();
  s.integer_velocity = j.at("integer_velocity").get<bool>();
  return s;
}

inline std::string distance_name(Distance d) { return d == Distance::kCosine ? "cosine" : "euclidean"; }

inline Distance parse_distance(const std::string& s) {
  if (s == "euclidean") return Distance::kEuclidean;
  if (s == "cosine") return Distance::kCosine;
  throw ConfigError("unknown distance '" + s + "'");
}

inline bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) {
    // Integers may not take fractional values.
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

/// Overlays `over` onto `base`; keys missing from `base` are rejected.
inline void strict_merge(nlohmann::json& base, const nlohmann::json& over, const std::string& path) {
  if (!over.is_object()) throw ConfigError(path + ": expected an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      strict_merge(slot, it.value(), key);
    } else if (!same_kind(slot, it.value())) {
      throw ConfigError("config key '" + key + "' has the wrong type");
    } else {
      slot = it.value();
    }
  }
}

}  // namespace pipeline_detail

inline nlohmann::json to_json(const RunConfig& c) {
  using namespace pipeline_detail;
  return {
      {"seed", c.seed},
      {"data",
       {{"train_sequences", c.data.train_sequences},
        {"eval_sequences", c.data.eval_sequences},
        {"T", c.data.T},
        {"H", c.data.H},
        {"W", c.data.W},
        {"K", c.data.K}}},
      {"model", to_json(c.model)},
      {"source", train_json(c.source, false)},
      {"adapt", train_json(c.adapt, true)},
      {"source_domain", to_json(c.source_domain)},
      {"target_domain", to_json(c.target_domain)},
      {"metrics",
       {{"ks", c.metrics.ks}, {"per_class", c.metrics.per_class}, {"distance", distance_name(c.metrics.distance)}}},
  };
}

inline void validate(const RunConfig& c) {
  validate(c.model);
  validate(c.source);
  validate(c.adapt);
  if (c.data.K != c.model.num_classes) throw ConfigError("data.K must equal model.num_classes");
  if (c.data.T < 2) throw ConfigError("data.T must be at least 2");
  if (c.data.train_sequences == 0 || c.data.eval_sequences == 0) {
    throw ConfigError("data: sequence counts must be positive");
  }
  if (c.data.H % c.model.stride != 0 || c.data.W % c.model.stride != 0) {
    throw ConfigError("data: frame size must be divisible by the encoder stride");
  }
}

/// Parses a (possibly partial) config document. Absent fields keep their
/// defaults; unknown keys and mistyped values are ConfigErrors.
inline RunConfig run_config_from_json(const nlohmann::json& user) {
  using namespace pipeline_detail;
  nlohmann::json j = to_json(RunConfig{});
  strict_merge(j, user, "");
  RunConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& d = j.at("data");
    c.data.train_sequences = d.at("train_sequences").get<std::size_t>();
    c.data.eval_sequences = d.at("eval_sequences").get<std::size_t>();
    c.data.T = d.at("T").get<std::size_t>();
    c.data.H = d.at("H").get<std::size_t>();
    c.data.W = d.at("W").get<std::size_t>();
    c.data.K = d.at("K").get<std::size_t>();
    c.model = model_config_from_json(j.at("model"));
    c.source = train_from_json(j.at("source"), false);
    c.adapt = train_from_json(j.at("adapt"), true);
    c.source_domain = domain_from_json(j.at("source_domain"));
    c.target_domain = domain_from_json(j.at("target_domain"));
    const auto& m = j.at("metrics");
    c.metrics.ks = m.at("ks").get<std::vector<std::size_t>>();
    c.metrics.per_class = m.at("per_class").get<std::size_t>();
    c.metrics.distance = parse_distance(m.at("distance").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.source.seed = c.adapt.seed = c.seed;
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Data

/// Per-sequence generation seed; splits and domains draw from disjoint streams.
inline std::uint64_t sequence_seed(std::uint64_t seed, bool target, Split split, std::size_t i) {
  const std::uint64_t stream = (target ? 2 : 0) + (split == Split::kEval ? 1 : 0);
  return mix_seed(mix_seed(seed, stream), i);
}

inline std::vector<VideoSequence> generate_split(const RunConfig& c, bool target, Split split,
                                                 std::optional<std::size_t> count = std::nullopt) {
  const std::size_t n = count.value_or(split == Split::kTrain ? c.data.train_sequences : c.data.eval_sequences);
  const DomainSpec& spec = target ? c.target_domain : c.source_domain;
  std::vector<VideoSequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = sequence_seed(c.seed, target, split, i);
    auto seq = generate_sequence(s, spec, c.data.T, c.data.H, c.data.W, c.data.K);
    out.push_back(target ? apply_domain_shift(seq, spec, mix_seed(s, 7)) : std::move(seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Disk-backed adaptation

struct AdaptRun {
  TrainResult<float> result;
  std::string source_hash;
};

/// Loads the checkpoint and the target frames and flows, then adapts. Label
/// files are never opened, and a dataset whose manifest says "source" is refused.
/// `c.model` is replaced by the checkpoint's config; with `check_model` a
/// mismatch is an IncompatibleError instead.
inline AdaptRun adapt_from_disk(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                                RunConfig& c, bool check_model) {
  const auto info = read_manifest(data);
  if (info.domain == "source") {
    throw ConfigError(data.string() + " is a source-domain dataset; adaptation is source-free");
  }
  auto model = load_checkpoint<float>(checkpoint, check_model ? std::optional<ModelConfig>(c.model) : std::nullopt);
  if (info.K != model.config.num_classes) {
    throw IncompatibleError("dataset has " + std::to_string(info.K) + " classes, model has " +
                            std::to_string(model.config.num_classes));
  }
  c.model = model.config;
  c.data.K = model.config.num_classes;
  auto target = read_unlabeled(data);
  AdaptRun run;
  run.source_hash = io::hex64(params_hash(model.params));
  run.result = adapt_sfda(std::move(model), target, c.adapt);
  return run;
}

// ---------------------------------------------------------------------------
// Evaluation

/// mIoU over every frame and temporal consistency averaged over sequences.
template <class T>
MetricsReport evaluate(const SegModel<T>& model, const std::vector<VideoSequence>& data) {
  if (data.empty()) throw ConfigError("evaluate: empty dataset");
  IoUAccumulator acc(model.config.num_classes);
  double tc = 0.0;
  for (const auto& s : data) {
    auto p = predict_sequence(model, s.frames, s.flows);
    for (std::size_t t = 0; t < p.size(); ++t) acc.add(p[t], s.labels[t]);
    tc += temporal_consistency(p);
  }
  MetricsReport r;
  const auto iou = acc.result();
  r.per_class_iou = iou.per_class;
  r.miou = iou.miou;
  r.temporal_consistency = tc / static_cast<double>(data.size());
  return r;
}

/// Neighbour purity and class variances of the fused features.
template <class T>
MetricsReport analyze(const SegModel<T>& model, const std::vector<VideoSequence>& data, const MetricOptions& opts,
                      std::uint64_t seed, std::vector<std::string>* notes = nullptr) {
  auto set = collect_features(model, data, opts.per_class, seed);
  MetricsReport r;
  std::vector<std::size_t> ks;
  for (auto k : opts.ks) {
    if (k < set.size()) ks.push_back(k);
  }
  const auto purity = knn_purity(set, ks, opts.distance);
  for (std::size_t i = 0; i < ks.size(); ++i) r.purity.emplace_back(ks[i], purity[i]);
  const auto v = class_variances(set);
  r.sigma_intra = v.intra;
  r.sigma_inter = v.inter;
  if (notes) *notes = set.notes;
  return r;
}

// ---------------------------------------------------------------------------
// Ablation table

inline const std::vector<AdaptObjective>& all_objectives() {
  static const std::vector<AdaptObjective> v{AdaptObjective::kVanillaSelfTrain, AdaptObjective::kDuplicateCL,
                                             AdaptObjective::kTemporalOnly,     AdaptObjective::kSpatialOnly,
                                             AdaptObjective::kNaiveTS,          AdaptObjective::kStpl};
  return v;
}

struct AblationRow {
  std::string method;
  std::vector<double> miou;  // percent, one per seed
  std::vector<double> tc;
  bool failed = false;
  std::string error;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> source_hashes;  // one per seed, shared by every row
  std::vector<AblationRow> rows;           // "source" first
  nlohmann::json config;
  double seconds = 0.0;                    // wall time; not part of the JSON

  bool ok() const {
    return std::none_of(rows.begin(), rows.end(), [](const AblationRow& r) { return r.failed; });
  }
  const AblationRow* row(const std::string& m) const {
    for (const auto& r : rows) {
      if (r.method == m) return &r;
    }
    return nullptr;
  }
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n-1); 0 for a single value.
inline double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? std::nan("") : 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// STPL_THREADS, clamped to at least 1. Unset means 1.
inline std::size_t env_threads() {
  const char* v = std::getenv("STPL_THREADS");
  if (!v) return 1;
  const long n = std::strtol(v, nullptr, 10);
  return n > 0 ? static_cast<std::size_t>(n) : 1;
}

using ProgressFn = std::function<void(const std::string&)>;

/// Source training once per seed, then every objective in `methods` from that
/// checkpoint; all rows are evaluated on the same target eval split.
inline AblationTable reproduce(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                               const std::vector<AdaptObjective>& methods, std::size_t threads = 1,
                               const ProgressFn& progress = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  AblationTable table;
  table.seeds = seeds;
  table.config = to_json(base);
  table.rows.push_back({"source", {}, {}, false, {}});
  for (auto m : methods) table.rows.push_back({to_string(m), {}, {}, false, {}});
  std::mutex mu;
  auto say = [&](const std::string& s) {
    if (!progress) return;
    std::lock_guard lock(mu);
    progress(s);
  };
  for (auto seed : seeds) {
    RunConfig c = base;
    c.seed = c.source.seed = c.adapt.seed = seed;
    const auto src = generate_split(c, false, Split::kTrain);
    std::vector<UnlabeledSequence> tgt;
    for (const auto& s : generate_split(c, true, Split::kTrain)) tgt.push_back(strip_labels(s));
    const auto tev = generate_split(c, true, Split::kEval);
    auto trained = train_source(make_model<float>(c.model, seed), src, c.source);
    table.source_hashes.push_back(io::hex64(params_hash(trained.model.params)));
    std::vector<MetricsReport> results(table.rows.size());
    std::vector<std::string> errors(table.rows.size());
    if (trained.aborted) {
      for (auto& e : errors) e = "source training: " + trained.message;
    } else {
      results[0] = evaluate(trained.model, tev);
      say("seed " + std::to_string(seed) + " source miou " + std::to_string(100.0 * results[0].miou));
      std::atomic<std::size_t> next{0};
      auto worker = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < methods.size();) {
          try {
            TrainConfig ac = c.adapt;
            ac.objective = methods[j];
            auto r = adapt_sfda(trained.model, tgt, ac);
            if (r.aborted) {
              errors[j + 1] = r.message;
              continue;
            }
            results[j + 1] = evaluate(r.model, tev);
            say("seed " + std::to_string(seed) + " " + to_string(methods[j]) + " miou " +
                std::to_string(100.0 * results[j + 1].miou));
          } catch (const std::exception& e) {
            errors[j + 1] = e.what();
          }
        }
      };
      const std::size_t n = std::max<std::size_t>(1, std::min(threads, methods.size()));
      std::vector<std::thread> pool;
      for (std::size_t w = 1; w < n; ++w) pool.emplace_back(worker);
      worker();
      for (auto& th : pool) th.join();
    }
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      auto& row = table.rows[i];
      if (!errors[i].empty()) {
        row.failed = true;
        if (row.error.empty()) row.error = "seed " + std::to_string(seed) + ": " + errors[i];
        continue;
      }
      row.miou.push_back(100.0 * results[i].miou);
      row.tc.push_back(results[i].temporal_consistency);
    }
  }
  table.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return table;
}

inline nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json j = {{"method", r.method},
                        {"status", r.failed ? "FAILED" : "ok"},
                        {"source_checkpoint_hashes", t.source_hashes},
                        {"miou", r.miou},
                        {"tc", r.tc}};
    if (r.failed) {
      j["error"] = r.error;
    } else {
      j["miou_mean"] = mean_of(r.miou);
      j["miou_std"] = stddev_of(r.miou);
      j["tc_mean"] = mean_of(r.tc);
      j["tc_std"] = stddev_of(r.tc);
    }
    rows.push_back(std::move(j));
  }
  return {{"seeds", t.seeds}, {"config", t.config}, {"rows", rows}};
}

inline std::string ablation_markdown(const AblationTable& t) {
  std::string s = "| method | mIoU | TC |\n|---|---|---|\n";
  char buf[160];
  for (const auto& r : t.rows) {
    if (r.failed) {
      s += "| " + r.method + " | FAILED | FAILED |\n";
      continue;
    }
    std::snprintf(buf, sizeof(buf), "| %s | %.2f ± %.2f | %.2f ± %.2f |\n", r.method.c_str(), mean_of(r.miou),
                  stddev_of(r.miou), mean_of(r.tc), stddev_of(r.tc));
    s += buf;
  }
  return s;
}

inline std::string ablation_csv(const AblationTable& t) {
  std::string s = "method,status,miou_mean,miou_std,tc_mean,tc_std\n";
  for (const auto& r : t.rows) {
    if (r.failed) {
      s += r.method + ",FAILED,,,,\n";
      continue;
    }
    s += r.method + ",ok," + fmt_double(mean_of(r.miou)) + "," + fmt_double(stddev_of(r.miou)) + "," +
         fmt_double(mean_of(r.tc)) + "," + fmt_double(stddev_of(r.tc)) + "\n";
  }
  return s;
}

}  // namespace stpl
