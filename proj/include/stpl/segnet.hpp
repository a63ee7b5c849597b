#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stpl/diffcore/ops.hpp"
#include "stpl/io.hpp"
#include "stpl/params.hpp"
#include "stpl/stfusion.hpp"
#include "stpl/synthvid.hpp"

namespace stpl {

struct ModelConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths{16, 16, 16};
  /// Total encoder stride; applied by the first conv layer.
  std::size_t stride = 2;
  std::size_t num_classes = 4;
  std::size_t proj_dim = 16;
  FusionKind fusion = FusionKind::kStam;

  std::size_t feature_channels() const { return widths.back(); }
  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels}, {"widths", c.widths},       {"stride", c.stride},
          {"num_classes", c.num_classes}, {"proj_dim", c.proj_dim},   {"fusion", to_string(c.fusion)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.stride = j.at("stride").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.proj_dim = j.at("proj_dim").get<std::size_t>();
  c.fusion = parse_fusion(j.at("fusion").get<std::string>());
  return c;
}

inline void validate(const ModelConfig& c) {
  if (c.widths.empty()) throw ConfigError("model: encoder needs at least one layer");
  if (c.stride != 1 && c.stride != 2) throw ConfigError("model: stride must be 1 or 2");
  if (c.proj_dim < 2) throw ConfigError("model: projection dim must be >= 2");
  if (c.num_classes < 2) throw ConfigError("model: need at least 2 classes");
  if (c.fusion == FusionKind::kIdentity) {
    throw ConfigError("model: identity fusion is reserved for special-case routing");
  }
}

/// Encoder E, fusion block, classifier and projection head H.
template <class T>
struct SegModel {
  ModelConfig config;
  ParamMap<T> params;
};

/// Seeded uniform(+-sqrt(1/fan_in)) initialization of every parameter.
template <class T>
SegModel<T> make_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  std::mt19937_64 rng(seed ^ 0x6A09E667F3BCC909ULL);
  SegModel<T> m{config, {}};
  std::size_t cin = config.in_channels;
  for (std::size_t l = 0; l < config.widths.size(); ++l) {
    const std::size_t cout = config.widths[l];
    const std::string base = "enc.conv" + std::to_string(l);
    m.params[base + ".weight"] = uniform_init<T>({cout, cin, 3, 3}, cin * 9, rng);
    m.params[base + ".bias"] = uniform_init<T>({cout}, cin * 9, rng);
    cin = cout;
  }
  const std::size_t C = config.feature_channels();
  m.params["cls.weight"] = uniform_init<T>({config.num_classes, C, 1, 1}, C, rng);
  m.params["cls.bias"] = uniform_init<T>({config.num_classes}, C, rng);
  m.params["proj.0.weight"] = uniform_init<T>({C, C, 1, 1}, C, rng);
  m.params["proj.0.bias"] = uniform_init<T>({C}, C, rng);
  m.params["proj.1.weight"] = uniform_init<T>({config.proj_dim, C, 1, 1}, C, rng);
  m.params["proj.1.bias"] = uniform_init<T>({config.proj_dim}, C, rng);
  init_fusion_params(m.params, config.fusion, C, rng);
  return m;
}

template <class T>
Tensor<T> to_scalar_type(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<T>();
  }
}

/// z = E(x): three 3x3 conv + relu layers, the first strided. Input is centred at 0.5.
template <class T>
Var<T> encode(const BoundParams<T>& p, const ModelConfig& config, const Tensor<float>& frame) {
  if (frame.rank() != 3 || frame.dim(0) != config.in_channels) {
    throw DimensionError("encode: frame " + to_string(frame.shape()));
  }
  if (frame.dim(1) % config.stride != 0 || frame.dim(2) % config.stride != 0) {
    throw ConfigError("encode: frame " + std::to_string(frame.dim(1)) + "x" +
                      std::to_string(frame.dim(2)) + " not divisible by stride " +
                      std::to_string(config.stride));
  }
  Tensor<T> x = to_scalar_type<T>(frame);
  for (auto& v : x.data()) v -= T(0.5);
  Var<T> h = p.tape().constant(std::move(x));
  for (std::size_t l = 0; l < config.widths.size(); ++l) {
    const std::string base = "enc.conv" + std::to_string(l);
    h = relu(conv2d(h, p[base + ".weight"], p[base + ".bias"], 1, l == 0 ? config.stride : 1));
  }
  return h;
}

/// Per-pixel class logits [K,h,w].
template <class T>
Var<T> classify(const BoundParams<T>& p, const Var<T>& feature) {
  return conv2d(feature, p["cls.weight"], p["cls.bias"], 0);
}

/// Unit-norm pixel embeddings [D,h,w]: 1x1 conv, relu, 1x1 conv, L2 normalize (eps 1e-12).
template <class T>
Var<T> project(const BoundParams<T>& p, const Var<T>& feature) {
  auto h = relu(conv2d(feature, p["proj.0.weight"], p["proj.0.bias"], 0));
  h = conv2d(h, p["proj.1.weight"], p["proj.1.bias"], 0);
  return l2_normalize_channels(h, T(1e-12));
}

template <class T>
struct PairFeatures {
  Var<T> prev;         // z_{t-1}
  Var<T> cur;          // z_t
  Var<T> prev_warped;  // z'_{t-1}
  Var<T> fused;        // z_{(t-1,t)}
};

/// Fusion block F on already encoded features. `flow` is at input resolution;
/// nullptr means a self-pair with zero motion (used for the first frame).
template <class T>
PairFeatures<T> fuse_pair(const BoundParams<T>& p, const ModelConfig& config, const Var<T>& prev,
                          const Var<T>& cur, const Tensor<float>* flow) {
  Tensor<T> fl = flow ? downscale_flow<T>(*flow, config.stride)
                      : Tensor<T>({2, cur.shape()[1], cur.shape()[2]});
  auto warped = warp(prev, fl);
  auto fused = fuse(warped, cur, config.fusion, p);
  return PairFeatures<T>{prev, cur, warped, fused};
}

template <class T>
PairFeatures<T> pair_features(const BoundParams<T>& p, const ModelConfig& config,
                              const Tensor<float>& frame_prev, const Tensor<float>& frame_cur,
                              const Tensor<float>* flow) {
  auto prev = encode(p, config, frame_prev);
  auto cur = encode(p, config, frame_cur);
  return fuse_pair(p, config, prev, cur, flow);
}

/// Feature-resolution logits of frame t. Frame 0 is paired with itself.
template <class T>
Tensor<T> frame_logits(const SegModel<T>& model, const std::vector<Tensor<float>>& frames,
                       const std::vector<Tensor<float>>& flows, std::size_t t) {
  Tape<T> tape(false);
  BoundParams<T> p(tape, model.params);
  if (t == 0) {
    auto z = encode(p, model.config, frames.at(0));
    return classify(p, fuse_pair(p, model.config, z, z, nullptr).fused).value();
  }
  auto f = pair_features(p, model.config, frames.at(t - 1), frames.at(t), &flows.at(t - 1));
  return classify(p, f.fused).value();
}

/// Argmax over classes (first maximum wins).
template <class T>
std::vector<int> argmax_classes(const Tensor<T>& logits) {
  const std::size_t K = logits.dim(0), P = logits.dim(1) * logits.dim(2);
  std::vector<int> out(P, 0);
  for (std::size_t p = 0; p < P; ++p) {
    T best = logits[p];
    for (std::size_t k = 1; k < K; ++k) {
      if (logits[k * P + p] > best) {
        best = logits[k * P + p];
        out[p] = static_cast<int>(k);
      }
    }
  }
  return out;
}

/// Nearest-neighbour upsampling of a feature-resolution class map.
inline LabelMap upsample_classes(const std::vector<int>& classes, std::size_t h, std::size_t w,
                                 std::size_t stride) {
  LabelMap out{h * stride, w * stride, std::vector<std::uint8_t>(h * w * stride * stride)};
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      out.ids[y * out.width + x] = static_cast<std::uint8_t>(classes[(y / stride) * w + x / stride]);
    }
  }
  return out;
}

/// Nearest-neighbour downsampling (top-left sample of each block).
inline std::vector<int> downsample_labels(const LabelMap& labels, std::size_t stride) {
  const std::size_t h = labels.height / stride, w = labels.width / stride;
  std::vector<int> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = labels.at(y * stride, x * stride);
  }
  return out;
}

/// Input-resolution prediction map for every frame.
template <class T>
std::vector<LabelMap> predict_sequence(const SegModel<T>& model,
                                       const std::vector<Tensor<float>>& frames,
                                       const std::vector<Tensor<float>>& flows) {
  std::vector<LabelMap> out;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto logits = frame_logits(model, frames, flows, t);
    out.push_back(upsample_classes(argmax_classes(logits), logits.dim(1), logits.dim(2),
                                   model.config.stride));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + one STVD file per named parameter.

template <class T>
std::uint64_t params_hash(const ParamMap<T>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : params) {
    h = io::fnv1a(name.data(), name.size(), h);
    h = io::fnv1a(t.data().data(), t.size() * sizeof(T), h);
  }
  return h;
}

template <class T>
void save_checkpoint(const SegModel<T>& model, const std::filesystem::path& dir,
                     std::size_t iteration, std::uint64_t seed,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, t] : model.params) {
    const std::string file = name + ".stvd";
    io::write_tensor(dir / file, t);
    params.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
  }
  nlohmann::json manifest = {
      {"format", "STPL-checkpoint"},
      {"version", 1},
      {"config", to_json(model.config)},
      {"iteration", iteration},
      {"seed", seed},
      {"dtype", std::is_same_v<T, float> ? "f32" : "f64"},
      {"params_hash", io::hex64(params_hash(model.params))},
      {"parameters", params},
  };
  for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  try {
    return nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Loads a checkpoint. When `expected` is given, every differing config field is reported.
template <class T>
SegModel<T> load_checkpoint(const std::filesystem::path& dir,
                            const std::optional<ModelConfig>& expected = std::nullopt) {
  const auto manifest = read_checkpoint_manifest(dir);
  ModelConfig config;
  try {
    config = model_config_from_json(manifest.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (expected && !(*expected == config)) {
    const auto want = to_json(*expected);
    const auto have = to_json(config);
    std::string diff;
    for (auto it = want.begin(); it != want.end(); ++it) {
      if (have.at(it.key()) != it.value()) {
        if (!diff.empty()) diff += "; ";
        diff += it.key() + ": checkpoint " + have.at(it.key()).dump() + " vs requested " +
                it.value().dump();
      }
    }
    throw IncompatibleError(diff);
  }
  SegModel<T> model{config, {}};
  const SegModel<T> shape_ref = make_model<T>(config, 0);
  for (const auto& entry : manifest.at("parameters")) {
    const auto name = entry.at("name").get<std::string>();
    model.params[name] = io::read_tensor<T>(dir / entry.at("file").get<std::string>());
  }
  for (const auto& [name, t] : shape_ref.params) {
    auto it = model.params.find(name);
    if (it == model.params.end()) throw FormatError(dir.string() + ": missing parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw FormatError(dir.string() + ": parameter " + name + " has shape " +
                        to_string(it->second.shape()) + ", expected " + to_string(t.shape()));
    }
  }
  if (model.params.size() != shape_ref.params.size()) {
    throw FormatError(dir.string() + ": unexpected extra parameters");
  }
  return model;
}

}  // namespace stpl
