#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "stpl/diffcore/tensor.hpp"
#include "stpl/io.hpp"

namespace stpl {

/// Per-pixel class ids of one frame.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> ids;

  std::uint8_t at(std::size_t y, std::size_t x) const { return ids[y * width + x]; }
  bool operator==(const LabelMap&) const = default;
};

/// Frames [3,H,W] in [0,1], label maps, and T-1 flow fields [2,H,W].
/// Flow convention: pixel p of frame t shows what frame t-1 held at p - flow(p).
/// Flow channel 0 is the horizontal (column) displacement, channel 1 vertical.
struct VideoSequence {
  std::vector<Tensor<float>> frames;
  std::vector<LabelMap> labels;
  std::vector<Tensor<float>> flows;

  std::size_t length() const { return frames.size(); }
  std::size_t height() const { return frames.at(0).dim(1); }
  std::size_t width() const { return frames.at(0).dim(2); }
  bool operator==(const VideoSequence&) const = default;
};

/// A sequence with no label channel; the only input type the adaptation loop accepts.
struct UnlabeledSequence {
  std::vector<Tensor<float>> frames;
  std::vector<Tensor<float>> flows;

  std::size_t length() const { return frames.size(); }
  bool operator==(const UnlabeledSequence&) const = default;
};

inline UnlabeledSequence strip_labels(const VideoSequence& seq) {
  return UnlabeledSequence{seq.frames, seq.flows};
}

/// Appearance and motion parameters of a domain.
struct DomainSpec {
  /// RGB offsets per class id; missing classes get no offset.
  std::vector<std::array<double, 3>> palette_shift;
  double noise_sigma = 0.0;
  double blur_sigma = 0.0;
  std::uint64_t texture_seed = 0;
  /// Each velocity component is drawn from [-max_speed, max_speed].
  double max_speed = 2.0;
  bool integer_velocity = true;
};

inline nlohmann::json to_json(const DomainSpec& s) {
  nlohmann::json shifts = nlohmann::json::array();
  for (const auto& c : s.palette_shift) shifts.push_back({c[0], c[1], c[2]});
  return {{"palette_shift", shifts},       {"noise_sigma", s.noise_sigma},
          {"blur_sigma", s.blur_sigma},     {"texture_seed", s.texture_seed},
          {"max_speed", s.max_speed},       {"integer_velocity", s.integer_velocity}};
}

/// Source domain: clean rendering.
inline DomainSpec source_domain() { return DomainSpec{}; }

/// Target domain: per-class palette offsets, sensor noise and a slight blur.
inline DomainSpec target_domain(std::size_t num_classes = 4) {
  DomainSpec s;
  s.palette_shift.assign(num_classes, {0.0, 0.0, 0.0});
  s.palette_shift[0] = {0.03, 0.02, -0.02};
  if (num_classes > 1) s.palette_shift[1] = {-0.10, 0.02, 0.05};
  if (num_classes > 2) s.palette_shift[2] = {0.05, -0.03, -0.09};
  if (num_classes > 3) s.palette_shift[3] = {0.05, -0.08, 0.06};
  s.noise_sigma = 0.08;
  s.blur_sigma = 0.6;
  return s;
}

namespace synth_detail {

inline std::array<double, 3> class_color(std::size_t c) {
  static const std::array<std::array<double, 3>, 8> palette = {{
      {0.45, 0.47, 0.42},
      {0.78, 0.32, 0.26},
      {0.28, 0.52, 0.78},
      {0.36, 0.72, 0.34},
      {0.80, 0.74, 0.28},
      {0.62, 0.36, 0.70},
      {0.30, 0.72, 0.70},
      {0.85, 0.55, 0.20},
  }};
  return palette[c % palette.size()];
}

struct Shape2D {
  std::size_t cls;
  int templ;  // 0 rect, 1 disk, 2 triangle, 3 diamond
  double cx, cy;
  double rx, ry;
  double vx, vy;
  double stripe_freq, stripe_phase, stripe_angle;

  bool contains(double x, double y, std::size_t t) const {
    const double ux = x - (cx + vx * static_cast<double>(t));
    const double uy = y - (cy + vy * static_cast<double>(t));
    switch (templ) {
      case 0:
        return std::abs(ux) <= rx && std::abs(uy) <= ry;
      case 1:
        return ux * ux + uy * uy <= rx * rx;
      case 2:
        return uy >= -ry && uy <= ry && std::abs(ux) <= rx * (uy + ry) / (2.0 * ry);
      default:
        return std::abs(ux) / rx + std::abs(uy) / ry <= 1.0;
    }
  }

  double stripe(double x, double y, std::size_t t) const {
    const double ux = x - (cx + vx * static_cast<double>(t));
    const double uy = y - (cy + vy * static_cast<double>(t));
    const double u = ux * std::cos(stripe_angle) + uy * std::sin(stripe_angle);
    return 0.06 * std::sin(stripe_freq * u + stripe_phase);
  }

  double min_x(std::size_t t) const { return cx + vx * static_cast<double>(t) - rx; }
  double max_x(std::size_t t) const { return cx + vx * static_cast<double>(t) + rx; }
  double min_y(std::size_t t) const { return cy + vy * static_cast<double>(t) - ry; }
  double max_y(std::size_t t) const { return cy + vy * static_cast<double>(t) + ry; }
};

inline void gaussian_blur(Tensor<float>& frame, double sigma) {
  if (sigma <= 0.0) return;
  const std::size_t C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= ksum;
  std::vector<double> tmp(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    float* plane = frame.data().data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const auto xx = std::clamp<long long>(static_cast<long long>(x) + i, 0,
                                                static_cast<long long>(W) - 1);
          acc += k[static_cast<std::size_t>(i + radius)] * plane[y * W + static_cast<std::size_t>(xx)];
        }
        tmp[y * W + x] = acc;
      }
    }
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const auto yy = std::clamp<long long>(static_cast<long long>(y) + i, 0,
                                                static_cast<long long>(H) - 1);
          acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(yy) * W + x];
        }
        plane[y * W + x] = static_cast<float>(acc);
      }
    }
  }
}

inline void clamp_unit(Tensor<float>& frame) {
  for (auto& v : frame.data()) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace synth_detail

/// Renders a sequence of K-1 moving shape classes over a static textured
/// background (class 0). Labels and flows are exact by construction and the
/// result depends only on (seed, spec, T, H, W, K).
inline VideoSequence generate_sequence(std::uint64_t seed, const DomainSpec& spec, std::size_t T,
                                       std::size_t H, std::size_t W, std::size_t K) {
  using synth_detail::Shape2D;
  if (K < 3) throw ConfigError("generate_sequence: need K >= 3 classes, got " + std::to_string(K));
  if (K > 255) throw ConfigError("generate_sequence: K must fit in u8 labels");
  if (H < 32 || W < 32) throw ConfigError("generate_sequence: canvas must be at least 32x32");
  if (T < 2) throw ConfigError("generate_sequence: need T >= 2 frames");
  if (spec.max_speed < 0.0) throw ConfigError("generate_sequence: negative max_speed");

  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x1234567ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const double minside = static_cast<double>(std::min(H, W));
  const double rmin = minside * 0.08, rmax = minside * 0.16;
  const double tmax = static_cast<double>(T - 1);

  // Greedy non-overlapping placement; a layout that strands a class is
  // discarded and redrawn from the same stream.
  std::vector<Shape2D> shapes;
  std::size_t stranded = 0;
  for (int layout = 0; layout < 64; ++layout) {
    shapes.clear();
    stranded = 0;
    for (std::size_t c = 1; c < K && stranded == 0; ++c) {
      const int instances = 1 + static_cast<int>(rng() % 2);
      for (int inst = 0; inst < instances; ++inst) {
        bool placed = false;
        for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
          Shape2D s{};
          s.cls = c;
          s.templ = static_cast<int>((c - 1) % 4);
          s.rx = uniform(rmin, rmax);
          s.ry = s.templ == 1 ? s.rx : uniform(rmin, rmax);
          s.vx = uniform(-spec.max_speed, spec.max_speed);
          s.vy = uniform(-spec.max_speed, spec.max_speed);
          if (spec.integer_velocity) {
            s.vx = std::round(s.vx);
            s.vy = std::round(s.vy);
          }
          s.cx = uniform(s.rx + 1.0, static_cast<double>(W) - 2.0 - s.rx);
          s.cy = uniform(s.ry + 1.0, static_cast<double>(H) - 2.0 - s.ry);
          s.stripe_freq = uniform(0.5, 1.2);
          s.stripe_phase = uniform(0.0, 2.0 * std::numbers::pi);
          s.stripe_angle = uniform(0.0, std::numbers::pi);
          if (s.cx - s.rx < 0.0 || s.cy - s.ry < 0.0) continue;
          // Centre stays on canvas for the whole clip.
          const double ex = s.cx + s.vx * tmax, ey = s.cy + s.vy * tmax;
          if (ex < 0.0 || ey < 0.0 || ex > static_cast<double>(W - 1) ||
              ey > static_cast<double>(H - 1)) {
            continue;
          }
          bool clash = false;
          for (const auto& o : shapes) {
            const double ax0 = std::min(s.min_x(0), s.min_x(T - 1)) - 2.0;
            const double ax1 = std::max(s.max_x(0), s.max_x(T - 1)) + 2.0;
            const double ay0 = std::min(s.min_y(0), s.min_y(T - 1)) - 2.0;
            const double ay1 = std::max(s.max_y(0), s.max_y(T - 1)) + 2.0;
            const double bx0 = std::min(o.min_x(0), o.min_x(T - 1));
            const double bx1 = std::max(o.max_x(0), o.max_x(T - 1));
            const double by0 = std::min(o.min_y(0), o.min_y(T - 1));
            const double by1 = std::max(o.max_y(0), o.max_y(T - 1));
            if (ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1) {
              clash = true;
              break;
            }
          }
          if (clash) continue;
          shapes.push_back(s);
          placed = true;
        }
        if (!placed) {
          if (inst == 0) stranded = c;
          break;
        }
      }
    }
    if (stranded == 0) break;
  }
  if (stranded != 0) {
    throw ConfigError("generate_sequence: canvas " + std::to_string(H) + "x" + std::to_string(W) +
                      " too small to place class " + std::to_string(stranded));
  }

  // Static background texture: a few random plane waves.
  std::mt19937_64 trng(spec.texture_seed ^ (seed * 0xD1B54A32D192ED03ULL));
  std::uniform_real_distribution<double> tu(0.0, 1.0);
  struct Wave {
    double fx, fy, phase, amp;
    int channel;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    waves.push_back(Wave{0.05 + 0.35 * tu(trng), 0.05 + 0.35 * tu(trng),
                         2.0 * std::numbers::pi * tu(trng), 0.03 + 0.05 * tu(trng),
                         static_cast<int>(trng() % 4)});
  }

  VideoSequence seq;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor<float> frame({3, H, W});
    LabelMap label{H, W, std::vector<std::uint8_t>(H * W, 0)};
    std::vector<int> owner(H * W, -1);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        int own = -1;
        for (std::size_t s = 0; s < shapes.size(); ++s) {
          if (shapes[s].contains(fx, fy, t)) own = static_cast<int>(s);
        }
        owner[y * W + x] = own;
        std::array<double, 3> rgb;
        if (own < 0) {
          rgb = synth_detail::class_color(0);
          for (const auto& w : waves) {
            const double v = w.amp * std::sin(w.fx * fx + w.fy * fy + w.phase);
            if (w.channel == 3) {
              for (auto& ch : rgb) ch += v;
            } else {
              rgb[static_cast<std::size_t>(w.channel)] += v;
            }
          }
        } else {
          const auto& s = shapes[static_cast<std::size_t>(own)];
          rgb = synth_detail::class_color(s.cls);
          const double st = s.stripe(fx, fy, t);
          for (auto& ch : rgb) ch += st;
          label.ids[y * W + x] = static_cast<std::uint8_t>(s.cls);
        }
        for (std::size_t ch = 0; ch < 3; ++ch) {
          frame.at(ch, y, x) = static_cast<float>(std::clamp(rgb[ch], 0.0, 1.0));
        }
      }
    }
    if (t > 0) {
      Tensor<float> flow({2, H, W});
      for (std::size_t p = 0; p < H * W; ++p) {
        if (owner[p] >= 0) {
          const auto& s = shapes[static_cast<std::size_t>(owner[p])];
          flow[p] = static_cast<float>(s.vx);
          flow[H * W + p] = static_cast<float>(s.vy);
        }
      }
      seq.flows.push_back(std::move(flow));
    }
    seq.frames.push_back(std::move(frame));
    seq.labels.push_back(std::move(label));
  }

  for (std::size_t c = 0; c < K; ++c) {
    bool present = false;
    for (const auto& l : seq.labels) {
      for (auto id : l.ids) present = present || id == c;
    }
    if (!present) {
      throw ConfigError("generate_sequence: class " + std::to_string(c) + " not visible");
    }
  }
  return seq;
}

/// Photometric-only shift: per-class palette offsets, blur, then additive
/// Gaussian noise, clamped to [0,1]. Labels and flows are copied untouched.
inline VideoSequence apply_domain_shift(const VideoSequence& seq, const DomainSpec& spec,
                                        std::uint64_t seed) {
  if (spec.noise_sigma < 0.0 || spec.blur_sigma < 0.0) {
    throw ConfigError("apply_domain_shift: negative noise or blur sigma");
  }
  VideoSequence out = seq;
  std::mt19937_64 rng(seed ^ 0xA24BAED4963EE407ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t t = 0; t < out.frames.size(); ++t) {
    auto& frame = out.frames[t];
    const std::size_t H = frame.dim(1), W = frame.dim(2);
    bool any_shift = false;
    for (const auto& c : spec.palette_shift) any_shift = any_shift || c[0] != 0 || c[1] != 0 || c[2] != 0;
    if (any_shift) {
      const auto& ids = seq.labels.at(t).ids;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t p = 0; p < H * W; ++p) {
          const std::size_t c = ids[p];
          if (c < spec.palette_shift.size() && spec.palette_shift[c][ch] != 0.0) {
            frame[ch * H * W + p] =
                static_cast<float>(frame[ch * H * W + p] + spec.palette_shift[c][ch]);
          }
        }
      }
    }
    synth_detail::gaussian_blur(frame, spec.blur_sigma);
    if (spec.noise_sigma > 0.0) {
      for (auto& v : frame.data()) v = static_cast<float>(v + spec.noise_sigma * gauss(rng));
    }
    if (any_shift || spec.noise_sigma > 0.0) synth_detail::clamp_unit(frame);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json plus three STVD files per sequence.

namespace fs = std::filesystem;

inline std::string sequence_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "seq_%05zu", i);
  return buf;
}

struct DatasetInfo {
  std::size_t num_sequences = 0;
  std::size_t T = 0, H = 0, W = 0, K = 0;
  std::string domain;
  nlohmann::json manifest;
};

namespace synth_detail {

inline Tensor<float> stack_frames(const std::vector<Tensor<float>>& frames) {
  const Shape& s = frames.at(0).shape();
  Shape out{frames.size()};
  out.insert(out.end(), s.begin(), s.end());
  std::vector<float> data;
  data.reserve(numel(out));
  for (const auto& f : frames) {
    if (f.shape() != s) throw DimensionError("frames differ in shape");
    data.insert(data.end(), f.data().begin(), f.data().end());
  }
  return Tensor<float>(out, std::move(data));
}

inline std::vector<Tensor<float>> unstack(const Tensor<float>& t) {
  Shape inner(t.shape().begin() + 1, t.shape().end());
  const std::size_t n = numel(inner);
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    std::vector<float> d(t.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                         t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    out.emplace_back(inner, std::move(d));
  }
  return out;
}

}  // namespace synth_detail

/// Writes sequences and a manifest. `extra` is merged into the manifest (spec echo, seed, config).
inline void write_dataset(const std::vector<VideoSequence>& seqs, const fs::path& dir,
                          std::size_t K, const std::string& domain,
                          const nlohmann::json& extra = nlohmann::json::object()) {
  if (seqs.empty()) throw ContractError("write_dataset: no sequences");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto& first = seqs.front();
  nlohmann::json manifest = {
      {"format", "STVD-dataset"},
      {"version", 1},
      {"num_sequences", seqs.size()},
      {"T", first.length()},
      {"H", first.height()},
      {"W", first.width()},
      {"K", K},
      {"domain", domain},
      {"dtype", {{"frames", "f32"}, {"labels", "u8"}, {"flows", "f32"}}},
  };
  for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    if (s.length() != first.length() || s.height() != first.height() || s.width() != first.width()) {
      throw DimensionError("write_dataset: sequence " + std::to_string(i) + " differs in shape");
    }
    const std::string stem = sequence_stem(i);
    io::write_tensor(dir / (stem + ".frames.stvd"), synth_detail::stack_frames(s.frames));
    std::vector<std::uint8_t> ids;
    for (const auto& l : s.labels) ids.insert(ids.end(), l.ids.begin(), l.ids.end());
    io::write_u8(dir / (stem + ".labels.stvd"), {s.length(), s.height(), s.width()}, ids);
    io::write_tensor(dir / (stem + ".flows.stvd"), synth_detail::stack_frames(s.flows));
  }
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline DatasetInfo read_manifest(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_text(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  DatasetInfo info;
  try {
    info.num_sequences = m.at("num_sequences").get<std::size_t>();
    info.T = m.at("T").get<std::size_t>();
    info.H = m.at("H").get<std::size_t>();
    info.W = m.at("W").get<std::size_t>();
    info.K = m.at("K").get<std::size_t>();
    info.domain = m.value("domain", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  info.manifest = std::move(m);
  return info;
}

namespace synth_detail {

inline std::vector<Tensor<float>> read_stack(const fs::path& path, const Shape& expect_inner,
                                             std::size_t count) {
  auto t = io::read_tensor<float>(path);
  Shape expect{count};
  expect.insert(expect.end(), expect_inner.begin(), expect_inner.end());
  if (t.shape() != expect) {
    throw FormatError(path.string() + ": shape " + to_string(t.shape()) + ", manifest implies " +
                      to_string(expect));
  }
  return unstack(t);
}

}  // namespace synth_detail

/// Reads frames, labels and flows of every sequence.
inline std::vector<VideoSequence> read_dataset(const fs::path& dir, DatasetInfo* info_out = nullptr) {
  const DatasetInfo info = read_manifest(dir);
  std::vector<VideoSequence> seqs;
  for (std::size_t i = 0; i < info.num_sequences; ++i) {
    const std::string stem = sequence_stem(i);
    VideoSequence s;
    s.frames = synth_detail::read_stack(dir / (stem + ".frames.stvd"), {3, info.H, info.W}, info.T);
    s.flows = synth_detail::read_stack(dir / (stem + ".flows.stvd"), {2, info.H, info.W}, info.T - 1);
    const fs::path lpath = dir / (stem + ".labels.stvd");
    Shape ls;
    auto ids = io::read_u8(lpath, ls);
    if (ls != Shape{info.T, info.H, info.W}) {
      throw FormatError(lpath.string() + ": shape " + to_string(ls) + " disagrees with manifest");
    }
    for (std::size_t t = 0; t < info.T; ++t) {
      LabelMap l{info.H, info.W,
                 std::vector<std::uint8_t>(ids.begin() + static_cast<std::ptrdiff_t>(t * info.H * info.W),
                                           ids.begin() + static_cast<std::ptrdiff_t>((t + 1) * info.H * info.W))};
      for (auto id : l.ids) {
        if (id >= info.K) throw FormatError(lpath.string() + ": label id out of range");
      }
      s.labels.push_back(std::move(l));
    }
    seqs.push_back(std::move(s));
  }
  if (info_out) *info_out = info;
  return seqs;
}

/// Reads frames and flows only; label files are never opened.
inline std::vector<UnlabeledSequence> read_unlabeled(const fs::path& dir, DatasetInfo* info_out = nullptr) {
  const DatasetInfo info = read_manifest(dir);
  std::vector<UnlabeledSequence> seqs;
  for (std::size_t i = 0; i < info.num_sequences; ++i) {
    const std::string stem = sequence_stem(i);
    UnlabeledSequence s;
    s.frames = synth_detail::read_stack(dir / (stem + ".frames.stvd"), {3, info.H, info.W}, info.T);
    s.flows = synth_detail::read_stack(dir / (stem + ".flows.stvd"), {2, info.H, info.W}, info.T - 1);
    seqs.push_back(std::move(s));
  }
  if (info_out) *info_out = info;
  return seqs;
}

/// Order-sensitive FNV-1a over all frame, label and flow payloads.
inline std::uint64_t dataset_checksum(const std::vector<VideoSequence>& seqs) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& s : seqs) {
    for (const auto& f : s.frames) h = io::fnv1a(f.data().data(), f.size() * sizeof(float), h);
    for (const auto& l : s.labels) h = io::fnv1a(l.ids.data(), l.ids.size(), h);
    for (const auto& f : s.flows) h = io::fnv1a(f.data().data(), f.size() * sizeof(float), h);
  }
  return h;
}

}  // namespace stpl
