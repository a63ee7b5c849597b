#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stpl/segnet.hpp"

namespace stpl {

struct IoUResult {
  std::vector<std::optional<double>> per_class;  // nullopt: class absent from pred and label
  double miou = 0.0;
};

inline void check_same_maps(const std::vector<LabelMap>& a, const std::vector<LabelMap>& b) {
  if (a.size() != b.size()) {
    throw DimensionError("metrics: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                         " frames");
  }
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].height != b[t].height || a[t].width != b[t].width) {
      throw DimensionError("metrics: frame " + std::to_string(t) + " is " +
                           std::to_string(a[t].height) + "x" + std::to_string(a[t].width) + " vs " +
                           std::to_string(b[t].height) + "x" + std::to_string(b[t].width));
    }
  }
}

/// Confusion counts accumulated over any number of maps.
class IoUAccumulator {
 public:
  explicit IoUAccumulator(std::size_t K) : K_(K), inter_(K, 0), pred_(K, 0), label_(K, 0) {}

  void add(const LabelMap& pred, const LabelMap& label) {
    if (pred.height != label.height || pred.width != label.width) {
      throw DimensionError("miou: prediction and label sizes differ");
    }
    for (std::size_t i = 0; i < pred.ids.size(); ++i) {
      const std::size_t p = pred.ids[i], l = label.ids[i];
      if (p >= K_ || l >= K_) throw ConfigError("miou: class id out of range");
      ++pred_[p];
      ++label_[l];
      if (p == l) ++inter_[p];
    }
  }

  IoUResult result() const {
    IoUResult r;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < K_; ++c) {
      const std::uint64_t uni = pred_[c] + label_[c] - inter_[c];
      if (uni == 0) {
        r.per_class.push_back(std::nullopt);
        continue;
      }
      const double iou = static_cast<double>(inter_[c]) / static_cast<double>(uni);
      r.per_class.push_back(iou);
      sum += iou;
      ++n;
    }
    r.miou = n ? sum / static_cast<double>(n) : 0.0;
    return r;
  }

 private:
  std::size_t K_;
  std::vector<std::uint64_t> inter_, pred_, label_;
};

inline IoUResult miou(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& labels,
                      std::size_t K) {
  check_same_maps(preds, labels);
  IoUAccumulator acc(K);
  for (std::size_t t = 0; t < preds.size(); ++t) acc.add(preds[t], labels[t]);
  return acc.result();
}

/// Mean agreement (in percent) between successive prediction maps.
inline double temporal_consistency(const std::vector<LabelMap>& preds) {
  if (preds.size() < 2) throw ContractError("temporal_consistency: need at least 2 frames");
  double total = 0.0;
  for (std::size_t t = 1; t < preds.size(); ++t) {
    const auto& a = preds[t - 1];
    const auto& b = preds[t];
    if (a.height != b.height || a.width != b.width) {
      throw DimensionError("temporal_consistency: frame sizes differ");
    }
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.ids.size(); ++i) same += a.ids[i] == b.ids[i];
    total += static_cast<double>(same) / static_cast<double>(a.ids.size());
  }
  return 100.0 * total / static_cast<double>(preds.size() - 1);
}

/// Variant that first warps map t-1 with the flow (nearest sample); pixels
/// whose source falls outside the canvas are ignored.
inline double temporal_consistency_warped(const std::vector<LabelMap>& preds,
                                          const std::vector<Tensor<float>>& flows) {
  if (preds.size() < 2) throw ContractError("temporal_consistency: need at least 2 frames");
  if (flows.size() + 1 != preds.size()) throw DimensionError("temporal_consistency: flow count");
  double total = 0.0;
  for (std::size_t t = 1; t < preds.size(); ++t) {
    const auto& a = preds[t - 1];
    const auto& b = preds[t];
    const auto& f = flows[t - 1];
    const std::size_t H = b.height, W = b.width, P = H * W;
    std::size_t same = 0, valid = 0;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t p = y * W + x;
        const long sx = std::lround(static_cast<double>(x) - f[p]);
        const long sy = std::lround(static_cast<double>(y) - f[P + p]);
        if (sx < 0 || sy < 0 || sx >= static_cast<long>(W) || sy >= static_cast<long>(H)) continue;
        ++valid;
        same += a.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) == b.ids[p];
      }
    }
    total += valid ? static_cast<double>(same) / static_cast<double>(valid) : 1.0;
  }
  return 100.0 * total / static_cast<double>(preds.size() - 1);
}

// ---------------------------------------------------------------------------
// Feature-space analysis

struct FeatureAnalysisSet {
  std::size_t dim = 0;
  std::vector<std::vector<double>> points;
  std::vector<int> classes;
  std::uint64_t seed = 0;
  std::vector<std::string> notes;

  std::size_t size() const { return points.size(); }
};

/// Draws up to `per_class` pixel vectors per class (without replacement,
/// seeded) from pooled candidate vectors.
inline FeatureAnalysisSet sample_analysis_set(const std::vector<std::vector<double>>& candidates,
                                              const std::vector<int>& classes, std::size_t K,
                                              std::size_t per_class, std::uint64_t seed) {
  if (candidates.size() != classes.size()) throw DimensionError("analysis set: size mismatch");
  FeatureAnalysisSet set;
  set.seed = seed;
  set.dim = candidates.empty() ? 0 : candidates.front().size();
  std::mt19937_64 rng(seed ^ 0x510E527FADE682D1ULL);
  for (std::size_t c = 0; c < K; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] == static_cast<int>(c)) idx.push_back(i);
    }
    if (idx.size() < per_class) {
      set.notes.push_back("class " + std::to_string(c) + ": only " + std::to_string(idx.size()) +
                          " pixels available");
    }
    const std::size_t take = std::min(per_class, idx.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    for (std::size_t i = 0; i < take; ++i) {
      set.points.push_back(candidates[idx[i]]);
      set.classes.push_back(static_cast<int>(c));
    }
  }
  return set;
}

/// Fused current-frame features (before the projection head) of the last
/// frame of each clip, labelled with the ground truth at feature resolution.
template <class T>
FeatureAnalysisSet collect_features(const SegModel<T>& model, const std::vector<VideoSequence>& data,
                                    std::size_t per_class, std::uint64_t seed) {
  std::vector<std::vector<double>> cand;
  std::vector<int> cls;
  for (const auto& seq : data) {
    const std::size_t t = seq.length() - 1;
    Tape<T> tape(false);
    BoundParams<T> p(tape, model.params);
    auto f = pair_features(p, model.config, seq.frames[t - 1], seq.frames[t], &seq.flows[t - 1]);
    const auto& v = f.fused.value();
    const std::size_t C = v.dim(0), P = v.dim(1) * v.dim(2);
    const auto labels = downsample_labels(seq.labels[t], model.config.stride);
    for (std::size_t px = 0; px < P; ++px) {
      std::vector<double> e(C);
      for (std::size_t c = 0; c < C; ++c) e[c] = static_cast<double>(v[c * P + px]);
      cand.push_back(std::move(e));
      cls.push_back(labels[px]);
    }
  }
  return sample_analysis_set(cand, cls, model.config.num_classes, per_class, seed);
}

enum class Distance { kEuclidean, kCosine };

/// Distance used for neighbour ranking; squared Euclidean ranks like Euclidean.
inline double point_distance(const std::vector<double>& a, const std::vector<double>& b, Distance d) {
  if (d == Distance::kEuclidean) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::sqrt(na) * std::sqrt(nb);
  return 1.0 - (den > 0.0 ? dot / den : 0.0);
}

/// Percentage of same-class points among each point's k nearest neighbours
/// (self excluded, distance ties broken by index), averaged over all points.
inline std::vector<double> knn_purity(const FeatureAnalysisSet& set, const std::vector<std::size_t>& ks,
                                      Distance metric = Distance::kEuclidean) {
  const std::size_t N = set.size();
  for (auto k : ks) {
    if (k == 0 || k >= N) {
      throw ConfigError("knn_purity: k=" + std::to_string(k) + " needs 0 < k < " + std::to_string(N));
    }
  }
  if (ks.empty()) return {};
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  std::vector<double> sums(ks.size(), 0.0);
  std::vector<std::pair<double, std::size_t>> nb;
  nb.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    nb.clear();
    for (std::size_t j = 0; j < N; ++j) {
      if (j != i) nb.emplace_back(point_distance(set.points[i], set.points[j], metric), j);
    }
    std::partial_sort(nb.begin(), nb.begin() + static_cast<std::ptrdiff_t>(kmax), nb.end());
    std::vector<std::size_t> prefix(kmax + 1, 0);
    for (std::size_t r = 0; r < kmax; ++r) {
      prefix[r + 1] = prefix[r] + (set.classes[nb[r].second] == set.classes[i]);
    }
    for (std::size_t q = 0; q < ks.size(); ++q) {
      sums[q] += static_cast<double>(prefix[ks[q]]) / static_cast<double>(ks[q]);
    }
  }
  for (auto& s : sums) s = 100.0 * s / static_cast<double>(N);
  return sums;
}

struct Variances {
  double intra = 0.0;
  double inter = 0.0;
};

inline Variances class_variances(const FeatureAnalysisSet& set) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < set.size(); ++i) by_class[set.classes[i]].push_back(i);
  if (by_class.size() < 2) throw ContractError("class_variances: need at least 2 classes");
  const std::size_t D = set.dim;
  std::vector<std::vector<double>> centroids;
  Variances v;
  for (const auto& [c, idx] : by_class) {
    if (idx.size() < 2) {
      throw ContractError("class_variances: class " + std::to_string(c) + " has fewer than 2 points");
    }
    std::vector<double> mu(D, 0.0);
    for (auto i : idx) {
      for (std::size_t d = 0; d < D; ++d) mu[d] += set.points[i][d];
    }
    for (auto& m : mu) m /= static_cast<double>(idx.size());
    double s = 0.0;
    for (auto i : idx) s += point_distance(set.points[i], mu, Distance::kEuclidean);
    v.intra += s / static_cast<double>(idx.size());
    centroids.push_back(std::move(mu));
  }
  v.intra /= static_cast<double>(centroids.size());
  std::vector<double> g(D, 0.0);
  for (const auto& mu : centroids) {
    for (std::size_t d = 0; d < D; ++d) g[d] += mu[d];
  }
  for (auto& x : g) x /= static_cast<double>(centroids.size());
  for (const auto& mu : centroids) v.inter += point_distance(mu, g, Distance::kEuclidean);
  v.inter /= static_cast<double>(centroids.size());
  return v;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsReport {
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0.0;
  double temporal_consistency = 0.0;
  std::vector<std::pair<std::size_t, double>> purity;
  std::optional<double> sigma_intra;
  std::optional<double> sigma_inter;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;

  bool operator==(const MetricsReport&) const = default;
};

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json iou = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) iou.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  nlohmann::json pur = nlohmann::json::array();
  for (const auto& [k, v] : r.purity) pur.push_back({{"k", k}, {"purity", v}});
  nlohmann::json j = {{"per_class_iou", iou},
                      {"miou", r.miou},
                      {"temporal_consistency", r.temporal_consistency},
                      {"purity", pur},
                      {"sigma_intra", r.sigma_intra ? nlohmann::json(*r.sigma_intra) : nlohmann::json(nullptr)},
                      {"sigma_inter", r.sigma_inter ? nlohmann::json(*r.sigma_inter) : nlohmann::json(nullptr)},
                      {"config", r.config},
                      {"seed", r.seed}};
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  for (const auto& v : j.at("per_class_iou")) {
    r.per_class_iou.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  r.miou = j.at("miou").get<double>();
  r.temporal_consistency = j.at("temporal_consistency").get<double>();
  for (const auto& e : j.at("purity")) {
    r.purity.emplace_back(e.at("k").get<std::size_t>(), e.at("purity").get<double>());
  }
  if (!j.at("sigma_intra").is_null()) r.sigma_intra = j.at("sigma_intra").get<double>();
  if (!j.at("sigma_inter").is_null()) r.sigma_inter = j.at("sigma_inter").get<double>();
  r.config = j.at("config");
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

/// Series for a line chart: name -> (x, y) points.
using ChartSeries = std::map<std::string, std::vector<std::pair<double, double>>>;

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// SVG 1.1 line chart, one <polyline> per series.
inline std::string line_chart_svg(const ChartSeries& series, const std::string& title,
                                  const std::string& xlabel, const std::string& ylabel) {
  constexpr double Wd = 640, Ht = 400, L = 60, R = 150, Tp = 40, B = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& [name, pts] : series) {
    for (const auto& [x, y] : pts) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (Wd - L - R); };
  auto sy = [&](double y) { return Ht - B - (y - y0) / (y1 - y0) * (Ht - Tp - B); };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                 "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  char buf[256];
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"%g\" height=\"%g\">\n",
                Wd, Ht);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof(buf), "<text x=\"%g\" y=\"24\" font-size=\"16\">", L);
  s += buf + xml_escape(title) + "</text>\n";
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n"
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n",
                L, Ht - B, Wd - R, Ht - B, L, Tp, L, Ht - B);
  s += buf;
  std::snprintf(buf, sizeof(buf), "<text x=\"%g\" y=\"%g\" font-size=\"12\">%.4g</text>\n", L, Ht - B + 16, x0);
  s += buf;
  std::snprintf(buf, sizeof(buf), "<text x=\"%g\" y=\"%g\" font-size=\"12\">%.4g</text>\n", Wd - R - 30,
                Ht - B + 16, x1);
  s += buf;
  std::snprintf(buf, sizeof(buf), "<text x=\"4\" y=\"%g\" font-size=\"12\">%.4g</text>\n", Ht - B, y0);
  s += buf;
  std::snprintf(buf, sizeof(buf), "<text x=\"4\" y=\"%g\" font-size=\"12\">%.4g</text>\n", Tp + 4, y1);
  s += buf;
  std::snprintf(buf, sizeof(buf), "<text x=\"%g\" y=\"%g\" font-size=\"12\">", (Wd - R) / 2, Ht - 10);
  s += buf + xml_escape(xlabel) + "</text>\n";
  std::snprintf(buf, sizeof(buf), "<text x=\"4\" y=\"%g\" font-size=\"12\">", Tp - 8);
  s += buf + xml_escape(ylabel) + "</text>\n";
  std::size_t i = 0;
  for (const auto& [name, pts] : series) {
    const char* color = colors[i % 8];
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", sx(x), sy(y));
      s += buf;
    }
    s += "\"/>\n";
    std::snprintf(buf, sizeof(buf), "<text x=\"%g\" y=\"%g\" font-size=\"12\" fill=\"%s\">", Wd - R + 10,
                  Tp + 16.0 * static_cast<double>(i), color);
    s += buf + xml_escape(name) + "</text>\n";
    ++i;
  }
  s += "</svg>\n";
  return s;
}

struct ReportPaths {
  std::filesystem::path json;
  std::filesystem::path iou_csv;
  std::filesystem::path purity_csv;  // written when the report has a purity curve
  std::filesystem::path purity_svg;  // optional
};

inline ReportPaths default_report_paths(const std::filesystem::path& dir) {
  return {dir / "report.json", dir / "per_class_iou.csv", dir / "purity.csv", dir / "purity.svg"};
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void emit_report(const MetricsReport& r, const ReportPaths& paths, const std::string& series_name = "model") {
  io::write_text(paths.json, to_json(r).dump(2) + "\n");
  std::string csv = "class,iou\n";
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    csv += std::to_string(c) + "," + (r.per_class_iou[c] ? fmt_double(*r.per_class_iou[c]) : "") + "\n";
  }
  io::write_text(paths.iou_csv, csv);
  if (!r.purity.empty() && !paths.purity_csv.empty()) {
    std::string p = "k,purity\n";
    for (const auto& [k, v] : r.purity) p += std::to_string(k) + "," + fmt_double(v) + "\n";
    io::write_text(paths.purity_csv, p);
    if (!paths.purity_svg.empty()) {
      ChartSeries s;
      for (const auto& [k, v] : r.purity) s[series_name].emplace_back(static_cast<double>(k), v);
      io::write_text(paths.purity_svg, line_chart_svg(s, "k-NN purity", "k", "purity (%)"));
    }
  }
}

}  // namespace stpl
