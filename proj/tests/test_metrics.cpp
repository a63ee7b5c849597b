#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "stpl/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace stpl;
using namespace stpl::oracle;

namespace {

LabelMap map_of(std::size_t h, std::size_t w, std::vector<std::uint8_t> ids) { return LabelMap{h, w, std::move(ids)}; }

LabelMap random_map(std::size_t h, std::size_t w, std::size_t K, std::mt19937_64& rng) {
  LabelMap m{h, w, std::vector<std::uint8_t>(h * w)};
  for (auto& v : m.ids) v = static_cast<std::uint8_t>(rng() % K);
  return m;
}

FeatureAnalysisSet make_set(std::vector<std::vector<double>> pts, std::vector<int> cls) {
  FeatureAnalysisSet s;
  s.dim = pts.front().size();
  s.points = std::move(pts);
  s.classes = std::move(cls);
  return s;
}

}  // namespace

TEST(Miou, PerfectPrediction) {
  std::mt19937_64 rng(1);
  auto m = random_map(4, 4, 3, rng);
  EXPECT_EQ(miou({m}, {m}, 3).miou, 1.0);
}

TEST(Miou, HandExampleSevenTwelfths) {
  auto r = miou({map_of(2, 2, {0, 1, 1, 1})}, {map_of(2, 2, {0, 0, 1, 1})}, 2);
  EXPECT_EQ(*r.per_class[0], 0.5);
  EXPECT_EQ(*r.per_class[1], 2.0 / 3.0);
  EXPECT_EQ(r.miou, (0.5 + 2.0 / 3.0) / 2.0);
  EXPECT_NEAR(r.miou, 7.0 / 12.0, 1e-15);
}

TEST(Miou, DisjointIsZero) {
  EXPECT_EQ(miou({map_of(1, 3, {0, 0, 0})}, {map_of(1, 3, {1, 1, 1})}, 2).miou, 0.0);
}

TEST(Miou, AbsentClassesExcludedAndFalsePositivesCount) {
  auto r = miou({map_of(1, 3, {0, 2, 0})}, {map_of(1, 3, {0, 0, 0})}, 4);
  EXPECT_FALSE(r.per_class[1].has_value());
  EXPECT_FALSE(r.per_class[3].has_value());
  EXPECT_EQ(*r.per_class[2], 0.0);
  EXPECT_EQ(r.miou, (2.0 / 3.0 + 0.0) / 2.0);
}

TEST(Miou, MatchesConfusionMatrixOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t K = 2 + rng() % 4, T = 1 + rng() % 3, h = 1 + rng() % 6, w = 1 + rng() % 6;
    std::vector<LabelMap> p, l;
    for (std::size_t t = 0; t < T; ++t) {
      p.push_back(random_map(h, w, K, rng));
      l.push_back(random_map(h, w, K, rng));
    }
    auto got = miou(p, l, K);
    auto want = confusion_oracle(p, l, K);
    EXPECT_EQ(got.per_class, want.per_class) << "trial " << trial;
    EXPECT_EQ(got.miou, want.miou) << "trial " << trial;
  }
}

TEST(Miou, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(miou({map_of(2, 2, {0, 0, 0, 0})}, {map_of(1, 4, {0, 0, 0, 0})}, 2), DimensionError);
  EXPECT_THROW(miou({map_of(2, 2, {0, 0, 0, 0})}, {}, 2), DimensionError);
}

TEST(TemporalConsistency, HandExamples) {
  auto a = map_of(2, 2, {0, 1, 2, 3});
  EXPECT_EQ(temporal_consistency({a, a}), 100.0);
  EXPECT_EQ(temporal_consistency({a, map_of(2, 2, {0, 1, 2, 0})}), 75.0);
  EXPECT_EQ(temporal_consistency({a, map_of(2, 2, {1, 2, 3, 0})}), 0.0);
}

TEST(TemporalConsistency, SingleFrameIsContractError) {
  EXPECT_THROW(temporal_consistency({map_of(1, 1, {0})}), ContractError);
}

TEST(TemporalConsistency, MatchesDirectCountOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 2 + rng() % 3, h = 1 + rng() % 6, w = 1 + rng() % 6;
    std::vector<LabelMap> p;
    for (std::size_t t = 0; t < T; ++t) p.push_back(random_map(h, w, 3, rng));
    double total = 0.0;
    for (std::size_t t = 1; t < T; ++t) {
      std::size_t same = 0;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) same += p[t].at(y, x) == p[t - 1].at(y, x);
      }
      total += static_cast<double>(same) / static_cast<double>(h * w);
    }
    EXPECT_EQ(temporal_consistency(p), 100.0 * total / static_cast<double>(T - 1));
  }
}

TEST(TemporalConsistency, SymmetricAndRelabelInvariant) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_map(5, 5, 4, rng), b = random_map(5, 5, 4, rng);
    EXPECT_EQ(temporal_consistency({a, b}), temporal_consistency({b, a}));
    std::vector<std::uint8_t> perm{2, 0, 3, 1};
    auto pa = a, pb = b;
    for (auto& v : pa.ids) v = perm[v];
    for (auto& v : pb.ids) v = perm[v];
    EXPECT_EQ(temporal_consistency({pa, pb}), temporal_consistency({a, b}));
  }
}

TEST(TemporalConsistency, WarpedVariantFollowsMotion) {
  auto a = map_of(1, 4, {0, 1, 0, 0});
  auto b = map_of(1, 4, {0, 0, 1, 0});
  Tensor<float> flow({2, 1, 4});
  for (std::size_t i = 0; i < 4; ++i) flow[i] = 1.0f;
  EXPECT_EQ(temporal_consistency({a, b}), 50.0);
  EXPECT_EQ(temporal_consistency_warped({a, b}, {flow}), 100.0);
}

TEST(KnnPurity, SeparatedClusters) {
  auto s = make_set({{0, 0}, {0, 0}, {0, 0}, {10, 10}, {10, 10}, {10, 10}}, {0, 0, 0, 1, 1, 1});
  EXPECT_EQ(knn_purity(s, {2})[0], 100.0);
  EXPECT_EQ(knn_purity(s, {1})[0], 100.0);
}

TEST(KnnPurity, AlternatingLineInterior) {
  // Interior points of 0,1,0,1,... have both nearest neighbours in the other class.
  std::vector<std::vector<double>> pts;
  std::vector<int> cls;
  for (int i = 0; i < 9; ++i) {
    pts.push_back({static_cast<double>(i)});
    cls.push_back(i % 2);
  }
  auto s = make_set(pts, cls);
  // Ends reach a same-class point at distance 2.
  EXPECT_NEAR(knn_purity(s, {2})[0], 100.0 * (0.5 + 0.5) / 9.0, 1e-12);
}

TEST(KnnPurity, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t N = 6 + rng() % 20, D = 1 + rng() % 4;
    std::vector<std::vector<double>> pts(N, std::vector<double>(D));
    std::vector<int> cls(N);
    for (std::size_t i = 0; i < N; ++i) {
      // Integer grid coordinates force exact distance ties.
      for (auto& x : pts[i]) x = static_cast<double>(rng() % 4);
      cls[i] = static_cast<int>(rng() % 3);
    }
    auto s = make_set(pts, cls);
    std::vector<std::size_t> ks{1, 2, 3, N - 1};
    auto got = knn_purity(s, ks);
    for (std::size_t q = 0; q < ks.size(); ++q) EXPECT_EQ(got[q], purity_oracle(s, ks[q])) << "trial " << trial;
  }
}

TEST(KnnPurity, InvalidKIsConfigError) {
  auto s = make_set({{0.0}, {1.0}, {2.0}}, {0, 1, 0});
  EXPECT_THROW(knn_purity(s, {3}), ConfigError);
  EXPECT_THROW(knn_purity(s, {0}), ConfigError);
}

TEST(KnnPurity, CosineMatchesEuclideanOrderingOnUnitVectors) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> pts;
    std::vector<int> cls;
    for (int i = 0; i < 30; ++i) {
      pts.push_back(stpl::testing::random_unit(5, rng));
      cls.push_back(static_cast<int>(rng() % 3));
    }
    auto s = make_set(pts, cls);
    // |a-b|^2 = 2(1 - cos) on the unit sphere, so neighbour rankings agree.
    for (std::size_t i = 0; i < 30; ++i) {
      for (std::size_t j = 0; j < 30; ++j) {
        EXPECT_NEAR(point_distance(pts[i], pts[j], Distance::kEuclidean),
                    2.0 * point_distance(pts[i], pts[j], Distance::kCosine), 1e-12);
      }
    }
    auto e = knn_purity(s, {1, 5, 10});
    auto c = knn_purity(s, {1, 5, 10}, Distance::kCosine);
    for (std::size_t q = 0; q < 3; ++q) EXPECT_NEAR(e[q], c[q], 1e-9);
  }
}

TEST(Variances, RepeatedPointsHaveZeroIntra) {
  auto s = make_set({{1, 2}, {1, 2}, {5, 5}, {5, 5}}, {0, 0, 1, 1});
  EXPECT_EQ(class_variances(s).intra, 0.0);
}

TEST(Variances, TwoCentroidsHandExample) {
  auto s = make_set({{0, 0}, {0, 0}, {2, 0}, {2, 0}}, {0, 0, 1, 1});
  auto v = class_variances(s);
  EXPECT_EQ(v.intra, 0.0);
  EXPECT_EQ(v.inter, 1.0);
}

TEST(Variances, ScaleByCMultipliesByCSquared) {
  std::mt19937_64 rng(7);
  auto base = stpl::testing::random_tensor({40}, rng);
  std::vector<std::vector<double>> pts;
  std::vector<int> cls;
  for (std::size_t i = 0; i < 20; ++i) {
    pts.push_back({base[2 * i], base[2 * i + 1]});
    cls.push_back(static_cast<int>(i % 3));
  }
  auto v = class_variances(make_set(pts, cls));
  for (auto& p : pts) {
    for (auto& x : p) x *= 3.0;
  }
  auto w = class_variances(make_set(pts, cls));
  EXPECT_NEAR(w.intra, 9.0 * v.intra, 1e-12);
  EXPECT_NEAR(w.inter, 9.0 * v.inter, 1e-12);
}

TEST(Variances, DegenerateSetsAreContractErrors) {
  EXPECT_THROW(class_variances(make_set({{0.0}, {1.0}}, {0, 0})), ContractError);
  EXPECT_THROW(class_variances(make_set({{0.0}, {1.0}, {2.0}}, {0, 0, 1})), ContractError);
}

TEST(AnalysisSet, TakesPerClassQuotaOrAllAvailable) {
  std::vector<std::vector<double>> cand;
  std::vector<int> cls;
  for (int i = 0; i < 30; ++i) {
    cand.push_back({static_cast<double>(i)});
    cls.push_back(i < 25 ? 0 : 1);
  }
  auto s = sample_analysis_set(cand, cls, 3, 10, 9);
  EXPECT_EQ(std::count(s.classes.begin(), s.classes.end(), 0), 10);
  EXPECT_EQ(std::count(s.classes.begin(), s.classes.end(), 1), 5);
  EXPECT_EQ(s.notes.size(), 2u);
  EXPECT_EQ(sample_analysis_set(cand, cls, 3, 10, 9).points, s.points);
}

TEST(AnalysisSet, CollectsFiveHundredPerClass) {
  std::vector<VideoSequence> data;
  for (std::uint64_t i = 0; i < 20; ++i) data.push_back(generate_sequence(900 + i, source_domain(), 2, 64, 64, 4));
  auto set = collect_features(make_model<float>(ModelConfig{}, 1), data, 500, 3);
  EXPECT_EQ(set.dim, 16u);
  for (int c = 0; c < 4; ++c) {
    const auto n = std::count(set.classes.begin(), set.classes.end(), c);
    EXPECT_TRUE(n == 500 || !set.notes.empty()) << "class " << c << " has " << n;
  }
}

TEST(Report, JsonRoundTrip) {
  MetricsReport r;
  r.per_class_iou = {0.5, std::nullopt, 1.0 / 3.0};
  r.miou = 0.4166666666666667;
  r.temporal_consistency = 97.25;
  r.purity = {{1, 88.0}, {5, 80.125}};
  r.sigma_intra = 0.1;
  r.config = {{"method", "stpl"}};
  r.seed = 7;
  EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
}

TEST(Report, FilesHaveExpectedRowsAndWellFormedSvg) {
  const auto dir = stpl::testing::scratch_dir("report");
  MetricsReport r;
  r.per_class_iou = {0.9, 0.8, std::nullopt, 0.4};
  r.purity = {{1, 90.0}, {2, 85.0}, {4, 80.0}};
  emit_report(r, default_report_paths(dir), "a<b");
  std::istringstream csv(io::read_text(dir / "per_class_iou.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  EXPECT_EQ(line, "class,iou");
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4u);

  boost::property_tree::ptree tree;
  std::istringstream svg(io::read_text(dir / "purity.svg"));
  ASSERT_NO_THROW(boost::property_tree::read_xml(svg, tree));
  EXPECT_EQ(tree.get_child("svg").count("polyline"), 1u);
}

TEST(Report, MultiSeriesChartHasOnePolylinePerSeries) {
  ChartSeries s{{"stpl", {{1, 2}, {2, 3}}}, {"source & co", {{1, 1}, {2, 1.5}}}, {"dup", {{1, 0.5}}}};
  boost::property_tree::ptree tree;
  std::istringstream svg(line_chart_svg(s, "t", "x", "y"));
  ASSERT_NO_THROW(boost::property_tree::read_xml(svg, tree));
  EXPECT_EQ(tree.get_child("svg").count("polyline"), 3u);
  EXPECT_EQ(tree.get_child("svg").get<std::string>("<xmlattr>.version"), "1.1");
}

TEST(Report, UnwritablePathIsIoError) {
  MetricsReport r;
  r.per_class_iou = {1.0};
  auto paths = default_report_paths("/proc/stpl-no-such-dir");
  EXPECT_THROW(emit_report(r, paths), IoError);
}
