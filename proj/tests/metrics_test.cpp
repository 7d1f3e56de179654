#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "ethodec/metrics.hpp"
#include "ethodec/rng.hpp"

using namespace ethodec;

namespace {

// AP by definition: for each positive, precision over every sample ranked at
// or above it, where "above" means a higher score or an equal score with a
// lower index.
double brute_ap(const std::vector<double>& s, const std::vector<int>& y) {
  double total = 0.0;
  int positives = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    ++positives;
    int rank = 0, hits = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      const bool above = s[j] > s[i] || (s[j] == s[i] && j <= i);
      if (!above) continue;
      ++rank;
      hits += y[j];
    }
    total += static_cast<double>(hits) / rank;
  }
  return total / positives;
}

std::vector<double> column(const ScoreMatrix& s, std::size_t c) {
  std::vector<double> out;
  for (const auto& row : s) out.push_back(row[c]);
  return out;
}

std::vector<int> column(const std::vector<std::vector<int>>& s, std::size_t c) {
  std::vector<int> out;
  for (const auto& row : s) out.push_back(row[c]);
  return out;
}

ScoreMatrix random_scores(std::size_t n, std::size_t c, Rng& rng, bool coarse) {
  ScoreMatrix s(n, std::vector<double>(c));
  for (auto& row : s)
    for (auto& v : row) v = coarse ? static_cast<double>(rng.below(4)) : rng.normal();
  return s;
}

}  // namespace

TEST(Top1, AllCorrect) {
  EXPECT_EQ(top1_accuracy({{2, 1}, {0, 3}}, {0, 1}), 1.0);
}

TEST(Top1, AllWrong) {
  EXPECT_EQ(top1_accuracy({{2, 1}, {0, 3}}, {1, 0}), 0.0);
}

TEST(Top1, Counting) {
  EXPECT_DOUBLE_EQ(top1_accuracy({{2, 1}, {0, 3}, {5, 4}}, {0, 1, 1}), 2.0 / 3.0);
}

TEST(Top1, TiesGoToLowestIndex) {
  EXPECT_EQ(top1_accuracy({{1, 1, 1}}, {0}), 1.0);
  EXPECT_EQ(top1_accuracy({{1, 1, 1}}, {1}), 0.0);
}

TEST(Top1, EmptyIsContractError) { EXPECT_THROW(top1_accuracy({}, {}), ContractError); }

TEST(ClassAvg, BalancedHalf) {
  EXPECT_EQ(class_avg_accuracy({{1, 0}, {1, 0}, {1, 0}, {1, 0}}, {0, 0, 1, 1}), 0.5);
}

TEST(ClassAvg, ImbalanceContrast) {
  ScoreMatrix s(100, {1.0, 0.0});
  std::vector<std::size_t> t(100, 0);
  t[99] = 1;
  EXPECT_DOUBLE_EQ(top1_accuracy(s, t), 0.99);
  EXPECT_DOUBLE_EQ(class_avg_accuracy(s, t), 0.5);
}

TEST(ClassAvg, BruteForceTally) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_scores(30, 4, rng, true);
    std::vector<std::size_t> t(30);
    for (auto& x : t) x = rng.below(4);
    double sum = 0.0;
    int present = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      int n = 0, hit = 0;
      for (std::size_t i = 0; i < 30; ++i) {
        if (t[i] != c) continue;
        ++n;
        const auto& r = s[i];
        std::size_t best = 0;
        for (std::size_t k = 0; k < 4; ++k)
          if (r[k] > r[best]) best = k;
        hit += best == c;
      }
      if (n) {
        sum += static_cast<double>(hit) / n;
        ++present;
      }
    }
    EXPECT_NEAR(class_avg_accuracy(s, t), sum / present, 1e-12);
  }
}

TEST(ClassAvg, EqualsTop1OnBalancedTruth) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_scores(24, 3, rng, false);
    std::vector<std::size_t> t;
    for (std::size_t i = 0; i < 24; ++i) t.push_back(i % 3);
    EXPECT_NEAR(class_avg_accuracy(s, t), top1_accuracy(s, t), 1e-12);
  }
}

TEST(AveragePrecision, PerfectRanking) {
  EXPECT_EQ(average_precision({0.9, 0.8, 0.1, 0.0}, {1, 1, 0, 0}), 1.0);
}

TEST(AveragePrecision, SinglePositiveAtRankK) {
  for (int k = 1; k <= 6; ++k) {
    std::vector<double> s{6, 5, 4, 3, 2, 1};
    std::vector<int> y(6, 0);
    y[k - 1] = 1;
    EXPECT_DOUBLE_EQ(*average_precision(s, y), 1.0 / k);
  }
}

TEST(AveragePrecision, HandEnumeration) {
  EXPECT_NEAR(*average_precision({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}), (1.0 + 2.0 / 3.0) / 2.0,
              1e-15);
  EXPECT_NEAR(*average_precision({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}), 0.8333, 1e-4);
}

TEST(AveragePrecision, NoPositivesIsUndefined) {
  EXPECT_FALSE(average_precision({0.3, 0.2}, {0, 0}).has_value());
}

TEST(AveragePrecision, TiesBreakByIndex) {
  EXPECT_DOUBLE_EQ(*average_precision({1, 1}, {0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(*average_precision({1, 1}, {1, 0}), 1.0);
}

TEST(AveragePrecision, MonotoneTransformInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(20), t(20);
    std::vector<int> y(20);
    for (std::size_t i = 0; i < 20; ++i) {
      s[i] = rng.normal();
      t[i] = std::exp(3.0 * s[i]) - 7.0;
      y[i] = rng.bernoulli(0.3);
    }
    y[0] = 1;
    EXPECT_NEAR(*average_precision(s, y), *average_precision(t, y), 1e-15);
  }
}

TEST(Segments, Boundaries) {
  const auto s = assign_segments({0.5, 0.05, 0.01, 0.1, 0.0100001, 0.002});
  EXPECT_EQ(s[0], Segment::kHead);
  EXPECT_EQ(s[1], Segment::kMiddle);
  EXPECT_EQ(s[2], Segment::kTail);
  EXPECT_EQ(s[3], Segment::kMiddle);
  EXPECT_EQ(s[4], Segment::kMiddle);
  EXPECT_EQ(s[5], Segment::kTail);
}

TEST(Segments, FrequenciesSumToOne) {
  const auto f = class_frequencies({0, 0, 1, 2, 2, 2}, 4);
  EXPECT_DOUBLE_EQ(f[2], 0.5);
  EXPECT_EQ(f[3], 0.0);
  const auto g = label_frequencies({{1, 1, 0}, {0, 1, 0}}, 3);
  EXPECT_DOUBLE_EQ(g[1], 2.0 / 3.0);
  double total = 0.0;
  for (double x : g) total += x;
  EXPECT_DOUBLE_EQ(total, 1.0);
}

TEST(MacroMap, PerfectRanking) {
  const ScoreMatrix s{{0.9, 0.1}, {0.2, 0.8}, {0.1, 0.05}};
  const std::vector<std::vector<int>> y{{1, 0}, {0, 1}, {0, 0}};
  const auto m = macro_map(s, y, {0.5, 0.005});
  EXPECT_EQ(m.all, 1.0);
  EXPECT_EQ(*m.head, 1.0);
  EXPECT_EQ(*m.tail, 1.0);
  EXPECT_FALSE(m.middle.has_value());
}

TEST(MacroMap, MeanOfClassAps) {
  const ScoreMatrix s{{0.9, 0.9}, {0.1, 0.8}};
  const std::vector<std::vector<int>> y{{1, 0}, {0, 1}};
  EXPECT_DOUBLE_EQ(macro_map(s, y, {0.5, 0.5}).all, 0.75);
}

TEST(MacroMap, NoPositivesIsContractError) {
  EXPECT_THROW(macro_map({{0.1}}, {{0}}, {1.0}), ContractError);
}

TEST(MacroMap, BruteForceOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_scores(50, 8, rng, trial % 2 == 0);
    std::vector<std::vector<int>> y(50, std::vector<int>(8));
    for (auto& row : y)
      for (auto& v : row) v = rng.bernoulli(0.2);
    std::vector<double> f(8);
    for (auto& x : f) x = rng.uniform();
    double fs = 0.0;
    for (double x : f) fs += x;
    for (auto& x : f) x /= fs;
    const auto m = macro_map(s, y, f);
    double sum = 0.0;
    int n = 0;
    for (std::size_t c = 0; c < 8; ++c) {
      const auto yc = column(y, c);
      if (std::count(yc.begin(), yc.end(), 1) == 0) continue;
      sum += brute_ap(column(s, c), yc);
      ++n;
    }
    EXPECT_NEAR(m.all, sum / n, 1e-9);
  }
}

TEST(MacroMap, PerClassShiftInvariance) {
  Rng rng(5);
  auto s = random_scores(40, 5, rng, false);
  std::vector<std::vector<int>> y(40, std::vector<int>(5));
  for (auto& row : y)
    for (auto& v : row) v = rng.bernoulli(0.3);
  const std::vector<double> f(5, 0.2);
  const double before = macro_map(s, y, f).all;
  for (std::size_t c = 0; c < 5; ++c) {
    const double shift = static_cast<double>(c) * 17.0 - 20.0;
    for (auto& row : s) row[c] += shift;
  }
  EXPECT_NEAR(macro_map(s, y, f).all, before, 1e-12);
}

TEST(MacroMap, OverallWithinSegmentRange) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_scores(30, 6, rng, false);
    std::vector<std::vector<int>> y(30, std::vector<int>(6));
    for (auto& row : y)
      for (auto& v : row) v = rng.bernoulli(0.3);
    for (std::size_t c = 0; c < 6; ++c) y[c][c] = 1;
    const std::vector<double> f{0.5, 0.3, 0.1, 0.05, 0.045, 0.005};
    const auto m = macro_map(s, y, f);
    const double lo = std::min({*m.head, *m.middle, *m.tail});
    const double hi = std::max({*m.head, *m.middle, *m.tail});
    EXPECT_LE(lo, m.all + 1e-15);
    EXPECT_GE(hi, m.all - 1e-15);
  }
}

TEST(Report, SingleClassCsv) {
  const auto r = build_multiclass_report({{1.0}, {2.0}}, {0, 0}, {1.0}, {{3, "rest"}});
  const std::string csv = report_csv(r);
  EXPECT_EQ(csv, "class,frequency,score,segment,support\n3,1,1,head,2\n");
}

TEST(Report, CsvRoundTripRecomputesAggregates) {
  Rng rng(7);
  const auto s = random_scores(60, 9, rng, false);
  std::vector<std::vector<int>> y(60, std::vector<int>(9));
  for (auto& row : y)
    for (auto& v : row) v = rng.bernoulli(0.25);
  std::vector<double> f{0.3, 0.2, 0.15, 0.12, 0.08, 0.06, 0.05, 0.035, 0.005};
  std::vector<ClassInfo> info;
  for (int c = 0; c < 9; ++c) info.push_back({c, "b" + std::to_string(c)});
  const auto r = build_multilabel_report(s, y, f, info);
  std::istringstream in(report_csv(r));
  std::string line;
  std::getline(in, line);
  double sum = 0, tail = 0, prev_freq = 2.0;
  int n = 0, nt = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cls, freq, score, seg, support;
    std::getline(ss, cls, ',');
    std::getline(ss, freq, ',');
    std::getline(ss, score, ',');
    std::getline(ss, seg, ',');
    std::getline(ss, support, ',');
    EXPECT_LE(std::stod(freq), prev_freq);
    prev_freq = std::stod(freq);
    if (score.empty()) continue;
    sum += std::stod(score);
    ++n;
    if (seg == "tail") {
      tail += std::stod(score);
      ++nt;
    }
  }
  EXPECT_NEAR(sum / n, *r.map_all, 1e-9);
  EXPECT_NEAR(tail / nt, *r.segment_tail, 1e-9);
}

TEST(Report, SvgHasOnePointPerClass) {
  Rng rng(8);
  const auto s = random_scores(40, 9, rng, false);
  std::vector<std::vector<int>> y(40, std::vector<int>(9, 0));
  for (std::size_t c = 0; c < 9; ++c) y[c][c] = 1;
  const std::vector<double> f(9, 0.005);
  std::vector<ClassInfo> info;
  for (int c = 0; c < 9; ++c) info.push_back({c, "t" + std::to_string(c)});
  const std::string svg = report_svg(build_multilabel_report(s, y, f, info));
  const std::regex point("<circle class=\"point\"");
  const auto count = std::distance(std::sregex_iterator(svg.begin(), svg.end(), point),
                                   std::sregex_iterator());
  EXPECT_EQ(count, 9);
}

TEST(Report, EmitWritesFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "ethodec_report_test";
  std::filesystem::remove_all(dir);
  emit_report(build_multiclass_report({{1.0, 0.0}}, {0}, {0.5, 0.5}, {{0, "a"}, {1, "b"}}), dir);
  for (const char* f : {"per_class.csv", "report.svg", "report.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
}

TEST(Report, UnwritablePathIsIoError) {
  const auto file = std::filesystem::temp_directory_path() / "ethodec_report_blocker";
  std::ofstream(file) << "x";
  EXPECT_THROW(emit_report(build_multiclass_report({{1.0}}, {0}, {1.0}, {{0, "a"}}), file / "sub"),
               IoError);
}

TEST(Predictions, CsvRoundTrip) {
  const Predictions p{{"s1", "s2"}, {4, 9}, {{0.5, -1.25}, {3.0, 1e-17}}, {{1, 0}, {0, 1}}};
  const auto back = parse_predictions(predictions_csv(p), "p.csv");
  EXPECT_EQ(back.sample_ids, p.sample_ids);
  EXPECT_EQ(back.class_ids, p.class_ids);
  EXPECT_EQ(back.scores, p.scores);
  EXPECT_EQ(back.labels, p.labels);
}

TEST(Predictions, MalformedRowsCarryLineNumbers) {
  try {
    parse_predictions("sample_id,class_id,score,label\na,0,0.5,1\nb,0,oops,1\n", "p.csv");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse_predictions("id,score\n", "p.csv"), ParseError);
  EXPECT_THROW(parse_predictions("sample_id,class_id,score,label\na,0,1,1\na,1,1,0\nb,0,1,1\n",
                                 "p.csv"),
               ParseError);
}
