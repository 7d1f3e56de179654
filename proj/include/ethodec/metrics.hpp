#pragma once

// Evaluation protocol: top-1, class-averaged accuracy, non-interpolated
// average precision and macro mAP, head/middle/tail segmentation by training
// frequency, and CSV/SVG/JSON report emission.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ethodec/binary_io.hpp"
#include "ethodec/errors.hpp"
#include "json.hpp"

namespace ethodec {

using ScoreMatrix = std::vector<std::vector<double>>;  // [N][C]

// Lowest index wins ties.
inline std::size_t argmax(const std::vector<double>& row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

inline void check_classification_input(const ScoreMatrix& logits,
                                       const std::vector<std::size_t>& truth) {
  if (logits.empty()) throw ContractError("accuracy of an empty prediction set");
  if (logits.size() != truth.size()) {
    throw DimensionError(std::to_string(logits.size()) + " prediction rows for " +
                         std::to_string(truth.size()) + " targets");
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (logits[i].empty() || truth[i] >= logits[i].size()) {
      throw ContractError("target class " + std::to_string(truth[i]) +
                          " outside the score row of sample " + std::to_string(i));
    }
  }
}

inline double top1_accuracy(const ScoreMatrix& logits,
                            const std::vector<std::size_t>& truth) {
  check_classification_input(logits, truth);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) hits += argmax(logits[i]) == truth[i];
  return static_cast<double>(hits) / static_cast<double>(logits.size());
}

// Top-1 accuracy per class over the samples whose truth is that class;
// nullopt for classes absent from truth.
inline std::vector<std::optional<double>> per_class_accuracy(
    const ScoreMatrix& logits, const std::vector<std::size_t>& truth) {
  check_classification_input(logits, truth);
  const std::size_t classes = logits.front().size();
  std::vector<std::size_t> hits(classes, 0), seen(classes, 0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    ++seen[truth[i]];
    hits[truth[i]] += argmax(logits[i]) == truth[i];
  }
  std::vector<std::optional<double>> out(classes);
  for (std::size_t c = 0; c < classes; ++c)
    if (seen[c]) out[c] = static_cast<double>(hits[c]) / static_cast<double>(seen[c]);
  return out;
}

// Unweighted mean of per-class accuracy over classes present in truth.
inline double class_avg_accuracy(const ScoreMatrix& logits,
                                 const std::vector<std::size_t>& truth) {
  const auto per_class = per_class_accuracy(logits, truth);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& a : per_class) {
    if (!a) continue;
    total += *a;
    ++n;
  }
  return total / static_cast<double>(n);
}

// Non-interpolated AP: rank samples by descending score (equal scores keep
// ascending sample index), then average precision@k over the ranks k of the
// positives. nullopt when there are no positives.
inline std::optional<double> average_precision(const std::vector<double>& scores,
                                               const std::vector<int>& positives) {
  if (scores.size() != positives.size()) {
    throw DimensionError("average_precision: " + std::to_string(scores.size()) +
                         " scores for " + std::to_string(positives.size()) + " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double total = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (positives[order[rank]]) {
      ++hits;
      total += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return total / static_cast<double>(hits);
}

enum class Segment { kHead, kMiddle, kTail };

inline const char* to_string(Segment s) {
  switch (s) {
    case Segment::kHead: return "head";
    case Segment::kMiddle: return "middle";
    case Segment::kTail: return "tail";
  }
  return "?";
}

inline Segment parse_segment(const std::string& s) {
  if (s == "head") return Segment::kHead;
  if (s == "middle") return Segment::kMiddle;
  if (s == "tail") return Segment::kTail;
  throw ValidationError("unknown segment \"" + s + "\"");
}

struct SegmentSpec {
  double head = 0.10;
  double middle = 0.01;

  void validate() const {
    if (!(0.0 < middle && middle < head && head < 1.0)) {
      throw ConfigError("segment thresholds must satisfy 0 < middle < head < 1");
    }
  }
};

// head: f > head; middle: middle < f <= head; tail: f <= middle. A class at
// exactly the middle threshold is tail.
inline std::vector<Segment> assign_segments(const std::vector<double>& frequencies,
                                            const SegmentSpec& spec = {}) {
  spec.validate();
  std::vector<Segment> out;
  out.reserve(frequencies.size());
  for (double f : frequencies) {
    out.push_back(f > spec.head ? Segment::kHead
                  : f > spec.middle ? Segment::kMiddle
                                    : Segment::kTail);
  }
  return out;
}

// Share of each class among single-label samples.
inline std::vector<double> class_frequencies(const std::vector<std::size_t>& truth,
                                             std::size_t classes) {
  std::vector<double> f(classes, 0.0);
  for (auto t : truth) f.at(t) += 1.0;
  for (auto& v : f) v /= static_cast<double>(std::max<std::size_t>(truth.size(), 1));
  return f;
}

// Share of each class among all label occurrences of multi-label samples.
inline std::vector<double> label_frequencies(const std::vector<std::vector<int>>& labels,
                                             std::size_t classes) {
  std::vector<double> f(classes, 0.0);
  double total = 0.0;
  for (const auto& row : labels)
    for (std::size_t c = 0; c < classes; ++c) {
      f[c] += row.at(c);
      total += row[c];
    }
  if (total > 0)
    for (auto& v : f) v /= total;
  return f;
}

struct MapResult {
  std::vector<std::optional<double>> per_class;  // AP, nullopt without positives
  double all = 0.0;
  std::optional<double> head, middle, tail;
};

inline std::optional<double> mean_over(const std::vector<std::optional<double>>& values,
                                       const std::vector<Segment>* segments,
                                       std::optional<Segment> only) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < values.size(); ++c) {
    if (!values[c]) continue;
    if (only && (*segments)[c] != *only) continue;
    total += *values[c];
    ++n;
  }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

// Macro mAP: unweighted mean of per-class AP over classes with at least one
// positive, overall and per segment (segments from training frequencies).
inline MapResult macro_map(const ScoreMatrix& scores,
                           const std::vector<std::vector<int>>& labels,
                           const std::vector<double>& train_frequencies,
                           const SegmentSpec& spec = {}) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw DimensionError("macro_map: " + std::to_string(scores.size()) +
                         " score rows for " + std::to_string(labels.size()) +
                         " label rows");
  }
  const std::size_t classes = scores.front().size();
  if (train_frequencies.size() != classes) {
    throw DimensionError("macro_map: frequencies for " +
                         std::to_string(train_frequencies.size()) + " classes, scores have " +
                         std::to_string(classes));
  }
  MapResult out;
  out.per_class.resize(classes);
  std::vector<double> column(scores.size());
  std::vector<int> positives(scores.size());
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i].size() != classes || labels[i].size() != classes) {
        throw DimensionError("macro_map: ragged row " + std::to_string(i));
      }
      column[i] = scores[i][c];
      positives[i] = labels[i][c];
    }
    out.per_class[c] = average_precision(column, positives);
  }
  const auto overall = mean_over(out.per_class, nullptr, std::nullopt);
  if (!overall) throw ContractError("macro_map: no class has a positive sample");
  out.all = *overall;
  const auto segments = assign_segments(train_frequencies, spec);
  out.head = mean_over(out.per_class, &segments, Segment::kHead);
  out.middle = mean_over(out.per_class, &segments, Segment::kMiddle);
  out.tail = mean_over(out.per_class, &segments, Segment::kTail);
  return out;
}

enum class Task { kMulticlass, kMultilabel };

inline std::string to_string(Task t) {
  return t == Task::kMulticlass ? "multiclass" : "multilabel";
}

inline Task parse_task(const std::string& s) {
  if (s == "multiclass") return Task::kMulticlass;
  if (s == "multilabel") return Task::kMultilabel;
  throw ConfigError("task must be multiclass or multilabel, got \"" + s + "\"");
}

struct ClassScore {
  std::size_t index = 0;  // position in the ethogram / decoder
  int class_id = 0;
  std::string name;
  double frequency = 0.0;  // training-split proportion
  Segment segment = Segment::kTail;
  std::optional<double> score;  // accuracy (multiclass) or AP (multilabel)
  std::size_t support = 0;      // evaluation samples (multiclass) / positives
};

struct MetricsReport {
  Task task = Task::kMulticlass;
  std::vector<ClassScore> classes;
  std::optional<double> top1, class_avg;           // multiclass
  std::optional<double> map_all;                   // multilabel
  std::optional<double> segment_head, segment_middle, segment_tail;
};

struct ClassInfo {
  int class_id;
  std::string name;
};

inline MetricsReport build_multiclass_report(const ScoreMatrix& logits,
                                             const std::vector<std::size_t>& truth,
                                             const std::vector<double>& train_frequencies,
                                             const std::vector<ClassInfo>& info,
                                             const SegmentSpec& spec = {}) {
  MetricsReport r;
  r.task = Task::kMulticlass;
  r.top1 = top1_accuracy(logits, truth);
  r.class_avg = class_avg_accuracy(logits, truth);
  const auto acc = per_class_accuracy(logits, truth);
  const auto segments = assign_segments(train_frequencies, spec);
  std::vector<std::size_t> support(acc.size(), 0);
  for (auto t : truth) ++support[t];
  for (std::size_t c = 0; c < acc.size(); ++c) {
    r.classes.push_back({c, info.at(c).class_id, info[c].name, train_frequencies.at(c),
                         segments[c], acc[c], support[c]});
  }
  r.segment_head = mean_over(acc, &segments, Segment::kHead);
  r.segment_middle = mean_over(acc, &segments, Segment::kMiddle);
  r.segment_tail = mean_over(acc, &segments, Segment::kTail);
  return r;
}

inline MetricsReport build_multilabel_report(const ScoreMatrix& scores,
                                             const std::vector<std::vector<int>>& labels,
                                             const std::vector<double>& train_frequencies,
                                             const std::vector<ClassInfo>& info,
                                             const SegmentSpec& spec = {}) {
  MetricsReport r;
  r.task = Task::kMultilabel;
  const MapResult m = macro_map(scores, labels, train_frequencies, spec);
  const auto segments = assign_segments(train_frequencies, spec);
  for (std::size_t c = 0; c < m.per_class.size(); ++c) {
    std::size_t positives = 0;
    for (const auto& row : labels) positives += row[c] != 0;
    r.classes.push_back({c, info.at(c).class_id, info[c].name, train_frequencies.at(c),
                         segments[c], m.per_class[c], positives});
  }
  r.map_all = m.all;
  r.segment_head = m.head;
  r.segment_middle = m.middle;
  r.segment_tail = m.tail;
  return r;
}

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline const char* segment_colour(Segment s) {
  switch (s) {
    case Segment::kHead: return "#1f77b4";
    case Segment::kMiddle: return "#ff7f0e";
    case Segment::kTail: return "#d62728";
  }
  return "#000000";
}

}  // namespace detail

// Classes by descending training frequency, ties by ascending class id.
inline std::vector<ClassScore> sorted_by_frequency(const MetricsReport& r) {
  auto rows = r.classes;
  std::stable_sort(rows.begin(), rows.end(), [](const ClassScore& a, const ClassScore& b) {
    if (a.frequency != b.frequency) return a.frequency > b.frequency;
    return a.class_id < b.class_id;
  });
  return rows;
}

inline std::string report_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "class,frequency,score,segment,support\n";
  for (const auto& c : sorted_by_frequency(r)) {
    os << c.class_id << ',' << detail::fmt_double(c.frequency) << ','
       << (c.score ? detail::fmt_double(*c.score) : "") << ',' << to_string(c.segment)
       << ',' << c.support << '\n';
  }
  return os.str();
}

// Per-class score against training proportion, one <circle class="point"> per
// class that has a score.
inline std::string report_svg(const MetricsReport& r) {
  constexpr double width = 640, height = 400, left = 60, right = 20, top = 20,
                   bottom = 50;
  double max_freq = 0.0;
  for (const auto& c : r.classes) max_freq = std::max(max_freq, c.frequency);
  if (max_freq <= 0.0) max_freq = 1.0;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w
     << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
     << top + plot_h << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 12
     << "\" text-anchor=\"middle\" font-size=\"12\">proportion of training data</text>\n";
  os << "<text x=\"14\" y=\"" << top + plot_h / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
     << top + plot_h / 2 << ")\" text-anchor=\"middle\">"
     << (r.task == Task::kMulticlass ? "per-class accuracy" : "average precision")
     << "</text>\n";
  os << "<text x=\"" << left << "\" y=\"" << top + plot_h + 16
     << "\" font-size=\"10\" text-anchor=\"middle\">0</text>\n";
  os << "<text x=\"" << left + plot_w << "\" y=\"" << top + plot_h + 16
     << "\" font-size=\"10\" text-anchor=\"middle\">" << detail::fmt_double(max_freq)
     << "</text>\n";
  for (const auto& c : sorted_by_frequency(r)) {
    if (!c.score) continue;
    const double x = left + plot_w * c.frequency / max_freq;
    const double y = top + plot_h * (1.0 - std::clamp(*c.score, 0.0, 1.0));
    os << "<circle class=\"point\" cx=\"" << x << "\" cy=\"" << y << "\" r=\"4\" fill=\""
       << detail::segment_colour(c.segment) << "\"><title>" << c.class_id << ' ' << c.name
       << " (" << to_string(c.segment) << ")</title></circle>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline nlohmann::ordered_json report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["task"] = to_string(r.task);
  if (r.task == Task::kMulticlass) {
    j["top1"] = detail::optional_json(r.top1);
    j["class_avg_accuracy"] = detail::optional_json(r.class_avg);
  } else {
    j["map_all"] = detail::optional_json(r.map_all);
  }
  j["segment_head"] = detail::optional_json(r.segment_head);
  j["segment_middle"] = detail::optional_json(r.segment_middle);
  j["segment_tail"] = detail::optional_json(r.segment_tail);
  auto& classes = j["classes"] = nlohmann::ordered_json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"class_id", c.class_id},
                       {"name", c.name},
                       {"frequency", c.frequency},
                       {"segment", to_string(c.segment)},
                       {"score", detail::optional_json(c.score)},
                       {"support", c.support}});
  }
  return j;
}

// Writes per_class.csv, report.svg and report.json under out_dir.
inline void emit_report(const MetricsReport& r, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  io::write_text(out_dir / "per_class.csv", report_csv(r));
  io::write_text(out_dir / "report.svg", report_svg(r));
  io::write_text(out_dir / "report.json", report_json(r).dump(2) + "\n");
}

// Prediction interchange: CSV "sample_id,class_id,score,label", one row per
// (sample, class) pair. Sample and class order follow first appearance.
struct Predictions {
  std::vector<std::string> sample_ids;
  std::vector<int> class_ids;
  ScoreMatrix scores;                  // [N][C]
  std::vector<std::vector<int>> labels;  // [N][C]
};

inline std::string predictions_csv(const Predictions& p) {
  std::ostringstream os;
  os << "sample_id,class_id,score,label\n";
  for (std::size_t i = 0; i < p.sample_ids.size(); ++i)
    for (std::size_t c = 0; c < p.class_ids.size(); ++c)
      os << p.sample_ids[i] << ',' << p.class_ids[c] << ','
         << detail::fmt_double(p.scores[i][c]) << ',' << p.labels[i][c] << '\n';
  return os.str();
}

inline Predictions parse_predictions(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError(source, 1, "empty prediction file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "sample_id,class_id,score,label") {
    throw ParseError(source, 1, "expected header sample_id,class_id,score,label");
  }
  Predictions p;
  auto index_of = [](auto& list, const auto& key) {
    auto it = std::find(list.begin(), list.end(), key);
    if (it != list.end()) return static_cast<std::size_t>(it - list.begin());
    list.push_back(key);
    return list.size() - 1;
  };
  struct Row { std::size_t sample, cls; double score; int label; std::size_t line; };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 4) throw ParseError(source, line_no, "expected 4 fields");
    Row r{};
    try {
      std::size_t used = 0;
      const int cls = std::stoi(f[1], &used);
      if (used != f[1].size()) throw std::invalid_argument("class_id");
      r.score = std::stod(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("score");
      r.label = std::stoi(f[3], &used);
      if (used != f[3].size() || (r.label != 0 && r.label != 1))
        throw std::invalid_argument("label");
      r.sample = index_of(p.sample_ids, f[0]);
      r.cls = index_of(p.class_ids, cls);
    } catch (const std::logic_error&) {
      throw ParseError(source, line_no, "malformed prediction row");
    }
    r.line = line_no;
    rows.push_back(r);
  }
  const std::size_t n = p.sample_ids.size(), c = p.class_ids.size();
  if (n == 0) throw ParseError(source, line_no, "no prediction rows");
  std::vector<std::vector<char>> seen(n, std::vector<char>(c, 0));
  p.scores.assign(n, std::vector<double>(c, 0.0));
  p.labels.assign(n, std::vector<int>(c, 0));
  for (const auto& r : rows) {
    if (seen[r.sample][r.cls]) throw ParseError(source, r.line, "duplicate (sample, class) pair");
    seen[r.sample][r.cls] = 1;
    p.scores[r.sample][r.cls] = r.score;
    p.labels[r.sample][r.cls] = r.label;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      if (!seen[i][k]) {
        throw ParseError(source, line_no, "missing score for sample " + p.sample_ids[i] +
                                              ", class " + std::to_string(p.class_ids[k]));
      }
  return p;
}

}  // namespace ethodec
