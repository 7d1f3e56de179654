#pragma once

// Ethogram TSV, dataset manifest JSON, and the seeded synthetic dataset
// generator used for end-to-end checks without real camera-trap data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ethodec/binary_io.hpp"
#include "ethodec/features.hpp"
#include "ethodec/metrics.hpp"
#include "ethodec/rng.hpp"
#include "json.hpp"

namespace ethodec {

struct EthogramEntry {
  int class_id = 0;
  std::string name;
  std::string description;

  bool operator==(const EthogramEntry&) const = default;
};

using Ethogram = std::vector<EthogramEntry>;

inline std::optional<std::size_t> class_index(const Ethogram& e, int class_id) {
  for (std::size_t i = 0; i < e.size(); ++i)
    if (e[i].class_id == class_id) return i;
  return std::nullopt;
}

inline std::vector<ClassInfo> class_info(const Ethogram& e) {
  std::vector<ClassInfo> out;
  for (const auto& entry : e) out.push_back({entry.class_id, entry.name});
  return out;
}

// One record per line: class_id<TAB>name<TAB>description. Blank lines and
// lines starting with '#' are skipped. Order follows the file.
inline Ethogram parse_ethogram_text(const std::string& text, const std::string& source) {
  Ethogram out;
  std::set<int> ids;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3) {
      throw ParseError(source, line_no,
                       "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    }
    EthogramEntry e;
    try {
      std::size_t used = 0;
      e.class_id = std::stoi(fields[0], &used);
      if (used != fields[0].size()) throw std::invalid_argument("id");
    } catch (const std::logic_error&) {
      throw ParseError(source, line_no, "class_id \"" + fields[0] + "\" is not an integer");
    }
    if (fields[1].empty()) throw ParseError(source, line_no, "empty behaviour name");
    if (fields[2].empty()) throw ParseError(source, line_no, "empty behaviour description");
    if (!ids.insert(e.class_id).second) {
      throw ParseError(source, line_no, "duplicate class_id " + fields[0]);
    }
    e.name = fields[1];
    e.description = fields[2];
    out.push_back(std::move(e));
  }
  if (out.empty()) throw ParseError(source, line_no, "ethogram has no entries");
  return out;
}

inline Ethogram parse_ethogram(const std::filesystem::path& path) {
  return parse_ethogram_text(io::read_text(path), path.string());
}

inline std::string ethogram_text(const Ethogram& e) {
  std::ostringstream os;
  os << "# class_id\tname\tdescription\n";
  for (const auto& entry : e)
    os << entry.class_id << '\t' << entry.name << '\t' << entry.description << '\n';
  return os.str();
}

inline void write_ethogram(const std::filesystem::path& path, const Ethogram& e) {
  io::write_text(path, ethogram_text(e));
}

// MLM corpus: "name description" per behaviour plus any extra prose lines.
inline std::vector<std::string> ethogram_corpus(const Ethogram& e,
                                                const std::vector<std::string>& extra = {}) {
  std::vector<std::string> lines;
  for (const auto& entry : e) lines.push_back(entry.name + " " + entry.description);
  for (const auto& l : extra)
    if (l.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(l);
  return lines;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line.front() == '#') continue;
    lines.push_back(line);
  }
  return lines;
}

enum class Split { kTrain, kVal, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ValidationError("split must be train, val or test, got \"" + s + "\"");
}

struct ManifestRecord {
  std::string id;
  std::string feature_path;  // relative paths resolve against the manifest dir
  std::vector<int> labels;   // ethogram class ids
  std::size_t frame_count = 0;
  Split split = Split::kTrain;
  std::vector<int> frame_labels;  // optional per-frame class ids, -1 = none

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  Task task = Task::kMulticlass;
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestRecord& r) const {
    const std::filesystem::path p(r.feature_path);
    return p.is_absolute() ? p : base_dir / p;
  }

  std::vector<const ManifestRecord*> split(Split s) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }
};

// Checks ids, label arity and references, and (strict) feature files on disk.
inline void validate_manifest(const DatasetManifest& m, const Ethogram* ethogram,
                              bool strict = false) {
  std::set<std::string> ids;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    const std::string where = "manifest record " + std::to_string(i) + " (" + r.id + ")";
    if (r.id.empty()) throw ValidationError(where + ": empty id");
    if (!ids.insert(r.id).second) throw ValidationError(where + ": duplicate id");
    if (r.labels.empty()) throw ValidationError(where + ": no labels");
    if (m.task == Task::kMulticlass && r.labels.size() != 1) {
      throw ValidationError(where + ": multiclass records carry exactly one label");
    }
    if (r.frame_count < 1) throw ValidationError(where + ": frame_count must be >= 1");
    if (!r.frame_labels.empty() && r.frame_labels.size() != r.frame_count) {
      throw ValidationError(where + ": frame_labels length differs from frame_count");
    }
    if (ethogram) {
      for (int l : r.labels)
        if (!class_index(*ethogram, l)) {
          throw ValidationError(where + ": label " + std::to_string(l) +
                                " is not an ethogram class_id");
        }
      for (int l : r.frame_labels)
        if (l >= 0 && !class_index(*ethogram, l)) {
          throw ValidationError(where + ": frame label " + std::to_string(l) +
                                " is not an ethogram class_id");
        }
    }
    if (strict && !std::filesystem::exists(m.resolve(r))) {
      throw ValidationError(where + ": feature file " + m.resolve(r).string() + " not found");
    }
  }
}

// JSON list of {id, feature_path, labels, frame_count, split[, frame_labels]}.
// labels is a bare id for multiclass manifests and a list for multilabel ones.
inline std::string manifest_json(const DatasetManifest& m) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : m.records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["feature_path"] = r.feature_path;
    if (m.task == Task::kMulticlass) {
      j["labels"] = r.labels.at(0);
    } else {
      j["labels"] = r.labels;
    }
    j["frame_count"] = r.frame_count;
    j["split"] = to_string(r.split);
    if (!r.frame_labels.empty()) j["frame_labels"] = r.frame_labels;
    arr.push_back(std::move(j));
  }
  return arr.dump(1) + "\n";
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  io::write_text(path, manifest_json(m));
}

inline DatasetManifest parse_manifest_text(const std::string& text, const std::string& source,
                                           const std::filesystem::path& base_dir,
                                           const Ethogram* ethogram = nullptr,
                                           bool strict = false) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(source + ": invalid JSON: " + e.what(), e.byte);
  }
  if (!doc.is_array()) throw ValidationError(source + ": manifest must be a JSON list");
  DatasetManifest m;
  m.base_dir = base_dir;
  bool any_list = false;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& j = doc[i];
    const std::string where = source + ": record " + std::to_string(i);
    try {
      ManifestRecord r;
      r.id = j.at("id").get<std::string>();
      r.feature_path = j.at("feature_path").get<std::string>();
      const auto& labels = j.at("labels");
      if (labels.is_array()) {
        any_list = true;
        r.labels = labels.get<std::vector<int>>();
      } else {
        r.labels = {labels.get<int>()};
      }
      r.frame_count = j.at("frame_count").get<std::size_t>();
      r.split = parse_split(j.at("split").get<std::string>());
      if (j.contains("frame_labels")) r.frame_labels = j["frame_labels"].get<std::vector<int>>();
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  m.task = any_list ? Task::kMultilabel : Task::kMulticlass;
  validate_manifest(m, ethogram, strict);
  return m;
}

inline DatasetManifest parse_manifest(const std::filesystem::path& path,
                                      const Ethogram* ethogram = nullptr,
                                      bool strict = false) {
  return parse_manifest_text(io::read_text(path), path.string(), path.parent_path(), ethogram,
                             strict);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
  Task task = Task::kMulticlass;
  std::size_t classes = 6;
  std::size_t dim = 32;
  std::size_t clips_per_class = 20;  // training clips of the largest class
  double tail_exponent = 0.0;        // class c gets clips_per_class * (c+1)^-exponent
  double noise = 0.1;
  double test_fraction = 0.3;
  double val_fraction = 0.0;
  std::size_t run_min = 8;
  std::size_t run_max = 64;
  double extra_label_prob = 0.3;  // multilabel: chance of each of two extra labels
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
    if (dim < 1) throw ConfigError("synthetic feature dim must be >= 1");
    if (clips_per_class < 1) throw ConfigError("clips per class must be >= 1");
    if (noise < 0) throw ConfigError("noise must be >= 0");
    if (tail_exponent < 0) throw ConfigError("tail exponent must be >= 0");
    if (run_min < 1 || run_max < 16 || run_min > run_max)
      throw ConfigError("run lengths must satisfy 1 <= run_min <= run_max, run_max >= 16");
    if (test_fraction < 0 || val_fraction < 0) throw ConfigError("split fractions must be >= 0");
  }
};

struct SyntheticDataset {
  Ethogram ethogram;
  DatasetManifest manifest;
  std::vector<FrameFeatures> features;      // parallel to manifest.records
  std::vector<std::vector<double>> signals;  // per class, [D]
  std::vector<std::string> corpus;           // extra MLM prose
};

namespace detail {

inline const std::vector<std::string>& synthetic_actions() {
  static const std::vector<std::string> v{
      "climbs", "walks", "runs", "sits", "feeds", "grooms", "drums", "carries",
      "throws", "rests", "calls", "chases", "inspects", "hugs", "plays", "digs"};
  return v;
}

inline const std::vector<std::string>& synthetic_objects() {
  static const std::vector<std::string> v{
      "tree", "branch", "roots", "ground", "partner", "infant", "stick", "stone",
      "fruit", "water", "camera", "nest"};
  return v;
}

inline const std::vector<std::string>& synthetic_manners() {
  static const std::vector<std::string> v{
      "quickly", "slowly", "loudly", "quietly", "repeatedly", "briefly", "upright", "alone"};
  return v;
}

// Pronounceable unique behaviour names, e.g. "kobami".
inline std::string pseudo_word(Rng& rng) {
  static const char* consonants = "bdfgkmnprstvz";
  static const char* vowels = "aeiou";
  std::string w;
  const std::size_t syllables = 2 + rng.below(2);
  for (std::size_t s = 0; s < syllables; ++s) {
    w.push_back(consonants[rng.below(13)]);
    w.push_back(vowels[rng.below(5)]);
  }
  return w;
}

inline std::vector<double> gaussian_vector(std::size_t d, Rng& rng, double stddev = 1.0) {
  std::vector<double> v(d);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return v;
}

}  // namespace detail

// Per-class training clip counts under the power-law tail.
inline std::vector<std::size_t> synthetic_class_sizes(const SyntheticSpec& spec) {
  std::vector<std::size_t> n(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const double size = static_cast<double>(spec.clips_per_class) *
                        std::pow(static_cast<double>(c + 1), -spec.tail_exponent);
    n[c] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(size)));
  }
  return n;
}

// Generates an ethogram whose descriptions are built from shared attribute
// words, class signals equal to the normalised sum of per-word vectors plus a
// class-unique component, and clips whose frame features are the signal of
// the frame's behaviour plus Gaussian noise. With tail_exponent > 0 the
// training split must populate head, middle and tail segments.
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticDataset ds;
  const auto& actions = detail::synthetic_actions();
  const auto& objects = detail::synthetic_objects();
  const auto& manners = detail::synthetic_manners();
  if (spec.classes > actions.size() * objects.size() * manners.size()) {
    throw ConfigError("too many synthetic classes");
  }

  std::map<std::string, std::vector<double>> word_vectors;
  auto word_vector = [&](const std::string& w) -> const std::vector<double>& {
    auto it = word_vectors.find(w);
    if (it == word_vectors.end()) it = word_vectors.emplace(w, detail::gaussian_vector(spec.dim, rng)).first;
    return it->second;
  };

  std::set<std::string> names;
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> combos;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::string name;
    do {
      name = detail::pseudo_word(rng);
    } while (!names.insert(name).second);
    std::size_t a, o, m;
    do {
      a = rng.below(actions.size());
      o = rng.below(objects.size());
      m = rng.below(manners.size());
    } while (!combos.insert({a, o, m}).second);
    const std::string description =
        "the ape " + actions[a] + " near the " + objects[o] + " " + manners[m];
    ds.ethogram.push_back({static_cast<int>(c), name, description});

    std::vector<double> signal(spec.dim, 0.0);
    for (const auto* w : {&actions[a], &objects[o], &manners[m]}) {
      const auto& v = word_vector(*w);
      for (std::size_t d = 0; d < spec.dim; ++d) signal[d] += v[d] / std::sqrt(3.0);
    }
    const auto unique = detail::gaussian_vector(spec.dim, rng, 0.5);
    for (std::size_t d = 0; d < spec.dim; ++d) signal[d] += unique[d];
    ds.signals.push_back(std::move(signal));

    ds.corpus.push_back(name + " is when the ape " + actions[a] + " " + manners[m] + ".");
    ds.corpus.push_back("during " + name + " the " + objects[o] + " is involved.");
  }

  const auto train_sizes = synthetic_class_sizes(spec);
  std::vector<double> sampling_weights(train_sizes.begin(), train_sizes.end());
  const double weight_total = std::accumulate(sampling_weights.begin(), sampling_weights.end(), 0.0);

  auto draw_weighted = [&](Rng& r) {
    double u = r.uniform() * weight_total;
    for (std::size_t c = 0; c < sampling_weights.size(); ++c) {
      if (u < sampling_weights[c]) return c;
      u -= sampling_weights[c];
    }
    return sampling_weights.size() - 1;
  };

  auto make_features = [&](const std::vector<int>& frame_labels, Rng& r) {
    const std::size_t t = frame_labels.size();
    std::vector<double> values(t * spec.dim);
    for (std::size_t f = 0; f < t; ++f)
      for (std::size_t d = 0; d < spec.dim; ++d)
        values[f * spec.dim + d] =
            ds.signals[static_cast<std::size_t>(frame_labels[f])][d] + r.normal(0.0, spec.noise);
    return FrameFeatures{Tensor({t, spec.dim}, std::move(values))};
  };

  ds.manifest.task = spec.task;
  std::size_t clip_no = 0;
  auto add_clip = [&](std::size_t cls, Split split) {
    Rng r = rng.fork(clip_no);
    ManifestRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "clip_%05zu", clip_no);
    rec.id = id;
    rec.feature_path = "features/" + rec.id + ".paff";
    rec.split = split;
    if (spec.task == Task::kMulticlass) {
      rec.labels = {static_cast<int>(cls)};
      auto distractor = [&] {
        std::size_t other = r.below(spec.classes - 1);
        if (other >= cls) ++other;
        const std::size_t len = r.between(spec.run_min, std::min<std::size_t>(15, spec.run_max));
        rec.frame_labels.insert(rec.frame_labels.end(), len, static_cast<int>(other));
      };
      if (spec.run_min < 16 && r.bernoulli(0.5)) distractor();
      rec.frame_labels.insert(rec.frame_labels.end(), r.between(16, spec.run_max),
                              static_cast<int>(cls));
      if (spec.run_min < 16 && r.bernoulli(0.5)) distractor();
    } else {
      rec.labels = {static_cast<int>(cls)};
      for (int extra = 0; extra < 2; ++extra) {
        if (!r.bernoulli(spec.extra_label_prob)) continue;
        const int c2 = static_cast<int>(draw_weighted(r));
        if (std::find(rec.labels.begin(), rec.labels.end(), c2) == rec.labels.end())
          rec.labels.push_back(c2);
      }
      // Runs of at least 16 frames survive uniform 16-frame sub-sampling.
      for (int l : rec.labels)
        rec.frame_labels.insert(rec.frame_labels.end(), r.between(16, spec.run_max), l);
    }
    rec.frame_count = rec.frame_labels.size();
    ds.features.push_back(make_features(rec.frame_labels, r));
    ds.manifest.records.push_back(std::move(rec));
    ++clip_no;
  };

  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t k = 0; k < train_sizes[c]; ++k) add_clip(c, Split::kTrain);
    if (spec.val_fraction > 0) {
      const auto n = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(train_sizes[c] * spec.val_fraction)));
      for (std::size_t k = 0; k < n; ++k) add_clip(c, Split::kVal);
    }
    if (spec.test_fraction > 0) {
      const auto n = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(train_sizes[c] * spec.test_fraction)));
      for (std::size_t k = 0; k < n; ++k) add_clip(c, Split::kTest);
    }
  }

  if (spec.tail_exponent > 0) {
    std::vector<double> freq(spec.classes, 0.0);
    double total = 0.0;
    for (const auto& r : ds.manifest.records) {
      if (r.split != Split::kTrain) continue;
      for (int l : r.labels) {
        freq[static_cast<std::size_t>(l)] += 1.0;
        total += 1.0;
      }
    }
    for (auto& f : freq) f /= total;
    const auto segments = assign_segments(freq);
    for (Segment s : {Segment::kHead, Segment::kMiddle, Segment::kTail}) {
      if (std::find(segments.begin(), segments.end(), s) == segments.end()) {
        throw ConfigError(std::string("synthetic spec leaves the ") + to_string(s) +
                          " segment empty; adjust classes, clips per class or tail exponent");
      }
    }
  }
  return ds;
}

// Writes ethogram.tsv, corpus.txt, manifest.json and features/*.paff.
inline void write_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "features", ec);
  if (ec) throw IoError("cannot create " + (dir / "features").string() + ": " + ec.message());
  write_ethogram(dir / "ethogram.tsv", ds.ethogram);
  std::string corpus;
  for (const auto& l : ds.corpus) corpus += l + "\n";
  io::write_text(dir / "corpus.txt", corpus);
  write_manifest(dir / "manifest.json", ds.manifest);
  for (std::size_t i = 0; i < ds.features.size(); ++i)
    save_features(dir / ds.manifest.records[i].feature_path, ds.features[i]);
}

}  // namespace ethodec
