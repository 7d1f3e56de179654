#pragma once

// Sample assembly for the two evaluation protocols, the behaviour training
// loop, and evaluation into a MetricsReport.
//
// Multi-class: each clip contributes one sample per behaviour run lasting at
// least `run_threshold` frames; `clip_length` frames are sampled inside the
// run. Multi-label: `clip_length` frames are sampled uniformly over the whole
// video and every clip label is a target.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ethodec/data_io.hpp"
#include "ethodec/decoder.hpp"
#include "ethodec/features.hpp"
#include "ethodec/metrics.hpp"
#include "ethodec/optim.hpp"

namespace ethodec {

struct Sample {
  std::string id;
  Tensor features;                 // [clip_length, D]
  std::size_t target = 0;          // multiclass class index
  std::vector<double> multi_hot;   // multilabel targets, size C
};

struct SamplingConfig {
  std::size_t clip_length = 16;
  std::size_t run_threshold = 16;
  SamplingMode mode = SamplingMode::kUniform;
};

inline std::vector<Sample> build_samples(const DatasetManifest& manifest, const Ethogram& ethogram,
                                         Split split, const SamplingConfig& cfg = {}) {
  std::vector<Sample> out;
  const std::size_t classes = ethogram.size();
  std::map<std::string, FrameFeatures> cache;
  for (const ManifestRecord* rec : manifest.split(split)) {
    const FrameFeatures f = load_features(manifest.resolve(*rec));
    if (f.frames() != rec->frame_count) {
      throw ValidationError("record " + rec->id + ": feature file has " +
                            std::to_string(f.frames()) + " frames, manifest says " +
                            std::to_string(rec->frame_count));
    }
    if (manifest.task == Task::kMulticlass) {
      std::vector<int> labels = rec->frame_labels;
      if (labels.empty()) labels.assign(rec->frame_count, rec->labels.front());
      for (const auto& run : filter_by_run_length(labels, cfg.run_threshold)) {
        const auto idx = class_index(ethogram, run.behaviour);
        if (!idx) {
          throw ValidationError("record " + rec->id + ": unknown behaviour " +
                                std::to_string(run.behaviour));
        }
        Sample s;
        s.id = rec->id + "@" + std::to_string(run.start);
        s.features = select_frames(f, sample_frames(run.length, cfg.clip_length, cfg.mode),
                                   run.start).values;
        s.target = *idx;
        out.push_back(std::move(s));
      }
    } else {
      Sample s;
      s.id = rec->id;
      s.features = select_frames(f, sample_frames(rec->frame_count, cfg.clip_length, cfg.mode))
                       .values;
      s.multi_hot.assign(classes, 0.0);
      for (int l : rec->labels) {
        const auto idx = class_index(ethogram, l);
        if (!idx) throw ValidationError("record " + rec->id + ": unknown label " + std::to_string(l));
        s.multi_hot[*idx] = 1.0;
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

// Training-split class proportions used for head/middle/tail assignment.
inline std::vector<double> sample_frequencies(const std::vector<Sample>& samples, Task task,
                                              std::size_t classes) {
  if (task == Task::kMulticlass) {
    std::vector<std::size_t> truth;
    for (const auto& s : samples) truth.push_back(s.target);
    return class_frequencies(truth, classes);
  }
  std::vector<std::vector<int>> labels;
  for (const auto& s : samples) {
    std::vector<int> row(classes);
    for (std::size_t c = 0; c < classes; ++c) row[c] = s.multi_hot.at(c) != 0.0;
    labels.push_back(std::move(row));
  }
  return label_frequencies(labels, classes);
}

// Same proportions as sample_frequencies(build_samples(...)) without reading
// any feature file.
inline std::vector<double> manifest_frequencies(const DatasetManifest& manifest,
                                                const Ethogram& ethogram, Split split,
                                                const SamplingConfig& cfg = {}) {
  const std::size_t classes = ethogram.size();
  auto index = [&](const ManifestRecord& rec, int id) {
    const auto idx = class_index(ethogram, id);
    if (!idx) throw ValidationError("record " + rec.id + ": unknown label " + std::to_string(id));
    return *idx;
  };
  if (manifest.task == Task::kMulticlass) {
    std::vector<std::size_t> truth;
    for (const ManifestRecord* rec : manifest.split(split)) {
      std::vector<int> labels = rec->frame_labels;
      if (labels.empty()) labels.assign(rec->frame_count, rec->labels.front());
      for (const auto& run : filter_by_run_length(labels, cfg.run_threshold))
        truth.push_back(index(*rec, run.behaviour));
    }
    return class_frequencies(truth, classes);
  }
  std::vector<std::vector<int>> rows;
  for (const ManifestRecord* rec : manifest.split(split)) {
    std::vector<int> row(classes, 0);
    for (int l : rec->labels) row[index(*rec, l)] = 1;
    rows.push_back(std::move(row));
  }
  return label_frequencies(rows, classes);
}

struct TrainConfig {
  std::size_t batch_size = 64;
  LrSchedule schedule;  // total_epochs is the epoch count
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global steps completed
  double lr = 0.0;       // lr of the epoch's last step
  double train_loss = 0.0;
  std::optional<double> val_metric;
};

struct FitResult {
  std::vector<EpochLog> epochs;
  std::vector<std::string> warnings;
};

inline Tensor sample_loss(Tape& tape, const Model& m, const Sample& s) {
  const Tensor logits = model_forward(tape, m, s.features);
  if (m.task == Task::kMulticlass) return softmax_ce_loss(tape, logits, {s.target});
  return bce_loss(tape, logits, s.multi_hot);
}

struct Evaluation {
  std::vector<std::string> sample_ids;
  ScoreMatrix logits;
  std::vector<std::size_t> truth;           // multiclass
  std::vector<std::vector<int>> labels;     // multi-hot, both tasks
};

inline Evaluation evaluate(const Model& m, const std::vector<Sample>& samples) {
  Evaluation e;
  for (const auto& s : samples) {
    e.sample_ids.push_back(s.id);
    e.logits.push_back(predict_logits(m, s.features));
    std::vector<int> row(m.classes(), 0);
    if (m.task == Task::kMulticlass) {
      e.truth.push_back(s.target);
      row[s.target] = 1;
    } else {
      for (std::size_t c = 0; c < m.classes(); ++c) row[c] = s.multi_hot[c] != 0.0;
    }
    e.labels.push_back(std::move(row));
  }
  return e;
}

// top-1 for multiclass, macro mAP for multilabel; nullopt when undefined.
inline std::optional<double> headline_metric(const Model& m, const std::vector<Sample>& samples) {
  if (samples.empty()) return std::nullopt;
  const Evaluation e = evaluate(m, samples);
  if (m.task == Task::kMulticlass) return top1_accuracy(e.logits, e.truth);
  std::vector<double> uniform(m.classes(), 1.0 / static_cast<double>(m.classes()));
  try {
    return macro_map(e.logits, e.labels, uniform).all;
  } catch (const ContractError&) {
    return std::nullopt;
  }
}

// Seed-deterministic minibatch AdamW training. Each batch loss is the mean of
// its per-sample losses; lr follows the schedule per step.
inline FitResult fit(Model& model, const std::vector<Sample>& train,
                     const std::vector<Sample>& val, const TrainConfig& cfg,
                     const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (train.empty()) throw ValidationError("fit: training split is empty");
  if (cfg.batch_size == 0) throw ConfigError("fit: batch size must be positive");
  FitResult result;
  if (model.task == Task::kMulticlass) {
    std::vector<std::size_t> counts(model.classes(), 0);
    for (const auto& s : train) ++counts.at(s.target);
    for (std::size_t c = 0; c < counts.size(); ++c)
      if (!counts[c]) {
        result.warnings.push_back("class " + std::to_string(model.queries.class_ids[c]) +
                                  " has no training samples");
      }
  }
  LrSchedule schedule = cfg.schedule;
  schedule.steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  schedule.validate();

  const NamedTensors params = model.parameters();
  OptimizerState opt;
  opt.config = cfg.optimizer;
  Rng rng(cfg.seed);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < schedule.total_epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tape tape;
      Tensor loss;
      try {
        for (std::size_t i = start; i < end; ++i) {
          const Tensor l = sample_loss(tape, model, train[order[i]]);
          loss = loss.defined() ? add(tape, loss, l) : l;
        }
        loss = scale(tape, loss, 1.0 / static_cast<double>(end - start));
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what(), step);
      }
      zero_grads(params);
      backward(loss, tape);
      lr = lr_at(step, schedule);
      adamw_step(params, opt, lr);
      loss_sum += loss.item();
      ++batches;
      ++step;
    }
    EpochLog log{epoch, step, lr, loss_sum / static_cast<double>(batches),
                 headline_metric(model, val)};
    if (on_epoch) on_epoch(log);
    result.epochs.push_back(log);
  }
  return result;
}

inline std::string training_log_csv(const std::vector<EpochLog>& logs) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,step,lr,train_loss,val_metric\n";
  for (const auto& l : logs) {
    os << l.epoch << ',' << l.step << ',' << l.lr << ',' << l.train_loss << ',';
    if (l.val_metric) os << *l.val_metric;
    os << '\n';
  }
  return os.str();
}

inline MetricsReport build_report(const Model& m, const Evaluation& e,
                                  const std::vector<double>& train_frequencies,
                                  const Ethogram& ethogram, const SegmentSpec& spec = {}) {
  if (e.logits.empty()) throw ValidationError("evaluation split has no samples");
  if (m.task == Task::kMulticlass) {
    return build_multiclass_report(e.logits, e.truth, train_frequencies, class_info(ethogram),
                                   spec);
  }
  return build_multilabel_report(e.logits, e.labels, train_frequencies, class_info(ethogram),
                                 spec);
}

// Prediction rows for the interchange CSV. Scores are the raw logits, so any
// report rebuilt from the file ranks exactly like the model did.
inline Predictions to_predictions(const Model& m, const Evaluation& e) {
  return {e.sample_ids, m.queries.class_ids, e.logits, e.labels};
}

}  // namespace ethodec
