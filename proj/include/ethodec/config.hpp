#pragma once

// Fully resolved run configuration. Precedence: flags > config file >
// defaults; the resolved result is written next to every command's outputs.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>

#include "ethodec/binary_io.hpp"
#include "ethodec/data_io.hpp"
#include "ethodec/decoder.hpp"
#include "ethodec/metrics.hpp"
#include "ethodec/text_model.hpp"
#include "ethodec/trainer.hpp"
#include "json.hpp"

namespace ethodec {

struct RunConfig {
  std::uint64_t seed = 0;
  DecoderConfig model;
  TrainConfig train;
  SamplingConfig sampling;
  MlmConfig lm;
  SegmentSpec segments;
  SyntheticSpec synth;
  QuerySource query_source = QuerySource::kDescriptions;
  Reduction reduction = Reduction::kMeanPool;
  LmMode lm_mode = LmMode::kFinetuned;
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["model"] = {{"layers", c.model.layers},
                {"heads", c.model.heads},
                {"mlp_hidden", c.model.mlp_hidden},
                {"norm", c.model.norm},
                {"pooled_length", c.model.pooled_length}};
  const auto& s = c.train.schedule;
  j["train"] = {{"epochs", s.total_epochs},
                {"warmup_epochs", s.warmup_epochs},
                {"start_lr", s.start_lr},
                {"peak_lr", s.peak_lr},
                {"floor_lr", s.floor_lr},
                {"batch_size", c.train.batch_size},
                {"beta1", c.train.optimizer.beta1},
                {"beta2", c.train.optimizer.beta2},
                {"eps", c.train.optimizer.eps},
                {"weight_decay", c.train.optimizer.weight_decay}};
  j["sampling"] = {{"clip_length", c.sampling.clip_length},
                   {"run_threshold", c.sampling.run_threshold},
                   {"mode", c.sampling.mode == SamplingMode::kUniform ? "uniform" : "contiguous"}};
  j["lm"] = {{"mask_prob", c.lm.mask_prob},
             {"replace_with_mask", c.lm.replace_with_mask},
             {"replace_with_random", c.lm.replace_with_random},
             {"keep_unchanged", c.lm.keep_unchanged},
             {"layers", c.lm.layers},
             {"heads", c.lm.heads},
             {"dim", c.lm.dim},
             {"mlp_hidden", c.lm.mlp_hidden},
             {"max_len", c.lm.max_len},
             {"lr", c.lm.lr},
             {"weight_decay", c.lm.weight_decay},
             {"batch_size", c.lm.batch_size},
             {"epochs", c.lm.epochs},
             {"mode", to_string(c.lm_mode)}};
  j["segments"] = {{"head", c.segments.head}, {"middle", c.segments.middle}};
  j["synth"] = {{"task", to_string(c.synth.task)},
                {"classes", c.synth.classes},
                {"dim", c.synth.dim},
                {"clips_per_class", c.synth.clips_per_class},
                {"tail_exponent", c.synth.tail_exponent},
                {"noise", c.synth.noise},
                {"test_fraction", c.synth.test_fraction},
                {"val_fraction", c.synth.val_fraction},
                {"run_min", c.synth.run_min},
                {"run_max", c.synth.run_max},
                {"extra_label_prob", c.synth.extra_label_prob}};
  j["query"] = {{"source", to_string(c.query_source)}, {"reduction", to_string(c.reduction)}};
  return j;
}

namespace detail {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

// Overlays every key present in `j` onto `base`.
inline RunConfig merge_config(const nlohmann::json& j, RunConfig base = {}) {
  using detail::take;
  try {
    take(j, "seed", base.seed);
    if (j.contains("model")) {
      const auto& m = j["model"];
      take(m, "layers", base.model.layers);
      take(m, "heads", base.model.heads);
      take(m, "mlp_hidden", base.model.mlp_hidden);
      take(m, "norm", base.model.norm);
      take(m, "pooled_length", base.model.pooled_length);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      auto& s = base.train.schedule;
      take(t, "epochs", s.total_epochs);
      take(t, "warmup_epochs", s.warmup_epochs);
      take(t, "start_lr", s.start_lr);
      take(t, "peak_lr", s.peak_lr);
      take(t, "floor_lr", s.floor_lr);
      take(t, "batch_size", base.train.batch_size);
      take(t, "beta1", base.train.optimizer.beta1);
      take(t, "beta2", base.train.optimizer.beta2);
      take(t, "eps", base.train.optimizer.eps);
      take(t, "weight_decay", base.train.optimizer.weight_decay);
    }
    if (j.contains("sampling")) {
      const auto& s = j["sampling"];
      take(s, "clip_length", base.sampling.clip_length);
      take(s, "run_threshold", base.sampling.run_threshold);
      if (s.contains("mode")) {
        const auto mode = s["mode"].get<std::string>();
        if (mode != "uniform" && mode != "contiguous")
          throw ConfigError("sampling mode must be uniform or contiguous");
        base.sampling.mode = mode == "uniform" ? SamplingMode::kUniform : SamplingMode::kContiguous;
      }
    }
    if (j.contains("lm")) {
      const auto& l = j["lm"];
      take(l, "mask_prob", base.lm.mask_prob);
      take(l, "replace_with_mask", base.lm.replace_with_mask);
      take(l, "replace_with_random", base.lm.replace_with_random);
      take(l, "keep_unchanged", base.lm.keep_unchanged);
      take(l, "layers", base.lm.layers);
      take(l, "heads", base.lm.heads);
      take(l, "dim", base.lm.dim);
      take(l, "mlp_hidden", base.lm.mlp_hidden);
      take(l, "max_len", base.lm.max_len);
      take(l, "lr", base.lm.lr);
      take(l, "weight_decay", base.lm.weight_decay);
      take(l, "batch_size", base.lm.batch_size);
      take(l, "epochs", base.lm.epochs);
      if (l.contains("mode")) base.lm_mode = parse_lm_mode(l["mode"].get<std::string>());
    }
    if (j.contains("segments")) {
      take(j["segments"], "head", base.segments.head);
      take(j["segments"], "middle", base.segments.middle);
    }
    if (j.contains("synth")) {
      const auto& s = j["synth"];
      if (s.contains("task")) base.synth.task = parse_task(s["task"].get<std::string>());
      take(s, "classes", base.synth.classes);
      take(s, "dim", base.synth.dim);
      take(s, "clips_per_class", base.synth.clips_per_class);
      take(s, "tail_exponent", base.synth.tail_exponent);
      take(s, "noise", base.synth.noise);
      take(s, "test_fraction", base.synth.test_fraction);
      take(s, "val_fraction", base.synth.val_fraction);
      take(s, "run_min", base.synth.run_min);
      take(s, "run_max", base.synth.run_max);
      take(s, "extra_label_prob", base.synth.extra_label_prob);
    }
    if (j.contains("query")) {
      const auto& q = j["query"];
      if (q.contains("source")) base.query_source = parse_query_source(q["source"].get<std::string>());
      if (q.contains("reduction")) base.reduction = parse_reduction(q["reduction"].get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what(), e.byte);
  }
  return merge_config(j, base);
}

// ETHODEC_SEED, when set, replaces the default seed (flags still win).
inline std::optional<std::uint64_t> seed_from_env() {
  const char* v = std::getenv("ETHODEC_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto s = std::stoull(v, &used);
    if (v[used] != '\0') throw std::invalid_argument("seed");
    return s;
  } catch (const std::logic_error&) {
    throw ConfigError(std::string("ETHODEC_SEED is not an unsigned integer: ") + v);
  }
}

}  // namespace ethodec
