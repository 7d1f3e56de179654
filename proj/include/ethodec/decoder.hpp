#pragma once

// Query decoder. Each behaviour owns a learnable query token initialised from
// a text embedding of its ethogram entry. A decoder layer runs
//   u = MHSA(q) + q        self-attention over the query tokens
//   v = CA(u, x) + u       cross-attention from queries to video features
//   z = MLP(v) + v
// and a diagonal classifier turns row c of the final z into logit c.
// With `norm` enabled each sub-block sees a layer-normalised input (pre-norm);
// with it disabled the three lines above hold literally.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "ethodec/checkpoint.hpp"
#include "ethodec/data_io.hpp"
#include "ethodec/features.hpp"
#include "ethodec/layers.hpp"
#include "ethodec/text_model.hpp"
#include "json.hpp"

namespace ethodec {

enum class QuerySource { kNames, kDescriptions };

inline std::string to_string(QuerySource s) {
  return s == QuerySource::kNames ? "names" : "descriptions";
}

inline QuerySource parse_query_source(std::string_view s) {
  if (s == "names") return QuerySource::kNames;
  if (s == "descriptions") return QuerySource::kDescriptions;
  throw ConfigError("query source must be names or descriptions, got \"" + std::string(s) + "\"");
}

struct QueryBank {
  Tensor tokens;  // [C, D], learnable
  QuerySource source = QuerySource::kDescriptions;
  LmMode lm_mode = LmMode::kPretrained;
  Reduction reduction = Reduction::kMeanPool;
  std::vector<int> class_ids;  // row order == ethogram order == classifier order
  std::string lm_hash;

  std::size_t classes() const { return tokens.dim(0); }
  std::size_t dim() const { return tokens.dim(1); }
};

// Row c is embed_text(name_c or description_c) under the given encoder.
inline QueryBank init_queries(const Ethogram& ethogram, QuerySource source,
                              const EncoderWeights& lm,
                              Reduction reduction = Reduction::kMeanPool) {
  if (ethogram.empty()) throw ConfigError("init_queries: empty ethogram");
  std::set<int> seen;
  for (const auto& e : ethogram)
    if (!seen.insert(e.class_id).second) {
      throw ConfigError("init_queries: duplicate behaviour id " + std::to_string(e.class_id));
    }
  QueryBank bank;
  bank.source = source;
  bank.lm_mode = lm.mode;
  bank.reduction = reduction;
  bank.lm_hash = hash_hex(lm.hash());
  std::vector<double> rows;
  for (const auto& e : ethogram) {
    const auto v = embed_text(source == QuerySource::kNames ? e.name : e.description, lm,
                              reduction);
    rows.insert(rows.end(), v.begin(), v.end());
    bank.class_ids.push_back(e.class_id);
  }
  bank.tokens = Tensor({ethogram.size(), lm.dim}, std::move(rows), true);
  return bank;
}

inline void save_query_bank(const std::filesystem::path& path, const QueryBank& bank) {
  save_checkpoint(path, {{"queries", bank.tokens}});
  nlohmann::ordered_json meta;
  meta["kind"] = "query-bank";
  meta["source"] = to_string(bank.source);
  meta["lm_mode"] = to_string(bank.lm_mode);
  meta["reduction"] = to_string(bank.reduction);
  meta["lm_hash"] = bank.lm_hash;
  meta["class_ids"] = bank.class_ids;
  io::write_text(sidecar_path(path), meta.dump(2) + "\n");
}

inline QueryBank load_query_bank(const std::filesystem::path& path) {
  const auto tensors = load_checkpoint(path);
  QueryBank bank;
  bank.tokens = find_tensor(tensors, "queries").clone(true);
  if (bank.tokens.rank() != 2) {
    throw DimensionError("queries tensor must be [C, D], got " + shape_str(bank.tokens.shape()));
  }
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    try {
      const auto meta = nlohmann::json::parse(io::read_text(side));
      bank.source = parse_query_source(meta.value("source", "descriptions"));
      bank.lm_mode = parse_lm_mode(meta.value("lm_mode", "pt"));
      bank.reduction = parse_reduction(meta.value("reduction", "mean"));
      bank.lm_hash = meta.value("lm_hash", "");
      bank.class_ids = meta.at("class_ids").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(side.string() + ": " + e.what());
    }
  }
  if (bank.class_ids.empty()) {
    for (std::size_t c = 0; c < bank.classes(); ++c) bank.class_ids.push_back(static_cast<int>(c));
  }
  if (bank.class_ids.size() != bank.classes()) {
    throw DimensionError("query bank sidecar lists " + std::to_string(bank.class_ids.size()) +
                         " classes for " + std::to_string(bank.classes()) + " query rows");
  }
  return bank;
}

struct DecoderConfig {
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 0;  // 0 means 4 * D
  bool norm = true;
  std::size_t pooled_length = 16;

  std::size_t hidden(std::size_t dim) const { return mlp_hidden ? mlp_hidden : 4 * dim; }

  void validate(std::size_t dim) const {
    if (layers < 1) throw ConfigError("decoder needs at least one layer");
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError("decoder width " + std::to_string(dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (pooled_length < 1) throw ConfigError("pooled length must be >= 1");
  }
};

struct DecoderLayerWeights {
  Norm self_norm;
  AttentionWeights self_attn;
  Norm cross_norm;
  AttentionWeights cross_attn;
  Norm mlp_norm;
  MlpWeights mlp;

  static DecoderLayerWeights init(std::size_t dim, std::size_t hidden, Rng& rng) {
    const double stddev = 0.5 / std::sqrt(static_cast<double>(dim));
    return {Norm::init(dim), AttentionWeights::init(dim, rng, stddev),
            Norm::init(dim), AttentionWeights::init(dim, rng, stddev),
            Norm::init(dim), MlpWeights::init(dim, hidden, rng, stddev)};
  }

  // Every projection zero: with norm disabled the layer is the identity.
  static DecoderLayerWeights zeros(std::size_t dim, std::size_t hidden) {
    return {Norm::init(dim), AttentionWeights::zeros(dim), Norm::init(dim),
            AttentionWeights::zeros(dim), Norm::init(dim), MlpWeights::zeros(dim, hidden)};
  }

  void collect(const std::string& prefix, NamedTensors& out) const {
    self_norm.collect(prefix + ".self_norm", out);
    self_attn.collect(prefix + ".self_attn", out);
    cross_norm.collect(prefix + ".cross_norm", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    mlp_norm.collect(prefix + ".mlp_norm", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

struct ClassifierHead {
  Tensor weight;  // [C, D]; row c only ever scores query c
  Tensor bias;    // [C]

  static ClassifierHead init(std::size_t classes, std::size_t dim, Rng& rng) {
    std::vector<double> w(classes * dim);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& v : w) v = rng.normal(0.0, stddev);
    return {Tensor({classes, dim}, std::move(w), true), Tensor::zeros({classes}, true)};
  }
};

inline Tensor mhsa_block(Tape& tape, const Tensor& q, const DecoderLayerWeights& layer,
                         std::size_t heads, bool norm) {
  const Tensor in = norm ? apply_norm(tape, q, layer.self_norm) : q;
  return add(tape, q, multi_head_attention(tape, in, in, layer.self_attn, heads));
}

inline Tensor cross_attention_block(Tape& tape, const Tensor& u, const Tensor& x,
                                    const DecoderLayerWeights& layer, std::size_t heads,
                                    bool norm) {
  if (x.rank() != 2 || x.dim(0) == 0) {
    throw ContractError("cross-attention needs at least one temporal position, got " +
                        shape_str(x.shape()));
  }
  const Tensor in = norm ? apply_norm(tape, u, layer.cross_norm) : u;
  return add(tape, u, multi_head_attention(tape, in, x, layer.cross_attn, heads));
}

inline Tensor mlp_block(Tape& tape, const Tensor& v, const DecoderLayerWeights& layer,
                        bool norm) {
  const Tensor in = norm ? apply_norm(tape, v, layer.mlp_norm) : v;
  return add(tape, v, mlp(tape, in, layer.mlp));
}

inline Tensor decode(Tape& tape, const Tensor& queries, const Tensor& x,
                     const std::vector<DecoderLayerWeights>& layers, std::size_t heads,
                     bool norm) {
  if (layers.empty()) throw ConfigError("decode needs at least one layer");
  Tensor z = queries;
  for (const auto& layer : layers) {
    const Tensor u = mhsa_block(tape, z, layer, heads, norm);
    const Tensor v = cross_attention_block(tape, u, x, layer, heads, norm);
    z = mlp_block(tape, v, layer, norm);
  }
  return z;
}

// logit_c = <W_c, z_c> + b_c.
inline Tensor classify(Tape& tape, const Tensor& z, const ClassifierHead& head) {
  if (z.rank() != 2 || head.weight.shape() != z.shape() || head.bias.numel() != z.dim(0)) {
    throw ContractError("classify: decoder output " + shape_str(z.shape()) +
                        " does not pair with classifier " + shape_str(head.weight.shape()));
  }
  return add(tape, row_sum(tape, mul(tape, head.weight, z)), head.bias);
}

struct Model {
  DecoderConfig config;
  Task task = Task::kMulticlass;
  QueryBank queries;
  std::vector<DecoderLayerWeights> layers;
  ClassifierHead head;

  static Model init(const DecoderConfig& cfg, QueryBank bank, Task task, std::uint64_t seed) {
    cfg.validate(bank.dim());
    Rng rng(seed);
    Model m;
    m.config = cfg;
    m.task = task;
    m.queries = std::move(bank);
    // Own the storage so training never writes through the caller's bank.
    m.queries.tokens = m.queries.tokens.clone(true);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      m.layers.push_back(DecoderLayerWeights::init(m.dim(), cfg.hidden(m.dim()), rng));
    m.head = ClassifierHead::init(m.classes(), m.dim(), rng);
    return m;
  }

  std::size_t classes() const { return queries.classes(); }
  std::size_t dim() const { return queries.dim(); }

  NamedTensors parameters() const {
    NamedTensors out;
    out.emplace_back("queries", queries.tokens);
    for (std::size_t l = 0; l < layers.size(); ++l)
      layers[l].collect("layer" + std::to_string(l), out);
    out.emplace_back("classifier.weight", head.weight);
    out.emplace_back("classifier.bias", head.bias);
    return out;
  }
};

// Features [T, D] -> pooled to the configured length -> decoder -> logits [C].
inline Tensor model_forward(Tape& tape, const Model& m, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != m.dim()) {
    throw DimensionError("features " + shape_str(features.shape()) +
                         " do not match model width " + std::to_string(m.dim()));
  }
  const Tensor x = adaptive_pool_1d(tape, features, m.config.pooled_length);
  const Tensor z = decode(tape, m.queries.tokens, x, m.layers, m.config.heads, m.config.norm);
  return classify(tape, z, m.head);
}

inline std::vector<double> predict_logits(const Model& m, const Tensor& features) {
  Tape tape;
  return model_forward(tape, m, features).values();
}

inline nlohmann::ordered_json model_metadata(const Model& m) {
  nlohmann::ordered_json meta;
  meta["kind"] = "decoder-model";
  meta["task"] = to_string(m.task);
  meta["classes"] = m.classes();
  meta["dim"] = m.dim();
  meta["layers"] = m.config.layers;
  meta["heads"] = m.config.heads;
  meta["mlp_hidden"] = m.config.hidden(m.dim());
  meta["norm"] = m.config.norm;
  meta["pooled_length"] = m.config.pooled_length;
  meta["source"] = to_string(m.queries.source);
  meta["lm_mode"] = to_string(m.queries.lm_mode);
  meta["reduction"] = to_string(m.queries.reduction);
  meta["lm_hash"] = m.queries.lm_hash;
  meta["class_ids"] = m.queries.class_ids;
  return meta;
}

inline void save_model(const std::filesystem::path& path, const Model& m) {
  save_checkpoint(path, m.parameters());
  io::write_text(sidecar_path(path), model_metadata(m).dump(2) + "\n");
}

inline Model load_model(const std::filesystem::path& path) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_text(sidecar_path(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(sidecar_path(path).string() + ": " + e.what());
  }
  if (meta.value("kind", "") != "decoder-model") {
    throw ValidationError(sidecar_path(path).string() + " is not a decoder-model sidecar");
  }
  try {
    DecoderConfig cfg;
    cfg.layers = meta.at("layers").get<std::size_t>();
    cfg.heads = meta.at("heads").get<std::size_t>();
    cfg.mlp_hidden = meta.at("mlp_hidden").get<std::size_t>();
    cfg.norm = meta.at("norm").get<bool>();
    cfg.pooled_length = meta.at("pooled_length").get<std::size_t>();
    const std::size_t classes = meta.at("classes").get<std::size_t>();
    const std::size_t dim = meta.at("dim").get<std::size_t>();
    QueryBank bank;
    bank.tokens = Tensor::zeros({classes, dim}, true);
    bank.source = parse_query_source(meta.at("source").get<std::string>());
    bank.lm_mode = parse_lm_mode(meta.at("lm_mode").get<std::string>());
    bank.reduction = parse_reduction(meta.at("reduction").get<std::string>());
    bank.lm_hash = meta.at("lm_hash").get<std::string>();
    bank.class_ids = meta.at("class_ids").get<std::vector<int>>();
    Model m = Model::init(cfg, std::move(bank), parse_task(meta.at("task").get<std::string>()), 0);
    restore_into(m.parameters(), load_checkpoint(path));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(sidecar_path(path).string() + ": " + e.what());
  }
}

}  // namespace ethodec
