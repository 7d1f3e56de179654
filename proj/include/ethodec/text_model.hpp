#pragma once

// Word-level tokeniser and a small pre-norm transformer encoder trained with
// masked-language-model fine-tuning. Its pooled states initialise the
// per-behaviour query tokens of the decoder.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ethodec/checkpoint.hpp"
#include "ethodec/layers.hpp"
#include "ethodec/optim.hpp"
#include "ethodec/rng.hpp"
#include "json.hpp"

namespace ethodec {

// Lowercases ASCII letters and splits on whitespace; every ASCII punctuation
// character becomes its own token. Bytes >= 0x80 are kept inside words so
// UTF-8 text survives intact.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && std::isspace(u)) {
      flush();
    } else if (u < 0x80 && std::ispunct(u)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  flush();
  return words;
}

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kMask = 1;
  static constexpr std::size_t kCls = 2;
  static constexpr std::size_t kUnk = 3;
  static constexpr std::size_t kNumSpecial = 4;

  // Tokens seen fewer than min_freq times are left out and map to UNK.
  // Regular tokens get ids in lexicographic order after the specials.
  static Vocabulary build(std::string_view corpus, std::size_t min_freq = 1) {
    std::map<std::string, std::size_t> counts;
    for (auto& w : split_words(corpus)) ++counts[w];
    if (counts.empty()) throw ValidationError("cannot build a vocabulary from an empty corpus");
    std::vector<std::string> kept;
    for (const auto& [w, n] : counts)
      if (n >= min_freq) kept.push_back(w);
    Vocabulary v = from_tokens(kept);
    v.min_freq_ = min_freq;
    return v;
  }

  // `tokens` are the regular tokens in id order (ids start at kNumSpecial).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    for (const auto& t : tokens) {
      if (!v.ids_.emplace(t, v.tokens_.size()).second) {
        throw ValidationError("duplicate vocabulary token \"" + t + "\"");
      }
      v.tokens_.push_back(t);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t min_freq() const { return min_freq_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t lookup(std::string_view token) const {
    const auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const {
    return ids_.count(std::string(token)) != 0;
  }

  const std::string& token_of(std::size_t id) const { return tokens_.at(id); }

  std::vector<std::string> regular_tokens() const {
    return {tokens_.begin() + kNumSpecial, tokens_.end()};
  }

 private:
  Vocabulary() {
    for (const char* s : {"[PAD]", "[MASK]", "[CLS]", "[UNK]"}) {
      ids_.emplace(s, tokens_.size());
      tokens_.emplace_back(s);
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
  std::size_t min_freq_ = 1;
};

using TokenSeq = std::vector<std::size_t>;

// [CLS] followed by the word ids, truncated to max_len.
inline TokenSeq tokenize(std::string_view text, const Vocabulary& vocab,
                         std::size_t max_len = 512) {
  TokenSeq seq{Vocabulary::kCls};
  for (const auto& w : split_words(text)) {
    if (seq.size() >= max_len) break;
    seq.push_back(vocab.lookup(w));
  }
  seq.resize(std::min(seq.size(), max_len));
  return seq;
}

struct MlmConfig {
  double mask_prob = 0.2;
  // Fate of a selected position: [MASK], random regular token, unchanged.
  double replace_with_mask = 0.8;
  double replace_with_random = 0.1;
  double keep_unchanged = 0.1;

  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t dim = 256;
  std::size_t mlp_hidden = 0;  // 0 means 4 * dim
  std::size_t max_len = 512;

  double lr = 2e-5;
  double weight_decay = 0.01;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;

  std::size_t hidden() const { return mlp_hidden ? mlp_hidden : 4 * dim; }

  void validate() const {
    if (!(mask_prob >= 0.0 && mask_prob <= 1.0))
      throw ConfigError("masking proportion must lie in [0, 1]");
    if (replace_with_mask < 0 || replace_with_random < 0 || keep_unchanged < 0 ||
        std::abs(replace_with_mask + replace_with_random + keep_unchanged - 1.0) > 1e-9)
      throw ConfigError("mask/random/keep split must be non-negative and sum to 1");
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw ConfigError("encoder dim must be a positive multiple of heads");
    if (max_len < 1) throw ConfigError("max_len must be at least 1");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
  }
};

struct MaskedSeq {
  TokenSeq tokens;
  std::vector<std::size_t> positions;  // prediction targets, ascending
  std::vector<std::size_t> targets;    // original ids at those positions
};

// Selects each non-structural position (anything but CLS/PAD) independently
// with probability mask_prob; selected positions are replaced per the
// mask/random/keep split and all of them become targets.
inline MaskedSeq mask_tokens(const TokenSeq& seq, const MlmConfig& cfg,
                             std::size_t vocab_size, Rng& rng) {
  MaskedSeq out{seq, {}, {}};
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] == Vocabulary::kCls || seq[i] == Vocabulary::kPad) continue;
    if (!rng.bernoulli(cfg.mask_prob)) continue;
    out.positions.push_back(i);
    out.targets.push_back(seq[i]);
    const double fate = rng.uniform();
    if (fate < cfg.replace_with_mask) {
      out.tokens[i] = Vocabulary::kMask;
    } else if (fate < cfg.replace_with_mask + cfg.replace_with_random) {
      out.tokens[i] = vocab_size > Vocabulary::kNumSpecial
                          ? Vocabulary::kNumSpecial +
                                rng.below(vocab_size - Vocabulary::kNumSpecial)
                          : Vocabulary::kUnk;
    }
  }
  return out;
}

struct EncoderLayer {
  Norm attn_norm;
  AttentionWeights attn;
  Norm mlp_norm;
  MlpWeights mlp;

  void collect(const std::string& prefix, NamedTensors& out) const {
    attn_norm.collect(prefix + ".attn_norm", out);
    attn.collect(prefix + ".attn", out);
    mlp_norm.collect(prefix + ".mlp_norm", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

enum class LmMode { kPretrained, kFinetuned };

inline std::string to_string(LmMode m) {
  return m == LmMode::kPretrained ? "pt" : "ft";
}

inline LmMode parse_lm_mode(std::string_view s) {
  if (s == "pt") return LmMode::kPretrained;
  if (s == "ft") return LmMode::kFinetuned;
  throw ConfigError("lm mode must be pt or ft, got \"" + std::string(s) + "\"");
}

// Token embeddings [V, D], learned positions [max_len, D] (zero at init),
// pre-norm layers, and an MLM head tied to the token embeddings.
struct EncoderWeights {
  Vocabulary vocab = Vocabulary::from_tokens({});
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::size_t max_len = 0;
  std::size_t mlp_hidden = 0;
  LmMode mode = LmMode::kPretrained;

  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<EncoderLayer> layers;
  Norm head_norm;
  Tensor head_bias;

  static EncoderWeights init(const Vocabulary& vocab, const MlmConfig& cfg,
                             std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    EncoderWeights w;
    w.vocab = vocab;
    w.dim = cfg.dim;
    w.heads = cfg.heads;
    w.max_len = cfg.max_len;
    w.mlp_hidden = cfg.hidden();
    std::vector<double> emb(vocab.size() * cfg.dim);
    for (auto& v : emb) v = rng.normal();
    w.token_embedding = Tensor({vocab.size(), cfg.dim}, std::move(emb), true);
    w.position_embedding = Tensor::zeros({cfg.max_len, cfg.dim}, true);
    const double std_proj = 0.5 / std::sqrt(static_cast<double>(cfg.dim));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      w.layers.push_back({Norm::init(cfg.dim),
                          AttentionWeights::init(cfg.dim, rng, std_proj),
                          Norm::init(cfg.dim),
                          MlpWeights::init(cfg.dim, cfg.hidden(), rng, std_proj)});
    }
    w.head_norm = Norm::init(cfg.dim);
    w.head_bias = Tensor::zeros({vocab.size()}, true);
    return w;
  }

  NamedTensors parameters() const {
    NamedTensors out;
    out.emplace_back("token_embedding", token_embedding);
    out.emplace_back("position_embedding", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l)
      layers[l].collect("layer" + std::to_string(l), out);
    head_norm.collect("head_norm", out);
    out.emplace_back("head_bias", head_bias);
    return out;
  }

  std::uint64_t hash() const { return content_hash(parameters()); }

  // Deep copy with independent storage.
  EncoderWeights clone() const {
    EncoderWeights c = *this;
    c.token_embedding = token_embedding.clone(true);
    c.position_embedding = position_embedding.clone(true);
    c.layers.clear();
    for (const auto& layer : layers) {
      auto copy = [](const Linear& l) {
        return Linear{l.weight.clone(true), l.bias.clone(true)};
      };
      auto copy_norm = [](const Norm& n) {
        return Norm{n.gain.clone(true), n.bias.clone(true)};
      };
      c.layers.push_back(
          {copy_norm(layer.attn_norm),
           {copy(layer.attn.query), copy(layer.attn.key), copy(layer.attn.value),
            copy(layer.attn.output)},
           copy_norm(layer.mlp_norm),
           {copy(layer.mlp.expand), copy(layer.mlp.contract)}});
    }
    c.head_norm = Norm{head_norm.gain.clone(true), head_norm.bias.clone(true)};
    c.head_bias = head_bias.clone(true);
    return c;
  }
};

inline std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

// Final-layer states [n, D] for a token sequence.
inline Tensor encode_tokens(Tape& tape, const EncoderWeights& w,
                            const TokenSeq& seq) {
  if (seq.empty()) throw ContractError("encode_tokens: empty sequence");
  if (seq.size() > w.max_len) {
    throw ContractError("encode_tokens: sequence longer than max_len");
  }
  Tensor h = add(tape, gather_rows(tape, w.token_embedding, seq),
                 slice_rows(tape, w.position_embedding, 0, seq.size()));
  for (const auto& layer : w.layers) {
    const Tensor a = apply_norm(tape, h, layer.attn_norm);
    h = add(tape, h, multi_head_attention(tape, a, a, layer.attn, w.heads));
    h = add(tape, h, mlp(tape, apply_norm(tape, h, layer.mlp_norm), layer.mlp));
  }
  return h;
}

// Vocabulary logits [n, V] for states [n, D]: normalised states dotted with
// the (unit-scale) token embeddings, divided by sqrt(D).
inline Tensor mlm_logits(Tape& tape, const EncoderWeights& w,
                         const Tensor& states) {
  const Tensor normed = apply_norm(tape, states, w.head_norm);
  const Tensor dots = matmul(tape, normed, transpose(tape, w.token_embedding));
  return add_row_vector(
      tape, scale(tape, dots, 1.0 / std::sqrt(static_cast<double>(w.dim))),
      w.head_bias);
}

enum class Reduction { kMeanPool, kCls };

inline Reduction parse_reduction(std::string_view s) {
  if (s == "mean") return Reduction::kMeanPool;
  if (s == "cls") return Reduction::kCls;
  throw ConfigError("reduction must be mean or cls, got \"" + std::string(s) + "\"");
}

inline std::string to_string(Reduction r) {
  return r == Reduction::kMeanPool ? "mean" : "cls";
}

// D-vector for a text. Mean-pool averages the final states of every position
// after [CLS]; with no such position (empty text) it degenerates to the CLS
// state.
inline std::vector<double> embed_text(std::string_view text,
                                      const EncoderWeights& w,
                                      Reduction reduction = Reduction::kMeanPool) {
  Tape tape;
  const TokenSeq seq = tokenize(text, w.vocab, w.max_len);
  const Tensor states = encode_tokens(tape, w, seq);
  Tensor pooled;
  if (reduction == Reduction::kCls || seq.size() == 1) {
    pooled = slice_rows(tape, states, 0, 1);
  } else {
    pooled = mean_rows(tape, slice_rows(tape, states, 1, seq.size() - 1));
  }
  return pooled.values();
}

// Masked-token loss summed over targets of a batch of sequences, divided by the
// total target count. Returns an undefined tensor when nothing was masked.
inline Tensor mlm_batch_loss(Tape& tape, const EncoderWeights& w,
                             const std::vector<MaskedSeq>& batch) {
  std::size_t total_targets = 0;
  for (const auto& m : batch) total_targets += m.targets.size();
  if (total_targets == 0) return {};
  Tensor loss;
  for (const auto& m : batch) {
    if (m.targets.empty()) continue;
    const Tensor states = encode_tokens(tape, w, m.tokens);
    const Tensor logits = mlm_logits(tape, w, gather_rows(tape, states, m.positions));
    Tensor part = scale(tape, softmax_ce_loss(tape, logits, m.targets),
                        static_cast<double>(m.targets.size()));
    loss = loss.defined() ? add(tape, loss, part) : part;
  }
  return scale(tape, loss, 1.0 / static_cast<double>(total_targets));
}

struct MlmEpochLog {
  std::size_t epoch;
  double mean_loss;
};

// Fine-tunes a copy of `init` with MLM on `sentences`. Each epoch reshuffles
// and re-masks with a seed-derived stream; lr is constant. The result is
// marked LmMode::kFinetuned.
inline EncoderWeights mlm_finetune(const std::vector<std::string>& sentences,
                                   const MlmConfig& cfg,
                                   const EncoderWeights& init,
                                   std::vector<MlmEpochLog>* log = nullptr) {
  cfg.validate();
  EncoderWeights w = init.clone();
  w.mode = LmMode::kFinetuned;
  std::vector<TokenSeq> seqs;
  for (const auto& s : sentences) {
    TokenSeq t = tokenize(s, w.vocab, w.max_len);
    if (t.size() >= 2) seqs.push_back(std::move(t));
  }
  if (seqs.empty()) return w;

  const NamedTensors params = w.parameters();
  OptimizerState opt;
  opt.config.weight_decay = cfg.weight_decay;
  Rng rng(cfg.seed);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(seqs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<MaskedSeq> batch;
      for (std::size_t i = start; i < end; ++i)
        batch.push_back(mask_tokens(seqs[order[i]], cfg, w.vocab.size(), rng));
      Tape tape;
      Tensor loss;
      try {
        loss = mlm_batch_loss(tape, w, batch);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("language-model fine-tuning diverged: ") + e.what(), step);
      }
      if (!loss.defined()) continue;
      if (!std::isfinite(loss.item())) {
        throw TrainingError("language-model loss is not finite", step);
      }
      zero_grads(params);
      backward(loss, tape);
      adamw_step(params, opt, cfg.lr);
      loss_sum += loss.item();
      ++batches;
      ++step;
    }
    if (log) log->push_back({epoch, batches ? loss_sum / batches : 0.0});
  }
  return w;
}

// Fraction of masked targets whose argmax prediction is the original token,
// using one masking pass drawn from `seed`.
inline double mlm_accuracy(const std::vector<std::string>& sentences,
                           const MlmConfig& cfg, const EncoderWeights& w,
                           std::uint64_t seed) {
  Rng rng(seed);
  std::size_t hits = 0, total = 0;
  for (const auto& s : sentences) {
    const TokenSeq seq = tokenize(s, w.vocab, w.max_len);
    const MaskedSeq m = mask_tokens(seq, cfg, w.vocab.size(), rng);
    if (m.targets.empty()) continue;
    Tape tape;
    const Tensor logits =
        mlm_logits(tape, w, gather_rows(tape, encode_tokens(tape, w, m.tokens), m.positions));
    const std::size_t v = logits.dim(1);
    for (std::size_t r = 0; r < m.targets.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < v; ++c)
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      hits += best == m.targets[r];
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

inline void save_encoder(const std::filesystem::path& path,
                         const EncoderWeights& w) {
  save_checkpoint(path, w.parameters());
  nlohmann::ordered_json meta;
  meta["kind"] = "text-encoder";
  meta["mode"] = to_string(w.mode);
  meta["dim"] = w.dim;
  meta["heads"] = w.heads;
  meta["layers"] = w.layers.size();
  meta["max_len"] = w.max_len;
  meta["mlp_hidden"] = w.mlp_hidden;
  meta["min_freq"] = w.vocab.min_freq();
  meta["hash"] = hash_hex(w.hash());
  meta["vocab"] = w.vocab.regular_tokens();
  io::write_text(sidecar_path(path), meta.dump(2) + "\n");
}

inline EncoderWeights load_encoder(const std::filesystem::path& path) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_text(sidecar_path(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(sidecar_path(path).string() + ": " + e.what());
  }
  if (meta.value("kind", "") != "text-encoder") {
    throw ValidationError(sidecar_path(path).string() + " is not a text-encoder sidecar");
  }
  MlmConfig cfg;
  cfg.dim = meta.at("dim").get<std::size_t>();
  cfg.heads = meta.at("heads").get<std::size_t>();
  cfg.layers = meta.at("layers").get<std::size_t>();
  cfg.max_len = meta.at("max_len").get<std::size_t>();
  cfg.mlp_hidden = meta.at("mlp_hidden").get<std::size_t>();
  const auto vocab = Vocabulary::from_tokens(meta.at("vocab").get<std::vector<std::string>>());
  EncoderWeights w = EncoderWeights::init(vocab, cfg, 0);
  w.mode = parse_lm_mode(meta.at("mode").get<std::string>());
  restore_into(w.parameters(), load_checkpoint(path));
  return w;
}

}  // namespace ethodec
