#pragma once

// Building blocks shared by the text encoder and the query decoder.
// Row-vector convention throughout: y = x W + b with W stored [in, out].

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ethodec/checkpoint.hpp"
#include "ethodec/rng.hpp"
#include "ethodec/tensor.hpp"

namespace ethodec {

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  // Weights ~ N(0, stddev); stddev <= 0 picks 1/sqrt(in). Bias starts at zero.
  static Linear init(std::size_t in, std::size_t out, Rng& rng,
                     double stddev = 0.0) {
    if (stddev <= 0.0) stddev = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out);
    for (auto& v : w) v = rng.normal(0.0, stddev);
    return {Tensor({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
  }

  static Linear zeros(std::size_t in, std::size_t out) {
    return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
  }

  static Linear identity(std::size_t n) {
    return {Tensor::identity(n, true), Tensor::zeros({n}, true)};
  }

  void collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

inline Tensor linear(Tape& tape, const Tensor& x, const Linear& layer) {
  return add_row_vector(tape, matmul(tape, x, layer.weight), layer.bias);
}

struct Norm {
  Tensor gain;
  Tensor bias;

  static Norm init(std::size_t d) {
    return {Tensor::filled({d}, 1.0, true), Tensor::zeros({d}, true)};
  }

  void collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

inline Tensor apply_norm(Tape& tape, const Tensor& x, const Norm& n) {
  return layer_norm_rows(tape, x, n.gain, n.bias);
}

struct AttentionWeights {
  Linear query, key, value, output;

  static AttentionWeights init(std::size_t d, Rng& rng, double stddev = 0.0) {
    return {Linear::init(d, d, rng, stddev), Linear::init(d, d, rng, stddev),
            Linear::init(d, d, rng, stddev), Linear::init(d, d, rng, stddev)};
  }

  static AttentionWeights zeros(std::size_t d) {
    return {Linear::zeros(d, d), Linear::zeros(d, d), Linear::zeros(d, d),
            Linear::zeros(d, d)};
  }

  static AttentionWeights identity(std::size_t d) {
    return {Linear::identity(d), Linear::identity(d), Linear::identity(d),
            Linear::identity(d)};
  }

  void collect(const std::string& prefix, NamedTensors& out) const {
    query.collect(prefix + ".query", out);
    key.collect(prefix + ".key", out);
    value.collect(prefix + ".value", out);
    output.collect(prefix + ".output", out);
  }
};

// Multi-head scaled dot-product attention. Queries come from `from` [n, D],
// keys and values from `over` [m, D]; self-attention passes the same tensor
// twice. Each head h attends with softmax(Q_h K_h^T / sqrt(D/heads)) V_h; the
// heads are concatenated and projected by the output layer. Sums over keys
// are order-free, so permuting the key rows never changes the result.
inline Tensor multi_head_attention(Tape& tape, const Tensor& from,
                                   const Tensor& over,
                                   const AttentionWeights& w,
                                   std::size_t heads) {
  if (over.rank() != 2 || over.dim(0) == 0) {
    throw ContractError("attention needs at least one key/value row, got " +
                        shape_str(over.shape()));
  }
  const std::size_t d = from.dim(1);
  if (over.dim(1) != d) {
    throw DimensionError("attention: query width " + shape_str(from.shape()) +
                         " vs key/value width " + shape_str(over.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t head_dim = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  const Tensor q = linear(tape, from, w.query);
  const Tensor k = linear(tape, over, w.key);
  const Tensor v = linear(tape, over, w.value);
  std::vector<Tensor> parts;
  parts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice_cols(tape, q, h * head_dim, head_dim);
    const Tensor kh = heads == 1 ? k : slice_cols(tape, k, h * head_dim, head_dim);
    const Tensor vh = heads == 1 ? v : slice_cols(tape, v, h * head_dim, head_dim);
    const Tensor scores =
        scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
    parts.push_back(attend(tape, softmax_rows(tape, scores), vh));
  }
  const Tensor merged = heads == 1 ? parts.front() : concat_cols(tape, parts);
  return linear(tape, merged, w.output);
}

struct MlpWeights {
  Linear expand;    // D -> hidden
  Linear contract;  // hidden -> D

  static MlpWeights init(std::size_t d, std::size_t hidden, Rng& rng,
                         double stddev = 0.0) {
    return {Linear::init(d, hidden, rng, stddev),
            Linear::init(hidden, d, rng, stddev)};
  }

  static MlpWeights zeros(std::size_t d, std::size_t hidden) {
    return {Linear::zeros(d, hidden), Linear::zeros(hidden, d)};
  }

  void collect(const std::string& prefix, NamedTensors& out) const {
    expand.collect(prefix + ".expand", out);
    contract.collect(prefix + ".contract", out);
  }
};

// Row-wise D -> hidden -> D with GELU in between.
inline Tensor mlp(Tape& tape, const Tensor& x, const MlpWeights& w) {
  return linear(tape, gelu(tape, linear(tape, x, w.expand)), w.contract);
}

}  // namespace ethodec
