#pragma once

// Video features: ingestion of precomputed per-frame features ("PAFF" files),
// a pool + linear toy encoder for synthetic clips, temporal adaptive pooling,
// and the clip sampling protocols (run-length filtering, uniform sub-sampling).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ethodec/binary_io.hpp"
#include "ethodec/layers.hpp"
#include "ethodec/tensor.hpp"

namespace ethodec {

struct VideoClip {
  Tensor frames;                    // [T, H, W, 3], values in [0, 1]
  std::vector<int> frame_labels;    // optional, one behaviour id per frame

  void validate() const {
    if (frames.rank() != 4 || frames.dim(3) != 3) {
      throw DimensionError("video clip must be [T,H,W,3], got " +
                           shape_str(frames.shape()));
    }
    if (frames.dim(0) < 1) throw ContractError("video clip has no frames");
    for (double v : frames.data()) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ValidationError("video clip pixel value outside [0, 1]");
      }
    }
    if (!frame_labels.empty() && frame_labels.size() != frames.dim(0)) {
      throw DimensionError("clip has " + std::to_string(frames.dim(0)) +
                           " frames but " + std::to_string(frame_labels.size()) +
                           " frame labels");
    }
  }
};

struct FrameFeatures {
  Tensor values;  // [T, D]

  std::size_t frames() const { return values.dim(0); }
  std::size_t dim() const { return values.dim(1); }
};

// Stand-in backbone: per-frame spatial mean over H x W, then a learned 3 -> D
// linear map.
struct ToyVideoEncoder {
  Linear projection;  // [3, D]

  static ToyVideoEncoder init(std::size_t dim, Rng& rng) {
    return {Linear::init(3, dim, rng)};
  }

  void collect(const std::string& prefix, NamedTensors& out) const {
    projection.collect(prefix + ".projection", out);
  }
};

inline Tensor encode_video(Tape& tape, const VideoClip& clip,
                           const ToyVideoEncoder& encoder) {
  clip.validate();
  const std::size_t t = clip.frames.dim(0);
  const std::size_t pixels = clip.frames.dim(1) * clip.frames.dim(2);
  std::vector<double> pooled(t * 3, 0.0);
  const auto px = clip.frames.data();
  for (std::size_t f = 0; f < t; ++f) {
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t ch = 0; ch < 3; ++ch)
        pooled[f * 3 + ch] += px[(f * pixels + p) * 3 + ch];
    for (std::size_t ch = 0; ch < 3; ++ch)
      pooled[f * 3 + ch] /= static_cast<double>(pixels);
  }
  return linear(tape, Tensor({t, 3}, std::move(pooled)), encoder.projection);
}

// Output row i averages input rows [floor(i*T/T'), ceil((i+1)*T/T')).
// Returned as the [T', T] averaging matrix so pooling stays differentiable.
inline Tensor adaptive_pool_matrix(std::size_t frames, std::size_t target) {
  if (frames < 1 || target < 1) {
    throw ContractError("adaptive pooling needs T >= 1 and T' >= 1");
  }
  std::vector<double> m(target * frames, 0.0);
  for (std::size_t i = 0; i < target; ++i) {
    const std::size_t begin = (i * frames) / target;
    const std::size_t end = ((i + 1) * frames + target - 1) / target;
    const double w = 1.0 / static_cast<double>(end - begin);
    for (std::size_t j = begin; j < end; ++j) m[i * frames + j] = w;
  }
  return Tensor({target, frames}, std::move(m));
}

inline Tensor adaptive_pool_1d(Tape& tape, const Tensor& x, std::size_t target) {
  detail::require_rank(x, 2, "adaptive_pool_1d");
  if (x.dim(0) == target) return x;
  return matmul(tape, adaptive_pool_matrix(x.dim(0), target), x);
}

inline FrameFeatures adaptive_pool_1d(const FrameFeatures& x, std::size_t target) {
  Tape tape;
  return {adaptive_pool_1d(tape, x.values, target)};
}

struct BehaviourRun {
  int behaviour;
  std::size_t start;
  std::size_t length;

  bool operator==(const BehaviourRun&) const = default;
};

// Maximal runs of one label lasting at least `threshold` frames. Negative
// labels mark unannotated frames and never form runs.
inline std::vector<BehaviourRun> filter_by_run_length(std::span<const int> labels,
                                                      std::size_t threshold = 16) {
  std::vector<BehaviourRun> runs;
  std::size_t i = 0;
  while (i < labels.size()) {
    std::size_t j = i + 1;
    while (j < labels.size() && labels[j] == labels[i]) ++j;
    if (labels[i] >= 0 && j - i >= threshold) runs.push_back({labels[i], i, j - i});
    i = j;
  }
  return runs;
}

// Index i -> floor(i * N / k) for i in [0, k).
inline std::vector<std::size_t> subsample_uniform(std::size_t frame_count,
                                                  std::size_t k = 16) {
  if (frame_count < 1) throw ContractError("subsample_uniform needs N >= 1");
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = (i * frame_count) / k;
  return idx;
}

// k consecutive frames centred in [0, N); falls back to uniform when N < k.
inline std::vector<std::size_t> subsample_contiguous(std::size_t frame_count,
                                                     std::size_t k = 16) {
  if (frame_count < k) return subsample_uniform(frame_count, k);
  const std::size_t start = (frame_count - k) / 2;
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = start + i;
  return idx;
}

enum class SamplingMode { kUniform, kContiguous };

inline std::vector<std::size_t> sample_frames(std::size_t frame_count,
                                              std::size_t k, SamplingMode mode) {
  return mode == SamplingMode::kUniform ? subsample_uniform(frame_count, k)
                                        : subsample_contiguous(frame_count, k);
}

inline FrameFeatures select_frames(const FrameFeatures& x,
                                   const std::vector<std::size_t>& indices,
                                   std::size_t offset = 0) {
  Tape tape;
  std::vector<std::size_t> rows(indices);
  for (auto& r : rows) r += offset;
  return {gather_rows(tape, x.values, rows)};
}

// "PAFF" feature file:
//   magic "PAFF" | u32 version=1 | u32 T | u32 D | u8 dtype | payload
// dtype 1 = float32, 2 = float64; payload row-major little-endian.
enum class FeatureDtype : std::uint8_t { kFloat32 = 1, kFloat64 = 2 };

inline std::vector<char> encode_features(const FrameFeatures& f,
                                         FeatureDtype dtype = FeatureDtype::kFloat64) {
  io::Writer w;
  w.put_bytes("PAFF");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.frames()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.dim()));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype));
  for (double v : f.values.data()) {
    if (dtype == FeatureDtype::kFloat32) {
      w.put<float>(static_cast<float>(v));
    } else {
      w.put<double>(v);
    }
  }
  return w.bytes();
}

inline FrameFeatures decode_features(const std::vector<char>& bytes,
                                     const std::string& source) {
  io::Reader r(bytes, source);
  r.expect_magic("PAFF");
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != 1) {
    throw FormatError(source + ": unsupported version " + std::to_string(version),
                      version_at);
  }
  const std::size_t t = r.get<std::uint32_t>("T");
  const std::size_t d = r.get<std::uint32_t>("D");
  const std::size_t dtype_at = r.offset();
  const auto dtype = r.get<std::uint8_t>("dtype");
  if (dtype != 1 && dtype != 2) {
    throw FormatError(source + ": unknown dtype " + std::to_string(dtype), dtype_at);
  }
  if (t < 1 || d < 1) throw FormatError(source + ": empty feature matrix", version_at + 4);
  const std::size_t width = dtype == 1 ? 4 : 8;
  if (r.remaining() != t * d * width) {
    throw FormatError(source + ": header says " + std::to_string(t) + "x" +
                          std::to_string(d) + " values but payload has " +
                          std::to_string(r.remaining()) + " bytes",
                      r.offset());
  }
  std::vector<double> values(t * d);
  for (auto& v : values) {
    v = dtype == 1 ? static_cast<double>(r.get<float>("payload"))
                   : r.get<double>("payload");
  }
  FrameFeatures f{Tensor({t, d}, std::move(values))};
  if (!f.values.all_finite()) throw FormatError(source + ": non-finite feature value", 21);
  return f;
}

inline void save_features(const std::filesystem::path& path, const FrameFeatures& f,
                          FeatureDtype dtype = FeatureDtype::kFloat64) {
  io::write_file(path, encode_features(f, dtype));
}

inline FrameFeatures load_features(const std::filesystem::path& path) {
  return decode_features(io::read_file(path), path.string());
}

}  // namespace ethodec
