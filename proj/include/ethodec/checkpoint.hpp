#pragma once

// "EDWT" weight container:
//   magic "EDWT" | u32 version=1 | u32 tensor count |
//   per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//               float64 little-endian payload (row-major).
// Sidecar metadata (model/LM config) lives in a JSON file next to it.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ethodec/binary_io.hpp"
#include "ethodec/tensor.hpp"

namespace ethodec {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<char> encode_checkpoint(const NamedTensors& tensors) {
  io::Writer w;
  w.put_bytes("EDWT");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ContractError("checkpoint tensor name too long: " + name);
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.put<double>(v);
  }
  return w.bytes();
}

inline NamedTensors decode_checkpoint(const std::vector<char>& bytes,
                                      const std::string& source) {
  io::Reader r(bytes, source);
  r.expect_magic("EDWT");
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": unsupported version " +
                          std::to_string(version),
                      version_at);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("name length");
    std::string name = r.get_bytes(name_len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) shape.push_back(r.get<std::uint32_t>("dimension"));
    const std::size_t n = shape_numel(shape);
    if (r.remaining() / sizeof(double) < n) {
      throw FormatError(source + ": payload of \"" + name + "\" truncated",
                        r.offset());
    }
    std::vector<double> values(n);
    for (auto& v : values) v = r.get<double>("payload");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  r.expect_end();
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const NamedTensors& tensors) {
  io::write_file(path, encode_checkpoint(tensors));
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

inline const Tensor& find_tensor(const NamedTensors& tensors,
                                 const std::string& name) {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ValidationError("checkpoint has no tensor named \"" + name + "\"");
}

// Copies values from a checkpoint into existing parameters, checking shapes.
inline void restore_into(const NamedTensors& params, const NamedTensors& saved) {
  for (const auto& [name, param] : params) {
    const Tensor& src = find_tensor(saved, name);
    if (src.shape() != param.shape()) {
      throw DimensionError("checkpoint tensor \"" + name + "\" has shape " +
                           shape_str(src.shape()) + ", expected " +
                           shape_str(param.shape()));
    }
    Tensor dst = param;
    dst.assign(src.data());
  }
}

// FNV-1a over names, shapes and raw payload bytes.
inline std::uint64_t content_hash(const NamedTensors& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : tensors) {
    mix(name.data(), name.size());
    for (std::size_t d : t.shape()) {
      const auto d64 = static_cast<std::uint64_t>(d);
      mix(&d64, sizeof d64);
    }
    mix(t.data().data(), t.numel() * sizeof(double));
  }
  return h;
}

// Sidecar path convention: model.edwt -> model.json.
inline std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".json");
  return p;
}

}  // namespace ethodec
