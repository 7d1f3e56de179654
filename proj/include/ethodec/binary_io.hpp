#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "ethodec/errors.hpp"

namespace ethodec::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with a little-endian host");

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<char>& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

inline void write_text(const std::filesystem::path& path,
                       std::string_view text) {
  write_file(path, std::vector<char>(text.begin(), text.end()));
}

class Writer {
 public:
  template <typename T>
  void put(T value) {
    char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
  }

  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

// Bounds-checked cursor; every failure reports the byte offset it hit.
class Reader {
 public:
  Reader(const std::vector<char>& bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void expect_magic(std::string_view magic) {
    const std::size_t at = pos_;
    if (get_bytes(magic.size(), "magic") != magic) {
      throw FormatError(source_ + ": bad magic, expected \"" +
                            std::string(magic) + "\"",
                        at);
    }
  }

  void expect_end() const {
    if (pos_ != bytes_.size()) {
      throw FormatError(source_ + ": " +
                            std::to_string(bytes_.size() - pos_) +
                            " trailing bytes",
                        pos_);
    }
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& source() const { return source_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(source_ + ": truncated while reading " + what, pos_);
    }
  }

  const std::vector<char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace ethodec::io
