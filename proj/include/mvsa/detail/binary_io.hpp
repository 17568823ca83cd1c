#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mvsa/errors.hpp"

namespace mvsa::detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    bytes_.insert(bytes_.end(), buf, buf + sizeof(T));
  }
  void put_magic(const char (&m)[5]) { bytes_.insert(bytes_.end(), m, m + 4); }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  void expect_magic(const char (&m)[5], const char* format) {
    if (bytes_.size() < 4 || std::memcmp(bytes_.data(), m, 4) != 0)
      throw FormatError(std::string(format) + ": bad magic, expected \"" + m + "\"", 0);
    pos_ = 4;
  }

  template <typename T>
  T get(const char* format) {
    if (pos_ + sizeof(T) > bytes_.size())
      throw FormatError(std::string(format) + ": truncated header", pos_);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  /// Checks that exactly `payload` bytes remain.
  void expect_payload(std::size_t payload, const char* format) const {
    const std::size_t remaining = bytes_.size() - pos_;
    if (remaining < payload)
      throw FormatError(std::string(format) + ": truncated payload, expected " + std::to_string(payload) +
                            " bytes, got " + std::to_string(remaining),
                        bytes_.size());
    if (remaining > payload)
      throw FormatError(std::string(format) + ": trailing data, expected " + std::to_string(payload) +
                            " payload bytes, got " + std::to_string(remaining),
                        pos_ + payload);
  }

  std::size_t position() const { return pos_; }
  const unsigned char* cursor() const { return bytes_.data() + pos_; }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace mvsa::detail
