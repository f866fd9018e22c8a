#pragma once

// Little-endian primitives for the repo's binary containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "exitweave/errors.hpp"

namespace exitweave::binary_io {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

template <class U>
void put_le(std::ostream& os, U v) {
  for (std::size_t b = 0; b < sizeof(U); ++b) os.put(static_cast<char>((v >> (8 * b)) & 0xffu));
}

inline void put_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
inline void put_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_f64_array(std::ostream& os, std::span<const double> values) {
  for (double v : values) put_f64(os, v);
}

// Bounded reader over an in-memory byte buffer; every failure reports the
// byte offset where it happened.
class Reader {
 public:
  Reader(std::vector<unsigned char> bytes, std::string what)
      : bytes_(std::move(bytes)), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* field) const {
    if (remaining() < n) {
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) + " reading " +
                        field + " (need " + std::to_string(n) + " bytes, have " +
                        std::to_string(remaining()) + ")");
    }
  }

  std::uint8_t u8(const char* field) {
    need(1, field);
    return bytes_[pos_++];
  }

  template <class U>
  U le(const char* field) {
    need(sizeof(U), field);
    U v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(bytes_[pos_ + b]) << (8 * b);
    pos_ += sizeof(U);
    return v;
  }

  std::uint32_t be_u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (std::size_t b = 0; b < 4; ++b) v = (v << 8) | bytes_[pos_ + b];
    pos_ += 4;
    return v;
  }

  double f64(const char* field) { return std::bit_cast<double>(le<std::uint64_t>(field)); }

  std::span<const unsigned char> take(std::size_t n, const char* field) {
    need(n, field);
    std::span<const unsigned char> s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw FormatError(what_ + ": " + message + " at byte offset " + std::to_string(pos_));
  }

 private:
  std::vector<unsigned char> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace exitweave::binary_io
