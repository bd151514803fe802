#pragma once

// Byte-level file IO shared by the corpus formats and model checkpoints.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "v2s/error.hpp"

namespace v2s::io {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float f) {
  std::uint32_t v;
  static_assert(sizeof(v) == sizeof(f));
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

struct ByteReader {
  std::string path;
  std::string bytes;
  std::size_t pos = 0;

  explicit ByteReader(const std::string& p) : path(p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError(p, "cannot open for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    bytes = ss.str();
  }

  void need(std::size_t n, const char* what) const {
    if (pos + n > bytes.size())
      throw IoError(path, static_cast<long long>(pos),
                    std::string("truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = std::uint16_t(std::uint8_t(bytes[pos])) |
                      (std::uint16_t(std::uint8_t(bytes[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32(const char* what) {
    std::uint32_t v = u32(what);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path, "write failed");
}

}  // namespace v2s::io
