#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

namespace bgdx {

// Little-endian binary writer/reader for the on-disk formats.

struct ByteWriter {
  std::vector<uint8_t> buf;

  void u8(uint8_t v) { buf.push_back(v); }
  void u16(uint16_t v) {
    buf.push_back(uint8_t(v));
    buf.push_back(uint8_t(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(uint8_t(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(uint8_t(v >> (8 * i)));
  }
  void bytes(const uint8_t* p, size_t n) { buf.insert(buf.end(), p, p + n); }
  void blob(const std::vector<uint8_t>& v) {
    u32(uint32_t(v.size()));
    bytes(v.data(), v.size());
  }
  void magic(const char m[4]) { bytes(reinterpret_cast<const uint8_t*>(m), 4); }
};

struct ByteReader {
  const uint8_t* p = nullptr;
  size_t n = 0;
  size_t off = 0;
  bool fail = false;

  ByteReader(const uint8_t* data, size_t len) : p(data), n(len) {}

  bool need(size_t k) {
    if (fail || n - off < k) {
      fail = true;
      return false;
    }
    return true;
  }
  uint8_t u8() {
    if (!need(1)) return 0;
    return p[off++];
  }
  uint16_t u16() {
    if (!need(2)) return 0;
    uint16_t v = uint16_t(p[off] | (uint16_t(p[off + 1]) << 8));
    off += 2;
    return v;
  }
  uint32_t u32() {
    if (!need(4)) return 0;
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  uint64_t u64() {
    if (!need(8)) return 0;
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[off + i]) << (8 * i);
    off += 8;
    return v;
  }
  std::vector<uint8_t> blob(uint32_t max_len = 1u << 30) {
    uint32_t len = u32();
    if (fail || len > max_len || !need(len)) {
      fail = true;
      return {};
    }
    std::vector<uint8_t> v(p + off, p + off + len);
    off += len;
    return v;
  }
  bool magic(const char m[4]) {
    if (!need(4)) return false;
    bool ok = std::memcmp(p + off, m, 4) == 0;
    off += 4;
    if (!ok) fail = true;
    return ok;
  }
  bool done() const { return !fail && off == n; }
};

inline std::optional<std::vector<uint8_t>> read_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) return std::nullopt;
  std::fseek(f, 0, SEEK_END);
  long sz = std::ftell(f);
  if (sz < 0) {
    std::fclose(f);
    return std::nullopt;
  }
  std::fseek(f, 0, SEEK_SET);
  std::vector<uint8_t> v(static_cast<size_t>(sz));
  size_t got = sz ? std::fread(v.data(), 1, size_t(sz), f) : 0;
  std::fclose(f);
  if (got != size_t(sz)) return std::nullopt;
  return v;
}

inline bool write_file(const std::string& path, const std::vector<uint8_t>& data) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) return false;
  size_t put = data.empty() ? 0 : std::fwrite(data.data(), 1, data.size(), f);
  bool ok = put == data.size() && std::fflush(f) == 0;
  return std::fclose(f) == 0 && ok;
}

inline bool write_text_file(const std::string& path, const std::string& text) {
  std::vector<uint8_t> v(text.begin(), text.end());
  return write_file(path, v);
}

}  // namespace bgdx
