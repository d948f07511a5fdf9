#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bytes.hpp"

namespace bgdx {

// Per-byte access policy over the text section. Two packed bitsets: one for
// instruction-fetch permission, one for data-fetch permission.
//
//   (if, df) = (0,0)  uncertain: readable, but a data read garbles the code view
//   (if, df) = (0,1)  read-only data: never executable
//   (if, df) = (1,0)  execute-only code: never readable
//   (if, df) = (1,1)  free: no enforcement on this byte
enum class Policy : uint8_t { dcr = 0, ro = 1, xom = 2, free = 3 };

inline const char* policy_name(Policy p) {
  switch (p) {
    case Policy::dcr: return "dcr";
    case Policy::ro: return "ro";
    case Policy::xom: return "xom";
    case Policy::free: return "free";
  }
  return "?";
}

struct Bitmap {
  uint32_t size = 0;  // bytes covered
  std::vector<uint8_t> if_bits, df_bits;

  static Bitmap make(uint32_t n, Policy fill) {
    Bitmap b;
    b.size = n;
    uint8_t iff = (uint8_t(fill) & 2) ? 0xFF : 0x00;
    uint8_t dff = (uint8_t(fill) & 1) ? 0xFF : 0x00;
    b.if_bits.assign((n + 7) / 8, iff);
    b.df_bits.assign((n + 7) / 8, dff);
    return b;
  }

  bool if_ok(uint32_t i) const { return (if_bits[i >> 3] >> (i & 7)) & 1; }
  bool df_ok(uint32_t i) const { return (df_bits[i >> 3] >> (i & 7)) & 1; }

  Policy get(uint32_t i) const { return Policy((unsigned(if_ok(i)) << 1) | unsigned(df_ok(i))); }

  void set(uint32_t i, Policy p) {
    auto put = [i](std::vector<uint8_t>& v, bool b) {
      if (b)
        v[i >> 3] |= uint8_t(1u << (i & 7));
      else
        v[i >> 3] &= uint8_t(~(1u << (i & 7)));
    };
    put(if_bits, uint8_t(p) & 2);
    put(df_bits, uint8_t(p) & 1);
  }

  std::array<uint64_t, 4> counts() const {
    std::array<uint64_t, 4> c{};
    for (uint32_t i = 0; i < size; ++i) c[size_t(get(i))]++;
    return c;
  }

  // Byte-wise reconciliation of two views. `dcr` means "no claim about this
  // byte", so a byte classified by only one side takes that side's policy;
  // contradictory claims (code vs data) degrade the byte back to uncertain.
  static Bitmap merge(const Bitmap& a, const Bitmap& b) {
    Bitmap m = make(a.size, Policy::dcr);
    for (uint32_t i = 0; i < a.size; ++i) {
      Policy pa = a.get(i), pb = b.get(i);
      if (pa == pb)
        m.set(i, pa);
      else if (pa == Policy::dcr)
        m.set(i, pb);
      else if (pb == Policy::dcr)
        m.set(i, pa);
      // else: leave dcr
    }
    return m;
  }

  bool operator==(const Bitmap&) const = default;
};

constexpr char kBitmapMagic[4] = {'B', 'G', 'D', 'M'};
constexpr uint32_t kBitmapVersion = 1;

inline void serialize_bitmap(const Bitmap& b, ByteWriter& w) {
  w.magic(kBitmapMagic);
  w.u32(kBitmapVersion);
  w.u32(b.size);
  w.blob(b.if_bits);
  w.blob(b.df_bits);
}

inline std::optional<Bitmap> parse_bitmap(ByteReader& r, std::string* err) {
  auto bail = [&](const char* m) {
    if (err) *err = m;
    return std::nullopt;
  };
  if (!r.magic(kBitmapMagic)) return bail("bad bitmap magic");
  if (r.u32() != kBitmapVersion) return bail("unsupported bitmap version");
  Bitmap b;
  b.size = r.u32();
  b.if_bits = r.blob();
  b.df_bits = r.blob();
  if (r.fail) return bail("truncated bitmap");
  size_t want = (b.size + 7) / 8;
  if (b.if_bits.size() != want || b.df_bits.size() != want) return bail("bitmap length mismatch");
  return b;
}

inline bool save_bitmap(const Bitmap& b, const std::string& path) {
  ByteWriter w;
  serialize_bitmap(b, w);
  return write_file(path, w.buf);
}

inline std::optional<Bitmap> load_bitmap(const std::string& path, std::string* err) {
  auto data = read_file(path);
  if (!data) {
    if (err) *err = "cannot read " + path;
    return std::nullopt;
  }
  ByteReader r(data->data(), data->size());
  auto b = parse_bitmap(r, err);
  if (b && !r.done()) {
    if (err) *err = "trailing bytes in bitmap file";
    return std::nullopt;
  }
  return b;
}

}  // namespace bgdx
