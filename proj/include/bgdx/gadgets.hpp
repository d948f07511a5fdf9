#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include "image.hpp"

namespace bgdx {

// ---- wildcard mask ----------------------------------------------------------
// Per text byte, the bits a layout change may legitimately rewrite: register
// fields (isa gap bits), PC-relative displacement fields, movi immediates
// patched by relocation, and jump-table entries. Island bytes are copied
// verbatim when they move, so they are fully stable; bytes outside every block
// and embedded range (filler, branch stubs) identify nothing and count as fully
// volatile.

inline std::vector<uint8_t> wildcard_mask(const Image& im) {
  std::vector<uint8_t> mask(im.text.size(), 0xFF);
  for (const Block& b : im.blocks) {
    for (const PlacedInstr& pi : decode_block(im.text, b)) {
      gap_mask(pi.instr.op, &mask[pi.offset], pi.len);
      switch (pi.instr.op) {
        case Op::JMP: mask[pi.offset + 1] = mask[pi.offset + 2] = 0xFF; break;
        case Op::JZ:
        case Op::JNZ:
        case Op::JTAB: mask[pi.offset + 2] = mask[pi.offset + 3] = 0xFF; break;
        case Op::CALL:
          for (int i = 1; i <= 4; ++i) mask[pi.offset + uint32_t(i)] = 0xFF;
          break;
        default: break;
      }
    }
  }
  for (const Relocation& r : im.relocs)
    for (int i = 1; i <= 4; ++i) mask[r.text_offset + uint32_t(i)] = 0xFF;
  for (const EmbeddedRange& e : im.embeds)
    std::memset(&mask[e.offset], e.kind == EmbedKind::jump_table ? 0xFF : 0x00, e.size);
  return mask;
}

// ---- relocation units ---------------------------------------------------------
// A block (together with its fused jump table) or an island moves as one piece;
// a byte sequence crossing two units is torn apart by any relocation, so it can
// never count as layout-stable. NO_BLOCK marks unowned bytes.

inline std::vector<uint32_t> unit_map(const Image& im) {
  std::vector<uint32_t> u(im.text.size(), NO_BLOCK);
  for (uint32_t i = 0; i < uint32_t(im.blocks.size()); ++i)
    for (uint32_t k = 0; k < im.blocks[i].size; ++k) u[im.blocks[i].offset + k] = i;
  for (uint32_t e = 0; e < uint32_t(im.embeds.size()); ++e) {
    const EmbeddedRange& r = im.embeds[e];
    uint32_t id = r.kind == EmbedKind::jump_table ? r.owner_block : uint32_t(im.blocks.size()) + e;
    for (uint32_t k = 0; k < r.size; ++k) u[r.offset + k] = id;
  }
  return u;
}

// ---- gadgets ------------------------------------------------------------------

enum class GadgetClass : uint8_t {
  load_const,
  move,
  arith,
  load_mem,
  store_mem,
  stack_pivot,
  call,
  other,
};
inline constexpr int kGadgetClassCount = 8;

inline const char* gadget_class_name(GadgetClass c) {
  switch (c) {
    case GadgetClass::load_const: return "load-const";
    case GadgetClass::move: return "move";
    case GadgetClass::arith: return "arith";
    case GadgetClass::load_mem: return "load-mem";
    case GadgetClass::store_mem: return "store-mem";
    case GadgetClass::stack_pivot: return "stack-pivot";
    case GadgetClass::call: return "call";
    case GadgetClass::other: return "other";
  }
  return "?";
}

// Class of the last value-producing instruction before the terminator; writes
// to the stack pointer trump the nominal class.
inline GadgetClass classify_gadget(const std::vector<Instr>& instrs) {
  for (size_t i = instrs.size() - 1; i-- > 0;) {
    const Instr& I = instrs[i];
    auto piv = [&](GadgetClass c) { return I.rd == REG_SP ? GadgetClass::stack_pivot : c; };
    switch (I.op) {
      case Op::NOP: continue;
      case Op::POP:
      case Op::MOVI:
      case Op::MOVIW:
      case Op::MOVIB: return piv(GadgetClass::load_const);
      case Op::MOV: return piv(GadgetClass::move);
      case Op::ADD:
      case Op::SUB:
      case Op::XOR:
      case Op::AND:
      case Op::SHL:
      case Op::ADDI:
      case Op::SUBI:
      case Op::XORI: return piv(GadgetClass::arith);
      case Op::LOAD: return piv(GadgetClass::load_mem);
      case Op::STORE:
      case Op::PUSH:
      case Op::PUSHI: return GadgetClass::store_mem;
      case Op::SYS: return GadgetClass::call;
      default: continue;
    }
  }
  return instrs.back().op == Op::CALLR ? GadgetClass::call : GadgetClass::other;
}

struct Gadget {
  uint32_t start = 0;  // text offset, any alignment
  uint32_t byte_length = 0;
  GadgetClass cls = GadgetClass::other;
  bool gapless = false;
  std::vector<Instr> instrs;  // ends with ret / callr / jtab
};

// Every text offset whose forward decode reaches a return or indirect transfer
// within max_instructions yields one gadget. A direct branch aborts the
// sequence: it diverts control away from the chain. Gapless gadgets consist
// solely of layout-stable bytes of a single relocation unit, so their byte
// pattern survives any layout change verbatim.
inline std::vector<Gadget> extract_gadgets(const Image& im, int max_instructions = 5) {
  const std::vector<uint8_t> mask = wildcard_mask(im);
  const std::vector<uint32_t> units = unit_map(im);
  const uint32_t n = uint32_t(im.text.size());
  std::vector<Gadget> out;
  std::vector<Instr> seq;
  for (uint32_t start = 0; start < n; ++start) {
    seq.clear();
    uint32_t off = start;
    bool hit = false;
    for (int k = 0; k < max_instructions; ++k) {
      Decoded d = decode(im.text.data() + off, n - off);
      if (!d.ok()) break;
      Op op = d.instr.op;
      if (op == Op::JMP || op == Op::JZ || op == Op::JNZ || op == Op::CALL) break;
      seq.push_back(d.instr);
      off += d.len;
      if (op == Op::RET || op == Op::CALLR || op == Op::JTAB) {
        hit = true;
        break;
      }
    }
    if (!hit) continue;
    Gadget g;
    g.start = start;
    g.byte_length = off - start;
    g.cls = classify_gadget(seq);
    g.gapless = units[start] != NO_BLOCK;
    for (uint32_t i = start; i < off && g.gapless; ++i)
      if (mask[i] != 0 || units[i] != units[start]) g.gapless = false;
    g.instrs = seq;
    out.push_back(std::move(g));
  }
  return out;
}

struct GadgetStats {
  std::array<uint64_t, kGadgetClassCount> count{};
  std::array<uint64_t, kGadgetClassCount> gapless{};
  uint64_t total = 0, total_gapless = 0;

  double gapless_portion() const { return total ? double(total_gapless) / double(total) : 0.0; }
};

inline GadgetStats gadget_stats(const std::vector<Gadget>& gs) {
  GadgetStats s;
  for (const Gadget& g : gs) {
    s.count[size_t(g.cls)]++;
    s.total++;
    if (g.gapless) {
      s.gapless[size_t(g.cls)]++;
      s.total_gapless++;
    }
  }
  return s;
}

// ---- templates ------------------------------------------------------------------
// Length-m byte windows of the original image, matched against probed windows
// modulo the wildcard mask. Windows crossing block boundaries identify nothing
// (relocation tears them apart) and windows with almost no stable bits match
// half the universe, so the matcher excludes both; the raw enumeration is still
// reported for counting.

struct TemplateIndex {
  uint32_t m = 0;
  uint32_t min_stable = 0;
  uint64_t enumerated = 0;  // windows considered before the information cutoff
  std::vector<uint8_t> text, mask;
  std::vector<uint32_t> offsets;               // kept templates, ascending
  std::vector<std::vector<uint32_t>> buckets;  // [stable_pos * 256 + byte]
  std::vector<uint32_t> residual;              // kept, but no fully stable byte

  uint32_t stable_bits(uint32_t off) const {
    uint32_t bits = 0;
    for (uint32_t i = 0; i < m; ++i) bits += 8u - uint32_t(std::popcount(mask[off + i]));
    return bits;
  }

  bool matches(uint32_t off, const uint8_t* w) const {
    for (uint32_t i = 0; i < m; ++i)
      if (uint8_t((text[off + i] ^ w[i]) & ~mask[off + i]) != 0) return false;
    return true;
  }

  static TemplateIndex build(const Image& im, uint32_t m, bool block_contained = true,
                             uint32_t min_stable = 20) {
    TemplateIndex ix;
    ix.m = m;
    ix.min_stable = min_stable;
    ix.text = im.text;
    ix.mask = wildcard_mask(im);
    auto push = [&](uint32_t off) {
      ix.enumerated++;
      if (ix.stable_bits(off) >= min_stable) ix.offsets.push_back(off);
    };
    if (block_contained) {
      for (const Block& b : im.blocks) {
        if (b.size < m) continue;
        for (uint32_t o = b.offset; o + m <= b.offset + b.size; ++o) push(o);
      }
    } else {
      for (uint32_t o = 0; o + m <= uint32_t(im.text.size()); ++o) push(o);
    }
    std::sort(ix.offsets.begin(), ix.offsets.end());
    ix.buckets.assign(size_t(m) * 256, {});
    for (uint32_t off : ix.offsets) {
      int p = -1;
      for (uint32_t i = 0; i < m && p < 0; ++i)
        if (ix.mask[off + i] == 0) p = int(i);
      if (p < 0)
        ix.residual.push_back(off);
      else
        ix.buckets[size_t(p) * 256 + ix.text[off + uint32_t(p)]].push_back(off);
    }
    return ix;
  }

  // Up to cap matching template offsets for a probed window (cap 2 is enough to
  // tell unique from ambiguous). Complete: a matching template agrees with the
  // window on every fully stable byte, so it sits in a scanned bucket.
  std::vector<uint32_t> match(const uint8_t* w, size_t cap = 2) const {
    std::vector<uint32_t> hits;
    auto scan = [&](const std::vector<uint32_t>& v) {
      for (uint32_t off : v) {
        if (hits.size() >= cap) return;
        if (matches(off, w)) hits.push_back(off);
      }
    };
    for (uint32_t p = 0; p < m && hits.size() < cap; ++p) scan(buckets[size_t(p) * 256 + w[p]]);
    if (hits.size() < cap) scan(residual);
    return hits;
  }

  bool contains(uint32_t off) const {
    return std::binary_search(offsets.begin(), offsets.end(), off);
  }
  uint64_t size() const { return offsets.size(); }
};

// Raw enumeration: one template per text offset where the window fits, no
// information cutoff. An n-byte section yields n - length + 1 of them.
inline TemplateIndex templates_at(const Image& im, uint32_t length) {
  return TemplateIndex::build(im, length, /*block_contained=*/false, /*min_stable=*/0);
}

// ---- survival -------------------------------------------------------------------
// Fraction of distinct original gadget byte patterns still present anywhere in a
// replacement text, per class. Identical byte strings decode identically, so
// they collapse into one pattern; a pattern counts as gapless if any of its
// instances is.

struct SurvivalReport {
  std::array<uint64_t, kGadgetClassCount> patterns{}, survived{};
  uint64_t gapless_patterns = 0, gapless_survived = 0;

  double ratio(GadgetClass c) const {
    uint64_t t = patterns[size_t(c)];
    return t ? double(survived[size_t(c)]) / double(t) : 0.0;
  }
  double overall() const {
    uint64_t t = 0, s = 0;
    for (int c = 0; c < kGadgetClassCount; ++c) t += patterns[size_t(c)], s += survived[size_t(c)];
    return t ? double(s) / double(t) : 0.0;
  }
  double gapless_ratio() const {
    return gapless_patterns ? double(gapless_survived) / double(gapless_patterns) : 0.0;
  }
};

inline SurvivalReport surviving_gadget_ratio(const std::vector<Gadget>& gadgets,
                                             const std::vector<uint8_t>& orig_text,
                                             const std::vector<uint8_t>& rand_text) {
  struct Pat {
    GadgetClass cls;
    bool gapless;
  };
  std::unordered_map<std::string, Pat> pats;
  pats.reserve(gadgets.size());
  for (const Gadget& g : gadgets) {
    std::string key(reinterpret_cast<const char*>(orig_text.data() + g.start), g.byte_length);
    auto [it, fresh] = pats.try_emplace(std::move(key), Pat{g.cls, g.gapless});
    if (!fresh && g.gapless) it->second.gapless = true;
  }

  const uint8_t* rt = rand_text.data();
  const size_t rn = rand_text.size();
  // short patterns: direct substring presence sets
  std::vector<bool> has1(1u << 8), has2(1u << 16), has3(1u << 24);
  for (size_t i = 0; i < rn; ++i) {
    has1[rt[i]] = true;
    if (i + 1 < rn) has2[uint32_t(rt[i]) | uint32_t(rt[i + 1]) << 8] = true;
    if (i + 2 < rn)
      has3[uint32_t(rt[i]) | uint32_t(rt[i + 1]) << 8 | uint32_t(rt[i + 2]) << 16] = true;
  }
  // longer ones: sorted 4-byte-prefix positions, then verify
  std::vector<uint64_t> pref;
  if (rn >= 4) {
    pref.reserve(rn - 3);
    for (size_t i = 0; i + 4 <= rn; ++i) pref.push_back(uint64_t(read_u32(rt + i)) << 32 | i);
    std::sort(pref.begin(), pref.end());
  }
  auto present = [&](const std::string& p) {
    switch (p.size()) {
      case 0: return true;
      case 1: return bool(has1[uint8_t(p[0])]);
      case 2: return bool(has2[uint32_t(uint8_t(p[0])) | uint32_t(uint8_t(p[1])) << 8]);
      case 3:
        return bool(has3[uint32_t(uint8_t(p[0])) | uint32_t(uint8_t(p[1])) << 8 |
                         uint32_t(uint8_t(p[2])) << 16]);
      default: break;
    }
    uint32_t key = read_u32(reinterpret_cast<const uint8_t*>(p.data()));
    auto it = std::lower_bound(pref.begin(), pref.end(), uint64_t(key) << 32);
    for (; it != pref.end() && (*it >> 32) == key; ++it) {
      size_t pos = uint32_t(*it);
      if (pos + p.size() <= rn && std::memcmp(rt + pos, p.data(), p.size()) == 0) return true;
    }
    return false;
  };

  SurvivalReport r;
  for (const auto& [bytes, info] : pats) {
    bool ok = present(bytes);
    r.patterns[size_t(info.cls)]++;
    if (ok) r.survived[size_t(info.cls)]++;
    if (info.gapless) {
      r.gapless_patterns++;
      if (ok) r.gapless_survived++;
    }
  }
  return r;
}

}  // namespace bgdx
