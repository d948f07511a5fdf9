#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "bitmap.hpp"
#include "bytes.hpp"
#include "isa.hpp"

namespace bgdx {

// Address a return lands on to leave the simulation cleanly. Outside every
// mapped region by construction (validate() checks).
constexpr uint32_t EXIT_SENTINEL = 0xEE000000;

struct MemLayout {
  uint32_t text_base = 0x00400000;
  uint32_t text_size = 0;
  uint32_t data_base = 0x10000000;
  uint32_t data_size = 0;
  uint32_t stack_base = 0x7FF00000;  // lowest stack address; stack grows down from the top
  uint32_t stack_size = 1u << 16;

  uint32_t stack_top() const { return stack_base + stack_size; }
  bool in_text(uint32_t a) const { return a >= text_base && a - text_base < text_size; }
  bool in_data(uint32_t a) const { return a >= data_base && a - data_base < data_size; }
  bool in_stack(uint32_t a) const { return a >= stack_base && a - stack_base < stack_size; }
};

struct Block {
  uint32_t offset = 0;  // into text
  uint32_t size = 0;
  uint32_t func = 0;  // owning function index
};

// flags
constexpr uint8_t FUNC_EXPORTED = 1;     // reachable by name from outside; keeps canonical arg order
constexpr uint8_t FUNC_SYS_WRAPPER = 2;  // leaf wrapper around sys
constexpr uint8_t FUNC_IN_TABLE = 4;     // appears in a pointer table

struct Function {
  uint32_t first_block = 0;  // blocks of a function are contiguous in the block array
  uint32_t block_count = 0;
  uint8_t param_count = 0;
  uint8_t flags = 0;

  bool exported() const { return flags & FUNC_EXPORTED; }
};

enum class Role : uint8_t { prologue, marshal, capture, epilogue, sys_marshal };

// marshal source kinds
constexpr uint8_t SRC_CONST = 0;      // value loaded by a movi in the same block
constexpr uint8_t SRC_CAPTURE = 1;    // local holding the preceding call's return value
constexpr uint8_t SRC_OWN_PARAM = 2;  // one of the caller's own incoming parameters

struct Annotation {
  uint32_t block = 0;
  uint16_t instr_index = 0;  // index within the block's instruction sequence
  Role role = Role::prologue;
  uint8_t index = 0;      // parameter / argument position
  uint8_t src_kind = 0;   // marshal only
  uint8_t src_param = 0;  // marshal with src_kind == SRC_OWN_PARAM: caller param index
};

enum class EdgeLabel : uint8_t { jump, cond_true, cond_false, call, cont, table };

constexpr uint32_t NO_BLOCK = 0xFFFFFFFFu;

struct Edge {
  uint32_t src = 0;
  uint32_t dst = 0;  // NO_BLOCK for indirect calls
  EdgeLabel label = EdgeLabel::jump;
  uint32_t aux = 0;  // table index (indirect call / table edges), entry index for table edges
};

struct PointerTable {
  uint32_t data_offset = 0;  // location of the table inside the data section
  uint8_t argc = 0;          // arity shared by every member
  std::vector<uint32_t> entries;  // function indices
};

enum class EmbedKind : uint8_t { jump_table, island };

struct EmbeddedRange {
  uint32_t offset = 0;  // into text
  uint32_t size = 0;
  EmbedKind kind = EmbedKind::island;
  uint32_t owner_block = NO_BLOCK;  // jump tables sit directly after their owner
};

struct Relocation {
  uint32_t text_offset = 0;  // position of a movi imm32 holding an island address
  uint32_t island = 0;       // embedded-range index
};

struct Image {
  MemLayout layout;
  std::vector<uint8_t> text, data;
  std::vector<Block> blocks;
  std::vector<Function> funcs;
  std::vector<Annotation> annotations;
  std::vector<Edge> edges;
  std::vector<PointerTable> tables;
  std::vector<EmbeddedRange> embeds;
  std::vector<Relocation> relocs;
  std::vector<uint32_t> entry_points;  // function indices; [0] is the main entry
  std::optional<Bitmap> bitmap;

  uint32_t block_addr(uint32_t b) const { return layout.text_base + blocks[b].offset; }
  uint32_t entry_block(uint32_t func) const { return funcs[func].first_block; }
  uint32_t entry_addr(uint32_t func) const { return block_addr(entry_block(func)); }
};

// ---- block decoding ----------------------------------------------------------

struct PlacedInstr {
  uint32_t offset;  // into text
  Instr instr;
  uint8_t len;
};

// Decodes a block; returns empty on any decode fault (validate() treats that as
// a broken image).
inline std::vector<PlacedInstr> decode_block(const std::vector<uint8_t>& text, const Block& b) {
  std::vector<PlacedInstr> out;
  uint32_t off = b.offset, end = b.offset + b.size;
  while (off < end) {
    Decoded d = decode(text.data() + off, end - off);
    if (!d.ok()) return {};
    out.push_back({off, d.instr, d.len});
    off += d.len;
  }
  return out;
}

// ---- path search ---------------------------------------------------------------
// Forward reachability over explicit control-flow edges. Call edges descend into
// callees and continuation edges step over them, but there is no return-edge
// traversal: a path never climbs from a callee back into an unrelated caller.

struct Adjacency {
  std::vector<uint32_t> heads;  // per block, index into list
  std::vector<uint32_t> list;   // concatenated successor block indices

  static Adjacency build(const Image& im) {
    Adjacency a;
    std::vector<uint32_t> degree(im.blocks.size(), 0);
    auto walkable = [](const Edge& e) { return e.dst != NO_BLOCK; };
    for (const Edge& e : im.edges)
      if (walkable(e)) degree[e.src]++;
    a.heads.assign(im.blocks.size() + 1, 0);
    for (size_t i = 0; i < im.blocks.size(); ++i) a.heads[i + 1] = a.heads[i] + degree[i];
    a.list.resize(a.heads.back());
    std::vector<uint32_t> fill(a.heads.begin(), a.heads.end() - 1);
    for (const Edge& e : im.edges)
      if (walkable(e)) a.list[fill[e.src]++] = e.dst;
    return a;
  }
};

inline std::optional<std::vector<uint32_t>> find_path(const Image& im, const Adjacency& adj,
                                                      uint32_t from, uint32_t to,
                                                      const std::unordered_set<uint32_t>* forbidden = nullptr) {
  if (from == to) return std::vector<uint32_t>{from};
  if (forbidden && forbidden->count(from)) return std::nullopt;
  std::vector<uint32_t> parent(im.blocks.size(), NO_BLOCK);
  std::deque<uint32_t> q{from};
  parent[from] = from;
  while (!q.empty()) {
    uint32_t cur = q.front();
    q.pop_front();
    for (uint32_t i = adj.heads[cur]; i < adj.heads[cur + 1]; ++i) {
      uint32_t nxt = adj.list[i];
      if (parent[nxt] != NO_BLOCK) continue;
      if (nxt != to && forbidden && forbidden->count(nxt)) continue;
      parent[nxt] = cur;
      if (nxt == to) {
        std::vector<uint32_t> path{to};
        for (uint32_t p = to; p != from; p = parent[p]) path.push_back(parent[p]);
        std::reverse(path.begin(), path.end());
        return path;
      }
      q.push_back(nxt);
    }
  }
  return std::nullopt;
}

inline std::optional<std::vector<uint32_t>> find_path(const Image& im, uint32_t from, uint32_t to,
                                                      const std::unordered_set<uint32_t>* forbidden = nullptr) {
  Adjacency adj = Adjacency::build(im);
  return find_path(im, adj, from, to, forbidden);
}

// ---- validation -----------------------------------------------------------------

inline bool validate(const Image& im, std::string* err) {
  auto bail = [&](const std::string& m) {
    if (err) *err = m;
    return false;
  };
  if (im.text.size() != im.layout.text_size) return bail("text length mismatch");
  if (im.data.size() != im.layout.data_size) return bail("data length mismatch");
  if (im.layout.in_text(EXIT_SENTINEL) || im.layout.in_data(EXIT_SENTINEL) || im.layout.in_stack(EXIT_SENTINEL))
    return bail("exit sentinel overlaps a mapped region");

  // blocks: in bounds, non-overlapping, decodable, exactly one trailing terminator
  std::vector<std::pair<uint32_t, uint32_t>> spans;  // (offset, end)
  std::vector<Instr> term(im.blocks.size());
  std::vector<uint32_t> term_addr(im.blocks.size());  // address of the terminator itself
  for (size_t i = 0; i < im.blocks.size(); ++i) {
    const Block& b = im.blocks[i];
    if (b.size == 0) return bail("empty block " + std::to_string(i));
    if (uint64_t(b.offset) + b.size > im.text.size()) return bail("block outside text");
    if (b.func >= im.funcs.size()) return bail("block with bad function index");
    auto instrs = decode_block(im.text, b);
    if (instrs.empty()) return bail("undecodable block " + std::to_string(i));
    for (size_t k = 0; k < instrs.size(); ++k) {
      bool last = k + 1 == instrs.size();
      if (is_terminator(instrs[k].instr.op) != last)
        return bail("terminator placement in block " + std::to_string(i));
    }
    term[i] = instrs.back().instr;
    term_addr[i] = im.layout.text_base + instrs.back().offset;
    spans.push_back({b.offset, b.offset + b.size});
  }
  for (const auto& e : im.embeds) {
    if (e.size == 0) return bail("empty embedded range");
    if (uint64_t(e.offset) + e.size > im.text.size()) return bail("embedded range outside text");
    if (e.kind == EmbedKind::jump_table && e.owner_block >= im.blocks.size())
      return bail("jump table without owner");
    spans.push_back({e.offset, e.offset + e.size});
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second) return bail("overlapping text spans");

  // functions: contiguous, covering, consistent ownership
  uint64_t covered = 0;
  for (size_t f = 0; f < im.funcs.size(); ++f) {
    const Function& fn = im.funcs[f];
    if (fn.block_count == 0) return bail("function without blocks");
    if (uint64_t(fn.first_block) + fn.block_count > im.blocks.size()) return bail("function block range");
    if (fn.param_count > 4) return bail("function arity out of range");
    for (uint32_t b = fn.first_block; b < fn.first_block + fn.block_count; ++b)
      if (im.blocks[b].func != f) return bail("block ownership mismatch");
    covered += fn.block_count;
  }
  if (covered != im.blocks.size()) return bail("blocks not partitioned by functions");

  // edges: well formed, complete per terminator, and consistent with the bytes.
  // A conditional's untaken side either falls through to the adjacent target or
  // lands on a 3-byte jump stub planted right behind the block.
  std::vector<std::vector<const Edge*>> out(im.blocks.size());
  for (const Edge& e : im.edges) {
    if (e.src >= im.blocks.size()) return bail("edge source out of range");
    if (e.dst != NO_BLOCK && e.dst >= im.blocks.size()) return bail("edge target out of range");
    if (e.dst == NO_BLOCK && e.label != EdgeLabel::call) return bail("unresolved non-call edge");
    out[e.src].push_back(&e);
  }
  for (size_t i = 0; i < im.blocks.size(); ++i) {
    const Instr& t = term[i];
    const uint32_t next_pc = term_addr[i] + uint32_t(op_length(t.op));
    uint32_t counts[6] = {};
    for (const Edge* e : out[i]) counts[size_t(e->label)]++;
    auto expect = [&](uint32_t jump, uint32_t ctrue, uint32_t cfalse, uint32_t call, uint32_t cont,
                      uint32_t table) {
      return counts[0] == jump && counts[1] == ctrue && counts[2] == cfalse && counts[3] == call &&
             counts[4] == cont && counts[5] == table;
    };
    switch (term_kind(t.op)) {
      case TermKind::jump:
        if (!expect(1, 0, 0, 0, 0, 0)) return bail("jump block edge set");
        break;
      case TermKind::cond:
        if (!expect(0, 1, 1, 0, 0, 0)) return bail("cond block edge set");
        break;
      case TermKind::call_direct:
      case TermKind::call_indirect:
        if (!expect(0, 0, 0, 1, 1, 0)) return bail("call block edge set");
        break;
      case TermKind::ret:
        if (!out[i].empty()) return bail("return block has edges");
        break;
      case TermKind::table:
        if (counts[0] || counts[1] || counts[2] || counts[3] || counts[4] || counts[5] == 0)
          return bail("table block edge set");
        break;
      case TermKind::none: return bail("block without terminator");
    }
    for (const Edge* e : out[i]) {
      switch (e->label) {
        case EdgeLabel::jump:
        case EdgeLabel::cond_true:
          if (rel_target(term_addr[i], t) != im.block_addr(e->dst)) return bail("branch target mismatch");
          if (im.blocks[e->dst].func != im.blocks[i].func) return bail("branch leaves function");
          break;
        case EdgeLabel::cond_false: {
          if (im.blocks[e->dst].func != im.blocks[i].func) return bail("fallthrough leaves function");
          if (next_pc == im.block_addr(e->dst)) break;  // adjacent
          uint32_t off = next_pc - im.layout.text_base;
          if (uint64_t(off) + 3 > im.text.size()) return bail("fallthrough stub outside text");
          Decoded stub = decode(im.text.data() + off, 3);
          if (!stub.ok() || stub.instr.op != Op::JMP || rel_target(next_pc, stub.instr) != im.block_addr(e->dst))
            return bail("fallthrough stub mismatch");
          break;
        }
        case EdgeLabel::call:
          if (e->dst == NO_BLOCK) {
            if (t.op != Op::CALLR) return bail("unresolved direct call");
            if (e->aux >= im.tables.size()) return bail("indirect call without table");
          } else {
            if (t.op != Op::CALL) return bail("resolved indirect call");
            if (rel_target(term_addr[i], t) != im.block_addr(e->dst)) return bail("call target mismatch");
            if (im.funcs[im.blocks[e->dst].func].first_block != e->dst) return bail("call into mid-function");
          }
          break;
        case EdgeLabel::cont:
          if (im.blocks[e->dst].func != im.blocks[i].func) return bail("continuation leaves function");
          if (im.block_addr(e->dst) != next_pc) return bail("continuation not adjacent");
          break;
        case EdgeLabel::table: {
          if (im.blocks[e->dst].func != im.blocks[i].func) return bail("table edge leaves function");
          uint32_t tab = rel_target(term_addr[i], t);  // address of the fused table
          const EmbeddedRange* emb = nullptr;
          for (const auto& s : im.embeds)
            if (s.kind == EmbedKind::jump_table && s.owner_block == i) emb = &s;
          if (!emb || im.layout.text_base + emb->offset != tab) return bail("jump table placement");
          if (uint64_t(e->aux) * 4 + 4 > emb->size) return bail("table edge index out of range");
          if (read_u32(im.text.data() + emb->offset + 4 * e->aux) != im.block_addr(e->dst))
            return bail("table entry mismatch");
          break;
        }
      }
    }
  }
  for (const Annotation& a : im.annotations)
    if (a.block >= im.blocks.size()) return bail("annotation block out of range");
  for (const PointerTable& t : im.tables) {
    if (uint64_t(t.data_offset) + 4 * t.entries.size() > im.data.size())
      return bail("pointer table outside data");
    for (size_t k = 0; k < t.entries.size(); ++k) {
      uint32_t f = t.entries[k];
      if (f >= im.funcs.size()) return bail("pointer table entry out of range");
      // stored value must be the member's current entry address
      uint32_t v = read_u32(im.data.data() + t.data_offset + 4 * uint32_t(k));
      if (v != im.entry_addr(f)) return bail("pointer table value out of date");
    }
  }
  for (const Relocation& r : im.relocs) {
    if (r.island >= im.embeds.size()) return bail("relocation island out of range");
    if (uint64_t(r.text_offset) + 5 > im.text.size()) return bail("relocation outside text");
    uint8_t opc = im.text[r.text_offset];
    if (!(opc >= enc::MOVI && opc < enc::MOVI + 8)) return bail("relocation does not point at a movi");
    uint32_t v = read_u32(im.text.data() + r.text_offset + 1);
    if (v != im.layout.text_base + im.embeds[r.island].offset) return bail("relocation value out of date");
  }
  for (uint32_t f : im.entry_points)
    if (f >= im.funcs.size()) return bail("entry point out of range");
  if (im.entry_points.empty()) return bail("no entry points");
  if (im.bitmap && im.bitmap->size != im.text.size()) return bail("bitmap length mismatch");
  return true;
}

// ---- serialization ------------------------------------------------------------

constexpr char kImageMagic[4] = {'M', 'I', 'M', 'G'};
constexpr uint32_t kImageVersion = 1;

inline std::vector<uint8_t> serialize_image(const Image& im) {
  ByteWriter w;
  w.magic(kImageMagic);
  w.u32(kImageVersion);
  w.u32(im.layout.text_base);
  w.u32(im.layout.text_size);
  w.u32(im.layout.data_base);
  w.u32(im.layout.data_size);
  w.u32(im.layout.stack_base);
  w.u32(im.layout.stack_size);
  w.blob(im.text);
  w.blob(im.data);
  w.u32(uint32_t(im.blocks.size()));
  for (const Block& b : im.blocks) {
    w.u32(b.offset);
    w.u32(b.size);
    w.u32(b.func);
  }
  w.u32(uint32_t(im.funcs.size()));
  for (const Function& f : im.funcs) {
    w.u32(f.first_block);
    w.u32(f.block_count);
    w.u8(f.param_count);
    w.u8(f.flags);
  }
  w.u32(uint32_t(im.annotations.size()));
  for (const Annotation& a : im.annotations) {
    w.u32(a.block);
    w.u16(a.instr_index);
    w.u8(uint8_t(a.role));
    w.u8(a.index);
    w.u8(a.src_kind);
    w.u8(a.src_param);
  }
  w.u32(uint32_t(im.edges.size()));
  for (const Edge& e : im.edges) {
    w.u32(e.src);
    w.u32(e.dst);
    w.u8(uint8_t(e.label));
    w.u32(e.aux);
  }
  w.u32(uint32_t(im.tables.size()));
  for (const PointerTable& t : im.tables) {
    w.u32(t.data_offset);
    w.u8(t.argc);
    w.u32(uint32_t(t.entries.size()));
    for (uint32_t f : t.entries) w.u32(f);
  }
  w.u32(uint32_t(im.embeds.size()));
  for (const EmbeddedRange& e : im.embeds) {
    w.u32(e.offset);
    w.u32(e.size);
    w.u8(uint8_t(e.kind));
    w.u32(e.owner_block);
  }
  w.u32(uint32_t(im.relocs.size()));
  for (const Relocation& r : im.relocs) {
    w.u32(r.text_offset);
    w.u32(r.island);
  }
  w.u32(uint32_t(im.entry_points.size()));
  for (uint32_t f : im.entry_points) w.u32(f);
  w.u8(im.bitmap ? 1 : 0);
  if (im.bitmap) serialize_bitmap(*im.bitmap, w);
  return std::move(w.buf);
}

inline std::optional<Image> parse_image(const std::vector<uint8_t>& data, std::string* err) {
  auto bail = [&](const char* m) {
    if (err) *err = m;
    return std::nullopt;
  };
  ByteReader r(data.data(), data.size());
  if (!r.magic(kImageMagic)) return bail("bad image magic");
  if (r.u32() != kImageVersion) return bail("unsupported image version");
  Image im;
  im.layout.text_base = r.u32();
  im.layout.text_size = r.u32();
  im.layout.data_base = r.u32();
  im.layout.data_size = r.u32();
  im.layout.stack_base = r.u32();
  im.layout.stack_size = r.u32();
  im.text = r.blob();
  im.data = r.blob();
  uint32_t n = r.u32();
  if (r.fail || n > (1u << 24)) return bail("corrupt block table");
  im.blocks.resize(n);
  for (auto& b : im.blocks) {
    b.offset = r.u32();
    b.size = r.u32();
    b.func = r.u32();
  }
  n = r.u32();
  if (r.fail || n > (1u << 24)) return bail("corrupt function table");
  im.funcs.resize(n);
  for (auto& f : im.funcs) {
    f.first_block = r.u32();
    f.block_count = r.u32();
    f.param_count = r.u8();
    f.flags = r.u8();
  }
  n = r.u32();
  if (r.fail || n > (1u << 26)) return bail("corrupt annotation table");
  im.annotations.resize(n);
  for (auto& a : im.annotations) {
    a.block = r.u32();
    a.instr_index = r.u16();
    a.role = Role(r.u8());
    a.index = r.u8();
    a.src_kind = r.u8();
    a.src_param = r.u8();
  }
  n = r.u32();
  if (r.fail || n > (1u << 26)) return bail("corrupt edge table");
  im.edges.resize(n);
  for (auto& e : im.edges) {
    e.src = r.u32();
    e.dst = r.u32();
    e.label = EdgeLabel(r.u8());
    e.aux = r.u32();
  }
  n = r.u32();
  if (r.fail || n > (1u << 20)) return bail("corrupt pointer tables");
  im.tables.resize(n);
  for (auto& t : im.tables) {
    t.data_offset = r.u32();
    t.argc = r.u8();
    uint32_t m = r.u32();
    if (r.fail || m > (1u << 20)) return bail("corrupt pointer table");
    t.entries.resize(m);
    for (auto& f : t.entries) f = r.u32();
  }
  n = r.u32();
  if (r.fail || n > (1u << 24)) return bail("corrupt embedded ranges");
  im.embeds.resize(n);
  for (auto& e : im.embeds) {
    e.offset = r.u32();
    e.size = r.u32();
    e.kind = EmbedKind(r.u8());
    e.owner_block = r.u32();
  }
  n = r.u32();
  if (r.fail || n > (1u << 24)) return bail("corrupt relocations");
  im.relocs.resize(n);
  for (auto& rl : im.relocs) {
    rl.text_offset = r.u32();
    rl.island = r.u32();
  }
  n = r.u32();
  if (r.fail || n > (1u << 20)) return bail("corrupt entry points");
  im.entry_points.resize(n);
  for (auto& f : im.entry_points) f = r.u32();
  uint8_t has_bitmap = r.u8();
  if (has_bitmap) {
    auto b = parse_bitmap(r, err);
    if (!b) return std::nullopt;
    im.bitmap = std::move(*b);
  }
  if (!r.done()) return bail("trailing bytes in image file");
  if (!validate(im, err)) return std::nullopt;
  return im;
}

inline bool save_image(const Image& im, const std::string& path) {
  return write_file(path, serialize_image(im));
}

inline std::optional<Image> load_image(const std::string& path, std::string* err) {
  auto data = read_file(path);
  if (!data) {
    if (err) *err = "cannot read " + path;
    return std::nullopt;
  }
  return parse_image(*data, err);
}

}  // namespace bgdx
