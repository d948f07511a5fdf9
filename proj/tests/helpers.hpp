#pragma once

// Small hand-assembly builder for test fixtures. Lays blocks out in the order
// they are added (so "next block" adjacency is explicit in the test), resolves
// displacements, and emits the edge/table/annotation records the container
// expects.

#include <cassert>
#include <vector>

#include "bgdx/image.hpp"

namespace tb {

using namespace bgdx;

struct Builder {
  struct Blk {
    uint32_t func = 0;
    std::vector<Instr> body;
    Op top = Op::RET;
    uint8_t treg = 0;
    int t1 = -1;  // jmp/cond-true target block, or callee function for call
    int t2 = -1;  // cond-false / call-continuation block
    int table = -1;
    std::vector<int> tabdst;
  };
  struct Fn {
    uint8_t params = 0;
    uint8_t flags = 0;
  };

  std::vector<Blk> blks;
  std::vector<Fn> fns;
  std::vector<std::pair<std::vector<uint32_t>, uint8_t>> ptables;  // (members, argc)
  std::vector<Annotation> notes;
  uint32_t scratch = 64;  // extra data bytes past the tables

  int func(uint8_t params = 0, uint8_t flags = 0) {
    fns.push_back({params, flags});
    return int(fns.size()) - 1;
  }
  int block(int f, std::vector<Instr> body = {}) {
    Blk b;
    b.func = uint32_t(f);
    b.body = std::move(body);
    blks.push_back(std::move(b));
    return int(blks.size()) - 1;
  }
  void ret(int b) { blks[size_t(b)].top = Op::RET; }
  void jmp(int b, int dst) {
    blks[size_t(b)].top = Op::JMP;
    blks[size_t(b)].t1 = dst;
  }
  void cond(int b, Op op, uint8_t reg, int tdst, int fdst) {
    assert(op == Op::JZ || op == Op::JNZ);
    blks[size_t(b)].top = op;
    blks[size_t(b)].treg = reg;
    blks[size_t(b)].t1 = tdst;
    blks[size_t(b)].t2 = fdst;
  }
  void call(int b, int callee_func, int cont) {
    blks[size_t(b)].top = Op::CALL;
    blks[size_t(b)].t1 = callee_func;
    blks[size_t(b)].t2 = cont;
  }
  void callr(int b, uint8_t reg, int table, int cont) {
    blks[size_t(b)].top = Op::CALLR;
    blks[size_t(b)].treg = reg;
    blks[size_t(b)].table = table;
    blks[size_t(b)].t2 = cont;
  }
  void jtab(int b, uint8_t reg, std::vector<int> dsts) {
    blks[size_t(b)].top = Op::JTAB;
    blks[size_t(b)].treg = reg;
    blks[size_t(b)].tabdst = std::move(dsts);
  }
  int ptable(std::vector<uint32_t> members, uint8_t argc) {
    ptables.push_back({std::move(members), argc});
    return int(ptables.size()) - 1;
  }
  void note(Annotation a) { notes.push_back(a); }

  Image build() {
    Image im;
    const uint32_t base = im.layout.text_base;

    // offsets
    std::vector<uint32_t> boff(blks.size()), bsize(blks.size()), taboff(blks.size(), 0);
    uint32_t off = 0;
    for (size_t i = 0; i < blks.size(); ++i) {
      uint32_t sz = 0;
      for (auto& I : blks[i].body) sz += uint32_t(op_length(I.op));
      sz += uint32_t(op_length(blks[i].top));
      boff[i] = off;
      bsize[i] = sz;
      off += sz;
      if (blks[i].top == Op::JTAB) {
        taboff[i] = off;
        off += 4 * uint32_t(blks[i].tabdst.size());
      }
    }
    im.text.assign(off, GARBLE);
    im.layout.text_size = off;

    // functions from block grouping
    im.funcs.resize(fns.size());
    for (size_t f = 0; f < fns.size(); ++f) {
      im.funcs[f].param_count = fns[f].params;
      im.funcs[f].flags = fns[f].flags;
      im.funcs[f].first_block = NO_BLOCK;
    }
    for (size_t i = 0; i < blks.size(); ++i) {
      Function& fn = im.funcs[blks[i].func];
      if (fn.first_block == NO_BLOCK) fn.first_block = uint32_t(i);
      assert(fn.first_block + fn.block_count == i && "function blocks must be added contiguously");
      fn.block_count++;
      im.blocks.push_back({boff[i], bsize[i], blks[i].func});
    }

    // encode + edges
    for (size_t i = 0; i < blks.size(); ++i) {
      uint32_t cur = boff[i];
      for (auto& I : blks[i].body) cur += uint32_t(encode(I, im.text.data() + cur));
      const Blk& b = blks[i];
      uint32_t tlen = uint32_t(op_length(b.top));
      uint32_t next_pc = base + cur + tlen;
      Instr T;
      T.op = b.top;
      switch (b.top) {
        case Op::RET: break;
        case Op::JMP:
          T.disp = int32_t(base + boff[size_t(b.t1)]) - int32_t(next_pc);
          im.edges.push_back({uint32_t(i), uint32_t(b.t1), EdgeLabel::jump, 0});
          break;
        case Op::JZ:
        case Op::JNZ:
          T.rs = b.treg;
          T.disp = int32_t(base + boff[size_t(b.t1)]) - int32_t(next_pc);
          im.edges.push_back({uint32_t(i), uint32_t(b.t1), EdgeLabel::cond_true, 0});
          im.edges.push_back({uint32_t(i), uint32_t(b.t2), EdgeLabel::cond_false, 0});
          assert(boff[size_t(b.t2)] == cur + tlen && "false edge must fall through");
          break;
        case Op::CALL: {
          uint32_t callee_block = im.funcs[size_t(b.t1)].first_block;
          T.disp = int32_t(base + boff[callee_block]) - int32_t(next_pc);
          im.edges.push_back({uint32_t(i), callee_block, EdgeLabel::call, 0});
          im.edges.push_back({uint32_t(i), uint32_t(b.t2), EdgeLabel::cont, 0});
          assert(boff[size_t(b.t2)] == cur + tlen && "continuation must be adjacent");
          break;
        }
        case Op::CALLR:
          T.rs = b.treg;
          im.edges.push_back({uint32_t(i), NO_BLOCK, EdgeLabel::call, uint32_t(b.table)});
          im.edges.push_back({uint32_t(i), uint32_t(b.t2), EdgeLabel::cont, 0});
          assert(boff[size_t(b.t2)] == cur + tlen && "continuation must be adjacent");
          break;
        case Op::JTAB: {
          T.rs = b.treg;
          T.disp = 0;  // table fused directly behind the block
          for (size_t k = 0; k < b.tabdst.size(); ++k) {
            write_u32(im.text.data() + taboff[i] + 4 * k, base + boff[size_t(b.tabdst[k])]);
            im.edges.push_back({uint32_t(i), uint32_t(b.tabdst[k]), EdgeLabel::table, uint32_t(k)});
          }
          im.embeds.push_back(
              {taboff[i], uint32_t(4 * b.tabdst.size()), EmbedKind::jump_table, uint32_t(i)});
          break;
        }
        default: assert(false && "not a terminator");
      }
      encode(T, im.text.data() + cur);
    }

    // pointer tables in the data section
    uint32_t doff = 0;
    for (auto& [members, argc] : ptables) {
      PointerTable t;
      t.data_offset = doff;
      t.argc = argc;
      t.entries = members;
      doff += 4 * uint32_t(members.size());
      im.tables.push_back(std::move(t));
    }
    im.data.assign(doff + scratch, 0);
    im.layout.data_size = uint32_t(im.data.size());
    for (auto& t : im.tables)
      for (size_t k = 0; k < t.entries.size(); ++k)
        write_u32(im.data.data() + t.data_offset + 4 * k, im.entry_addr(t.entries[k]));

    im.annotations = notes;
    for (size_t f = 0; f < im.funcs.size(); ++f)
      if (im.funcs[f].exported()) im.entry_points.push_back(uint32_t(f));
    if (im.entry_points.empty()) im.entry_points.push_back(0);
    return im;
  }
};

inline Instr movi(uint8_t rd, uint32_t imm) { return {Op::MOVI, rd, 0, imm, 0}; }
inline Instr moviw(uint8_t rd, uint16_t imm) { return {Op::MOVIW, rd, 0, imm, 0}; }
inline Instr movib(uint8_t rd, uint8_t imm) { return {Op::MOVIB, rd, 0, imm, 0}; }
inline Instr mov(uint8_t rd, uint8_t rs) { return {Op::MOV, rd, rs, 0, 0}; }
inline Instr alu(Op op, uint8_t rd, uint8_t rs) { return {op, rd, rs, 0, 0}; }
inline Instr addi(uint8_t rd, uint32_t imm) { return {Op::ADDI, rd, 0, imm, 0}; }
inline Instr subi(uint8_t rd, uint32_t imm) { return {Op::SUBI, rd, 0, imm, 0}; }
inline Instr xori(uint8_t rd, uint32_t imm) { return {Op::XORI, rd, 0, imm, 0}; }
inline Instr push(uint8_t rs) { return {Op::PUSH, 0, rs, 0, 0}; }
inline Instr pop(uint8_t rd) { return {Op::POP, rd, 0, 0, 0}; }
inline Instr pushi(uint32_t imm) { return {Op::PUSHI, 0, 0, imm, 0}; }
inline Instr load(uint8_t rd, uint8_t rs, int16_t d) { return {Op::LOAD, rd, rs, 0, d}; }
inline Instr store(uint8_t rd, int16_t d, uint8_t rs) { return {Op::STORE, rd, rs, 0, d}; }
inline Instr nop() { return {Op::NOP, 0, 0, 0, 0}; }
inline Instr sys() { return {Op::SYS, 0, 0, 0, 0}; }

}  // namespace tb
