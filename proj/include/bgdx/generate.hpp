#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>
#include <vector>

#include "image.hpp"
#include "rng.hpp"

namespace bgdx {

struct GenSpec {
  uint64_t seed = 1;
  uint32_t target_blocks = 2000;

  // function structure: lognormal block counts, clamped
  double fn_mu = 1.85, fn_sigma = 0.65;
  uint32_t fn_blocks_max = 64;
  uint32_t exported_count = 12;
  uint32_t exported_min_blocks = 8;
  double indirect_only_fraction = 0.10;

  // block size distribution (bytes): lognormal body + pareto tail
  double blk_mu = 2.08, blk_sigma = 0.85;
  double tail_weight = 0.06, tail_xm = 40.0, tail_alpha = 1.68;
  uint32_t blk_max = 1024;
  uint32_t fn_bytes_soft_cap = 24000;  // keeps rel16 branches in range

  // embedded data
  double data_ratio = 0.0162;     // target fraction of text bytes that are data
  uint32_t island_min = 8, island_max = 56;
  double accessor_weight = 1.0;   // soup weight of island accessors

  // pointer tables (entry counts must be powers of two)
  uint32_t wrapper_table_entries = 32;
  uint32_t func_tables = 2;
  uint32_t func_table_entries = 8;

  // constants and seeded gadget material
  uint32_t pool_size = 4096;
  uint32_t gadget_instances = 30;  // per pattern (pop r0..r3 / sys, each paired with ret)

  // interior terminator mix (renormalized by availability); fused jump tables
  // count against the embedded-data budget, which keeps p_jtab small
  double p_cond = 0.40, p_call = 0.18, p_jmp = 0.16, p_jtab = 0.015, p_callr = 0.06;

  uint32_t scratch_bytes = 16384;
  uint32_t stack_bytes = 1u << 16;
};

inline GenSpec xul_like_spec(uint64_t seed) {
  GenSpec s;
  s.seed = seed;
  s.target_blocks = 100000;
  return s;
}

inline GenSpec tiny_spec(uint64_t seed) {
  GenSpec s;
  s.seed = seed;
  s.target_blocks = 600;
  s.exported_count = 6;
  s.wrapper_table_entries = 8;
  s.func_tables = 1;
  s.func_table_entries = 4;
  s.pool_size = 512;
  s.gadget_instances = 6;
  return s;
}

struct GenError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace gen_detail {

constexpr uint32_t DATA_BASE = 0x10000000;

struct FuncPlan {
  uint32_t nblocks = 1;
  uint8_t k = 0;  // params
  uint8_t flags = 0;
  bool wrapper = false;
  bool indirect_only = false;
};

struct BlockPlan {
  std::vector<Instr> instrs;  // complete, terminator last
  std::vector<Annotation> notes;
  std::vector<std::pair<uint16_t, uint32_t>> relocs;  // (instr index, island id)
  std::vector<uint16_t> plain_movi;                   // soup movi slots eligible for seeding
  uint32_t e_true = NO_BLOCK, e_false = NO_BLOCK, e_cont = NO_BLOCK;
  uint32_t callee = NO_BLOCK;       // function index for direct calls
  uint32_t callr_table = NO_BLOCK;  // table index for indirect calls
  std::vector<uint32_t> jtab_targets;

  uint32_t byte_size() const {
    uint32_t s = 0;
    for (const Instr& I : instrs) s += uint32_t(op_length(I.op));
    return s;
  }
};

// register roles inside one function: r_lo..r6 are locals, the first two are
// reserved for the return value and the latest capture, the rest is scratch
struct FuncCtx {
  uint8_t k = 0;
  uint8_t lo = 1;
  uint8_t ret_l = 1, cap_l = 2;
  std::vector<uint8_t> junk;

  static FuncCtx make(uint8_t k) {
    FuncCtx c;
    c.k = k;
    c.lo = uint8_t(std::max<int>(k, 1));
    c.ret_l = c.lo;
    c.cap_l = uint8_t(c.lo + 1);
    for (uint8_t r = uint8_t(c.lo + 2); r < REG_SP; ++r) c.junk.push_back(r);
    return c;
  }
};

struct Gen {
  const GenSpec& S;
  Rng rng;
  std::vector<uint32_t> pool32;
  std::vector<uint16_t> pool16;
  std::vector<FuncPlan> fns;
  std::vector<std::vector<BlockPlan>> fblocks;
  std::vector<uint32_t> island_sizes;
  std::deque<uint32_t> wrapper_site_queue;  // wrappers still owed an all-const call site
  std::vector<PointerTable> tables;         // entries are function indices
  uint32_t scratch_off = 0;                 // data offset where scratch begins
  uint32_t wrapper_first = 0;

  explicit Gen(const GenSpec& spec) : S(spec), rng(make_rng(spec.seed)) {}

  uint32_t pool_const() { return pool32[uniform_u32(rng, 0, uint32_t(pool32.size()) - 1)]; }
  uint16_t pool_const16() { return pool16[uniform_u32(rng, 0, uint32_t(pool16.size()) - 1)]; }

  uint32_t draw_block_size() {
    double v;
    if (uniform_real(rng) < S.tail_weight) {
      double u = std::max(1e-12, uniform_real(rng));
      v = S.tail_xm / std::pow(u, 1.0 / S.tail_alpha);
    } else {
      std::normal_distribution<double> n(S.blk_mu, S.blk_sigma);
      v = std::exp(n(rng));
    }
    uint32_t b = uint32_t(std::lround(std::max(1.0, v)));
    return std::min(b, S.blk_max);
  }

  uint32_t draw_fn_blocks() {
    std::normal_distribution<double> n(S.fn_mu, S.fn_sigma);
    double v = std::exp(n(rng));
    return std::min<uint32_t>(std::max<uint32_t>(1, uint32_t(std::lround(v))), S.fn_blocks_max);
  }

  uint8_t draw_params() {
    double u = uniform_real(rng);
    if (u < 0.15) return 0;
    if (u < 0.45) return 1;
    if (u < 0.75) return 2;
    if (u < 0.90) return 3;
    return 4;
  }

  // ---- structural planning --------------------------------------------------

  static bool pow2(uint32_t v) { return v != 0 && (v & (v - 1)) == 0; }

  void plan_functions() {
    if (!pow2(S.wrapper_table_entries) || !pow2(S.func_table_entries))
      throw GenError("pointer table sizes must be powers of two");
    uint32_t total = 0;
    while (total < S.target_blocks) {
      FuncPlan f;
      f.nblocks = draw_fn_blocks();
      f.k = draw_params();
      fns.push_back(f);
      total += f.nblocks;
    }
    uint32_t F = uint32_t(fns.size());
    uint32_t W = S.wrapper_table_entries;
    uint32_t I = uint32_t(std::lround(S.indirect_only_fraction * F));
    uint32_t need_tables = S.func_tables * S.func_table_entries;
    I = std::max(I, need_tables);
    if (F < W + I + S.exported_count + 8)
      throw GenError("spec too small for the requested tables/exports");

    // exported functions sit at the low indices and stay meaty so call sites
    // are plentiful; wrappers take the top indices so everyone can call them
    for (uint32_t e = 0; e < S.exported_count; ++e) {
      fns[e].flags |= FUNC_EXPORTED;
      fns[e].nblocks = std::max(fns[e].nblocks, S.exported_min_blocks);
    }
    wrapper_first = F - W;
    for (uint32_t w = wrapper_first; w < F; ++w) {
      fns[w].wrapper = true;
      fns[w].nblocks = 1;
      fns[w].k = 2;  // wrapper table arity
      fns[w].flags |= FUNC_SYS_WRAPPER | FUNC_IN_TABLE;
      wrapper_site_queue.push_back(w);
    }
    uint32_t placed = 0;
    while (placed < I) {
      uint32_t f = uniform_u32(rng, S.exported_count, wrapper_first - 1);
      if (fns[f].indirect_only) continue;
      fns[f].indirect_only = true;
      ++placed;
    }

    PointerTable wt;
    wt.argc = 2;
    for (uint32_t w = wrapper_first; w < F; ++w) wt.entries.push_back(w);
    tables.push_back(std::move(wt));

    std::vector<uint32_t> ind;
    for (uint32_t f = 0; f < F; ++f)
      if (fns[f].indirect_only) ind.push_back(f);
    std::shuffle(ind.begin(), ind.end(), rng);
    size_t at = 0;
    for (uint32_t t = 0; t < S.func_tables && at + S.func_table_entries <= ind.size(); ++t) {
      PointerTable pt;
      pt.argc = uint8_t(uniform_u32(rng, 0, 2));
      for (uint32_t e = 0; e < S.func_table_entries; ++e, ++at) {
        fns[ind[at]].k = pt.argc;  // members share the table signature
        fns[ind[at]].flags |= FUNC_IN_TABLE;
        pt.entries.push_back(ind[at]);
      }
      tables.push_back(std::move(pt));
    }

    // data layout is fixed now: tables first, scratch after. Block planning
    // needs the absolute table addresses for indirect call sequences.
    uint32_t doff = 0;
    for (auto& t : tables) {
      t.data_offset = doff;
      doff += 4 * uint32_t(t.entries.size());
    }
    scratch_off = doff;
  }

  // ---- soup -------------------------------------------------------------------

  struct BlockCtx {
    const FuncCtx* fc;
    uint8_t defined = 0;  // bitmask over junk registers written in this block
    bool cap_live = false;

    bool has_defined() const { return defined != 0; }
  };

  uint8_t pick_junk(BlockCtx& c) {
    return c.fc->junk[uniform_u32(rng, 0, uint32_t(c.fc->junk.size()) - 1)];
  }
  uint8_t pick_defined_junk(BlockCtx& c) {
    uint8_t d[8];
    uint32_t n = 0;
    for (uint8_t r : c.fc->junk)
      if (c.defined & (1 << r)) d[n++] = r;
    return d[uniform_u32(rng, 0, n - 1)];
  }
  uint8_t pick_readable(BlockCtx& c) {
    uint8_t r[8];
    uint32_t n = 0;
    r[n++] = c.fc->ret_l;
    if (c.cap_live) r[n++] = c.fc->cap_l;
    for (uint8_t j : c.fc->junk)
      if (c.defined & (1 << j)) r[n++] = j;
    return r[uniform_u32(rng, 0, n - 1)];
  }

  void fill_soup(BlockPlan& b, BlockCtx& c, uint32_t budget) {
    enum { NOP_U, TWO_U, PAIR_U, MOVIW_U, MOVI_U, IMM_U, MEM_U, ISL_U };
    struct U {
      uint32_t size;
      double w;
      int kind;
    };
    const U units[] = {
        {1, 1.0, NOP_U},  {2, 6.0, TWO_U}, {2, 2.0, PAIR_U},
        {3, 3.0, MOVIW_U}, {5, 5.0, MOVI_U}, {6, 3.0, IMM_U},
        {9, 3.0, MEM_U},  {9, island_sizes.empty() ? 0.0 : S.accessor_weight, ISL_U},
    };
    while (budget > 0) {
      double tw = 0;
      for (const U& u : units)
        if (u.size <= budget) tw += u.w;
      double pickv = uniform_real(rng) * tw;
      int kind = NOP_U;
      for (const U& u : units) {
        if (u.size > budget) continue;
        pickv -= u.w;
        if (pickv <= 0) {
          kind = u.kind;
          budget -= u.size;
          break;
        }
      }
      switch (kind) {
        case NOP_U: b.instrs.push_back({Op::NOP, 0, 0, 0, 0}); break;
        case TWO_U: {
          int choice = c.has_defined() ? int(uniform_u32(rng, 0, 2)) : int(uniform_u32(rng, 1, 2));
          if (choice == 0) {
            static const Op ops[] = {Op::ADD, Op::SUB, Op::XOR, Op::AND, Op::SHL};
            b.instrs.push_back(
                {ops[uniform_u32(rng, 0, 4)], pick_defined_junk(c), pick_readable(c), 0, 0});
          } else if (choice == 1) {
            uint8_t rd = pick_junk(c);
            b.instrs.push_back({Op::MOV, rd, pick_readable(c), 0, 0});
            c.defined |= uint8_t(1 << rd);
          } else {
            uint8_t rd = pick_junk(c);
            b.instrs.push_back({Op::MOVIB, rd, 0, uint32_t(rng()) & 0xff, 0});
            c.defined |= uint8_t(1 << rd);
          }
          break;
        }
        case PAIR_U: {
          uint8_t rs = pick_readable(c);
          uint8_t rd = pick_junk(c);
          b.instrs.push_back({Op::PUSH, 0, rs, 0, 0});
          b.instrs.push_back({Op::POP, rd, 0, 0, 0});
          c.defined |= uint8_t(1 << rd);
          break;
        }
        case MOVIW_U: {
          uint8_t rd = pick_junk(c);
          b.instrs.push_back({Op::MOVIW, rd, 0, pool_const16(), 0});
          c.defined |= uint8_t(1 << rd);
          break;
        }
        case MOVI_U: {
          uint8_t rd = pick_junk(c);
          b.plain_movi.push_back(uint16_t(b.instrs.size()));
          b.instrs.push_back({Op::MOVI, rd, 0, pool_const(), 0});
          c.defined |= uint8_t(1 << rd);
          break;
        }
        case IMM_U: {
          if (c.has_defined() && chance(rng, 0.6)) {
            static const Op ops[] = {Op::ADDI, Op::SUBI, Op::XORI};
            b.instrs.push_back(
                {ops[uniform_u32(rng, 0, 2)], pick_defined_junk(c), 0, pool_const(), 0});
          } else {
            uint8_t rd = pick_junk(c);
            b.instrs.push_back({Op::PUSHI, 0, 0, pool_const(), 0});
            b.instrs.push_back({Op::POP, rd, 0, 0, 0});
            c.defined |= uint8_t(1 << rd);
          }
          break;
        }
        case MEM_U: {
          uint8_t t = pick_junk(c);
          uint32_t off = uniform_u32(rng, 0, S.scratch_bytes - 256);
          b.instrs.push_back({Op::MOVI, t, 0, DATA_BASE + scratch_off + off, 0});
          c.defined |= uint8_t(1 << t);
          int16_t d = int16_t(uniform_u32(rng, 0, 200));
          if (chance(rng, 0.5))
            b.instrs.push_back({Op::LOAD, t, t, 0, d});
          else
            b.instrs.push_back({Op::STORE, t, pick_readable(c), 0, d});
          break;
        }
        case ISL_U: {
          uint8_t t = pick_junk(c);
          uint32_t isl = uniform_u32(rng, 0, uint32_t(island_sizes.size()) - 1);
          b.relocs.push_back({uint16_t(b.instrs.size()), isl});
          b.instrs.push_back({Op::MOVI, t, 0, 0, 0});  // island address patched at layout
          c.defined |= uint8_t(1 << t);
          int16_t d = int16_t(uniform_u32(rng, 0, island_sizes[isl] - 4));
          b.instrs.push_back({Op::LOAD, t, t, 0, d});
          break;
        }
      }
    }
  }

  // ---- call-site marshals -------------------------------------------------------

  void emit_marshals(BlockPlan& b, BlockCtx& c, uint8_t argc, bool all_const, bool in_entry) {
    struct M {
      uint8_t j;
      uint8_t kind;
      uint8_t src_param;
    };
    std::vector<M> order;
    const FuncCtx& fc = *c.fc;
    for (uint8_t j = 0; j < argc; ++j) {
      double u = uniform_real(rng);
      bool can_cap = !all_const && c.cap_live;
      bool can_own = !all_const && in_entry && fc.k > argc;
      if (can_cap && u < 0.25)
        order.push_back({j, SRC_CAPTURE, 0});
      else if (can_own && u < 0.50)
        order.push_back({j, SRC_OWN_PARAM, uint8_t(uniform_u32(rng, argc, fc.k - 1))});
      else
        order.push_back({j, SRC_CONST, 0});
    }
    // canonical emit order: capture-sourced, own-param, constants
    std::stable_sort(order.begin(), order.end(), [](const M& a, const M& b2) {
      auto rank = [](uint8_t k) { return k == SRC_CAPTURE ? 0 : k == SRC_OWN_PARAM ? 1 : 2; };
      return rank(a.kind) < rank(b2.kind);
    });
    for (const M& m : order) {
      Annotation a;
      a.instr_index = uint16_t(b.instrs.size());
      a.role = Role::marshal;
      a.index = m.j;
      a.src_kind = m.kind;
      a.src_param = m.src_param;
      b.notes.push_back(a);
      switch (m.kind) {
        case SRC_CAPTURE: b.instrs.push_back({Op::MOV, m.j, fc.cap_l, 0, 0}); break;
        case SRC_OWN_PARAM: b.instrs.push_back({Op::MOV, m.j, m.src_param, 0, 0}); break;
        default: b.instrs.push_back({Op::MOVI, m.j, 0, pool_const(), 0}); break;
      }
    }
  }

  // ---- per-function planning ------------------------------------------------------

  void plan_wrapper(uint32_t f) {
    FuncCtx fc = FuncCtx::make(fns[f].k);
    BlockPlan b;
    BlockCtx c{&fc, 0, false};
    for (uint8_t r = 1; r < REG_SP; ++r) b.instrs.push_back({Op::PUSH, 0, r, 0, 0});
    uint8_t plocal[4] = {};
    for (uint8_t i = 0; i < fns[f].k; ++i) {
      plocal[i] = uint8_t(fc.lo + i);
      Annotation a;
      a.instr_index = uint16_t(b.instrs.size());
      a.role = Role::prologue;
      a.index = i;
      b.notes.push_back(a);
      b.instrs.push_back({Op::MOV, plocal[i], i, 0, 0});
    }
    fill_soup(b, c, uniform_u32(rng, 0, 8));
    for (uint8_t i = 0; i < fns[f].k; ++i) {
      Annotation a;
      a.instr_index = uint16_t(b.instrs.size());
      a.role = Role::sys_marshal;
      a.index = i;
      b.notes.push_back(a);
      b.instrs.push_back({Op::MOV, i, plocal[i], 0, 0});
    }
    b.instrs.push_back({Op::SYS, 0, 0, 0, 0});
    for (uint8_t r = REG_SP - 1; r >= 1; --r) b.instrs.push_back({Op::POP, r, 0, 0, 0});
    b.instrs.push_back({Op::RET, 0, 0, 0, 0});
    fblocks[f].push_back(std::move(b));
  }

  // interior terminator: 0 cond, 1 call, 2 jmp, 3 jtab, 4 callr
  int choose_term(uint32_t f, const FuncCtx& fc) {
    bool can_callr = !tables.empty() && fns[f].k <= 2 && fc.junk.size() >= 3;
    bool can_jtab = fc.junk.size() >= 2;
    double wt = can_jtab ? S.p_jtab : 0, wr = can_callr ? S.p_callr : 0;
    double u = uniform_real(rng) * (S.p_cond + S.p_call + S.p_jmp + wt + wr);
    if ((u -= S.p_call) <= 0) return 1;
    if ((u -= S.p_jmp) <= 0) return 2;
    if ((u -= wt) <= 0) return 3;
    if ((u -= wr) <= 0) return 4;
    return 0;
  }

  uint32_t pick_callee(uint32_t f) {
    if (!wrapper_site_queue.empty() && chance(rng, 0.5)) {
      uint32_t w = wrapper_site_queue.front();
      wrapper_site_queue.pop_front();
      return w;
    }
    if (chance(rng, 0.04)) return uniform_u32(rng, wrapper_first, uint32_t(fns.size()) - 1);
    for (int tries = 0; tries < 64; ++tries) {
      uint32_t j = uniform_u32(rng, f + 1, uint32_t(fns.size()) - 1);
      if (!fns[j].indirect_only && !fns[j].wrapper) return j;
    }
    return uniform_u32(rng, wrapper_first, uint32_t(fns.size()) - 1);
  }

  void plan_function(uint32_t f) {
    if (fns[f].wrapper) {
      plan_wrapper(f);
      return;
    }
    const uint32_t n = fns[f].nblocks;
    FuncCtx fc = FuncCtx::make(fns[f].k);
    auto& blocks = fblocks[f];
    blocks.resize(n);

    // pre-draw byte targets with a soft cap so rel16 branches stay in range
    std::vector<uint32_t> targets(n);
    uint32_t cum = 0;
    for (auto& t : targets) {
      t = draw_block_size();
      if (cum > S.fn_bytes_soft_cap) t = std::min(t, 8u);
      cum += t;
    }

    for (uint32_t bi = 0; bi < n; ++bi) {
      BlockPlan& b = blocks[bi];
      BlockCtx c{&fc, 0, false};

      // prefix: callee saves + prologue on entry, capture on continuations
      if (bi == 0) {
        for (uint8_t r = 1; r < REG_SP; ++r) b.instrs.push_back({Op::PUSH, 0, r, 0, 0});
        if (fns[f].k > 0) {
          Annotation a;
          a.instr_index = uint16_t(b.instrs.size());
          a.role = Role::prologue;
          a.index = 0;
          b.notes.push_back(a);
          b.instrs.push_back({Op::MOV, fc.ret_l, 0, 0, 0});
        } else {
          b.instrs.push_back({Op::MOVI, fc.ret_l, 0, pool_const(), 0});
        }
      } else if (blocks[bi - 1].e_cont == bi) {
        Annotation a;
        a.instr_index = 0;
        a.role = Role::capture;
        a.index = 0;
        b.notes.push_back(a);
        b.instrs.push_back({Op::MOV, fc.cap_l, 0, 0, 0});
        c.cap_live = true;
      }

      bool is_last = bi + 1 == n;
      uint32_t target = targets[bi];
      uint32_t pre = b.byte_size();
      int term;
      bool masked_cond = false;
      if (is_last) {
        term = -1;
      } else if (target <= pre + 5) {
        // honor small draws: a bare jump or an unmasked conditional
        term = (target <= pre + 3 || chance(rng, 0.5)) ? 2 : 0;
      } else {
        term = choose_term(f, fc);
        masked_cond = term == 0 && fc.junk.size() >= 2 && target >= pre + 16 && chance(rng, 0.7);
      }

      uint32_t suffix = 0;
      uint8_t argc = 0;
      bool all_const = false;
      uint32_t callee = NO_BLOCK, ctable = NO_BLOCK;
      switch (term) {
        case -1: suffix = 2 + 6 + 1; break;
        case 0: suffix = (masked_cond ? 6u : 0u) + 4u; break;
        case 1:
          callee = pick_callee(f);
          argc = fns[callee].k;
          all_const = fns[callee].wrapper;
          suffix = 5u + uint32_t(argc) * 3u;
          break;
        case 2: suffix = 3; break;
        case 3: suffix = 10; break;
        case 4:
          ctable = uniform_u32(rng, 0, uint32_t(tables.size()) - 1);
          argc = tables[ctable].argc;
          suffix = 23u + uint32_t(argc) * 3u;
          break;
      }
      uint32_t fixed = b.byte_size() + suffix;
      fill_soup(b, c, target > fixed ? target - fixed : 0);

      switch (term) {
        case -1: {  // single exit: epilogue, restores, return
          Annotation a;
          a.instr_index = uint16_t(b.instrs.size());
          a.role = Role::epilogue;
          a.index = 0;
          b.notes.push_back(a);
          b.instrs.push_back({Op::MOV, 0, fc.ret_l, 0, 0});
          for (uint8_t r = REG_SP - 1; r >= 1; --r) b.instrs.push_back({Op::POP, r, 0, 0, 0});
          b.instrs.push_back({Op::RET, 0, 0, 0, 0});
          break;
        }
        case 0: {
          uint8_t creg;
          if (masked_cond) {
            uint8_t i = fc.junk[0], m = fc.junk[1];
            b.instrs.push_back({Op::MOV, i, pick_readable(c), 0, 0});
            b.instrs.push_back({Op::MOVIB, m, 0, chance(rng, 0.5) ? 1u : 3u, 0});
            b.instrs.push_back({Op::AND, i, m, 0, 0});
            creg = i;
          } else {
            creg = pick_readable(c);
          }
          b.instrs.push_back({chance(rng, 0.5) ? Op::JZ : Op::JNZ, 0, creg, 0, 0});
          b.e_true = uniform_u32(rng, bi + 1, n - 1);
          b.e_false = bi + 1;
          break;
        }
        case 1: {
          emit_marshals(b, c, argc, all_const, bi == 0);
          b.instrs.push_back({Op::CALL, 0, 0, 0, 0});
          b.callee = callee;
          b.e_cont = bi + 1;
          break;
        }
        case 2: {
          b.instrs.push_back({Op::JMP, 0, 0, 0, 0});
          b.e_true = bi + 1;
          break;
        }
        case 3: {
          uint32_t mask = (n - bi >= 5 && chance(rng, 0.5)) ? 3 : 1;
          uint8_t i = fc.junk[0], m = fc.junk[1];
          b.instrs.push_back({Op::MOV, i, pick_readable(c), 0, 0});
          b.instrs.push_back({Op::MOVIB, m, 0, mask, 0});
          b.instrs.push_back({Op::AND, i, m, 0, 0});
          b.instrs.push_back({Op::JTAB, 0, i, 0, 0});
          b.jtab_targets.push_back(bi + 1);
          for (uint32_t e = 1; e <= mask; ++e)
            b.jtab_targets.push_back(uniform_u32(rng, bi + 1, n - 1));
          break;
        }
        case 4: {
          uint8_t i = fc.junk[0], m = fc.junk[1], t = fc.junk[2];
          uint32_t mask = uint32_t(tables[ctable].entries.size()) - 1;
          b.instrs.push_back({Op::MOV, i, pick_readable(c), 0, 0});
          b.instrs.push_back({Op::MOVIB, m, 0, mask, 0});
          b.instrs.push_back({Op::AND, i, m, 0, 0});
          b.instrs.push_back({Op::MOVIB, m, 0, 2, 0});
          b.instrs.push_back({Op::SHL, i, m, 0, 0});
          b.instrs.push_back({Op::MOVI, t, 0, DATA_BASE + tables[ctable].data_offset, 0});
          b.instrs.push_back({Op::ADD, t, i, 0, 0});
          b.instrs.push_back({Op::LOAD, t, t, 0, 0});
          c.defined |= uint8_t((1 << i) | (1 << m) | (1 << t));
          emit_marshals(b, c, argc, false, bi == 0);
          b.instrs.push_back({Op::CALLR, 0, t, 0, 0});
          b.callr_table = ctable;
          b.e_cont = bi + 1;
          break;
        }
      }
    }
  }

  // ---- gadget seeding ----------------------------------------------------------

  void seed_gadgets() {
    struct Slot {
      uint32_t f, b;
      uint16_t idx;
    };
    std::vector<Slot> slots;
    for (uint32_t f = 0; f < fns.size(); ++f)
      for (uint32_t b = 0; b < fblocks[f].size(); ++b)
        for (uint16_t idx : fblocks[f][b].plain_movi) slots.push_back({f, b, idx});
    std::shuffle(slots.begin(), slots.end(), rng);
    size_t cursor = 0;
    auto plant = [&](uint8_t first, uint8_t second) {
      for (uint32_t inst = 0; inst < S.gadget_instances && cursor < slots.size(); ++inst) {
        Slot s = slots[cursor++];
        uint32_t pos = uniform_u32(rng, 0, 2);
        uint32_t imm = uint32_t(rng());
        imm &= ~(0xFFFFu << (8 * pos));
        imm |= (uint32_t(first) | (uint32_t(second) << 8)) << (8 * pos);
        fblocks[s.f][s.b].instrs[s.idx].imm = imm;
      }
    };
    for (uint8_t k = 0; k < 4; ++k) plant(uint8_t(enc::POP + k), enc::RET);
    plant(enc::SYS, enc::RET);
  }

  // ---- layout + assembly ----------------------------------------------------------

  Image assemble() {
    Image im;
    im.layout.data_base = DATA_BASE;
    im.layout.stack_size = S.stack_bytes;

    im.funcs.resize(fns.size());
    std::vector<std::pair<uint32_t, uint32_t>> gix;
    for (uint32_t f = 0; f < fns.size(); ++f) {
      im.funcs[f].first_block = uint32_t(gix.size());
      im.funcs[f].block_count = uint32_t(fblocks[f].size());
      im.funcs[f].param_count = fns[f].k;
      im.funcs[f].flags = fns[f].flags;
      for (uint32_t b = 0; b < fblocks[f].size(); ++b) gix.push_back({f, b});
    }
    auto gid = [&](uint32_t f, uint32_t b) { return im.funcs[f].first_block + b; };

    uint64_t code_bytes = 0, jt_bytes = 0;
    for (auto& fb : fblocks)
      for (auto& b : fb) {
        code_bytes += b.byte_size() + 4 * b.jtab_targets.size();
        jt_bytes += 4 * b.jtab_targets.size();
      }

    // grow the island set until embedded data hits the requested ratio
    uint64_t island_bytes = 0;
    for (uint32_t s : island_sizes) island_bytes += s;
    while (double(jt_bytes + island_bytes) < S.data_ratio * double(code_bytes + island_bytes)) {
      uint32_t s = std::max(8u, uniform_u32(rng, S.island_min, S.island_max) & ~3u);
      island_sizes.push_back(s);
      island_bytes += s;
    }

    // place: functions in index order, islands sprinkled between them
    std::vector<uint32_t> island_off(island_sizes.size(), 0);
    std::vector<uint32_t> boff(gix.size(), 0);
    std::vector<uint32_t> jtoff(gix.size(), 0);
    uint32_t cursor = 0;
    size_t next_island = 0;
    double island_every =
        island_sizes.empty() ? 0 : double(fns.size()) / double(island_sizes.size());
    double island_acc = 0;
    for (uint32_t f = 0; f < fns.size(); ++f) {
      for (uint32_t b = 0; b < fblocks[f].size(); ++b) {
        BlockPlan& bp = fblocks[f][b];
        boff[gid(f, b)] = cursor;
        cursor += bp.byte_size();
        if (!bp.jtab_targets.empty()) {
          jtoff[gid(f, b)] = cursor;
          cursor += 4 * uint32_t(bp.jtab_targets.size());
        }
      }
      if (island_every > 0) {
        island_acc += 1.0;
        while (island_acc >= island_every && next_island < island_sizes.size()) {
          island_acc -= island_every;
          island_off[next_island] = cursor;
          cursor += island_sizes[next_island];
          ++next_island;
        }
      }
    }
    while (next_island < island_sizes.size()) {
      island_off[next_island] = cursor;
      cursor += island_sizes[next_island];
      ++next_island;
    }
    im.layout.text_size = cursor;
    im.text.assign(cursor, GARBLE);

    im.layout.data_size = scratch_off + S.scratch_bytes;
    im.data.assign(im.layout.data_size, 0);

    // islands first: their embed index doubles as the relocation island id
    im.embeds.reserve(island_sizes.size());
    for (size_t i = 0; i < island_sizes.size(); ++i) {
      for (uint32_t k = 0; k < island_sizes[i]; ++k)
        im.text[island_off[i] + k] = uint8_t(rng());
      im.embeds.push_back({island_off[i], island_sizes[i], EmbedKind::island, NO_BLOCK});
    }

    const uint32_t base = im.layout.text_base;
    for (uint32_t f = 0; f < fns.size(); ++f) {
      for (uint32_t b = 0; b < fblocks[f].size(); ++b) {
        BlockPlan& bp = fblocks[f][b];
        uint32_t g = gid(f, b);
        uint32_t off = boff[g];
        im.blocks.push_back({off, bp.byte_size(), f});

        std::vector<uint32_t> ioff(bp.instrs.size());
        uint32_t cur = off;
        for (size_t k = 0; k < bp.instrs.size(); ++k) {
          ioff[k] = cur;
          cur += uint32_t(op_length(bp.instrs[k].op));
        }
        for (auto [idx, isl] : bp.relocs) {
          bp.instrs[idx].imm = base + island_off[isl];
          im.relocs.push_back({ioff[idx], uint32_t(isl)});
        }
        Instr& T = bp.instrs.back();
        uint32_t tpc = ioff.back();
        uint32_t next_pc = base + tpc + uint32_t(op_length(T.op));
        if (T.op == Op::JMP || T.op == Op::JZ || T.op == Op::JNZ)
          T.disp = int32_t(base + boff[gid(f, bp.e_true)]) - int32_t(next_pc);
        if (T.op == Op::CALL)
          T.disp = int32_t(base + boff[im.funcs[bp.callee].first_block]) - int32_t(next_pc);
        if (T.op == Op::JTAB) T.disp = int32_t(base + jtoff[g]) - int32_t(next_pc);

        for (size_t k = 0; k < bp.instrs.size(); ++k)
          encode(bp.instrs[k], im.text.data() + ioff[k]);

        if (!bp.jtab_targets.empty()) {
          for (size_t e = 0; e < bp.jtab_targets.size(); ++e)
            write_u32(im.text.data() + jtoff[g] + 4 * e, base + boff[gid(f, bp.jtab_targets[e])]);
          im.embeds.push_back(
              {jtoff[g], uint32_t(4 * bp.jtab_targets.size()), EmbedKind::jump_table, g});
        }

        if (T.op == Op::JMP) im.edges.push_back({g, gid(f, bp.e_true), EdgeLabel::jump, 0});
        if (T.op == Op::JZ || T.op == Op::JNZ) {
          im.edges.push_back({g, gid(f, bp.e_true), EdgeLabel::cond_true, 0});
          im.edges.push_back({g, gid(f, bp.e_false), EdgeLabel::cond_false, 0});
        }
        if (T.op == Op::CALL) {
          im.edges.push_back({g, im.funcs[bp.callee].first_block, EdgeLabel::call, 0});
          im.edges.push_back({g, gid(f, bp.e_cont), EdgeLabel::cont, 0});
        }
        if (T.op == Op::CALLR) {
          im.edges.push_back({g, NO_BLOCK, EdgeLabel::call, bp.callr_table});
          im.edges.push_back({g, gid(f, bp.e_cont), EdgeLabel::cont, 0});
        }
        if (T.op == Op::JTAB)
          for (size_t e = 0; e < bp.jtab_targets.size(); ++e)
            im.edges.push_back({g, gid(f, bp.jtab_targets[e]), EdgeLabel::table, uint32_t(e)});

        for (Annotation a : bp.notes) {
          a.block = g;
          im.annotations.push_back(a);
        }
      }
    }

    im.tables = tables;
    for (auto& t : im.tables)
      for (size_t k = 0; k < t.entries.size(); ++k)
        write_u32(im.data.data() + t.data_offset + 4 * k, im.entry_addr(t.entries[k]));

    for (uint32_t e = 0; e < S.exported_count; ++e) im.entry_points.push_back(e);
    return im;
  }

  Image build() {
    pool32.resize(S.pool_size);
    for (auto& v : pool32) v = uint32_t(rng());
    pool16.resize(std::max<uint32_t>(64, S.pool_size / 8));
    for (auto& v : pool16) v = uint16_t(rng());

    plan_functions();

    // pre-seed most of the island budget so accessors have real targets; the
    // assembly pass tops the set up to the exact ratio once code size is known
    {
      double est_code = 14.0 * double(S.target_blocks);
      double est_jtab_share = S.p_jtab * 0.54;  // fused tables eat part of the budget
      double budget = 0.6 * std::max(0.0, S.data_ratio - est_jtab_share) * est_code;
      double have = 0;
      while (have < budget) {
        uint32_t s = std::max(8u, uniform_u32(rng, S.island_min, S.island_max) & ~3u);
        island_sizes.push_back(s);
        have += s;
      }
    }

    fblocks.resize(fns.size());
    for (uint32_t f = 0; f < uint32_t(fns.size()); ++f) plan_function(f);
    if (!wrapper_site_queue.empty())
      throw GenError("not enough direct call sites to cover every wrapper");
    seed_gadgets();
    Image im = assemble();
    std::string err;
    if (!validate(im, &err)) throw GenError("generated image failed validation: " + err);
    return im;
  }
};

}  // namespace gen_detail

inline Image generate(const GenSpec& spec) {
  gen_detail::Gen g(spec);
  return g.build();
}

}  // namespace bgdx
