#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "image.hpp"
#include "process.hpp"
#include "rng.hpp"

namespace bgdx {

// ---- static profiling ---------------------------------------------------------
// Recursive-descent sweep over the raw bytes, rooted at the exported entry
// points and at every code pointer harvested from the pointer tables. Block and
// edge metadata is deliberately not consulted: classification quality has to
// come from what a disassembler could actually see. Bytes touched by decoded
// instructions become code; reads whose target address is statically computable
// (a jump table behind jtab, an in-text address built by movi and dereferenced
// by load) mark their target bytes as data. Conservative mode never follows an
// indirect transfer; aggressive mode follows recovered jump tables, accepting
// the false-positive risk that entails.

enum class StaticMode : uint8_t { conservative, aggressive };

inline Bitmap profile_static(const Image& im, StaticMode mode = StaticMode::conservative) {
  const uint32_t n = uint32_t(im.text.size());
  const uint32_t base = im.layout.text_base;
  std::vector<uint8_t> kind(n, 0);  // bit0 code, bit1 data
  std::vector<bool> swept(n, false);
  std::vector<uint32_t> work;

  auto enqueue = [&](uint32_t addr) {
    if (!im.layout.in_text(addr)) return;
    uint32_t off = addr - base;
    if (!swept[off]) {
      swept[off] = true;
      work.push_back(off);
    }
  };
  auto mark_code = [&](uint32_t off, uint32_t len) {
    for (uint32_t i = 0; i < len && off + i < n; ++i) kind[off + i] |= 1;
  };
  auto mark_data = [&](uint32_t addr, uint32_t len) {
    if (!im.layout.in_text(addr) || !im.layout.in_text(addr + len - 1)) return;
    for (uint32_t i = 0; i < len; ++i) kind[addr - base + i] |= 2;
  };

  for (uint32_t f : im.entry_points) enqueue(im.entry_addr(f));
  for (const PointerTable& t : im.tables)  // harvested from the stored pointer bytes
    for (size_t k = 0; k < t.entries.size(); ++k)
      enqueue(read_u32(im.data.data() + t.data_offset + 4 * uint32_t(k)));

  while (!work.empty()) {
    uint32_t off = work.back();
    work.pop_back();
    // per-sweep tracking: registers holding a known text address, and the two
    // previously decoded instructions (jump-table bound idiom)
    uint32_t regaddr[NUM_REGS] = {};
    uint8_t regknown = 0;
    Instr prev1, prev2;
    int seen = 0;
    bool first = true;
    while (off < n) {
      if (!first && swept[off]) break;  // merged into an already-swept run
      swept[off] = true;
      first = false;
      Decoded d = decode(im.text.data() + off, n - off);
      if (!d.ok()) break;
      const Instr& I = d.instr;
      mark_code(off, d.len);
      const uint32_t pc = base + off;
      bool stop = false;
      switch (I.op) {
        case Op::JMP:
          enqueue(rel_target(pc, I));
          stop = true;
          break;
        case Op::JZ:
        case Op::JNZ:
        case Op::CALL: enqueue(rel_target(pc, I)); break;
        case Op::RET: stop = true; break;
        case Op::CALLR: break;  // target pool already harvested; falls back here
        case Op::JTAB: {
          uint32_t tab = rel_target(pc, I);
          uint32_t entries = 1;  // entry 0 is read no matter what the index is
          bool bounded = seen >= 2 && prev1.op == Op::AND && prev1.rd == I.rs &&
                         prev2.op == Op::MOVIB && prev2.rd == prev1.rs;
          if (bounded) entries = prev2.imm + 1;
          mark_data(tab, entries * 4);
          if (mode == StaticMode::aggressive && bounded && im.layout.in_text(tab) &&
              im.layout.in_text(tab + entries * 4 - 1))
            for (uint32_t k = 0; k < entries; ++k)
              enqueue(read_u32(im.text.data() + (tab - base) + 4 * k));
          stop = true;
          break;
        }
        case Op::LOAD:
          if (regknown & (1u << I.rs)) mark_data(regaddr[I.rs] + uint32_t(I.disp), 4);
          break;
        default: break;
      }
      if (stop) break;
      regknown &= uint8_t(~def_use(I).def);
      if (I.op == Op::MOVI && im.layout.in_text(I.imm)) {
        regaddr[I.rd] = I.imm;
        regknown |= uint8_t(1u << I.rd);
      }
      prev2 = prev1;
      prev1 = I;
      if (seen < 2) ++seen;
      off += d.len;
    }
  }

  Bitmap bm = Bitmap::make(n, Policy::dcr);
  for (uint32_t i = 0; i < n; ++i) {
    if (kind[i] == 1) bm.set(i, Policy::xom);
    if (kind[i] == 2) bm.set(i, Policy::ro);
    // both claimed: stays uncertain
  }
  return bm;
}

// ---- workloads ------------------------------------------------------------------

struct WorkloadRun {
  uint32_t func = 0;
  uint32_t args[4] = {};
};

struct Workload {
  std::vector<WorkloadRun> runs;
  uint64_t fuel = 8'000'000;  // per run
};

// Deterministic exercise of the exported surface: every kept entry point gets
// runs_per_entry invocations with fresh random arguments. entry_fraction < 1
// models a test suite that only reaches part of the API.
inline Workload make_workload(const Image& im, uint64_t seed, uint32_t runs_per_entry,
                              double entry_fraction = 1.0) {
  Workload w;
  Rng rng = make_rng(derive_seed(seed, 0x9d70f11eull));
  std::vector<uint32_t> entries = im.entry_points;
  std::shuffle(entries.begin(), entries.end(), rng);
  size_t keep = std::max<size_t>(1, size_t(std::lround(entry_fraction * double(entries.size()))));
  entries.resize(std::min(entries.size(), keep));
  for (uint32_t f : entries)
    for (uint32_t r = 0; r < runs_per_entry; ++r) {
      WorkloadRun run;
      run.func = f;
      for (auto& a : run.args) a = uniform_u32(rng, 0, 0xFFFFFFFFu);
      w.runs.push_back(run);
    }
  return w;
}

// ---- dynamic profiling ------------------------------------------------------------

struct DynProfile {
  Bitmap bitmap;
  uint64_t runs = 0;
  uint32_t crashed = 0;  // runs that did not exit cleanly; their bits are kept
};

inline DynProfile profile_dynamic(const Image& im, const Workload& w) {
  const uint32_t n = uint32_t(im.text.size());
  std::vector<bool> x(n, false), r(n, false);
  DynProfile out;
  for (const WorkloadRun& run : w.runs) {
    Process p = Process::make(im, EnforceMode::none);
    Status s = p.run(im.entry_addr(run.func), run.args, w.fuel);
    if (s != Status::exited_return && s != Status::exited_syscall) out.crashed++;
    out.runs++;
    for (uint32_t i = 0; i < n; ++i) {
      if (p.exec_bytes[i]) x[i] = true;
      if (p.read_bytes[i]) r[i] = true;
    }
  }
  out.bitmap = Bitmap::make(n, Policy::dcr);
  for (uint32_t i = 0; i < n; ++i) {
    if (x[i] && !r[i]) out.bitmap.set(i, Policy::xom);
    if (r[i] && !x[i]) out.bitmap.set(i, Policy::ro);
    // observed as both: uncertain
  }
  return out;
}

// fraction of bytes carrying a definite classification
inline double classified_fraction(const Bitmap& b) {
  auto c = b.counts();
  return b.size ? double(c[size_t(Policy::ro)] + c[size_t(Policy::xom)] +
                         c[size_t(Policy::free)]) /
                      double(b.size)
                : 0.0;
}

// Replays a workload under enforcement with the given bitmap installed;
// returns how many runs failed.
inline uint32_t replay_crashes(Image im, const Workload& w, Bitmap bm, EnforceMode mode) {
  im.bitmap = std::move(bm);
  uint32_t crashed = 0;
  for (const WorkloadRun& run : w.runs) {
    Process p = Process::make(im, mode);
    Status s = p.run(im.entry_addr(run.func), run.args, w.fuel);
    if (s != Status::exited_return && s != Status::exited_syscall) crashed++;
  }
  return crashed;
}

}  // namespace bgdx
