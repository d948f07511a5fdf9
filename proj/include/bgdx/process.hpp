#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "image.hpp"

namespace bgdx {

// How the loader assigns per-byte policy to the text section.
//   none:     no enforcement at all (also the recording mode for profilers)
//   dcr_only: every byte uncertain — readable, but reads garble the code view
//   xom_only: page-style split: bytes known to be data are read-only, all the
//             rest execute-only (no uncertainty supported)
//   bgdx:     per-byte policy straight from the image's bitmap; bytes without
//             knowledge stay uncertain
enum class EnforceMode : uint8_t { none, dcr_only, xom_only, bgdx };

inline const char* mode_name(EnforceMode m) {
  switch (m) {
    case EnforceMode::none: return "none";
    case EnforceMode::dcr_only: return "dcr-only";
    case EnforceMode::xom_only: return "xom-only";
    case EnforceMode::bgdx: return "bgdx";
  }
  return "?";
}

inline std::optional<EnforceMode> parse_mode(const std::string& s) {
  if (s == "none") return EnforceMode::none;
  if (s == "dcr-only") return EnforceMode::dcr_only;
  if (s == "xom-only") return EnforceMode::xom_only;
  if (s == "bgdx") return EnforceMode::bgdx;
  return std::nullopt;
}

enum class Status : uint8_t {
  running,
  exited_return,
  exited_syscall,
  crashed_garbled_exec,  // fetched a byte whose code view was destroyed by a read
  crashed_ro_exec,       // fetched a byte the policy pins as data
  crashed_xom_read,      // read a byte the policy pins as code
  crashed_decode,        // fetched bytes that do not decode
  crashed_unmapped,      // touched an address outside every region (or wrote text)
  fuel_exhausted,
};

inline bool is_crash(Status s) {
  return s >= Status::crashed_garbled_exec && s <= Status::crashed_unmapped;
}

inline const char* status_name(Status s) {
  switch (s) {
    case Status::running: return "running";
    case Status::exited_return: return "exited-return";
    case Status::exited_syscall: return "exited-syscall";
    case Status::crashed_garbled_exec: return "crashed-garbled-execute";
    case Status::crashed_ro_exec: return "crashed-ro-execute";
    case Status::crashed_xom_read: return "crashed-xom-read";
    case Status::crashed_decode: return "crashed-decode-failure";
    case Status::crashed_unmapped: return "crashed-unmapped";
    case Status::fuel_exhausted: return "fuel-exhausted";
  }
  return "?";
}

// A return address that ends one element of a segmented invocation.
constexpr uint32_t CHAIN_MARK = 0xEE000100;

struct FetchEvent {
  uint64_t step;
  uint32_t addr;
  uint8_t len;
  char kind;  // 'X' instruction fetch, 'R' data fetch of a text byte
};

struct ChainElem {
  uint32_t addr = 0;                                        // first address to execute
  std::vector<uint32_t> stack_words;                        // popped in order by the fragment
  std::vector<std::pair<uint8_t, uint32_t>> reg_assignment;  // registers seeded up front
};

struct ChainOutcome {
  Status status = Status::running;  // `running` means every element returned cleanly
  size_t completed = 0;
};

struct Process {
  const Image* im = nullptr;
  EnforceMode mode = EnforceMode::none;

  std::vector<uint8_t> code_view;  // what instruction fetch sees (garbling mutates this)
  std::vector<uint8_t> data_view;  // what data fetch sees (immutable after load)
  std::vector<uint8_t> pol;        // effective Policy per text byte
  std::vector<bool> garbled;
  std::vector<uint8_t> data_mem, stack_mem;

  uint32_t reg[NUM_REGS] = {};
  uint32_t pc = 0;
  Status status = Status::running;
  uint64_t steps = 0;

  std::vector<bool> exec_bytes, read_bytes;  // text coverage
  uint32_t snapshot[4] = {};
  bool snapshot_valid = false;
  std::vector<FetchEvent>* trace = nullptr;

  static Process make(const Image& image, EnforceMode mode) {
    Process p;
    p.im = &image;
    p.mode = mode;
    p.code_view = image.text;
    p.data_view = image.text;
    p.data_mem = image.data;
    p.stack_mem.assign(image.layout.stack_size, 0);
    p.garbled.assign(image.text.size(), false);
    p.exec_bytes.assign(image.text.size(), false);
    p.read_bytes.assign(image.text.size(), false);
    p.pol.resize(image.text.size());
    for (uint32_t i = 0; i < image.text.size(); ++i) {
      Policy eff = Policy::free;
      switch (mode) {
        case EnforceMode::none: eff = Policy::free; break;
        case EnforceMode::dcr_only: eff = Policy::dcr; break;
        case EnforceMode::xom_only:
          eff = (image.bitmap && image.bitmap->get(i) == Policy::ro) ? Policy::ro : Policy::xom;
          break;
        case EnforceMode::bgdx: eff = image.bitmap ? image.bitmap->get(i) : Policy::dcr; break;
      }
      p.pol[i] = uint8_t(eff);
      if (eff == Policy::ro) {
        // known data: the loader destroys its code view up front
        p.code_view[i] = GARBLE;
        p.garbled[i] = true;
      }
    }
    p.reg[REG_SP] = image.layout.stack_top();
    return p;
  }

  // ---- memory ------------------------------------------------------------

  // A data-view read of one byte, shared by program loads and external probes.
  bool data_fetch(uint32_t addr, uint8_t& out) {
    const MemLayout& L = im->layout;
    if (L.in_text(addr)) {
      uint32_t i = addr - L.text_base;
      read_bytes[i] = true;
      if (trace) trace->push_back({steps, addr, 1, 'R'});
      switch (Policy(pol[i])) {
        case Policy::free: out = code_view[i]; return true;
        case Policy::ro: out = data_view[i]; return true;
        case Policy::xom: status = Status::crashed_xom_read; return false;
        case Policy::dcr:
          out = data_view[i];  // reads stay coherent: the pristine copy answers
          if (!garbled[i]) {
            garbled[i] = true;
            code_view[i] = GARBLE;
          }
          return true;
      }
      return false;
    }
    if (L.in_data(addr)) {
      out = data_mem[addr - L.data_base];
      return true;
    }
    if (L.in_stack(addr)) {
      out = stack_mem[addr - L.stack_base];
      return true;
    }
    status = Status::crashed_unmapped;
    return false;
  }

  bool read_mem32(uint32_t addr, uint32_t& out) {
    uint8_t b[4];
    for (int k = 0; k < 4; ++k)
      if (!data_fetch(addr + uint32_t(k), b[k])) return false;
    out = read_u32(b);
    return true;
  }

  bool write_mem8(uint32_t addr, uint8_t v) {
    const MemLayout& L = im->layout;
    if (L.in_data(addr)) {
      data_mem[addr - L.data_base] = v;
      return true;
    }
    if (L.in_stack(addr)) {
      stack_mem[addr - L.stack_base] = v;
      return true;
    }
    status = Status::crashed_unmapped;  // text is never writable
    return false;
  }

  bool write_mem32(uint32_t addr, uint32_t v) {
    for (int k = 0; k < 4; ++k)
      if (!write_mem8(addr + uint32_t(k), uint8_t(v >> (8 * k)))) return false;
    return true;
  }

  bool push(uint32_t v) {
    reg[REG_SP] -= 4;
    return write_mem32(reg[REG_SP], v);
  }

  bool pop(uint32_t& v) {
    if (!read_mem32(reg[REG_SP], v)) return false;
    reg[REG_SP] += 4;
    return true;
  }

  // External probe: a plain data read of [addr, addr+len). Fails (and possibly
  // kills the process) exactly as the equivalent program loads would.
  std::optional<std::vector<uint8_t>> probe(uint32_t addr, uint32_t len) {
    if (status != Status::running) return std::nullopt;
    std::vector<uint8_t> out;
    out.reserve(len);
    for (uint32_t k = 0; k < len; ++k) {
      uint8_t b;
      if (!data_fetch(addr + k, b)) return std::nullopt;
      out.push_back(b);
    }
    return out;
  }

  // ---- execution -----------------------------------------------------------

  bool exec_byte_ok(uint32_t i) {
    switch (Policy(pol[i])) {
      case Policy::ro: status = Status::crashed_ro_exec; return false;
      default: break;
    }
    if (garbled[i]) {
      status = Status::crashed_garbled_exec;
      return false;
    }
    return true;
  }

  void exec_one() {
    const MemLayout& L = im->layout;
    ++steps;
    if (!L.in_text(pc)) {
      status = Status::crashed_unmapped;
      return;
    }
    uint32_t i = pc - L.text_base;
    if (!exec_byte_ok(i)) return;
    int len = instr_length(code_view[i]);
    if (len == 0 || i + uint32_t(len) > code_view.size()) {
      status = Status::crashed_decode;
      return;
    }
    for (int k = 1; k < len; ++k)
      if (!exec_byte_ok(i + uint32_t(k))) return;
    Decoded d = decode(code_view.data() + i, size_t(len));
    if (!d.ok()) {
      status = Status::crashed_decode;
      return;
    }
    for (int k = 0; k < len; ++k) exec_bytes[i + uint32_t(k)] = true;
    if (trace) trace->push_back({steps, pc, uint8_t(len), 'X'});
    dispatch(d.instr, pc + uint32_t(len));
  }

  void dispatch(const Instr& I, uint32_t next) {
    uint32_t v;
    switch (I.op) {
      case Op::NOP: pc = next; break;
      case Op::MOVI:
      case Op::MOVIW:
      case Op::MOVIB:
        reg[I.rd] = I.imm;
        pc = next;
        break;
      case Op::MOV:
        reg[I.rd] = reg[I.rs];
        pc = next;
        break;
      case Op::ADD:
        reg[I.rd] += reg[I.rs];
        pc = next;
        break;
      case Op::SUB:
        reg[I.rd] -= reg[I.rs];
        pc = next;
        break;
      case Op::XOR:
        reg[I.rd] ^= reg[I.rs];
        pc = next;
        break;
      case Op::AND:
        reg[I.rd] &= reg[I.rs];
        pc = next;
        break;
      case Op::SHL:
        reg[I.rd] <<= (reg[I.rs] & 31);
        pc = next;
        break;
      case Op::ADDI:
        reg[I.rd] += I.imm;
        pc = next;
        break;
      case Op::SUBI:
        reg[I.rd] -= I.imm;
        pc = next;
        break;
      case Op::XORI:
        reg[I.rd] ^= I.imm;
        pc = next;
        break;
      case Op::PUSH:
        if (push(reg[I.rs])) pc = next;
        break;
      case Op::POP:
        if (pop(v)) {
          reg[I.rd] = v;
          pc = next;
        }
        break;
      case Op::PUSHI:
        if (push(I.imm)) pc = next;
        break;
      case Op::LOAD:
        if (read_mem32(reg[I.rs] + uint32_t(I.disp), v)) {
          reg[I.rd] = v;
          pc = next;
        }
        break;
      case Op::STORE:
        if (write_mem32(reg[I.rd] + uint32_t(I.disp), reg[I.rs])) pc = next;
        break;
      case Op::RET:
        if (pop(v)) pc = v;
        break;
      case Op::JMP: pc = next + uint32_t(I.disp); break;
      case Op::JZ: pc = (reg[I.rs] == 0) ? next + uint32_t(I.disp) : next; break;
      case Op::JNZ: pc = (reg[I.rs] != 0) ? next + uint32_t(I.disp) : next; break;
      case Op::CALL:
        if (push(next)) pc = next + uint32_t(I.disp);
        break;
      case Op::CALLR:
        if (push(next)) pc = reg[I.rs];
        break;
      case Op::JTAB: {
        uint32_t table = next + uint32_t(I.disp);
        if (read_mem32(table + 4 * reg[I.rs], v)) pc = v;
        break;
      }
      case Op::SYS:
        for (int k = 0; k < 4; ++k) snapshot[k] = reg[k];
        snapshot_valid = true;
        status = Status::exited_syscall;
        break;
    }
  }

  // Runs until pc lands on stop_pc, the program leaves via sys/crash, or fuel
  // runs out. Leaves status == running on a clean stop_pc arrival.
  void resume(uint32_t stop_pc, uint64_t fuel) {
    while (status == Status::running) {
      if (pc == stop_pc) return;
      if (fuel-- == 0) {
        status = Status::fuel_exhausted;
        return;
      }
      exec_one();
    }
  }

  // Calls an entry point with up to four arguments.
  Status run(uint32_t entry_addr, const uint32_t args[4], uint64_t fuel) {
    for (int k = 0; k < 4; ++k) reg[k] = args ? args[k] : 0;
    if (!push(EXIT_SENTINEL)) return status;
    pc = entry_addr;
    resume(EXIT_SENTINEL, fuel);
    if (status == Status::running) status = Status::exited_return;
    return status;
  }

  // Segmented execution: every element gets its registers seeded, its stack
  // words laid down over a chain marker, and runs until it returns to the
  // marker. A crash (or a sys exit) stops the chain.
  ChainOutcome run_chain(const std::vector<ChainElem>& chain, uint64_t fuel_per_elem) {
    ChainOutcome out;
    for (const ChainElem& el : chain) {
      if (status != Status::running) break;
      for (auto [r, val] : el.reg_assignment) reg[r & 7] = val;
      if (!push(CHAIN_MARK)) break;
      bool seeded = true;
      for (auto it = el.stack_words.rbegin(); it != el.stack_words.rend(); ++it)
        if (!push(*it)) {
          seeded = false;
          break;
        }
      if (!seeded) break;
      pc = el.addr;
      resume(CHAIN_MARK, fuel_per_elem);
      if (status == Status::running && pc == CHAIN_MARK) {
        out.completed++;
        continue;
      }
      if (status == Status::exited_syscall) out.completed++;
      break;
    }
    out.status = status;
    return out;
  }
};

}  // namespace bgdx
