#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

namespace bgdx {

constexpr int NUM_REGS = 8;
constexpr uint8_t REG_SP = 7;  // stack pointer, excluded from register permutation
constexpr uint8_t GARBLE = 0xCC;  // garble fill byte; decodes as an invalid opcode

// ---- opcode bytes ----------------------------------------------------------
// Single-byte opcodes; some carry a register in the low 3 bits (base + r).
namespace enc {
constexpr uint8_t ADD = 0x01;
constexpr uint8_t SYS = 0x0F;
constexpr uint8_t AND = 0x21;
constexpr uint8_t SUB = 0x29;
constexpr uint8_t XOR = 0x31;
constexpr uint8_t PUSH = 0x50;   // +reg
constexpr uint8_t POP = 0x58;    // +reg
constexpr uint8_t PUSHI = 0x68;
constexpr uint8_t JZ = 0x74;
constexpr uint8_t JNZ = 0x75;
constexpr uint8_t ADDI = 0x81;
constexpr uint8_t SUBI = 0x82;
constexpr uint8_t XORI = 0x83;
constexpr uint8_t STORE = 0x88;
constexpr uint8_t MOV = 0x89;
constexpr uint8_t LOAD = 0x8B;
constexpr uint8_t NOP = 0x90;
constexpr uint8_t MOVIW = 0xA0;  // +reg
constexpr uint8_t MOVIB = 0xB0;  // +reg
constexpr uint8_t MOVI = 0xB8;   // +reg
constexpr uint8_t RET = 0xC3;
constexpr uint8_t SHL = 0xD3;
constexpr uint8_t CALL = 0xE8;
constexpr uint8_t JMP = 0xE9;
constexpr uint8_t JTAB = 0xFE;
constexpr uint8_t CALLR = 0xFF;
}  // namespace enc

enum class Op : uint8_t {
  NOP, RET, SYS,
  PUSH, POP,
  MOVI, MOVIW, MOVIB,
  MOV, ADD, SUB, XOR, AND, SHL,
  ADDI, SUBI, XORI,
  LOAD, STORE,
  PUSHI,
  JMP, JZ, JNZ, CALL, CALLR, JTAB,
};

// ---- length table ----------------------------------------------------------

constexpr std::array<uint8_t, 256> make_length_table() {
  std::array<uint8_t, 256> t{};
  t[enc::NOP] = 1;
  t[enc::RET] = 1;
  t[enc::SYS] = 1;
  for (int r = 0; r < NUM_REGS; ++r) {
    t[enc::PUSH + r] = 1;
    t[enc::POP + r] = 1;
    t[enc::MOVIB + r] = 2;
    t[enc::MOVIW + r] = 3;
    t[enc::MOVI + r] = 5;
  }
  t[enc::MOV] = t[enc::ADD] = t[enc::SUB] = t[enc::XOR] = t[enc::AND] = t[enc::SHL] = 2;
  t[enc::ADDI] = t[enc::SUBI] = t[enc::XORI] = 6;
  t[enc::LOAD] = t[enc::STORE] = 4;
  t[enc::PUSHI] = 5;
  t[enc::JMP] = 3;
  t[enc::JZ] = t[enc::JNZ] = 4;
  t[enc::CALL] = 5;
  t[enc::CALLR] = 2;
  t[enc::JTAB] = 4;
  return t;
}
inline constexpr auto kLengthTable = make_length_table();

// 0 means the byte is not a valid first byte of any instruction.
constexpr int instr_length(uint8_t opcode) { return kLengthTable[opcode]; }

constexpr int valid_opcode_count() {
  int n = 0;
  for (int b = 0; b < 256; ++b)
    if (kLengthTable[b] != 0) ++n;
  return n;
}

// ---- instruction model -----------------------------------------------------

struct Instr {
  Op op = Op::NOP;
  uint8_t rd = 0;    // destination / written register (POP, MOVI*, ALU, LOAD, STORE base)
  uint8_t rs = 0;    // source register (PUSH, ALU, LOAD base, STORE value, JZ/JNZ/CALLR/JTAB)
  uint32_t imm = 0;  // immediate payload, zero-extended
  int32_t disp = 0;  // sign-extended displacement (d16 / rel16 / rel32)

  bool operator==(const Instr&) const = default;
};

inline int op_length(Op op) {
  switch (op) {
    case Op::NOP:
    case Op::RET:
    case Op::SYS:
    case Op::PUSH:
    case Op::POP: return 1;
    case Op::MOVIB:
    case Op::MOV:
    case Op::ADD:
    case Op::SUB:
    case Op::XOR:
    case Op::AND:
    case Op::SHL:
    case Op::CALLR: return 2;
    case Op::MOVIW:
    case Op::JMP: return 3;
    case Op::LOAD:
    case Op::STORE:
    case Op::JZ:
    case Op::JNZ:
    case Op::JTAB: return 4;
    case Op::MOVI:
    case Op::PUSHI:
    case Op::CALL: return 5;
    case Op::ADDI:
    case Op::SUBI:
    case Op::XORI: return 6;
  }
  return 0;
}

inline const char* op_name(Op op) {
  switch (op) {
    case Op::NOP: return "nop";
    case Op::RET: return "ret";
    case Op::SYS: return "sys";
    case Op::PUSH: return "push";
    case Op::POP: return "pop";
    case Op::MOVI: return "movi";
    case Op::MOVIW: return "moviw";
    case Op::MOVIB: return "movib";
    case Op::MOV: return "mov";
    case Op::ADD: return "add";
    case Op::SUB: return "sub";
    case Op::XOR: return "xor";
    case Op::AND: return "and";
    case Op::SHL: return "shl";
    case Op::ADDI: return "addi";
    case Op::SUBI: return "subi";
    case Op::XORI: return "xori";
    case Op::LOAD: return "load";
    case Op::STORE: return "store";
    case Op::PUSHI: return "pushi";
    case Op::JMP: return "jmp";
    case Op::JZ: return "jz";
    case Op::JNZ: return "jnz";
    case Op::CALL: return "call";
    case Op::CALLR: return "callr";
    case Op::JTAB: return "jtab";
  }
  return "?";
}

// ---- little-endian helpers -------------------------------------------------

inline uint16_t read_u16(const uint8_t* p) { return uint16_t(p[0] | (uint16_t(p[1]) << 8)); }
inline uint32_t read_u32(const uint8_t* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}
inline void write_u16(uint8_t* p, uint16_t v) {
  p[0] = uint8_t(v);
  p[1] = uint8_t(v >> 8);
}
inline void write_u32(uint8_t* p, uint32_t v) {
  p[0] = uint8_t(v);
  p[1] = uint8_t(v >> 8);
  p[2] = uint8_t(v >> 16);
  p[3] = uint8_t(v >> 24);
}

// ---- decode ----------------------------------------------------------------

enum class DecodeError : uint8_t { none, invalid_opcode, truncated, bad_register };

struct Decoded {
  Instr instr;
  uint8_t len = 0;
  DecodeError err = DecodeError::none;
  bool ok() const { return err == DecodeError::none; }
};

inline Decoded decode(const uint8_t* p, size_t avail) {
  Decoded d;
  if (avail == 0) {
    d.err = DecodeError::truncated;
    return d;
  }
  const uint8_t op = p[0];
  const int len = instr_length(op);
  if (len == 0) {
    d.err = DecodeError::invalid_opcode;
    return d;
  }
  if (size_t(len) > avail) {
    d.err = DecodeError::truncated;
    return d;
  }
  d.len = uint8_t(len);
  Instr& I = d.instr;

  // rr byte: bits [2:0] = rd, [5:3] = rs, [7:6] must be zero.
  auto rr = [&](uint8_t b) {
    if (b & 0xC0) return false;
    I.rd = b & 7;
    I.rs = (b >> 3) & 7;
    return true;
  };
  // r byte: bits [2:0] = register, [7:3] must be zero.
  auto rd1 = [&](uint8_t b) {
    if (b & 0xF8) return false;
    I.rd = b & 7;
    return true;
  };
  auto rs1 = [&](uint8_t b) {
    if (b & 0xF8) return false;
    I.rs = b & 7;
    return true;
  };
  auto bad = [&] {
    d.err = DecodeError::bad_register;
    return d;
  };

  if (op >= enc::PUSH && op < enc::PUSH + 8) {
    I.op = Op::PUSH;
    I.rs = op & 7;
    return d;
  }
  if (op >= enc::POP && op < enc::POP + 8) {
    I.op = Op::POP;
    I.rd = op & 7;
    return d;
  }
  if (op >= enc::MOVIW && op < enc::MOVIW + 8) {
    I.op = Op::MOVIW;
    I.rd = op & 7;
    I.imm = read_u16(p + 1);
    return d;
  }
  if (op >= enc::MOVIB && op < enc::MOVIB + 8) {
    I.op = Op::MOVIB;
    I.rd = op & 7;
    I.imm = p[1];
    return d;
  }
  if (op >= enc::MOVI && op < enc::MOVI + 8) {
    I.op = Op::MOVI;
    I.rd = op & 7;
    I.imm = read_u32(p + 1);
    return d;
  }

  switch (op) {
    case enc::NOP: I.op = Op::NOP; return d;
    case enc::RET: I.op = Op::RET; return d;
    case enc::SYS: I.op = Op::SYS; return d;
    case enc::MOV: I.op = Op::MOV; if (!rr(p[1])) return bad(); return d;
    case enc::ADD: I.op = Op::ADD; if (!rr(p[1])) return bad(); return d;
    case enc::SUB: I.op = Op::SUB; if (!rr(p[1])) return bad(); return d;
    case enc::XOR: I.op = Op::XOR; if (!rr(p[1])) return bad(); return d;
    case enc::AND: I.op = Op::AND; if (!rr(p[1])) return bad(); return d;
    case enc::SHL: I.op = Op::SHL; if (!rr(p[1])) return bad(); return d;
    case enc::ADDI: I.op = Op::ADDI; if (!rd1(p[1])) return bad(); I.imm = read_u32(p + 2); return d;
    case enc::SUBI: I.op = Op::SUBI; if (!rd1(p[1])) return bad(); I.imm = read_u32(p + 2); return d;
    case enc::XORI: I.op = Op::XORI; if (!rd1(p[1])) return bad(); I.imm = read_u32(p + 2); return d;
    case enc::LOAD:
      I.op = Op::LOAD;
      if (!rr(p[1])) return bad();
      I.disp = int16_t(read_u16(p + 2));
      return d;
    case enc::STORE:
      I.op = Op::STORE;
      if (!rr(p[1])) return bad();
      I.disp = int16_t(read_u16(p + 2));
      return d;
    case enc::PUSHI: I.op = Op::PUSHI; I.imm = read_u32(p + 1); return d;
    case enc::JMP: I.op = Op::JMP; I.disp = int16_t(read_u16(p + 1)); return d;
    case enc::JZ:
      I.op = Op::JZ;
      if (!rs1(p[1])) return bad();
      I.disp = int16_t(read_u16(p + 2));
      return d;
    case enc::JNZ:
      I.op = Op::JNZ;
      if (!rs1(p[1])) return bad();
      I.disp = int16_t(read_u16(p + 2));
      return d;
    case enc::CALL: I.op = Op::CALL; I.disp = int32_t(read_u32(p + 1)); return d;
    case enc::CALLR: I.op = Op::CALLR; if (!rs1(p[1])) return bad(); return d;
    case enc::JTAB:
      I.op = Op::JTAB;
      if (!rs1(p[1])) return bad();
      I.disp = int16_t(read_u16(p + 2));
      return d;
    default: break;
  }
  d.err = DecodeError::invalid_opcode;  // unreachable if the length table is consistent
  return d;
}

// ---- encode ----------------------------------------------------------------

inline int encode(const Instr& I, uint8_t* out) {
  switch (I.op) {
    case Op::NOP: out[0] = enc::NOP; return 1;
    case Op::RET: out[0] = enc::RET; return 1;
    case Op::SYS: out[0] = enc::SYS; return 1;
    case Op::PUSH: out[0] = enc::PUSH + (I.rs & 7); return 1;
    case Op::POP: out[0] = enc::POP + (I.rd & 7); return 1;
    case Op::MOVI:
      out[0] = enc::MOVI + (I.rd & 7);
      write_u32(out + 1, I.imm);
      return 5;
    case Op::MOVIW:
      out[0] = enc::MOVIW + (I.rd & 7);
      write_u16(out + 1, uint16_t(I.imm));
      return 3;
    case Op::MOVIB:
      out[0] = enc::MOVIB + (I.rd & 7);
      out[1] = uint8_t(I.imm);
      return 2;
    case Op::MOV:
    case Op::ADD:
    case Op::SUB:
    case Op::XOR:
    case Op::AND:
    case Op::SHL: {
      uint8_t opc = 0;
      switch (I.op) {
        case Op::MOV: opc = enc::MOV; break;
        case Op::ADD: opc = enc::ADD; break;
        case Op::SUB: opc = enc::SUB; break;
        case Op::XOR: opc = enc::XOR; break;
        case Op::AND: opc = enc::AND; break;
        default: opc = enc::SHL; break;
      }
      out[0] = opc;
      out[1] = uint8_t((I.rd & 7) | ((I.rs & 7) << 3));
      return 2;
    }
    case Op::ADDI:
    case Op::SUBI:
    case Op::XORI:
      out[0] = I.op == Op::ADDI ? enc::ADDI : I.op == Op::SUBI ? enc::SUBI : enc::XORI;
      out[1] = I.rd & 7;
      write_u32(out + 2, I.imm);
      return 6;
    case Op::LOAD:
    case Op::STORE:
      out[0] = I.op == Op::LOAD ? enc::LOAD : enc::STORE;
      out[1] = uint8_t((I.rd & 7) | ((I.rs & 7) << 3));
      write_u16(out + 2, uint16_t(uint32_t(I.disp)));
      return 4;
    case Op::PUSHI:
      out[0] = enc::PUSHI;
      write_u32(out + 1, I.imm);
      return 5;
    case Op::JMP:
      out[0] = enc::JMP;
      write_u16(out + 1, uint16_t(uint32_t(I.disp)));
      return 3;
    case Op::JZ:
    case Op::JNZ:
      out[0] = I.op == Op::JZ ? enc::JZ : enc::JNZ;
      out[1] = I.rs & 7;
      write_u16(out + 2, uint16_t(uint32_t(I.disp)));
      return 4;
    case Op::CALL:
      out[0] = enc::CALL;
      write_u32(out + 1, uint32_t(I.disp));
      return 5;
    case Op::CALLR:
      out[0] = enc::CALLR;
      out[1] = I.rs & 7;
      return 2;
    case Op::JTAB:
      out[0] = enc::JTAB;
      out[1] = I.rs & 7;
      write_u16(out + 2, uint16_t(uint32_t(I.disp)));
      return 4;
  }
  return 0;
}

inline std::vector<uint8_t> encode_vec(const Instr& I) {
  std::vector<uint8_t> v(size_t(op_length(I.op)));
  encode(I, v.data());
  return v;
}

// ---- gap bits --------------------------------------------------------------
// Bits of the encoding that hold register numbers. Any value of these bits
// (subject to the must-be-zero high bits, which the mask excludes) decodes to
// a valid instruction of identical length and form.

inline void gap_mask(Op op, uint8_t* mask, int len) {
  std::memset(mask, 0, size_t(len));
  switch (op) {
    case Op::PUSH:
    case Op::POP:
    case Op::MOVI:
    case Op::MOVIW:
    case Op::MOVIB: mask[0] = 0x07; break;
    case Op::MOV:
    case Op::ADD:
    case Op::SUB:
    case Op::XOR:
    case Op::AND:
    case Op::SHL:
    case Op::LOAD:
    case Op::STORE: mask[1] = 0x3F; break;
    case Op::ADDI:
    case Op::SUBI:
    case Op::XORI:
    case Op::JZ:
    case Op::JNZ:
    case Op::CALLR:
    case Op::JTAB: mask[1] = 0x07; break;
    default: break;
  }
}

// Rewrites every register field of one encoded instruction through perm.
// perm[REG_SP] must equal REG_SP when stack integrity matters; callers enforce it.
inline bool rewrite_regs(uint8_t* bytes, size_t avail, const uint8_t perm[NUM_REGS]) {
  Decoded d = decode(bytes, avail);
  if (!d.ok()) return false;
  Instr I = d.instr;
  I.rd = perm[I.rd & 7];
  I.rs = perm[I.rs & 7];
  encode(I, bytes);
  return true;
}

// ---- classification --------------------------------------------------------

enum class TermKind : uint8_t { none, jump, cond, call_direct, call_indirect, ret, table };

inline TermKind term_kind(Op op) {
  switch (op) {
    case Op::JMP: return TermKind::jump;
    case Op::JZ:
    case Op::JNZ: return TermKind::cond;
    case Op::CALL: return TermKind::call_direct;
    case Op::CALLR: return TermKind::call_indirect;
    case Op::RET: return TermKind::ret;
    case Op::JTAB: return TermKind::table;
    default: return TermKind::none;
  }
}

inline bool is_terminator(Op op) { return term_kind(op) != TermKind::none; }

// Target of a PC-relative control transfer (or the table address for JTAB),
// given the address of the instruction itself.
inline uint32_t rel_target(uint32_t pc, const Instr& I) {
  return pc + uint32_t(op_length(I.op)) + uint32_t(I.disp);
}

// ---- def/use (for reorder legality) ----------------------------------------

struct DefUse {
  uint8_t def = 0;  // bitmask of written registers
  uint8_t use = 0;  // bitmask of read registers
  bool mem_read = false;
  bool mem_write = false;

  bool touches_mem() const { return mem_read || mem_write; }
};

inline DefUse def_use(const Instr& I) {
  DefUse du;
  auto D = [&](unsigned r) { du.def |= uint8_t(1u << r); };
  auto U = [&](unsigned r) { du.use |= uint8_t(1u << r); };
  switch (I.op) {
    case Op::NOP: break;
    case Op::RET:
      U(REG_SP);
      D(REG_SP);
      du.mem_read = true;
      break;
    case Op::SYS:
      U(0); U(1); U(2); U(3);
      break;
    case Op::PUSH:
      U(I.rs);
      U(REG_SP);
      D(REG_SP);
      du.mem_write = true;
      break;
    case Op::POP:
      D(I.rd);
      U(REG_SP);
      D(REG_SP);
      du.mem_read = true;
      break;
    case Op::PUSHI:
      U(REG_SP);
      D(REG_SP);
      du.mem_write = true;
      break;
    case Op::MOVI:
    case Op::MOVIW:
    case Op::MOVIB: D(I.rd); break;
    case Op::MOV:
      D(I.rd);
      U(I.rs);
      break;
    case Op::ADD:
    case Op::SUB:
    case Op::XOR:
    case Op::AND:
    case Op::SHL:
      D(I.rd);
      U(I.rd);
      U(I.rs);
      break;
    case Op::ADDI:
    case Op::SUBI:
    case Op::XORI:
      D(I.rd);
      U(I.rd);
      break;
    case Op::LOAD:
      D(I.rd);
      U(I.rs);
      du.mem_read = true;
      break;
    case Op::STORE:
      U(I.rd);
      U(I.rs);
      du.mem_write = true;
      break;
    case Op::JMP: break;
    case Op::JZ:
    case Op::JNZ: U(I.rs); break;
    case Op::CALL:
      U(REG_SP);
      D(REG_SP);
      du.mem_write = true;
      break;
    case Op::CALLR:
      U(I.rs);
      U(REG_SP);
      D(REG_SP);
      du.mem_write = true;
      break;
    case Op::JTAB:
      U(I.rs);
      du.mem_read = true;
      break;
  }
  return du;
}

// ---- semantics-preserving rewrites ------------------------------------------
// Each candidate is a replacement sequence with identical net register effect.
// Stack-manipulating and control-flow instructions are never rewritten, and the
// stack pointer never participates.

inline std::vector<std::vector<Instr>> substitution_candidates(const Instr& I, uint32_t mask) {
  std::vector<std::vector<Instr>> out;
  switch (I.op) {
    case Op::ADDI:
      if (I.rd != REG_SP) out.push_back({Instr{Op::SUBI, I.rd, 0, uint32_t(0) - I.imm, 0}});
      break;
    case Op::SUBI:
      if (I.rd != REG_SP) out.push_back({Instr{Op::ADDI, I.rd, 0, uint32_t(0) - I.imm, 0}});
      break;
    case Op::MOV:
      if (I.rd != I.rs && I.rd != REG_SP && I.rs != REG_SP)
        out.push_back({Instr{Op::XOR, I.rd, I.rd, 0, 0}, Instr{Op::ADD, I.rd, I.rs, 0, 0}});
      break;
    case Op::MOVI:
      if (I.rd != REG_SP && mask != 0)
        out.push_back({Instr{Op::MOVI, I.rd, 0, I.imm ^ mask, 0}, Instr{Op::XORI, I.rd, 0, mask, 0}});
      break;
    case Op::XOR:
      if (I.rd == I.rs && I.rd != REG_SP) out.push_back({Instr{Op::MOVI, I.rd, 0, 0, 0}});
      break;
    default: break;
  }
  return out;
}

// ---- debug formatting --------------------------------------------------------

inline std::string to_string(const Instr& I) {
  char buf[64];
  switch (I.op) {
    case Op::NOP:
    case Op::RET:
    case Op::SYS: std::snprintf(buf, sizeof buf, "%s", op_name(I.op)); break;
    case Op::PUSH: std::snprintf(buf, sizeof buf, "push r%u", I.rs); break;
    case Op::POP: std::snprintf(buf, sizeof buf, "pop r%u", I.rd); break;
    case Op::MOVI:
    case Op::MOVIW:
    case Op::MOVIB:
      std::snprintf(buf, sizeof buf, "%s r%u, 0x%x", op_name(I.op), I.rd, I.imm);
      break;
    case Op::MOV:
    case Op::ADD:
    case Op::SUB:
    case Op::XOR:
    case Op::AND:
    case Op::SHL:
      std::snprintf(buf, sizeof buf, "%s r%u, r%u", op_name(I.op), I.rd, I.rs);
      break;
    case Op::ADDI:
    case Op::SUBI:
    case Op::XORI:
      std::snprintf(buf, sizeof buf, "%s r%u, 0x%x", op_name(I.op), I.rd, I.imm);
      break;
    case Op::LOAD: std::snprintf(buf, sizeof buf, "load r%u, [r%u%+d]", I.rd, I.rs, I.disp); break;
    case Op::STORE: std::snprintf(buf, sizeof buf, "store [r%u%+d], r%u", I.rd, I.disp, I.rs); break;
    case Op::PUSHI: std::snprintf(buf, sizeof buf, "pushi 0x%x", I.imm); break;
    case Op::JMP: std::snprintf(buf, sizeof buf, "jmp %+d", I.disp); break;
    case Op::JZ:
    case Op::JNZ: std::snprintf(buf, sizeof buf, "%s r%u, %+d", op_name(I.op), I.rs, I.disp); break;
    case Op::CALL: std::snprintf(buf, sizeof buf, "call %+d", I.disp); break;
    case Op::CALLR: std::snprintf(buf, sizeof buf, "callr r%u", I.rs); break;
    case Op::JTAB: std::snprintf(buf, sizeof buf, "jtab r%u, %+d", I.rs, I.disp); break;
    default: std::snprintf(buf, sizeof buf, "?"); break;
  }
  return buf;
}

}  // namespace bgdx
