#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <set>

#include "bgdx/isa.hpp"
#include "bgdx/rng.hpp"

using namespace bgdx;

namespace {

// Minimal register-file interpreter for the rewrite catalog. None of the
// rewritable instructions touch memory or control flow.
struct MiniState {
  uint32_t r[NUM_REGS] = {};
};

void mini_step(MiniState& s, const Instr& I) {
  switch (I.op) {
    case Op::NOP: break;
    case Op::MOV: s.r[I.rd] = s.r[I.rs]; break;
    case Op::ADD: s.r[I.rd] += s.r[I.rs]; break;
    case Op::SUB: s.r[I.rd] -= s.r[I.rs]; break;
    case Op::XOR: s.r[I.rd] ^= s.r[I.rs]; break;
    case Op::AND: s.r[I.rd] &= s.r[I.rs]; break;
    case Op::SHL: s.r[I.rd] <<= (s.r[I.rs] & 31); break;
    case Op::MOVI: s.r[I.rd] = I.imm; break;
    case Op::MOVIW: s.r[I.rd] = I.imm & 0xffff; break;
    case Op::MOVIB: s.r[I.rd] = I.imm & 0xff; break;
    case Op::ADDI: s.r[I.rd] += I.imm; break;
    case Op::SUBI: s.r[I.rd] -= I.imm; break;
    case Op::XORI: s.r[I.rd] ^= I.imm; break;
    default: FAIL("mini interpreter fed an unsupported op");
  }
}

Instr random_instr(Rng& rng) {
  // every form, uniform-ish
  static const Op forms[] = {Op::NOP,  Op::RET,  Op::SYS,   Op::PUSH,  Op::POP,  Op::MOVI,
                             Op::MOVIW, Op::MOVIB, Op::MOV,  Op::ADD,   Op::SUB,  Op::XOR,
                             Op::AND,  Op::SHL,  Op::ADDI,  Op::SUBI,  Op::XORI, Op::LOAD,
                             Op::STORE, Op::PUSHI, Op::JMP,  Op::JZ,    Op::JNZ,  Op::CALL,
                             Op::CALLR, Op::JTAB};
  Instr I;
  I.op = forms[uniform_u32(rng, 0, std::size(forms) - 1)];
  I.rd = uint8_t(uniform_u32(rng, 0, 7));
  I.rs = uint8_t(uniform_u32(rng, 0, 7));
  switch (I.op) {
    case Op::MOVI:
    case Op::PUSHI:
    case Op::ADDI:
    case Op::SUBI:
    case Op::XORI: I.imm = uint32_t(rng()); break;
    case Op::MOVIW: I.imm = uint32_t(rng()) & 0xffff; break;
    case Op::MOVIB: I.imm = uint32_t(rng()) & 0xff; break;
    default: break;
  }
  switch (I.op) {
    case Op::LOAD:
    case Op::STORE:
    case Op::JMP:
    case Op::JZ:
    case Op::JNZ:
    case Op::JTAB: I.disp = int16_t(uint16_t(rng())); break;
    case Op::CALL: I.disp = int32_t(uint32_t(rng())); break;
    default: break;
  }
  return I;
}

}  // namespace

TEST_CASE("opcode space density", "[isa]") {
  // valid first bytes: 3 singles + 5 register families of 8 + 6 rr-ALU +
  // 3 imm-ALU + load/store + pushi + 6 control = 61
  CHECK(valid_opcode_count() == 61);
  CHECK_THAT(valid_opcode_count() / 256.0, Catch::Matchers::WithinAbs(0.238, 0.002));
  // the garble byte must never start a valid instruction
  CHECK(instr_length(GARBLE) == 0);
}

TEST_CASE("encode/decode round trip", "[isa]") {
  auto rng = make_rng(101);
  for (int iter = 0; iter < 20000; ++iter) {
    Instr I = random_instr(rng);
    uint8_t buf[8] = {};
    int len = encode(I, buf);
    REQUIRE(len == op_length(I.op));
    REQUIRE(len == instr_length(buf[0]));

    Decoded d = decode(buf, size_t(len));
    REQUIRE(d.ok());
    CHECK(d.len == len);
    CHECK(d.instr.op == I.op);
    // compare only the fields the form carries
    uint8_t re[8] = {};
    int len2 = encode(d.instr, re);
    REQUIRE(len2 == len);
    CHECK(std::memcmp(buf, re, size_t(len)) == 0);
  }
}

TEST_CASE("truncated buffers are reported", "[isa]") {
  auto rng = make_rng(102);
  for (int iter = 0; iter < 2000; ++iter) {
    Instr I = random_instr(rng);
    uint8_t buf[8] = {};
    int len = encode(I, buf);
    for (int avail = 0; avail < len; ++avail) {
      Decoded d = decode(buf, size_t(avail));
      REQUIRE_FALSE(d.ok());
      CHECK(d.err == DecodeError::truncated);
    }
  }
}

TEST_CASE("register-byte high bits must be zero", "[isa]") {
  // rr forms: bits 6..7 reserved
  for (uint8_t opc : {enc::MOV, enc::ADD, enc::SUB, enc::XOR, enc::AND, enc::SHL, enc::LOAD, enc::STORE}) {
    uint8_t buf[8] = {opc, 0x3F, 0, 0, 0, 0, 0, 0};
    REQUIRE(decode(buf, 8).ok());
    for (uint8_t hi : {0x40, 0x80, 0xC0}) {
      buf[1] = uint8_t(0x3F | hi);
      Decoded d = decode(buf, 8);
      REQUIRE_FALSE(d.ok());
      CHECK(d.err == DecodeError::bad_register);
    }
  }
  // r forms: bits 3..7 reserved
  for (uint8_t opc : {enc::ADDI, enc::SUBI, enc::XORI, enc::JZ, enc::JNZ, enc::CALLR, enc::JTAB}) {
    uint8_t buf[8] = {opc, 0x07, 0, 0, 0, 0, 0, 0};
    REQUIRE(decode(buf, 8).ok());
    buf[1] = 0x08;
    CHECK(decode(buf, 8).err == DecodeError::bad_register);
    buf[1] = 0xF8;
    CHECK(decode(buf, 8).err == DecodeError::bad_register);
  }
}

TEST_CASE("gap bits accept any register value", "[isa]") {
  auto rng = make_rng(103);
  for (int iter = 0; iter < 5000; ++iter) {
    Instr I = random_instr(rng);
    uint8_t buf[8] = {};
    int len = encode(I, buf);
    uint8_t mask[8] = {};
    gap_mask(I.op, mask, len);
    for (int byte = 0; byte < len; ++byte) {
      for (int bit = 0; bit < 8; ++bit) {
        if (!(mask[byte] & (1 << bit))) continue;
        uint8_t mut[8];
        std::memcpy(mut, buf, 8);
        mut[byte] ^= uint8_t(1 << bit);
        Decoded d = decode(mut, size_t(len));
        REQUIRE(d.ok());
        CHECK(d.len == len);
        CHECK(d.instr.op == I.op);  // same form, different registers
      }
    }
  }
}

TEST_CASE("gap masks match the encoding layout", "[isa]") {
  uint8_t m[8];

  gap_mask(Op::PUSH, m, 1);
  CHECK(m[0] == 0x07);
  gap_mask(Op::MOVI, m, 5);
  CHECK(m[0] == 0x07);
  CHECK((m[1] | m[2] | m[3] | m[4]) == 0);

  gap_mask(Op::ADD, m, 2);
  CHECK(m[0] == 0x00);
  CHECK(m[1] == 0x3F);
  gap_mask(Op::LOAD, m, 4);
  CHECK(m[1] == 0x3F);
  CHECK((m[2] | m[3]) == 0);

  gap_mask(Op::ADDI, m, 6);
  CHECK(m[1] == 0x07);
  gap_mask(Op::JZ, m, 4);
  CHECK(m[1] == 0x07);

  gap_mask(Op::JMP, m, 3);
  CHECK((m[0] | m[1] | m[2]) == 0);
  gap_mask(Op::RET, m, 1);
  CHECK(m[0] == 0);
  gap_mask(Op::PUSHI, m, 5);
  CHECK((m[0] | m[1] | m[2] | m[3] | m[4]) == 0);
}

TEST_CASE("register rewrite through gap bits", "[isa]") {
  auto rng = make_rng(104);
  for (int iter = 0; iter < 5000; ++iter) {
    Instr I = random_instr(rng);
    uint8_t buf[8] = {};
    int len = encode(I, buf);

    uint8_t perm[NUM_REGS] = {3, 0, 5, 1, 6, 2, 4, 7};  // fixes sp
    uint8_t mut[8];
    std::memcpy(mut, buf, 8);
    REQUIRE(rewrite_regs(mut, size_t(len), perm));

    Decoded d = decode(mut, size_t(len));
    REQUIRE(d.ok());
    CHECK(d.instr.op == I.op);
    // rewritten bytes differ from the original only in gap bits
    uint8_t mask[8] = {};
    gap_mask(I.op, mask, len);
    for (int i = 0; i < len; ++i) CHECK((uint8_t(buf[i] ^ mut[i]) & ~mask[i]) == 0);
    if (I.op == Op::SYS) {
      // sys reads architectural r0..r3, not encoded fields: nothing to rewrite
      CHECK(std::memcmp(buf, mut, size_t(len)) == 0);
      continue;
    }
    // encoded register fields went through the permutation (sp is fixed, so
    // implicit stack effects line up too)
    DefUse orig = def_use(I), rew = def_use(d.instr);
    uint8_t expect_def = 0, expect_use = 0;
    for (int r = 0; r < NUM_REGS; ++r) {
      if (orig.def & (1 << r)) expect_def |= uint8_t(1 << perm[r]);
      if (orig.use & (1 << r)) expect_use |= uint8_t(1 << perm[r]);
    }
    CHECK(rew.def == expect_def);
    CHECK(rew.use == expect_use);
  }
}

TEST_CASE("terminator classification", "[isa]") {
  CHECK(term_kind(Op::JMP) == TermKind::jump);
  CHECK(term_kind(Op::JZ) == TermKind::cond);
  CHECK(term_kind(Op::JNZ) == TermKind::cond);
  CHECK(term_kind(Op::CALL) == TermKind::call_direct);
  CHECK(term_kind(Op::CALLR) == TermKind::call_indirect);
  CHECK(term_kind(Op::RET) == TermKind::ret);
  CHECK(term_kind(Op::JTAB) == TermKind::table);
  // sys transfers to the host, not within the program: not a block terminator
  CHECK(term_kind(Op::SYS) == TermKind::none);
  CHECK_FALSE(is_terminator(Op::SYS));
  CHECK_FALSE(is_terminator(Op::ADD));
}

TEST_CASE("relative targets are end-of-instruction based", "[isa]") {
  Instr jmp{Op::JMP, 0, 0, 0, -3};
  CHECK(rel_target(0x1000, jmp) == 0x1000);  // self-loop: 0x1000 + 3 + (-3)
  Instr call{Op::CALL, 0, 0, 0, 0x100};
  CHECK(rel_target(0x2000, call) == 0x2000 + 5 + 0x100);
  Instr jz{Op::JZ, 0, 2, 0, -20};
  CHECK(rel_target(0x3000, jz) == 0x3000 + 4 - 20);
}

TEST_CASE("unintended instructions inside immediates", "[isa]") {
  // a pop/ret pair hidden in a movi immediate: the classic embedded sequence
  for (int k = 0; k < 4; ++k) {
    Instr I{Op::MOVI, 1, 0, uint32_t(0x58 + k) | (uint32_t(enc::RET) << 8), 0};
    uint8_t buf[8] = {};
    int len = encode(I, buf);
    REQUIRE(len == 5);

    // brute-force scan of every interior offset
    struct Hit {
      int off;
      Op op;
    };
    std::vector<Hit> hits;
    for (int off = 1; off < len; ++off) {
      Decoded d = decode(buf + off, size_t(len - off));
      if (d.ok()) hits.push_back({off, d.instr.op});
    }
    // offset 1: pop rk; offset 2: ret
    REQUIRE(hits.size() >= 2);
    CHECK(hits[0].off == 1);
    CHECK(hits[0].op == Op::POP);
    Decoded pop = decode(buf + 1, 4);
    CHECK(pop.instr.rd == k);
    CHECK(pop.len == 1);
    CHECK(hits[1].off == 2);
    CHECK(hits[1].op == Op::RET);
  }
  // sys/ret pair
  Instr I{Op::MOVI, 2, 0, uint32_t(enc::SYS) | (uint32_t(enc::RET) << 8), 0};
  uint8_t buf[8] = {};
  encode(I, buf);
  Decoded s = decode(buf + 1, 4);
  REQUIRE(s.ok());
  CHECK(s.instr.op == Op::SYS);
  Decoded r = decode(buf + 2, 3);
  REQUIRE(r.ok());
  CHECK(r.instr.op == Op::RET);
}

TEST_CASE("rewrite catalog preserves register semantics", "[isa]") {
  auto rng = make_rng(105);
  int exercised = 0;
  for (int iter = 0; iter < 1000; ++iter) {
    // draw an instruction eligible for at least one rewrite
    Instr I;
    switch (uniform_u32(rng, 0, 4)) {
      case 0: I = Instr{Op::ADDI, uint8_t(uniform_u32(rng, 0, 6)), 0, uint32_t(rng()), 0}; break;
      case 1: I = Instr{Op::SUBI, uint8_t(uniform_u32(rng, 0, 6)), 0, uint32_t(rng()), 0}; break;
      case 2: {
        uint8_t rd = uint8_t(uniform_u32(rng, 0, 6));
        uint8_t rs = uint8_t(uniform_u32(rng, 0, 6));
        I = Instr{Op::MOV, rd, rs, 0, 0};
        break;
      }
      case 3: I = Instr{Op::MOVI, uint8_t(uniform_u32(rng, 0, 6)), 0, uint32_t(rng()), 0}; break;
      default: {
        uint8_t r = uint8_t(uniform_u32(rng, 0, 6));
        I = Instr{Op::XOR, r, r, 0, 0};
        break;
      }
    }
    uint32_t mask = uint32_t(rng());
    auto cands = substitution_candidates(I, mask);
    if (I.op == Op::MOV && I.rd == I.rs) {
      CHECK(cands.empty());  // mov r,r has no safe two-step rewrite
      continue;
    }
    REQUIRE_FALSE(cands.empty());
    for (auto& seq : cands) {
      ++exercised;
      MiniState a, b;
      for (int r = 0; r < NUM_REGS; ++r) a.r[r] = b.r[r] = uint32_t(rng());
      mini_step(a, I);
      for (auto& J : seq) mini_step(b, J);
      for (int r = 0; r < NUM_REGS; ++r) {
        INFO(to_string(I) << " vs rewrite, reg " << r);
        REQUIRE(a.r[r] == b.r[r]);
      }
      // replacements never touch the stack pointer or memory
      for (auto& J : seq) {
        DefUse du = def_use(J);
        CHECK((du.def & (1 << REG_SP)) == 0);
        CHECK_FALSE(du.touches_mem());
        CHECK_FALSE(is_terminator(J.op));
      }
    }
  }
  CHECK(exercised > 500);
}

TEST_CASE("edge-case immediates in the rewrite catalog", "[isa]") {
  // INT_MIN-style immediate: -imm wraps onto itself
  Instr I{Op::ADDI, 3, 0, 0x80000000u, 0};
  auto cands = substitution_candidates(I, 0);
  REQUIRE(cands.size() == 1);
  MiniState a, b;
  a.r[3] = b.r[3] = 0x7fffffff;
  mini_step(a, I);
  for (auto& J : cands[0]) mini_step(b, J);
  CHECK(a.r[3] == b.r[3]);

  // zero immediate
  Instr Z{Op::SUBI, 2, 0, 0, 0};
  auto cz = substitution_candidates(Z, 0);
  REQUIRE(cz.size() == 1);
  MiniState c, d;
  c.r[2] = d.r[2] = 42;
  mini_step(c, Z);
  for (auto& J : cz[0]) mini_step(d, J);
  CHECK(c.r[2] == d.r[2]);
}

TEST_CASE("deterministic seed derivation", "[rng]") {
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));
  // derived streams diverge immediately
  auto a = make_rng(derive_seed(9, 0));
  auto b = make_rng(derive_seed(9, 1));
  CHECK(a() != b());
}
