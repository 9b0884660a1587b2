#pragma once

// Minimal register-machine ISA used by every gadget, transform and executor in
// the lab, plus its textual assembly format.
//
// Grammar (one statement per line):
//
//   name:                      label, binds to the next instruction
//   .entry name                program entry point (default: instruction 0)
//   MNEMONIC op1, op2, ...     instruction
//   # ...                      comment, to end of line
//
// Registers are r0..r15. Immediates are decimal (optionally negative) or 0x-hex.
// A MOVI immediate may also be `@label`, which loads the instruction index of
// that label; transforms keep such references valid when they insert code.
//
//   LOADB   rd, rbase, rindex, scale   rd = mem8[rbase + rindex*scale], scale 1|4096
//   STORE   rbase, offset, rsrc        mem8[rbase + offset]  = rsrc & 0xff
//   STOREQ  rbase, offset, rsrc        mem64[rbase + offset] = rsrc (little endian)
//   MOVI    rd, imm | @label
//   ADD     rd, rs | imm               rd += src   (mod 2^64)
//   AND     rd, rs | imm
//   SHL     rd, rs | imm               rd <<= (src & 63)
//   BLT     ra, rb, label              branch if ra < rb (unsigned)
//   JMPI    ra                         pc = ra
//   CALL    label                      sp -= 8; mem64[sp] = pc+1; pc = label
//   RET                                pc = mem64[sp]; sp += 8
//   FLUSH   rbase, offset              evict the line holding rbase + offset
//   FENCE                              speculation barrier
//   SELMASK rd, ra, rb                 rd = ra < rb ? ~0 : 0   (branchless)
//   HALT
//
// The stack pointer is r13.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace speclab {

inline constexpr std::size_t kNumRegisters = 16;
inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint8_t kInputReg = 1;
inline constexpr std::uint8_t kStackReg = 13;
inline constexpr std::uint8_t kBaseReg = 15;

using Reg = std::uint8_t;
using CodeIndex = std::size_t;

enum class Opcode : std::uint8_t {
  LoadByte,
  Store,
  StoreQuad,
  MovImm,
  Add,
  And,
  Shl,
  CmpBranchLess,
  JumpIndirect,
  Call,
  Ret,
  Flush,
  Fence,
  SelectMask,
  Halt,
};

struct Instruction {
  Opcode op = Opcode::Halt;
  Reg rd = 0;  // destination (LOADB/MOVI/ALU/SELMASK) or value source (STORE*)
  Reg ra = 0;  // base register, or first compared/jump register
  Reg rb = 0;  // index register, second compared register, or ALU source
  bool has_imm = false;    // ALU source is `imm` rather than `rb`
  bool code_ref = false;   // MOVI immediate is the code index `target`
  std::uint64_t imm = 0;   // scale, offset or immediate value
  CodeIndex target = 0;    // BLT / CALL / MOVI @label destination

  [[nodiscard]] bool has_target() const {
    return op == Opcode::CmpBranchLess || op == Opcode::Call || (op == Opcode::MovImm && code_ref);
  }
  [[nodiscard]] bool is_load() const { return op == Opcode::LoadByte; }
  [[nodiscard]] bool is_store() const { return op == Opcode::Store || op == Opcode::StoreQuad; }

  friend bool operator==(const Instruction&, const Instruction&) = default;
};

namespace ins {

inline Instruction load_byte(Reg rd, Reg base, Reg index, std::uint64_t scale) {
  return {.op = Opcode::LoadByte, .rd = rd, .ra = base, .rb = index, .imm = scale};
}
inline Instruction store(Reg base, std::int64_t offset, Reg src) {
  return {.op = Opcode::Store, .rd = src, .ra = base, .imm = static_cast<std::uint64_t>(offset)};
}
inline Instruction store_quad(Reg base, std::int64_t offset, Reg src) {
  return {.op = Opcode::StoreQuad, .rd = src, .ra = base, .imm = static_cast<std::uint64_t>(offset)};
}
inline Instruction mov_imm(Reg rd, std::uint64_t value) {
  return {.op = Opcode::MovImm, .rd = rd, .imm = value};
}
inline Instruction mov_code(Reg rd, CodeIndex target) {
  return {.op = Opcode::MovImm, .rd = rd, .code_ref = true, .imm = target, .target = target};
}
inline Instruction alu(Opcode op, Reg rd, Reg rs) { return {.op = op, .rd = rd, .rb = rs}; }
inline Instruction alu_imm(Opcode op, Reg rd, std::int64_t v) {
  return {.op = op, .rd = rd, .has_imm = true, .imm = static_cast<std::uint64_t>(v)};
}
inline Instruction branch_less(Reg a, Reg b, CodeIndex target) {
  return {.op = Opcode::CmpBranchLess, .ra = a, .rb = b, .target = target};
}
inline Instruction jump_indirect(Reg a) { return {.op = Opcode::JumpIndirect, .ra = a}; }
inline Instruction call(CodeIndex target) { return {.op = Opcode::Call, .target = target}; }
inline Instruction ret() { return {.op = Opcode::Ret}; }
inline Instruction flush(Reg base, std::int64_t offset) {
  return {.op = Opcode::Flush, .ra = base, .imm = static_cast<std::uint64_t>(offset)};
}
inline Instruction fence() { return {.op = Opcode::Fence}; }
inline Instruction select_mask(Reg rd, Reg a, Reg b) {
  return {.op = Opcode::SelectMask, .rd = rd, .ra = a, .rb = b};
}
inline Instruction halt() { return {.op = Opcode::Halt}; }

}  // namespace ins

class AssemblyError : public std::runtime_error {
 public:
  AssemblyError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  [[nodiscard]] std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ProgramError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Immutable once built. Every code index referenced by an instruction has at
// least one label so the program survives a disassemble/assemble round trip.
class Program {
 public:
  Program() = default;

  Program(std::vector<Instruction> code, std::map<std::string, CodeIndex> labels, CodeIndex entry = 0)
      : code_(std::move(code)), labels_(std::move(labels)), entry_(entry) {
    check();
  }

  [[nodiscard]] const std::vector<Instruction>& code() const { return code_; }
  [[nodiscard]] const std::map<std::string, CodeIndex>& labels() const { return labels_; }
  [[nodiscard]] CodeIndex entry() const { return entry_; }
  [[nodiscard]] std::size_t size() const { return code_.size(); }
  [[nodiscard]] bool empty() const { return code_.empty(); }
  [[nodiscard]] const Instruction& operator[](CodeIndex i) const { return code_[i]; }

  [[nodiscard]] std::optional<CodeIndex> label(std::string_view name) const {
    auto it = labels_.find(std::string(name));
    if (it == labels_.end()) return std::nullopt;
    return it->second;
  }

  // First label bound to `index`, in name order.
  [[nodiscard]] std::optional<std::string> label_at(CodeIndex index) const {
    for (const auto& [name, at] : labels_)
      if (at == index) return name;
    return std::nullopt;
  }

  friend bool operator==(const Program&, const Program&) = default;

 private:
  void check() const {
    if (code_.empty()) throw ProgramError("empty program");
    if (entry_ >= code_.size()) throw ProgramError("entry out of range");
    std::set<CodeIndex> labelled;
    for (const auto& [name, at] : labels_) {
      if (at >= code_.size()) throw ProgramError("label '" + name + "' out of range");
      labelled.insert(at);
    }
    if (entry_ != 0 && !labelled.contains(entry_)) throw ProgramError("entry has no label");
    for (const auto& in : code_) {
      if (in.rd >= kNumRegisters || in.ra >= kNumRegisters || in.rb >= kNumRegisters)
        throw ProgramError("register out of range");
      if (in.op == Opcode::LoadByte && in.imm != 1 && in.imm != kPageSize)
        throw ProgramError("LOADB scale must be 1 or 4096");
      if (in.has_target()) {
        if (in.target >= code_.size()) throw ProgramError("branch target out of range");
        if (!labelled.contains(in.target)) throw ProgramError("branch target has no label");
      }
    }
  }

  std::vector<Instruction> code_;
  std::map<std::string, CodeIndex> labels_;
  CodeIndex entry_ = 0;
};

// Incremental construction with forward label references, used by the gadget
// builders and the mitigation passes.
class ProgramBuilder {
 public:
  ProgramBuilder& bind(const std::string& name) {
    if (labels_.contains(name)) throw ProgramError("duplicate label '" + name + "'");
    labels_[name] = code_.size();
    return *this;
  }
  ProgramBuilder& emit(const Instruction& in) {
    code_.push_back(in);
    return *this;
  }
  // Emits an instruction whose target is resolved when build() runs.
  ProgramBuilder& emit(Instruction in, const std::string& target_label) {
    fixups_.emplace_back(code_.size(), target_label);
    code_.push_back(in);
    return *this;
  }
  ProgramBuilder& entry(const std::string& name) {
    entry_label_ = name;
    return *this;
  }
  [[nodiscard]] std::size_t size() const { return code_.size(); }

  [[nodiscard]] Program build() const {
    auto code = code_;
    for (const auto& [at, name] : fixups_) {
      auto it = labels_.find(name);
      if (it == labels_.end()) throw ProgramError("unresolved label '" + name + "'");
      code[at].target = it->second;
      if (code[at].op == Opcode::MovImm) code[at].imm = it->second;
    }
    CodeIndex entry = 0;
    if (entry_label_) {
      auto it = labels_.find(*entry_label_);
      if (it == labels_.end()) throw ProgramError("unresolved entry label");
      entry = it->second;
    }
    return Program(std::move(code), labels_, entry);
  }

 private:
  std::vector<Instruction> code_;
  std::map<std::string, CodeIndex> labels_;
  std::vector<std::pair<std::size_t, std::string>> fixups_;
  std::optional<std::string> entry_label_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::string upper(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::toupper(c); });
  return out;
}

inline bool valid_label(std::string_view s) {
  if (s.empty() || std::isdigit(static_cast<unsigned char>(s.front()))) return false;
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c) || c == '_' || c == '.'; });
}

struct MnemonicInfo {
  std::string_view name;
  Opcode op;
};

inline constexpr std::array<MnemonicInfo, 15> kMnemonics{{
    {"LOADB", Opcode::LoadByte},
    {"STORE", Opcode::Store},
    {"STOREQ", Opcode::StoreQuad},
    {"MOVI", Opcode::MovImm},
    {"ADD", Opcode::Add},
    {"AND", Opcode::And},
    {"SHL", Opcode::Shl},
    {"BLT", Opcode::CmpBranchLess},
    {"JMPI", Opcode::JumpIndirect},
    {"CALL", Opcode::Call},
    {"RET", Opcode::Ret},
    {"FLUSH", Opcode::Flush},
    {"FENCE", Opcode::Fence},
    {"SELMASK", Opcode::SelectMask},
    {"HALT", Opcode::Halt},
}};

inline std::string_view mnemonic(Opcode op) {
  for (const auto& m : kMnemonics)
    if (m.op == op) return m.name;
  return "?";
}

}  // namespace detail

inline std::string_view mnemonic(Opcode op) { return detail::mnemonic(op); }

namespace detail {

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  Program run() {
    struct Pending {
      std::size_t line;
      Instruction in;
      std::optional<std::string> label_ref;
    };
    std::vector<Pending> pending;
    std::map<std::string, CodeIndex> labels;
    std::optional<std::pair<std::size_t, std::string>> entry;
    std::vector<std::pair<std::size_t, std::string>> unbound;  // labels awaiting an instruction

    std::size_t lineno = 0;
    std::size_t pos = 0;
    while (pos <= text_.size()) {
      auto nl = text_.find('\n', pos);
      if (nl == std::string_view::npos) nl = text_.size();
      std::string_view line = text_.substr(pos, nl - pos);
      pos = nl + 1;
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;

      if (line.back() == ':') {
        auto name = trim(line.substr(0, line.size() - 1));
        if (!valid_label(name)) throw AssemblyError(lineno, "invalid label '" + std::string(name) + "'");
        if (labels.contains(std::string(name)) ||
            std::any_of(unbound.begin(), unbound.end(), [&](const auto& u) { return u.second == name; }))
          throw AssemblyError(lineno, "duplicate label '" + std::string(name) + "'");
        unbound.emplace_back(lineno, std::string(name));
        continue;
      }
      if (line.starts_with(".entry")) {
        auto name = trim(line.substr(6));
        if (!valid_label(name)) throw AssemblyError(lineno, "invalid .entry label");
        entry.emplace(lineno, std::string(name));
        continue;
      }

      for (auto& [l, name] : unbound) labels[name] = pending.size();
      unbound.clear();
      auto [in, ref] = parse_instruction(lineno, line);
      pending.push_back({lineno, in, std::move(ref)});
    }
    if (!unbound.empty()) throw AssemblyError(unbound.front().first, "label '" + unbound.front().second + "' binds no instruction");
    if (pending.empty()) throw AssemblyError(lineno, "empty program");

    std::vector<Instruction> code;
    code.reserve(pending.size());
    for (auto& p : pending) {
      if (p.label_ref) {
        auto it = labels.find(*p.label_ref);
        if (it == labels.end()) throw AssemblyError(p.line, "unresolved label '" + *p.label_ref + "'");
        p.in.target = it->second;
        if (p.in.op == Opcode::MovImm) p.in.imm = it->second;
      }
      code.push_back(p.in);
    }
    CodeIndex entry_index = 0;
    if (entry) {
      auto it = labels.find(entry->second);
      if (it == labels.end()) throw AssemblyError(entry->first, "unresolved label '" + entry->second + "'");
      entry_index = it->second;
    }
    return Program(std::move(code), std::move(labels), entry_index);
  }

 private:
  static std::vector<std::string_view> split_operands(std::string_view s) {
    std::vector<std::string_view> out;
    if (trim(s).empty()) return out;
    std::size_t start = 0;
    while (true) {
      auto comma = s.find(',', start);
      out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    return out;
  }

  static Reg reg(std::size_t line, std::string_view tok) {
    if (tok.size() < 2 || (tok[0] != 'r' && tok[0] != 'R'))
      throw AssemblyError(line, "expected register, got '" + std::string(tok) + "'");
    unsigned v = 0;
    auto [p, ec] = std::from_chars(tok.data() + 1, tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size() || v >= kNumRegisters)
      throw AssemblyError(line, "bad register '" + std::string(tok) + "'");
    return static_cast<Reg>(v);
  }

  static bool is_reg(std::string_view tok) {
    return tok.size() >= 2 && (tok[0] == 'r' || tok[0] == 'R') && std::isdigit(static_cast<unsigned char>(tok[1]));
  }

  static std::uint64_t imm(std::size_t line, std::string_view tok) {
    bool neg = false;
    if (!tok.empty() && tok.front() == '-') {
      neg = true;
      tok.remove_prefix(1);
    }
    int base = 10;
    if (tok.size() > 2 && tok[0] == '0' && (tok[1] == 'x' || tok[1] == 'X')) {
      base = 16;
      tok.remove_prefix(2);
    }
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v, base);
    if (tok.empty() || ec != std::errc() || p != tok.data() + tok.size())
      throw AssemblyError(line, "bad immediate '" + std::string(tok) + "'");
    return neg ? (~v + 1) : v;
  }

  static std::string label_ref(std::size_t line, std::string_view tok) {
    if (!valid_label(tok)) throw AssemblyError(line, "bad label '" + std::string(tok) + "'");
    return std::string(tok);
  }

  static std::pair<Instruction, std::optional<std::string>> parse_instruction(std::size_t line, std::string_view text) {
    auto sp = text.find_first_of(" \t");
    auto name = upper(text.substr(0, sp));
    auto ops = split_operands(sp == std::string_view::npos ? std::string_view{} : text.substr(sp + 1));
    const MnemonicInfo* info = nullptr;
    for (const auto& m : kMnemonics)
      if (m.name == name) info = &m;
    if (!info) throw AssemblyError(line, "unknown mnemonic '" + name + "'");

    auto want = [&](std::size_t n) {
      if (ops.size() != n)
        throw AssemblyError(line, name + " expects " + std::to_string(n) + " operands, got " + std::to_string(ops.size()));
    };

    Instruction in{.op = info->op};
    std::optional<std::string> ref;
    switch (info->op) {
      case Opcode::LoadByte:
        want(4);
        in = ins::load_byte(reg(line, ops[0]), reg(line, ops[1]), reg(line, ops[2]), imm(line, ops[3]));
        if (in.imm != 1 && in.imm != kPageSize) throw AssemblyError(line, "LOADB scale must be 1 or 4096");
        break;
      case Opcode::Store:
      case Opcode::StoreQuad:
        want(3);
        in.ra = reg(line, ops[0]);
        in.imm = imm(line, ops[1]);
        in.rd = reg(line, ops[2]);
        break;
      case Opcode::MovImm:
        want(2);
        in.rd = reg(line, ops[0]);
        if (!ops[1].empty() && ops[1].front() == '@') {
          in.code_ref = true;
          ref = label_ref(line, ops[1].substr(1));
        } else {
          in.imm = imm(line, ops[1]);
        }
        break;
      case Opcode::Add:
      case Opcode::And:
      case Opcode::Shl:
        want(2);
        in.rd = reg(line, ops[0]);
        if (is_reg(ops[1])) {
          in.rb = reg(line, ops[1]);
        } else {
          in.has_imm = true;
          in.imm = imm(line, ops[1]);
        }
        break;
      case Opcode::CmpBranchLess:
        want(3);
        in.ra = reg(line, ops[0]);
        in.rb = reg(line, ops[1]);
        ref = label_ref(line, ops[2]);
        break;
      case Opcode::JumpIndirect:
        want(1);
        in.ra = reg(line, ops[0]);
        break;
      case Opcode::Call:
        want(1);
        ref = label_ref(line, ops[0]);
        break;
      case Opcode::Flush:
        want(2);
        in.ra = reg(line, ops[0]);
        in.imm = imm(line, ops[1]);
        break;
      case Opcode::SelectMask:
        want(3);
        in.rd = reg(line, ops[0]);
        in.ra = reg(line, ops[1]);
        in.rb = reg(line, ops[2]);
        break;
      case Opcode::Ret:
      case Opcode::Fence:
      case Opcode::Halt:
        want(0);
        break;
    }
    return {in, std::move(ref)};
  }

  std::string_view text_;
};

inline std::string reg_name(Reg r) { return "r" + std::to_string(r); }

inline std::string signed_imm(std::uint64_t v) { return std::to_string(static_cast<std::int64_t>(v)); }

inline std::string unsigned_imm(std::uint64_t v) {
  if (v < 0x10000) return std::to_string(v);
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

}  // namespace detail

inline Program assemble(std::string_view text) { return detail::Parser(text).run(); }

inline std::string format_instruction(const Instruction& in, const Program& p) {
  using detail::reg_name;
  auto target = [&](CodeIndex at) { return p.label_at(at).value_or("L" + std::to_string(at)); };
  std::string out(detail::mnemonic(in.op));
  switch (in.op) {
    case Opcode::LoadByte:
      return out + " " + reg_name(in.rd) + ", " + reg_name(in.ra) + ", " + reg_name(in.rb) + ", " + std::to_string(in.imm);
    case Opcode::Store:
    case Opcode::StoreQuad:
      return out + " " + reg_name(in.ra) + ", " + detail::signed_imm(in.imm) + ", " + reg_name(in.rd);
    case Opcode::MovImm:
      return out + " " + reg_name(in.rd) + ", " + (in.code_ref ? "@" + target(in.target) : detail::unsigned_imm(in.imm));
    case Opcode::Add:
    case Opcode::And:
    case Opcode::Shl:
      return out + " " + reg_name(in.rd) + ", " + (in.has_imm ? detail::signed_imm(in.imm) : reg_name(in.rb));
    case Opcode::CmpBranchLess:
      return out + " " + reg_name(in.ra) + ", " + reg_name(in.rb) + ", " + target(in.target);
    case Opcode::JumpIndirect:
      return out + " " + reg_name(in.ra);
    case Opcode::Call:
      return out + " " + target(in.target);
    case Opcode::Flush:
      return out + " " + reg_name(in.ra) + ", " + detail::signed_imm(in.imm);
    case Opcode::SelectMask:
      return out + " " + reg_name(in.rd) + ", " + reg_name(in.ra) + ", " + reg_name(in.rb);
    case Opcode::Ret:
    case Opcode::Fence:
    case Opcode::Halt:
      return out;
  }
  return out;
}

// Canonical text: labels on their own lines, instructions indented two spaces.
inline std::string disassemble(const Program& p) {
  std::multimap<CodeIndex, std::string> by_index;
  for (const auto& [name, at] : p.labels()) by_index.emplace(at, name);
  std::ostringstream os;
  if (p.entry() != 0) os << ".entry " << p.label_at(p.entry()).value_or("L" + std::to_string(p.entry())) << "\n";
  for (CodeIndex i = 0; i < p.size(); ++i) {
    auto [lo, hi] = by_index.equal_range(i);
    for (auto it = lo; it != hi; ++it) os << it->second << ":\n";
    os << "  " << format_instruction(p[i], p) << "\n";
  }
  return os.str();
}

// Flat byte-addressable memory, power-of-two sized.
class MemoryImage {
 public:
  MemoryImage() = default;
  explicit MemoryImage(std::uint64_t size) : bytes_(size, 0) {
    if (size == 0 || (size & (size - 1)) != 0) throw std::invalid_argument("memory size must be a power of two");
  }

  [[nodiscard]] std::uint64_t size() const { return bytes_.size(); }
  [[nodiscard]] bool contains(std::uint64_t addr, std::uint64_t len = 1) const {
    return len <= bytes_.size() && addr <= bytes_.size() - len;
  }

  [[nodiscard]] std::uint8_t read8(std::uint64_t addr) const { return bytes_.at(addr); }
  void write8(std::uint64_t addr, std::uint8_t v) { bytes_.at(addr) = v; }

  [[nodiscard]] std::uint64_t read64(std::uint64_t addr) const {
    if (!contains(addr, 8)) throw std::out_of_range("read64 out of range");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | bytes_[addr + i];
    return v;
  }
  void write64(std::uint64_t addr, std::uint64_t v) {
    if (!contains(addr, 8)) throw std::out_of_range("write64 out of range");
    for (int i = 0; i < 8; ++i) bytes_[addr + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }

  void fill(std::uint64_t addr, std::span<const std::uint8_t> data) {
    if (!contains(addr, data.size())) throw std::out_of_range("fill out of range");
    std::copy(data.begin(), data.end(), bytes_.begin() + static_cast<std::ptrdiff_t>(addr));
  }

  [[nodiscard]] std::span<const std::uint8_t> bytes() const { return bytes_; }
  [[nodiscard]] std::span<const std::uint8_t> page(std::uint64_t page_id) const {
    return std::span<const std::uint8_t>(bytes_).subspan(page_id * kPageSize, kPageSize);
  }

  friend bool operator==(const MemoryImage&, const MemoryImage&) = default;

 private:
  std::vector<std::uint8_t> bytes_;
};

}  // namespace speclab
