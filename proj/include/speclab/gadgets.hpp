#pragma once

// Victim programs and the standard victim memory layout.
//
// Every gadget addresses memory relative to r15, which the loader sets to
// region_base, so the same program text runs unchanged under any ASLR seed.
// r1 carries the attacker-controlled input x and r13 the stack pointer.

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "speclab/isa.hpp"
#include "speclab/layout.hpp"
#include "speclab/pipeline.hpp"

namespace speclab {

inline constexpr std::uint64_t kDefaultMagic = 0x5350454354524521ULL;  // "!ERTCEPS" little-endian

// Offsets from region_base.
namespace offsets {
inline constexpr std::uint64_t kDataLen = 0x200;
inline constexpr std::uint64_t kTmp = 0x240;
inline constexpr std::uint64_t kJumpSlot = 0x280;
inline constexpr std::uint64_t kChaseA = 0x2C0;
inline constexpr std::uint64_t kChaseB = 0x300;
inline constexpr std::uint64_t kData = 0x1400;
inline constexpr std::uint64_t kDataPageEnd = 0x2000;
inline constexpr std::uint64_t kStackTop = 0x3000;
inline constexpr std::uint64_t kStackSize = 0x1000;
inline constexpr std::uint64_t kTable = 0x10000;
inline constexpr std::uint64_t kSpan = kTable + kTableBytes;
}  // namespace offsets

inline constexpr std::uint64_t kDefaultImageSize = 4ULL << 20;
inline constexpr std::uint64_t kDefaultRegionBase = 0x100000;
inline constexpr std::string_view kFillerText = "the quick brown fox jumps over the lazy dog";

class LayoutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Without a seed the region sits at kDefaultRegionBase. With a seed, region_base
// is page-aligned and drawn from mt19937_64(seed) over every base at which the
// whole region still fits.
inline MemoryLayout standard_layout(std::uint64_t image_size = kDefaultImageSize,
                                    std::optional<std::uint64_t> aslr_seed = std::nullopt,
                                    std::uint64_t data_len = 16, std::uint64_t secret_len = 16) {
  if (image_size < offsets::kSpan)
    throw LayoutError("image of " + std::to_string(image_size) + " bytes cannot hold the " +
                      std::to_string(offsets::kSpan) + "-byte victim region");
  if (data_len == 0 || data_len > 255) throw LayoutError("data length must be in [1, 255]");
  if (offsets::kData + data_len + secret_len > offsets::kDataPageEnd) throw LayoutError("secret does not fit the data page");

  std::uint64_t base = kDefaultRegionBase;
  if (aslr_seed) {
    std::mt19937_64 rng(*aslr_seed);
    const std::uint64_t slots = (image_size - offsets::kSpan) / kPageSize + 1;
    base = (rng() % slots) * kPageSize;
  } else if (base + offsets::kSpan > image_size) {
    base = 0;
  }

  MemoryLayout l;
  l.image_size = image_size;
  l.region_base = base;
  l.data_len_addr = base + offsets::kDataLen;
  l.tmp_addr = base + offsets::kTmp;
  l.jump_slot_addr = base + offsets::kJumpSlot;
  l.chase_a_addr = base + offsets::kChaseA;
  l.chase_b_addr = base + offsets::kChaseB;
  l.data_base = base + offsets::kData;
  l.data_len = data_len;
  l.secret_base = l.data_base + data_len;
  l.secret_len = secret_len;
  l.stack_top = base + offsets::kStackTop;
  l.stack_size = offsets::kStackSize;
  l.lookup_base = base + offsets::kTable;
  l.magic_base = l.lookup_base;
  return l;
}

enum class Variant { Pht, Btb, Rsb, Stl };

inline constexpr std::array<Variant, 4> kAllVariants{Variant::Pht, Variant::Btb, Variant::Rsb, Variant::Stl};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Pht: return "pht";
    case Variant::Btb: return "btb";
    case Variant::Rsb: return "rsb";
    case Variant::Stl: return "stl";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  for (auto v : kAllVariants)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

struct GadgetSpec {
  Variant variant = Variant::Pht;
  std::size_t k = 8;  // training inputs per exploit input
  MemoryLayout layout = standard_layout();
  // Make the speculated-on value slow to resolve (flushed pointer, flushed
  // bound, etc.). Turning it off yields the "resolves immediately" controls.
  bool slow_condition = true;
};

// Victim memory: magic-filled table, filler data, the secret right after it.
inline MemoryImage victim_image(const MemoryLayout& l, std::string_view secret, std::uint64_t magic = kDefaultMagic) {
  if (secret.size() > l.secret_len) throw LayoutError("secret longer than the layout reserves");
  MemoryImage img(l.image_size);
  for (std::uint64_t a = l.magic_base; a < l.magic_base + kTableBytes; a += 8) img.write64(a, magic);
  for (std::uint64_t i = 0; i < l.data_len; ++i)
    img.write8(l.data_base + i, static_cast<std::uint8_t>(kFillerText[i % kFillerText.size()]));
  for (std::size_t i = 0; i < secret.size(); ++i) img.write8(l.secret_base + i, static_cast<std::uint8_t>(secret[i]));
  img.write8(l.data_len_addr, static_cast<std::uint8_t>(l.data_len));
  img.write8(l.tmp_addr, 0xFF);
  return img;
}

inline ArchState victim_state(const MemoryLayout& l, std::string_view secret, std::uint64_t magic = kDefaultMagic) {
  ArchState s(victim_image(l, secret, magic));
  s.regs[kBaseReg] = l.region_base;
  s.regs[kStackReg] = l.stack_top;
  return s;
}

namespace detail {

// Register plan shared by the builders.
inline constexpr Reg rX = kInputReg;
inline constexpr Reg rLenPtr = 2;
inline constexpr Reg rData = 3;
inline constexpr Reg rTable = 4;
inline constexpr Reg rTmpPtr = 5;
inline constexpr Reg rZero = 12;

inline void emit_addr(ProgramBuilder& b, Reg rd, std::uint64_t rel) {
  b.emit(ins::mov_imm(rd, rel)).emit(ins::alu(Opcode::Add, rd, kBaseReg));
}

inline void emit_prologue(ProgramBuilder& b, const MemoryLayout& l) {
  emit_addr(b, rLenPtr, l.rel(l.data_len_addr));
  emit_addr(b, rData, l.rel(l.data_base));
  emit_addr(b, rTable, l.rel(l.lookup_base));
  emit_addr(b, rTmpPtr, l.rel(l.tmp_addr));
  b.emit(ins::mov_imm(rZero, 0));
}

// tmp &= table[value * 4096]
inline void emit_encode(ProgramBuilder& b, Reg value) {
  b.emit(ins::load_byte(9, rTable, value, kPageSize))
      .emit(ins::load_byte(10, rTmpPtr, rZero, 1))
      .emit(ins::alu(Opcode::And, 10, 9))
      .emit(ins::store(rTmpPtr, 0, 10));
}

// One-iteration loop that reads data[x + j] and encodes it. Used as the
// speculated-to routine of the BTB and RSB gadgets.
inline void emit_leak_loop(ProgramBuilder& b, const std::string& prefix) {
  b.emit(ins::mov_imm(6, 0)).emit(ins::mov_imm(7, 1));
  b.bind(prefix + "_check").emit(ins::branch_less(6, 7, 0), prefix + "_body").emit(ins::halt());
  b.bind(prefix + "_body")
      .emit(ins::mov_imm(8, 0))
      .emit(ins::alu(Opcode::Add, 8, rX))
      .emit(ins::alu(Opcode::Add, 8, 6))
      .emit(ins::load_byte(11, rData, 8, 1));
  emit_encode(b, 11);
  b.emit(ins::alu_imm(Opcode::Add, 6, 1)).emit(ins::branch_less(rZero, 7, 0), prefix + "_check");
}

// rd = (x < len) ? @in_label : @out_label, with len in r7.
inline void emit_select_target(ProgramBuilder& b, Reg rd, const std::string& in_label, const std::string& out_label) {
  b.emit(ins::mov_imm(8, 1))
      .emit(ins::alu(Opcode::Add, 8, rX))
      .emit(ins::select_mask(9, rX, 7))
      .emit(ins::select_mask(10, 7, 8))
      .emit(ins::mov_code(rd, 0), in_label)
      .emit(ins::alu(Opcode::And, rd, 9))
      .emit(ins::mov_code(6, 0), out_label)
      .emit(ins::alu(Opcode::And, 6, 10))
      .emit(ins::alu(Opcode::Add, rd, 6));
}

}  // namespace detail

// if (x < length_of_data) tmp &= table[data[x] * 4096];
inline Program build_pht_index_gadget(const GadgetSpec& spec) {
  using namespace detail;
  ProgramBuilder b;
  emit_prologue(b, spec.layout);
  b.emit(ins::load_byte(7, rLenPtr, rZero, 1))
      .emit(ins::branch_less(rX, 7, 0), "in_bounds")
      .emit(ins::halt());
  b.bind("in_bounds").emit(ins::load_byte(8, rData, rX, 1));
  emit_encode(b, 8);
  b.emit(ins::halt());
  return b.build();
}

// Dispatches through a one-byte function pointer in memory: the leak routine
// for in-bounds x, a bare landing pad otherwise.
inline Program build_btb_gadget(const GadgetSpec& spec) {
  using namespace detail;
  const auto& l = spec.layout;
  ProgramBuilder b;
  emit_prologue(b, l);
  emit_addr(b, 14, l.rel(l.jump_slot_addr));
  b.emit(ins::load_byte(7, rData, rZero, 1)).emit(ins::load_byte(7, rLenPtr, rZero, 1));
  emit_select_target(b, 11, "process", "landing");
  b.emit(ins::store(14, 0, 11));
  if (spec.slow_condition) b.emit(ins::flush(14, 0));
  b.emit(ins::load_byte(11, 14, rZero, 1)).emit(ins::jump_indirect(11));
  b.bind("process");
  emit_leak_loop(b, "process");
  b.bind("landing").emit(ins::halt());
  auto p = b.build();
  if (p.size() > 255) throw ProgramError("BTB gadget too large for its one-byte jump slot");
  return p;
}

// A helper function rewrites its own return address: back to the leak routine
// for in-bounds x, to a bare landing pad otherwise.
inline Program build_rsb_gadget(const GadgetSpec& spec) {
  using namespace detail;
  ProgramBuilder b;
  emit_prologue(b, spec.layout);
  b.emit(ins::load_byte(7, rData, rZero, 1)).emit(ins::call(0), "f");
  b.bind("ret_site");
  emit_leak_loop(b, "ret_site");
  b.emit(ins::halt());
  b.bind("f").emit(ins::load_byte(7, rLenPtr, rZero, 1));
  emit_select_target(b, 11, "ret_site", "landing");
  b.emit(ins::store_quad(kStackReg, 0, 11));
  if (spec.slow_condition) b.emit(ins::flush(kStackReg, 0));
  b.emit(ins::ret());
  b.bind("landing").emit(ins::halt());
  return b.build();
}

// data[x + chase] = 0; tmp &= table[data[x] * 4096];
// The store address depends on a two-step pointer chase through flushed lines,
// so the younger load of the same byte issues long before it is known.
inline Program build_stl_gadget(const GadgetSpec& spec) {
  using namespace detail;
  const auto& l = spec.layout;
  ProgramBuilder b;
  emit_prologue(b, l);
  if (spec.slow_condition) {
    emit_addr(b, 6, l.rel(l.chase_a_addr));
    emit_addr(b, 7, l.rel(l.chase_b_addr));
    b.emit(ins::flush(6, 0))
        .emit(ins::flush(7, 0))
        .emit(ins::load_byte(8, 6, rZero, 1))
        .emit(ins::load_byte(9, 7, 8, 1));
  } else {
    b.emit(ins::mov_imm(9, 0));
  }
  b.emit(ins::mov_imm(10, 0))
      .emit(ins::alu(Opcode::Add, 10, rData))
      .emit(ins::alu(Opcode::Add, 10, rX))
      .emit(ins::alu(Opcode::Add, 10, 9))
      .emit(ins::mov_imm(11, 0))
      .emit(ins::alu(Opcode::Add, 11, rData))
      .emit(ins::alu(Opcode::Add, 11, rX))
      .emit(ins::store(10, 0, rZero))
      .emit(ins::load_byte(8, 11, rZero, 1));
  emit_encode(b, 8);
  b.emit(ins::halt());
  return b.build();
}

inline Program build_gadget(const GadgetSpec& spec) {
  switch (spec.variant) {
    case Variant::Pht: return build_pht_index_gadget(spec);
    case Variant::Btb: return build_btb_gadget(spec);
    case Variant::Rsb: return build_rsb_gadget(spec);
    case Variant::Stl: return build_stl_gadget(spec);
  }
  throw ProgramError("unknown variant");
}

// Invocation i (r1 = i) touches table page pattern[i]. Dispatch compares r1
// against immediates only, so no invocation ever waits on memory.
inline Program build_covert_sender(const std::vector<std::uint8_t>& pattern, const MemoryLayout& layout) {
  if (pattern.empty()) throw ProgramError("covert pattern is empty");
  using namespace detail;
  ProgramBuilder b;
  emit_addr(b, rTable, layout.rel(layout.lookup_base));
  for (std::size_t i = 0; i < pattern.size(); ++i)
    b.emit(ins::mov_imm(2, i + 1)).emit(ins::branch_less(rX, 2, 0), "step_" + std::to_string(i));
  b.emit(ins::halt());
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    b.bind("step_" + std::to_string(i))
        .emit(ins::mov_imm(3, pattern[i]))
        .emit(ins::load_byte(3, rTable, 3, kPageSize))
        .emit(ins::halt());
  }
  return b.build();
}

// Everything a harness needs to drive one victim.
struct Gadget {
  GadgetSpec spec;
  Program program;
  ArchState initial;
  // Lines the harness evicts right before an exploit input.
  std::vector<std::uint64_t> condition_lines;
  // Table pages the victim touches architecturally on exploit inputs.
  std::vector<std::uint8_t> noise_pages;

  [[nodiscard]] std::vector<std::uint64_t> training_inputs() const {
    std::vector<std::uint64_t> xs(spec.k);
    for (std::size_t j = 0; j < spec.k; ++j) xs[j] = j % spec.layout.data_len;
    return xs;
  }
  [[nodiscard]] std::uint64_t exploit_input(std::size_t byte_index) const { return spec.layout.data_len + byte_index; }
};

inline Gadget make_gadget(const GadgetSpec& spec, std::string_view secret, std::uint64_t magic = kDefaultMagic) {
  if (spec.k == 0) throw std::invalid_argument("at least one training input is required");
  Gadget g{spec, build_gadget(spec), victim_state(spec.layout, secret, magic), {}, {}};
  if (spec.variant == Variant::Pht && spec.slow_condition) g.condition_lines.push_back(spec.layout.data_len_addr);
  // the architectural load after the benign store encodes the stored zero
  if (spec.variant == Variant::Stl) g.noise_pages.push_back(0);
  return g;
}

}  // namespace speclab
