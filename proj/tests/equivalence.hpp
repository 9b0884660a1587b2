#pragma once

// Observable-equivalence check for a program and its mitigated rewrite.
//
// Rewrites move instructions, so a value that is a code index (MOVI @label,
// a stored jump target) legitimately changes. Such values are compared through
// the relocation map: original index of every label -> index of the same label
// after the rewrite. The stack page is excluded because the call-based passes
// leave extra return slots there.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>

#include "speclab/layout.hpp"
#include "speclab/pipeline.hpp"

namespace speclab::testing {

using Relocation = std::map<std::uint64_t, std::uint64_t>;

inline Relocation relocation(const Program& before, const Program& after) {
  Relocation m;
  for (const auto& [name, at] : before.labels())
    if (auto moved = after.label(name)) m[at] = *moved;
  return m;
}

inline bool same_or_relocated(std::uint64_t a, std::uint64_t b, const Relocation& reloc) {
  if (a == b) return true;
  auto it = reloc.find(a);
  return it != reloc.end() && it->second == b;
}

// Empty string when equivalent, else a description of the first difference.
inline std::string compare_observable(const ArchState& a, const ArchState& b, const MemoryLayout& l,
                                      const Relocation& reloc) {
  for (std::size_t r = 0; r < kNumRegisters; ++r)
    if (!same_or_relocated(a.regs[r], b.regs[r], reloc))
      return "r" + std::to_string(r) + ": " + std::to_string(a.regs[r]) + " vs " + std::to_string(b.regs[r]);
  if (a.fault.has_value() != b.fault.has_value()) return "fault presence differs";
  if (a.fault && (a.fault->kind != b.fault->kind || !same_or_relocated(a.fault->addr, b.fault->addr, reloc)))
    return "fault differs";
  const auto ma = a.memory.bytes(), mb = b.memory.bytes();
  if (ma.size() != mb.size()) return "memory size differs";
  const std::uint64_t stack_lo = l.stack_top - l.stack_size;
  for (std::uint64_t i = 0; i < ma.size(); ++i) {
    if (i == stack_lo) i = l.stack_top;
    if (i >= ma.size()) break;
    if (ma[i] == mb[i]) continue;
    if (i == l.jump_slot_addr && same_or_relocated(ma[i], mb[i], reloc)) continue;
    return "memory differs at " + std::to_string(i);
  }
  return {};
}

}  // namespace speclab::testing
