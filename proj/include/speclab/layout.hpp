#pragma once

// Placement of the victim's regions inside its MemoryImage.

#include <cstdint>
#include <string>
#include <vector>

#include "speclab/isa.hpp"

namespace speclab {

inline constexpr std::uint64_t kTablePages = 256;
inline constexpr std::uint64_t kTableBytes = kTablePages * kPageSize;

// All addresses are absolute image offsets. Every region lives at a fixed
// offset from region_base, so relocating region_base moves the whole victim.
//
// The lookup table and the magic region are the same 256 pages: the victim
// fills its lookup table with the magic value so the receiver can find and
// alias it.
struct MemoryLayout {
  std::uint64_t image_size = 0;
  std::uint64_t region_base = 0;

  std::uint64_t data_len_addr = 0;  // one byte: length_of_data
  std::uint64_t tmp_addr = 0;       // one byte
  std::uint64_t jump_slot_addr = 0; // one byte: indirect-dispatch target
  std::uint64_t chase_a_addr = 0;   // one byte: first link of the cold pointer chain
  std::uint64_t chase_b_addr = 0;   // one byte: second link

  std::uint64_t data_base = 0;
  std::uint64_t data_len = 0;
  std::uint64_t secret_base = 0;
  std::uint64_t secret_len = 0;

  std::uint64_t stack_top = 0;
  std::uint64_t stack_size = 0;

  std::uint64_t lookup_base = 0;
  std::uint64_t magic_base = 0;

  // Offset of an address from region_base; what position-independent code encodes.
  [[nodiscard]] std::uint64_t rel(std::uint64_t addr) const { return addr - region_base; }

  friend bool operator==(const MemoryLayout&, const MemoryLayout&) = default;
};

struct LayoutViolation {
  std::string kind;  // "bounds", "alignment", "overlap", "adjacency"
  std::string detail;

  friend bool operator==(const LayoutViolation&, const LayoutViolation&) = default;
};

inline std::vector<LayoutViolation> validate_layout(const MemoryImage& img, const MemoryLayout& layout) {
  struct Region {
    std::string name;
    std::uint64_t base;
    std::uint64_t len;
  };
  std::vector<Region> regions{
      {"length_of_data", layout.data_len_addr, 1},
      {"tmp", layout.tmp_addr, 1},
      {"jump_slot", layout.jump_slot_addr, 1},
      {"chase_a", layout.chase_a_addr, 1},
      {"chase_b", layout.chase_b_addr, 1},
      {"data", layout.data_base, layout.data_len},
      {"secret", layout.secret_base, layout.secret_len},
      {"stack", layout.stack_top - layout.stack_size, layout.stack_size},
      {"lookup", layout.lookup_base, kTableBytes},
      {"magic", layout.magic_base, kTableBytes},
  };

  std::vector<LayoutViolation> out;
  for (const auto& r : regions)
    if (r.len != 0 && !img.contains(r.base, r.len))
      out.push_back({"bounds", r.name + " region outside image"});

  if (layout.lookup_base % kPageSize != 0) out.push_back({"alignment", "lookup table not page-aligned"});
  if (layout.magic_base % kPageSize != 0) out.push_back({"alignment", "magic region not page-aligned"});
  if (layout.secret_base != layout.data_base + layout.data_len)
    out.push_back({"adjacency", "secret does not directly follow data"});

  auto intended = [&](const Region& a, const Region& b) {
    // the table doubles as the magic region
    return (a.name == "lookup" && b.name == "magic") && a.base == b.base;
  };
  for (std::size_t i = 0; i < regions.size(); ++i) {
    for (std::size_t j = i + 1; j < regions.size(); ++j) {
      const auto& a = regions[i];
      const auto& b = regions[j];
      if (a.len == 0 || b.len == 0 || intended(a, b)) continue;
      if (a.base < b.base + b.len && b.base < a.base + a.len)
        out.push_back({"overlap", a.name + " overlaps " + b.name});
    }
  }
  return out;
}

}  // namespace speclab
