#pragma once

// Program-to-program mitigation passes and the variant x mitigation matrix.

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "speclab/config.hpp"
#include "speclab/gadgets.hpp"
#include "speclab/isa.hpp"
#include "speclab/pipeline.hpp"
#include "speclab/speconnector.hpp"

namespace speclab {

enum class Mitigation : std::uint8_t { FenceAfterBranch, IndexMask, Retpoline, RsbStuff, Ssbd };

inline constexpr std::array<Mitigation, 5> kAllMitigations{Mitigation::FenceAfterBranch, Mitigation::IndexMask,
                                                           Mitigation::Retpoline, Mitigation::RsbStuff,
                                                           Mitigation::Ssbd};

inline std::string_view to_string(Mitigation m) {
  switch (m) {
    case Mitigation::FenceAfterBranch: return "fence_after_branch";
    case Mitigation::IndexMask: return "index_mask";
    case Mitigation::Retpoline: return "retpoline";
    case Mitigation::RsbStuff: return "rsb_stuff";
    case Mitigation::Ssbd: return "ssbd";
  }
  return "?";
}

class MitigationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MitigationSet {
 public:
  MitigationSet() = default;
  MitigationSet(std::initializer_list<Mitigation> ms) {
    for (auto m : ms) insert(m);
  }

  static MitigationSet all() {
    MitigationSet s;
    for (auto m : kAllMitigations) s.insert(m);
    return s;
  }
  static MitigationSet from_bits(std::uint8_t bits) {
    MitigationSet s;
    s.bits_ = bits & 0x1F;
    return s;
  }

  // "none", "all", or names joined by ',' or '+'.
  static MitigationSet parse(std::string_view text) {
    MitigationSet s;
    if (text == "none" || text.empty()) return s;
    if (text == "all") return all();
    std::size_t pos = 0;
    while (pos <= text.size()) {
      auto end = text.find_first_of(",+", pos);
      if (end == std::string_view::npos) end = text.size();
      auto name = detail::trim(text.substr(pos, end - pos));
      bool found = false;
      for (auto m : kAllMitigations) {
        if (to_string(m) == name) {
          s.insert(m);
          found = true;
        }
      }
      if (!found) throw MitigationError("unknown mitigation '" + std::string(name) + "'");
      pos = end + 1;
    }
    return s;
  }

  void insert(Mitigation m) { bits_ |= bit(m); }
  [[nodiscard]] bool contains(Mitigation m) const { return (bits_ & bit(m)) != 0; }
  [[nodiscard]] bool empty() const { return bits_ == 0; }
  [[nodiscard]] std::uint8_t bits() const { return bits_; }
  [[nodiscard]] bool subset_of(const MitigationSet& o) const { return (bits_ & ~o.bits_) == 0; }

  [[nodiscard]] std::string name() const {
    if (empty()) return "none";
    if (*this == all()) return "all";
    std::string out;
    for (auto m : kAllMitigations) {
      if (!contains(m)) continue;
      if (!out.empty()) out += '+';
      out += to_string(m);
    }
    return out;
  }

  friend bool operator==(const MitigationSet&, const MitigationSet&) = default;

 private:
  static std::uint8_t bit(Mitigation m) { return static_cast<std::uint8_t>(1U << static_cast<unsigned>(m)); }
  std::uint8_t bits_ = 0;
};

namespace detail {

// Rebuilds a program instruction by instruction. Labels of an original
// instruction bind to the first instruction emitted for it, so inserted
// prefixes become the new jump targets.
class Rewriter {
 public:
  explicit Rewriter(const Program& p) : p_(p) {}

  std::string fresh(const std::string& base) {
    for (std::size_t n = counter_[base];; ++n) {
      auto name = base + "_" + std::to_string(n);
      if (!p_.label(name) && !used_.contains(name)) {
        counter_[base] = n + 1;
        used_.insert(name);
        return name;
      }
    }
  }

  void emit_original(ProgramBuilder& b, const Instruction& in) const {
    if (in.has_target())
      b.emit(in, *p_.label_at(in.target));
    else
      b.emit(in);
  }

  Program rebuild(const std::function<void(CodeIndex, const Instruction&, ProgramBuilder&)>& each) {
    ProgramBuilder b;
    for (CodeIndex i = 0; i < p_.size(); ++i) {
      for (const auto& [name, at] : p_.labels())
        if (at == i) b.bind(name);
      each(i, p_[i], b);
    }
    if (auto entry = p_.label_at(p_.entry())) b.entry(*entry);
    return b.build();
  }

 private:
  const Program& p_;
  std::map<std::string, std::size_t> counter_;
  std::set<std::string> used_;
};

struct IndexMaskSite {
  CodeIndex branch;
  CodeIndex load;
};

// BLT ra, rb, L  ...  L: LOADB rv, rbase, ra, 1 ; LOADB _, _, rv, 4096
// where L is reachable only through that branch.
inline std::vector<IndexMaskSite> find_index_mask_sites(const Program& p) {
  std::vector<IndexMaskSite> sites;
  std::map<CodeIndex, std::size_t> refs;
  for (const auto& in : p.code())
    if (in.has_target()) ++refs[in.target];
  for (CodeIndex i = 0; i < p.size(); ++i) {
    const auto& br = p[i];
    if (br.op != Opcode::CmpBranchLess || br.ra == br.rb) continue;
    const CodeIndex l = br.target;
    if (l == 0 || l + 1 >= p.size() || refs[l] != 1) continue;
    const auto before = p[l - 1].op;
    if (before != Opcode::Halt && before != Opcode::JumpIndirect && before != Opcode::Ret) continue;
    const auto& ld = p[l];
    const auto& use = p[l + 1];
    if (ld.op != Opcode::LoadByte || ld.rb != br.ra || ld.imm != 1) continue;
    if (ld.rd == br.ra || ld.rd == br.rb || ld.rd == ld.ra) continue;
    if (use.op != Opcode::LoadByte || use.rb != ld.rd || use.imm != kPageSize) continue;
    sites.push_back({i, l});
  }
  return sites;
}

inline Program apply_index_mask(const Program& p) {
  const auto sites = find_index_mask_sites(p);
  if (sites.empty()) throw MitigationError("index_mask: pattern not found");
  std::map<CodeIndex, const Instruction*> guard;
  for (const auto& s : sites) guard[s.load] = &p[s.branch];
  Rewriter rw(p);
  return rw.rebuild([&](CodeIndex i, const Instruction& in, ProgramBuilder& b) {
    auto it = guard.find(i);
    if (it == guard.end()) return rw.emit_original(b, in);
    const auto& br = *it->second;
    b.emit(ins::select_mask(in.rd, br.ra, br.rb))
        .emit(ins::alu(Opcode::And, in.rd, br.ra))
        .emit(ins::load_byte(in.rd, in.ra, in.rd, 1));
  });
}

inline Program apply_fence(const Program& p) {
  std::set<CodeIndex> successors;
  for (CodeIndex i = 0; i < p.size(); ++i) {
    if (p[i].op != Opcode::CmpBranchLess) continue;
    if (i + 1 < p.size()) successors.insert(i + 1);
    successors.insert(p[i].target);
  }
  Rewriter rw(p);
  return rw.rebuild([&](CodeIndex i, const Instruction& in, ProgramBuilder& b) {
    if (successors.contains(i) && in.op != Opcode::Fence) b.emit(ins::fence());
    rw.emit_original(b, in);
  });
}

inline Program apply_retpoline(const Program& p) {
  Rewriter rw(p);
  return rw.rebuild([&](CodeIndex, const Instruction& in, ProgramBuilder& b) {
    if (in.op != Opcode::JumpIndirect) return rw.emit_original(b, in);
    if (in.ra == kStackReg) throw MitigationError("retpoline: jump through the stack pointer");
    const auto set = rw.fresh("rp_set");
    b.emit(ins::call(0), set);
    b.bind(rw.fresh("rp_trap")).emit(ins::fence()).emit(ins::halt());
    b.bind(set).emit(ins::store_quad(kStackReg, 0, in.ra)).emit(ins::ret());
  });
}

inline Program apply_rsb_stuff(const Program& p) {
  Rewriter rw(p);
  return rw.rebuild([&](CodeIndex, const Instruction& in, ProgramBuilder& b) {
    if (in.op != Opcode::Ret) return rw.emit_original(b, in);
    const auto fill = rw.fresh("rs_fill");
    b.emit(ins::call(0), fill);
    b.bind(rw.fresh("rs_trap")).emit(ins::fence()).emit(ins::halt());
    b.bind(fill).emit(ins::alu_imm(Opcode::Add, kStackReg, 8)).emit(in);
  });
}

}  // namespace detail

// Passes run in a fixed order: index_mask needs the untouched bounds-check
// shape, and the call-based passes must see the fenced code. ssbd is a
// processor control and leaves the program alone; see configure().
inline Program apply(const MitigationSet& set, const Program& p) {
  Program out = p;
  if (set.contains(Mitigation::IndexMask)) out = detail::apply_index_mask(out);
  if (set.contains(Mitigation::FenceAfterBranch)) out = detail::apply_fence(out);
  if (set.contains(Mitigation::Retpoline)) out = detail::apply_retpoline(out);
  if (set.contains(Mitigation::RsbStuff)) out = detail::apply_rsb_stuff(out);
  return out;
}

// Like apply(), but drops index_mask when the program has no matching site.
// The returned set says what was actually applied.
inline std::pair<Program, MitigationSet> apply_applicable(const MitigationSet& set, const Program& p) {
  MitigationSet effective;
  for (auto m : kAllMitigations) {
    if (!set.contains(m)) continue;
    if (m == Mitigation::IndexMask && detail::find_index_mask_sites(p).empty()) continue;
    effective.insert(m);
  }
  return {apply(effective, p), effective};
}

inline PipelineConfig configure(const MitigationSet& set, PipelineConfig cfg) {
  if (set.contains(Mitigation::Ssbd)) cfg.store_bypass.enabled = false;
  return cfg;
}

struct CellResult {
  Variant variant = Variant::Pht;
  MitigationSet mitigations;
  MitigationSet applied;
  bool leaked = false;
  std::size_t bytes_recovered = 0;  // bytes recovered with the correct value
  std::size_t transient_count = 0;
};

// Builds the variant's victim, applies the mitigations, and runs the full
// receiver recovery of cfg.gadget.secret.
inline CellResult evaluate(Variant variant, const MitigationSet& set, const LabConfig& cfg) {
  GadgetSpec spec{variant, cfg.gadget.training, cfg.layout(cfg.gadget.secret.size()), true};
  auto g = make_gadget(spec, cfg.gadget.secret, cfg.receiver.magic);
  auto [program, applied] = apply_applicable(set, g.program);
  g.program = std::move(program);

  LabConfig run_cfg = cfg;
  run_cfg.pipeline = configure(applied, cfg.pipeline);
  Session s(g, run_cfg);
  const auto report = recover_secret(s, g, cfg.gadget.secret.size(), {cfg.gadget.training, cfg.receiver.max_rounds});

  CellResult c;
  c.variant = variant;
  c.mitigations = set;
  c.applied = applied;
  c.bytes_recovered = report.correct(cfg.gadget.secret);
  c.leaked = c.bytes_recovered > 0;
  c.transient_count = report.transient_count;
  return c;
}

// Matrix columns: no mitigation, each single mitigation, all combined.
inline std::vector<MitigationSet> matrix_columns() {
  std::vector<MitigationSet> cols{MitigationSet{}};
  for (auto m : kAllMitigations) cols.push_back(MitigationSet{m});
  cols.push_back(MitigationSet::all());
  return cols;
}

struct MatrixReport {
  std::vector<CellResult> cells;  // variant-major, columns in matrix_columns() order

  [[nodiscard]] const CellResult* find(Variant v, const MitigationSet& m) const {
    for (const auto& c : cells)
      if (c.variant == v && c.mitigations == m) return &c;
    return nullptr;
  }
};

inline MatrixReport full_matrix(const LabConfig& cfg) {
  MatrixReport r;
  for (auto v : kAllVariants)
    for (const auto& m : matrix_columns()) r.cells.push_back(evaluate(v, m, cfg));
  return r;
}

// Which variants each single mitigation is designed to stop in this model.
inline bool blocks(Mitigation m, Variant v) {
  switch (m) {
    case Mitigation::FenceAfterBranch: return v == Variant::Pht || v == Variant::Btb || v == Variant::Rsb;
    case Mitigation::IndexMask: return v == Variant::Pht;
    case Mitigation::Retpoline: return v == Variant::Btb;
    case Mitigation::RsbStuff: return v == Variant::Rsb;
    case Mitigation::Ssbd: return v == Variant::Stl;
  }
  return false;
}

// Expected leak outcome under the default configuration.
inline bool expected_leak(Variant v, const MitigationSet& set) {
  for (auto m : kAllMitigations)
    if (set.contains(m) && blocks(m, v)) return false;
  return true;
}

// Cells whose outcome differs from expected_leak().
inline std::vector<const CellResult*> unexpected_cells(const MatrixReport& r) {
  std::vector<const CellResult*> out;
  for (const auto& c : r.cells)
    if (c.leaked != expected_leak(c.variant, c.mitigations)) out.push_back(&c);
  return out;
}

struct MonotonicityViolation {
  Variant variant;
  MitigationSet smaller;
  MitigationSet larger;
};

// Evaluates every subset of mitigations for every variant and reports pairs
// where adding mitigations turned a non-leaking cell into a leaking one.
inline std::vector<MonotonicityViolation> check_monotonicity(const LabConfig& cfg,
                                                             std::vector<CellResult>* cells_out = nullptr) {
  constexpr std::uint8_t kSubsets = 1U << kAllMitigations.size();
  std::vector<MonotonicityViolation> out;
  for (auto v : kAllVariants) {
    std::array<bool, kSubsets> leaked{};
    for (std::uint8_t bits = 0; bits < kSubsets; ++bits) {
      const auto cell = evaluate(v, MitigationSet::from_bits(bits), cfg);
      leaked[bits] = cell.leaked;
      if (cells_out) cells_out->push_back(cell);
    }
    for (std::uint8_t a = 0; a < kSubsets; ++a)
      for (std::uint8_t b = 0; b < kSubsets; ++b)
        if (a != b && (a & ~b) == 0 && !leaked[a] && leaked[b])
          out.push_back({v, MitigationSet::from_bits(a), MitigationSet::from_bits(b)});
  }
  return out;
}

struct SweepPoint {
  std::size_t window = 0;
  bool leaked = false;
  std::size_t bytes_recovered = 0;
};

struct WindowSweep {
  Variant variant = Variant::Pht;
  std::vector<SweepPoint> points;  // windows 0..max in order

  // Smallest window that leaks, if any.
  [[nodiscard]] std::optional<std::size_t> threshold() const {
    for (const auto& p : points)
      if (p.leaked) return p.window;
    return std::nullopt;
  }
  // Leaks exactly at windows >= threshold().
  [[nodiscard]] bool monotone() const {
    const auto t = threshold();
    return std::all_of(points.begin(), points.end(), [&](const SweepPoint& p) { return p.leaked == (t && p.window >= *t); });
  }
};

inline WindowSweep window_sweep(Variant v, const LabConfig& cfg, std::size_t max_window = 64,
                                const MitigationSet& set = {}) {
  WindowSweep s{v, {}};
  for (std::size_t w = 0; w <= max_window; ++w) {
    LabConfig c = cfg;
    c.pipeline.window = w;
    const auto cell = evaluate(v, set, c);
    s.points.push_back({w, cell.leaked, cell.bytes_recovered});
  }
  return s;
}

inline constexpr std::string_view kMatrixCsvHeader = "variant,mitigation,leaked,bytes_recovered,transient_count";

inline std::string matrix_csv(const MatrixReport& r) {
  std::ostringstream os;
  os << kMatrixCsvHeader << "\n";
  for (const auto& c : r.cells)
    os << to_string(c.variant) << ',' << c.mitigations.name() << ',' << (c.leaked ? "true" : "false") << ','
       << c.bytes_recovered << ',' << c.transient_count << "\n";
  return os.str();
}

}  // namespace speclab
