#pragma once

// Speculative executor and its non-speculative reference interpreter.
//
// Timing model
// ------------
// One instruction issues per cycle. Every register carries the cycle at which
// its value becomes available: ALU results one cycle after their inputs, load
// results `latency` cycles after the load executes (a load executes once its
// address registers are available). Nothing stalls on data except control
// transfers, which need their operands to pick a path:
//
//  * BLT / JMPI / RET whose operand is still pending at issue consult the PHT,
//    BTB or RSB respectively and open a speculation frame that resolves when
//    the operand arrives.
//  * A load that overlaps an older store whose address is still pending may
//    bypass it (store-to-load forwarding speculation), opening an STL frame
//    that resolves when the store address arrives.
//
// Inside a frame, at most `window` transient instructions issue, and only
// before the resolve cycle. A transient instruction whose inputs arrive at or
// after the resolve cycle issues but never executes, so it touches neither the
// cache nor any predictor. At resolution the register checkpoint is restored
// and the speculating instruction re-executes architecturally with its now
// available operand. Cache and predictor state are never restored.
//
// Invocation convention
// ---------------------
// Every input value runs the program once from its entry with r1 = input.
// Other registers and memory persist across invocations. An empty input list
// runs the program once with r1 untouched.

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "speclab/cache.hpp"
#include "speclab/isa.hpp"
#include "speclab/predictors.hpp"

namespace speclab {

enum class FaultKind { MemoryBounds, BadPc, StepLimit };

inline std::string_view to_string(FaultKind k) {
  switch (k) {
    case FaultKind::MemoryBounds: return "memory_bounds";
    case FaultKind::BadPc: return "bad_pc";
    case FaultKind::StepLimit: return "step_limit";
  }
  return "?";
}

struct Fault {
  FaultKind kind = FaultKind::BadPc;
  CodeIndex pc = 0;
  std::uint64_t addr = 0;

  friend bool operator==(const Fault&, const Fault&) = default;
};

struct ArchState {
  std::array<std::uint64_t, kNumRegisters> regs{};
  MemoryImage memory;
  CodeIndex pc = 0;
  bool halted = false;
  std::optional<Fault> fault;

  ArchState() = default;
  explicit ArchState(MemoryImage mem) : memory(std::move(mem)) {}

  friend bool operator==(const ArchState&, const ArchState&) = default;
};

// A transient access left the memory image. Architecturally such accesses
// fault; transiently they indicate a broken layout, so the run is aborted.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PredictorConfig {
  std::size_t pht_size = 1024;
  std::size_t btb_entries = 256;
  std::size_t rsb_depth = 16;

  friend bool operator==(const PredictorConfig&, const PredictorConfig&) = default;
};

struct MicroArchState {
  Cache cache;
  Pht pht;
  Btb btb;
  Rsb rsb;
  AliasTable aliases;
  std::uint64_t cycle = 0;

  explicit MicroArchState(const CacheConfig& cache_cfg = {}, const PredictorConfig& pred = {})
      : cache(cache_cfg), pht(pred.pht_size), btb(pred.btb_entries), rsb(pred.rsb_depth) {}

  [[nodiscard]] std::uint64_t phys(std::uint64_t addr) const { return aliases.translate(addr); }
};

enum class SpecCause { Pht, Btb, Rsb, Stl };

inline std::string_view to_string(SpecCause c) {
  switch (c) {
    case SpecCause::Pht: return "pht";
    case SpecCause::Btb: return "btb";
    case SpecCause::Rsb: return "rsb";
    case SpecCause::Stl: return "stl";
  }
  return "?";
}

struct PipelineConfig {
  std::size_t window = 64;
  bool pht = true;
  bool btb = true;
  bool rsb = true;
  bool stl = true;
  StoreBypassPolicy store_bypass;
  std::uint64_t step_limit = 1'000'000;
  bool record = true;  // keep per-instruction trace entries

  [[nodiscard]] bool enabled(SpecCause c) const {
    switch (c) {
      case SpecCause::Pht: return pht;
      case SpecCause::Btb: return btb;
      case SpecCause::Rsb: return rsb;
      case SpecCause::Stl: return stl && store_bypass.enabled;
    }
    return false;
  }
};

struct TraceEntry {
  CodeIndex pc = 0;
  std::uint64_t cycle = 0;
  std::optional<std::uint64_t> addr;  // memory operand, if any
  bool executed = true;               // false: issued transiently but inputs arrived too late
};

struct FrameRecord {
  SpecCause cause = SpecCause::Pht;
  CodeIndex site = 0;
  CodeIndex predicted = 0;
  bool squashed = false;
  std::uint64_t opened_at = 0;
  std::uint64_t resolve_at = 0;
  std::size_t transient_count = 0;
  std::vector<TraceEntry> transient;
};

struct ExecutionTrace {
  std::vector<TraceEntry> committed;
  std::vector<FrameRecord> frames;
  std::size_t committed_count = 0;
  std::uint64_t total_cycles = 0;

  [[nodiscard]] std::size_t squash_count() const {
    return static_cast<std::size_t>(std::count_if(frames.begin(), frames.end(), [](const auto& f) { return f.squashed; }));
  }
  [[nodiscard]] std::size_t squash_count(SpecCause c) const {
    return static_cast<std::size_t>(
        std::count_if(frames.begin(), frames.end(), [c](const auto& f) { return f.squashed && f.cause == c; }));
  }
  [[nodiscard]] std::size_t transient_total() const {
    std::size_t n = 0;
    for (const auto& f : frames) n += f.transient_count;
    return n;
  }

  void append(const ExecutionTrace& other) {
    committed.insert(committed.end(), other.committed.begin(), other.committed.end());
    frames.insert(frames.end(), other.frames.begin(), other.frames.end());
    committed_count += other.committed_count;
    total_cycles += other.total_cycles;
  }
};

// Cycle at which a load issued at `t` delivers its value.
inline std::uint64_t resolve_timing(std::uint64_t t, const AccessResult& access) { return t + access.latency; }

namespace detail {

inline constexpr std::uint64_t kNever = std::numeric_limits<std::uint64_t>::max() / 4;

inline std::uint64_t alu(Opcode op, std::uint64_t a, std::uint64_t b) {
  switch (op) {
    case Opcode::Add: return a + b;
    case Opcode::And: return a & b;
    case Opcode::Shl: return a << (b & 63);
    default: return 0;
  }
}

inline std::uint64_t width_of(Opcode op) { return op == Opcode::StoreQuad ? 8 : 1; }

class Engine {
 public:
  Engine(const Program& prog, ArchState& arch, MicroArchState& ua, const PipelineConfig& cfg, ExecutionTrace& trace)
      : prog_(prog), arch_(arch), ua_(ua), cfg_(cfg), trace_(trace) {}

  // Returns false once the architectural state has faulted.
  bool invoke(std::optional<std::uint64_t> input) {
    const auto start = ua_.cycle;
    arch_.pc = prog_.entry();
    arch_.halted = false;
    if (input) {
      arch_.regs[kInputReg] = *input;
      ready_[kInputReg] = ua_.cycle;
    }
    while (!arch_.halted) step();
    drain();
    trace_.total_cycles += ua_.cycle - start;
    return !arch_.fault.has_value();
  }

 private:
  struct PendingStore {
    std::uint64_t addr;
    std::uint64_t width;
    std::array<std::uint8_t, 8> old;
    std::uint64_t addr_ready;
  };

  struct Buffered {
    std::uint8_t value;
    std::uint64_t ready;
  };

  struct Frame {
    std::uint64_t resolve_at;
    std::unordered_map<std::uint64_t, Buffered> stores;
  };

  // --- shared helpers ------------------------------------------------------

  [[nodiscard]] bool can_speculate(SpecCause c) const { return cfg_.window > 0 && cfg_.enabled(c); }

  [[nodiscard]] std::uint64_t late_data(std::uint64_t addr, std::uint64_t width) const {
    std::uint64_t r = 0;
    for (std::uint64_t i = 0; i < width; ++i)
      if (auto it = late_.find(addr + i); it != late_.end()) r = std::max(r, it->second);
    return r;
  }

  // Oldest store whose address is still pending at `when` and that overlaps the access.
  [[nodiscard]] const PendingStore* unresolved_overlap(std::uint64_t addr, std::uint64_t width, std::uint64_t when) const {
    for (const auto& s : pending_)
      if (s.addr_ready > when && addr < s.addr + s.width && s.addr < addr + width) return &s;
    return nullptr;
  }

  [[nodiscard]] std::uint64_t latest_unresolved(std::uint64_t when) const {
    std::uint64_t r = 0;
    for (const auto& s : pending_)
      if (s.addr_ready > when) r = std::max(r, s.addr_ready);
    return r;
  }

  void touch(std::uint64_t addr, std::uint64_t width) {
    ua_.cache.access(ua_.phys(addr));
    const auto last = addr + width - 1;
    if (ua_.cache.line_of(ua_.phys(last)) != ua_.cache.line_of(ua_.phys(addr))) ua_.cache.access(ua_.phys(last));
  }

  void retire(std::uint64_t now) {
    std::erase_if(pending_, [&](const PendingStore& s) {
      if (s.addr_ready > now) return false;
      touch(s.addr, s.width);
      return true;
    });
  }

  void drain() {
    std::uint64_t t = ua_.cycle;
    for (auto r : ready_) t = std::max(t, r);
    for (const auto& s : pending_) t = std::max(t, s.addr_ready);
    ua_.cycle = t;
    retire(std::numeric_limits<std::uint64_t>::max());
    late_.clear();
  }

  void fault(FaultKind kind, std::uint64_t addr = 0) {
    arch_.fault = Fault{kind, arch_.pc, addr};
    arch_.halted = true;
  }

  void commit(std::uint64_t t, std::optional<std::uint64_t> addr = std::nullopt) {
    if (cfg_.record) trace_.committed.push_back({arch_.pc, t, addr, true});
    ++trace_.committed_count;
    ++steps_;
    ua_.cycle = t + 1;
  }

  // --- architectural step --------------------------------------------------

  void step() {
    retire(ua_.cycle);
    const CodeIndex pc = arch_.pc;
    if (pc >= prog_.size()) return fault(FaultKind::BadPc);
    if (steps_ >= cfg_.step_limit) return fault(FaultKind::StepLimit);

    const Instruction& in = prog_[pc];
    auto& r = arch_.regs;
    auto& mem = arch_.memory;
    std::uint64_t t = ua_.cycle;
    const bool resolving = std::exchange(post_resolve_, false);

    switch (in.op) {
      case Opcode::LoadByte: {
        const std::uint64_t addr = r[in.ra] + r[in.rb] * in.imm;
        if (!mem.contains(addr)) return fault(FaultKind::MemoryBounds, addr);
        std::uint64_t exec = std::max({t, ready_[in.ra], ready_[in.rb]});
        if (const auto* s = unresolved_overlap(addr, 1, exec)) {
          if (!resolving && can_speculate(SpecCause::Stl)) {
            return speculate(SpecCause::Stl, pc, pc, t, s->addr_ready, true);
          }
          exec = std::max(exec, s->addr_ready);
        }
        if (!cfg_.store_bypass.enabled) exec = std::max(exec, latest_unresolved(exec));
        const auto lat = ua_.cache.access(ua_.phys(addr)).latency;
        r[in.rd] = mem.read8(addr);
        ready_[in.rd] = std::max(exec + lat, late_data(addr, 1));
        commit(t, addr);
        arch_.pc = pc + 1;
        return;
      }
      case Opcode::Store:
      case Opcode::StoreQuad: {
        const std::uint64_t width = width_of(in.op);
        const std::uint64_t addr = r[in.ra] + in.imm;
        if (!mem.contains(addr, width)) return fault(FaultKind::MemoryBounds, addr);
        const std::uint64_t addr_ready = std::max(t, ready_[in.ra]);
        const std::uint64_t data_ready = std::max(t, ready_[in.rd]);
        PendingStore ps{addr, width, {}, addr_ready};
        for (std::uint64_t i = 0; i < width; ++i) ps.old[i] = mem.read8(addr + i);
        if (width == 1)
          mem.write8(addr, static_cast<std::uint8_t>(r[in.rd]));
        else
          mem.write64(addr, r[in.rd]);
        if (data_ready > t)
          for (std::uint64_t i = 0; i < width; ++i) late_[addr + i] = data_ready;
        if (addr_ready > t)
          pending_.push_back(ps);
        else
          touch(addr, width);
        commit(t, addr);
        arch_.pc = pc + 1;
        return;
      }
      case Opcode::MovImm:
        r[in.rd] = in.imm;
        ready_[in.rd] = t + 1;
        commit(t);
        arch_.pc = pc + 1;
        return;
      case Opcode::Add:
      case Opcode::And:
      case Opcode::Shl: {
        const std::uint64_t src = in.has_imm ? in.imm : r[in.rb];
        const std::uint64_t src_ready = in.has_imm ? 0 : ready_[in.rb];
        r[in.rd] = alu(in.op, r[in.rd], src);
        ready_[in.rd] = std::max({t, ready_[in.rd], src_ready}) + 1;
        commit(t);
        arch_.pc = pc + 1;
        return;
      }
      case Opcode::SelectMask:
        r[in.rd] = r[in.ra] < r[in.rb] ? ~std::uint64_t{0} : 0;
        ready_[in.rd] = std::max({t, ready_[in.ra], ready_[in.rb]}) + 1;
        commit(t);
        arch_.pc = pc + 1;
        return;
      case Opcode::CmpBranchLess: {
        const std::uint64_t operands = std::max(ready_[in.ra], ready_[in.rb]);
        const bool taken = r[in.ra] < r[in.rb];
        if (operands > t) {
          if (can_speculate(SpecCause::Pht)) {
            const CodeIndex predicted = ua_.pht.predict(pc) ? in.target : pc + 1;
            return speculate(SpecCause::Pht, pc, predicted, t, operands, predicted != (taken ? in.target : pc + 1));
          }
          t = operands;
        }
        ua_.pht.update(pc, taken);
        commit(t);
        arch_.pc = taken ? in.target : pc + 1;
        return;
      }
      case Opcode::JumpIndirect: {
        const std::uint64_t target = r[in.ra];
        if (ready_[in.ra] > t) {
          if (auto predicted = ua_.btb.predict(pc); predicted && can_speculate(SpecCause::Btb))
            return speculate(SpecCause::Btb, pc, *predicted, t, ready_[in.ra], *predicted != target);
          t = ready_[in.ra];
        }
        if (target >= prog_.size()) return fault(FaultKind::BadPc, target);
        ua_.btb.update(pc, target);
        commit(t);
        arch_.pc = target;
        return;
      }
      case Opcode::Call: {
        const std::uint64_t sp = r[kStackReg] - 8;
        if (!mem.contains(sp, 8)) return fault(FaultKind::MemoryBounds, sp);
        mem.write64(sp, pc + 1);
        touch(sp, 8);
        r[kStackReg] = sp;
        ready_[kStackReg] = std::max(t, ready_[kStackReg]) + 1;
        ua_.rsb.push(pc + 1);
        commit(t, sp);
        arch_.pc = in.target;
        return;
      }
      case Opcode::Ret: {
        const std::uint64_t sp = r[kStackReg];
        if (!mem.contains(sp, 8)) return fault(FaultKind::MemoryBounds, sp);
        const std::uint64_t target = mem.read64(sp);
        if (!resolving) {
          const std::uint64_t exec = std::max(t, ready_[kStackReg]);
          const auto avail =
              std::max(resolve_timing(exec, ua_.cache.access(ua_.phys(sp))), late_data(sp, 8));
          const auto predicted = ua_.rsb.pop();
          if (avail > t) {
            if (predicted && can_speculate(SpecCause::Rsb))
              return speculate(SpecCause::Rsb, pc, *predicted, t, avail, *predicted != target);
            t = avail;
          }
        }
        if (target >= prog_.size()) return fault(FaultKind::BadPc, target);
        r[kStackReg] = sp + 8;
        ready_[kStackReg] = std::max(t, ready_[kStackReg]) + 1;
        commit(t, sp);
        arch_.pc = target;
        return;
      }
      case Opcode::Flush: {
        const std::uint64_t addr = r[in.ra] + in.imm;
        if (!mem.contains(addr)) return fault(FaultKind::MemoryBounds, addr);
        ua_.cache.flush(ua_.phys(addr));
        commit(t, addr);
        arch_.pc = pc + 1;
        return;
      }
      case Opcode::Fence:
        for (auto v : ready_) t = std::max(t, v);
        for (const auto& s : pending_) t = std::max(t, s.addr_ready);
        retire(t);
        commit(t);
        arch_.pc = pc + 1;
        return;
      case Opcode::Halt:
        commit(t);
        arch_.halted = true;
        return;
    }
  }

  // --- speculation ---------------------------------------------------------

  void speculate(SpecCause cause, CodeIndex site, CodeIndex start, std::uint64_t t, std::uint64_t resolve_at,
                 bool mispredicted) {
    const auto saved_regs = arch_.regs;
    const auto saved_ready = ready_;

    FrameRecord rec{cause, site, start, mispredicted, t, resolve_at, 0, {}};
    Frame frame{resolve_at, {}};
    // A branch issues in cycle t and its successors from t+1; an STL frame
    // starts with the bypassing load itself.
    std::uint64_t issue = cause == SpecCause::Stl ? t : t + 1;
    CodeIndex pc = start;
    while (rec.transient_count < cfg_.window && issue < resolve_at && pc < prog_.size()) {
      TraceEntry entry{pc, issue, std::nullopt, true};
      const auto next = transient_step(pc, issue, frame, entry);
      ++rec.transient_count;
      if (cfg_.record) rec.transient.push_back(entry);
      if (!next) break;
      pc = *next;
      ++issue;
    }

    arch_.regs = saved_regs;
    ready_ = saved_ready;
    arch_.pc = site;
    ua_.cycle = resolve_at;
    post_resolve_ = true;
    trace_.frames.push_back(std::move(rec));
  }

  // Executes one wrong-path (or not-yet-confirmed) instruction. Returns the
  // next pc, or nullopt when the transient path cannot continue.
  std::optional<CodeIndex> transient_step(CodeIndex pc, std::uint64_t issue, Frame& frame, TraceEntry& entry) {
    const Instruction& in = prog_[pc];
    auto& r = arch_.regs;
    const auto& mem = arch_.memory;
    const auto never = [&](Reg rd) {
      ready_[rd] = kNever;
      entry.executed = false;
    };

    switch (in.op) {
      case Opcode::LoadByte: {
        const std::uint64_t addr = r[in.ra] + r[in.rb] * in.imm;
        entry.addr = addr;
        std::uint64_t exec = std::max({issue, ready_[in.ra], ready_[in.rb]});
        if (exec >= frame.resolve_at) {
          never(in.rd);
          return pc + 1;
        }
        if (!mem.contains(addr)) throw ModelError("transient load outside memory image at pc " + std::to_string(pc));
        if (auto it = frame.stores.find(addr); it != frame.stores.end()) {
          r[in.rd] = it->second.value;
          ready_[in.rd] = std::max(exec, it->second.ready) + 1;
          return pc + 1;
        }
        std::uint8_t value = mem.read8(addr);
        if (const auto* s = unresolved_overlap(addr, 1, exec)) {
          if (cfg_.enabled(SpecCause::Stl)) {
            value = s->old[addr - s->addr];
          } else {
            exec = s->addr_ready;
          }
        }
        if (!cfg_.store_bypass.enabled) exec = std::max(exec, latest_unresolved(exec));
        if (exec >= frame.resolve_at) {
          never(in.rd);
          return pc + 1;
        }
        const auto lat = ua_.cache.access(ua_.phys(addr)).latency;
        r[in.rd] = value;
        ready_[in.rd] = std::max(exec + lat, late_data(addr, 1));
        return pc + 1;
      }
      case Opcode::Store:
      case Opcode::StoreQuad: {
        const std::uint64_t width = width_of(in.op);
        const std::uint64_t addr = r[in.ra] + in.imm;
        entry.addr = addr;
        const std::uint64_t addr_ready = std::max(issue, ready_[in.ra]);
        if (addr_ready >= frame.resolve_at) {
          entry.executed = false;
          return pc + 1;
        }
        if (!mem.contains(addr, width))
          throw ModelError("transient store outside memory image at pc " + std::to_string(pc));
        const std::uint64_t data_ready = std::max(issue, ready_[in.rd]);
        for (std::uint64_t i = 0; i < width; ++i)
          frame.stores[addr + i] = {static_cast<std::uint8_t>(r[in.rd] >> (8 * i)), data_ready};
        return pc + 1;
      }
      case Opcode::MovImm:
        r[in.rd] = in.imm;
        ready_[in.rd] = issue + 1;
        return pc + 1;
      case Opcode::Add:
      case Opcode::And:
      case Opcode::Shl: {
        const std::uint64_t src = in.has_imm ? in.imm : r[in.rb];
        const std::uint64_t src_ready = in.has_imm ? 0 : ready_[in.rb];
        r[in.rd] = alu(in.op, r[in.rd], src);
        ready_[in.rd] = std::max({issue, ready_[in.rd], src_ready}) + 1;
        return pc + 1;
      }
      case Opcode::SelectMask:
        r[in.rd] = r[in.ra] < r[in.rb] ? ~std::uint64_t{0} : 0;
        ready_[in.rd] = std::max({issue, ready_[in.ra], ready_[in.rb]}) + 1;
        return pc + 1;
      case Opcode::CmpBranchLess: {
        // Nested branches follow their prediction but open no frame and train nothing.
        if (std::max(ready_[in.ra], ready_[in.rb]) <= issue) return r[in.ra] < r[in.rb] ? in.target : pc + 1;
        return ua_.pht.predict(pc) ? in.target : pc + 1;
      }
      case Opcode::JumpIndirect: {
        if (ready_[in.ra] <= issue) {
          if (r[in.ra] >= prog_.size()) return std::nullopt;
          return static_cast<CodeIndex>(r[in.ra]);
        }
        return ua_.btb.predict(pc);
      }
      case Opcode::Call: {
        if (ready_[kStackReg] >= frame.resolve_at) return std::nullopt;
        const std::uint64_t sp = r[kStackReg] - 8;
        entry.addr = sp;
        if (!mem.contains(sp, 8)) throw ModelError("transient call outside memory image at pc " + std::to_string(pc));
        for (std::uint64_t i = 0; i < 8; ++i)
          frame.stores[sp + i] = {static_cast<std::uint8_t>((pc + 1) >> (8 * i)), issue};
        r[kStackReg] = sp;
        ready_[kStackReg] = std::max(issue, ready_[kStackReg]) + 1;
        ua_.rsb.push(pc + 1);
        return in.target;
      }
      case Opcode::Ret: {
        const std::uint64_t sp = r[kStackReg];
        entry.addr = sp;
        if (ready_[kStackReg] < frame.resolve_at) {
          if (!mem.contains(sp, 8)) throw ModelError("transient return outside memory image at pc " + std::to_string(pc));
          ua_.cache.access(ua_.phys(sp));
        }
        r[kStackReg] = sp + 8;
        ready_[kStackReg] = std::max(issue, ready_[kStackReg]) + 1;
        return ua_.rsb.pop();
      }
      case Opcode::Flush:
        // clflush does not retire transiently; nothing to undo
        entry.addr = r[in.ra] + in.imm;
        return pc + 1;
      case Opcode::Fence:
      case Opcode::Halt:
        return std::nullopt;
    }
    return std::nullopt;
  }

  const Program& prog_;
  ArchState& arch_;
  MicroArchState& ua_;
  const PipelineConfig& cfg_;
  ExecutionTrace& trace_;

  std::array<std::uint64_t, kNumRegisters> ready_{};
  std::vector<PendingStore> pending_;
  std::unordered_map<std::uint64_t, std::uint64_t> late_;  // byte address -> cycle its stored value is available
  std::uint64_t steps_ = 0;
  bool post_resolve_ = false;
};

}  // namespace detail

// Runs `program` once per input on the speculative pipeline, mutating both
// states in place.
inline ExecutionTrace run(const Program& program, ArchState& arch, MicroArchState& uarch, const PipelineConfig& cfg,
                          std::span<const std::uint64_t> inputs = {}) {
  ExecutionTrace trace;
  detail::Engine engine(program, arch, uarch, cfg, trace);
  if (inputs.empty()) {
    engine.invoke(std::nullopt);
    return trace;
  }
  for (auto x : inputs)
    if (!engine.invoke(x)) break;
  return trace;
}

// In-order interpreter with no timing, caches or predictors. Same invocation
// convention and fault rules as run().
inline ArchState reference_run(const Program& program, ArchState arch, std::span<const std::uint64_t> inputs = {},
                               std::uint64_t step_limit = 1'000'000) {
  std::uint64_t steps = 0;
  auto& r = arch.regs;
  auto& mem = arch.memory;

  auto once = [&](std::optional<std::uint64_t> input) {
    arch.pc = program.entry();
    arch.halted = false;
    if (input) r[kInputReg] = *input;
    auto fault = [&](FaultKind k, std::uint64_t addr = 0) {
      arch.fault = Fault{k, arch.pc, addr};
      arch.halted = true;
    };
    while (!arch.halted) {
      if (arch.pc >= program.size()) {
        fault(FaultKind::BadPc);
        break;
      }
      if (steps >= step_limit) {
        fault(FaultKind::StepLimit);
        break;
      }
      const Instruction& in = program[arch.pc];
      CodeIndex next = arch.pc + 1;
      switch (in.op) {
        case Opcode::LoadByte: {
          const std::uint64_t addr = r[in.ra] + r[in.rb] * in.imm;
          if (!mem.contains(addr)) return fault(FaultKind::MemoryBounds, addr);
          r[in.rd] = mem.read8(addr);
          break;
        }
        case Opcode::Store: {
          const std::uint64_t addr = r[in.ra] + in.imm;
          if (!mem.contains(addr)) return fault(FaultKind::MemoryBounds, addr);
          mem.write8(addr, static_cast<std::uint8_t>(r[in.rd]));
          break;
        }
        case Opcode::StoreQuad: {
          const std::uint64_t addr = r[in.ra] + in.imm;
          if (!mem.contains(addr, 8)) return fault(FaultKind::MemoryBounds, addr);
          mem.write64(addr, r[in.rd]);
          break;
        }
        case Opcode::MovImm: r[in.rd] = in.imm; break;
        case Opcode::Add: r[in.rd] += in.has_imm ? in.imm : r[in.rb]; break;
        case Opcode::And: r[in.rd] &= in.has_imm ? in.imm : r[in.rb]; break;
        case Opcode::Shl: r[in.rd] <<= ((in.has_imm ? in.imm : r[in.rb]) & 63); break;
        case Opcode::SelectMask: r[in.rd] = r[in.ra] < r[in.rb] ? ~std::uint64_t{0} : 0; break;
        case Opcode::CmpBranchLess:
          if (r[in.ra] < r[in.rb]) next = in.target;
          break;
        case Opcode::JumpIndirect:
          if (r[in.ra] >= program.size()) return fault(FaultKind::BadPc, r[in.ra]);
          next = r[in.ra];
          break;
        case Opcode::Call: {
          const std::uint64_t sp = r[kStackReg] - 8;
          if (!mem.contains(sp, 8)) return fault(FaultKind::MemoryBounds, sp);
          mem.write64(sp, arch.pc + 1);
          r[kStackReg] = sp;
          next = in.target;
          break;
        }
        case Opcode::Ret: {
          const std::uint64_t sp = r[kStackReg];
          if (!mem.contains(sp, 8)) return fault(FaultKind::MemoryBounds, sp);
          const std::uint64_t target = mem.read64(sp);
          if (target >= program.size()) return fault(FaultKind::BadPc, target);
          r[kStackReg] = sp + 8;
          next = target;
          break;
        }
        case Opcode::Flush: {
          const std::uint64_t addr = r[in.ra] + in.imm;
          if (!mem.contains(addr)) return fault(FaultKind::MemoryBounds, addr);
          break;
        }
        case Opcode::Fence: break;
        case Opcode::Halt: arch.halted = true; break;
      }
      ++steps;
      if (!arch.halted) arch.pc = next;
    }
  };

  if (inputs.empty()) {
    once(std::nullopt);
  } else {
    for (auto x : inputs) {
      once(x);
      if (arch.fault) break;
    }
  }
  return arch;
}

}  // namespace speclab
