#pragma once

// The receiver side: find the victim's magic pages, alias them onto receiver
// frames, and read the victim's table accesses back with Flush+Reload.
//
// Victim and receiver share one MicroArchState (one core, one cache). The
// receiver only reads victim memory; sharing is established by cache
// addressing through the AliasTable, never by writing to the victim image.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "speclab/cache.hpp"
#include "speclab/config.hpp"
#include "speclab/gadgets.hpp"
#include "speclab/pipeline.hpp"

namespace speclab {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Physical address of receiver frame 0. Far above any victim image, so frames
// never collide with unaliased victim addresses.
inline constexpr std::uint64_t kReceiverFrameBase = 1ULL << 40;

inline std::uint64_t receiver_frame_addr(std::size_t frame) { return kReceiverFrameBase + frame * kPageSize; }

// Ids of pages whose every 8-byte word equals `magic`, ascending.
inline std::vector<std::uint64_t> scan_for_magic(const MemoryImage& victim, std::uint64_t magic = kDefaultMagic) {
  std::vector<std::uint64_t> pages;
  const std::uint64_t count = victim.size() / kPageSize;
  for (std::uint64_t p = 0; p < count; ++p) {
    bool all = true;
    for (std::uint64_t off = 0; off < kPageSize && all; off += 8) all = victim.read64(p * kPageSize + off) == magic;
    if (all) pages.push_back(p);
  }
  if (pages.size() < kTablePages)
    throw ProtocolError("magic region incomplete: found " + std::to_string(pages.size()) + " of " +
                        std::to_string(kTablePages) + " pages");
  return pages;
}

struct SharedMapping {
  std::vector<std::uint64_t> victim_pages;  // frame i aliases victim_pages[i]

  [[nodiscard]] std::size_t size() const { return victim_pages.size(); }
  friend bool operator==(const SharedMapping&, const SharedMapping&) = default;
};

// Frame i of the receiver and victim page pages[i] resolve to the same
// physical lines afterwards. Re-establishing the same pages is a no-op.
inline SharedMapping establish_shared(std::span<const std::uint64_t> pages, AliasTable& aliases) {
  if (pages.size() != kTablePages)
    throw ProtocolError("shared mapping needs exactly " + std::to_string(kTablePages) + " pages, got " +
                        std::to_string(pages.size()));
  SharedMapping m{{pages.begin(), pages.end()}};
  for (std::size_t i = 0; i < pages.size(); ++i) aliases.map(pages[i], receiver_frame_addr(i) / kPageSize);
  return m;
}

enum class ByteStatus { Recovered, None, Ambiguous };

inline std::string_view to_string(ByteStatus s) {
  switch (s) {
    case ByteStatus::Recovered: return "recovered";
    case ByteStatus::None: return "none";
    case ByteStatus::Ambiguous: return "ambiguous";
  }
  return "?";
}

struct ProbeResult {
  ByteStatus status = ByteStatus::None;
  std::uint8_t value = 0;
  std::vector<std::uint8_t> hits;
};

// One Flush+Reload round over offset 0 of every frame. Each frame is flushed
// again right after its reload so that probing does not evict the victim's
// line from the shared set before it is read.
inline ProbeResult flush_reload_round(const SharedMapping& mapping, Cache& cache, const Classifier& classifier,
                                      const std::function<void()>& run_victim,
                                      std::span<const std::uint8_t> ignore = {}) {
  for (std::size_t i = 0; i < mapping.size(); ++i) cache.flush(receiver_frame_addr(i));
  run_victim();
  ProbeResult r;
  for (std::size_t i = 0; i < mapping.size(); ++i) {
    const auto addr = receiver_frame_addr(i);
    const auto latency = cache.access(addr).latency;
    cache.flush(addr);
    if (std::find(ignore.begin(), ignore.end(), i) != ignore.end()) continue;
    if (classifier(latency) == Residency::Cached) r.hits.push_back(static_cast<std::uint8_t>(i));
  }
  if (r.hits.size() == 1) {
    r.status = ByteStatus::Recovered;
    r.value = r.hits.front();
  } else if (r.hits.size() > 1) {
    r.status = ByteStatus::Ambiguous;
  }
  return r;
}

struct ByteResult {
  ByteStatus status = ByteStatus::None;
  std::uint8_t value = 0;
  std::size_t rounds = 0;
};

struct LeakReport {
  std::vector<ByteResult> bytes;
  std::vector<std::pair<std::string, std::string>> config;
  std::size_t transient_count = 0;  // transient instructions issued during exploit inputs

  [[nodiscard]] std::size_t recovered_count() const {
    return static_cast<std::size_t>(
        std::count_if(bytes.begin(), bytes.end(), [](const auto& b) { return b.status == ByteStatus::Recovered; }));
  }
  [[nodiscard]] bool complete() const { return recovered_count() == bytes.size(); }
  // Recovered values in order; unrecovered positions are skipped.
  [[nodiscard]] std::vector<std::uint8_t> recovered() const {
    std::vector<std::uint8_t> out;
    for (const auto& b : bytes)
      if (b.status == ByteStatus::Recovered) out.push_back(b.value);
    return out;
  }
  // Count of positions whose recovered value matches `truth`.
  [[nodiscard]] std::size_t correct(std::string_view truth) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < bytes.size() && i < truth.size(); ++i)
      if (bytes[i].status == ByteStatus::Recovered && bytes[i].value == static_cast<std::uint8_t>(truth[i])) ++n;
    return n;
  }
};

// A victim process plus the receiver attached to it.
class Session {
 public:
  Session(Program program, ArchState victim, const LabConfig& cfg)
      : program_(std::move(program)),
        victim_(std::move(victim)),
        cfg_(cfg),
        uarch_(cfg.cache, cfg.predictors),
        classifier_(cfg.cache, cfg.receiver.threshold) {}

  Session(const Gadget& g, const LabConfig& cfg) : Session(g.program, g.initial, cfg) {}

  // Scans victim memory and installs the aliasing. Idempotent.
  const SharedMapping& establish() {
    const auto pages = scan_for_magic(victim_.memory, cfg_.receiver.magic);
    mapping_ = establish_shared(pages, uarch_.aliases);
    return *mapping_;
  }
  [[nodiscard]] bool established() const { return mapping_.has_value(); }

  // One victim invocation with r1 = input.
  ExecutionTrace step(std::uint64_t input) {
    if (!cfg_.victim_enabled) return {};
    const std::uint64_t in[] = {input};
    auto t = run(program_, victim_, uarch_, cfg_.pipeline, in);
    if (victim_.fault) {
      // a faulted victim restarts cleanly on the next invocation
      victim_.fault.reset();
    }
    return t;
  }

  // Harness-side eviction of a victim line (the branch-condition flush).
  void evict(std::uint64_t victim_addr) { uarch_.cache.flush(uarch_.phys(victim_addr)); }

  ProbeResult probe(const std::function<void()>& run_victim, std::span<const std::uint8_t> ignore = {}) {
    if (!mapping_) throw ProtocolError("shared mapping not established");
    return flush_reload_round(*mapping_, uarch_.cache, classifier_, run_victim, ignore);
  }

  [[nodiscard]] const ArchState& victim() const { return victim_; }
  [[nodiscard]] MicroArchState& uarch() { return uarch_; }
  [[nodiscard]] const Program& program() const { return program_; }
  [[nodiscard]] const LabConfig& config() const { return cfg_; }

 private:
  Program program_;
  ArchState victim_;
  LabConfig cfg_;
  MicroArchState uarch_;
  Classifier classifier_;
  std::optional<SharedMapping> mapping_;
};

struct Schedule {
  std::size_t k = 8;           // training inputs per exploit input
  std::size_t max_rounds = 4;  // exploit attempts per byte
};

// Leaks n bytes past the victim's data array. Per byte and round: k training
// inputs, eviction of the branch-condition lines, then one probe round around
// the exploit input.
inline LeakReport recover_secret(Session& session, const Gadget& g, std::size_t n, const Schedule& schedule) {
  LeakReport report;
  report.config = session.config().echo();
  if (n == 0) return report;
  if (!session.established()) session.establish();

  std::vector<std::uint64_t> training(schedule.k);
  for (std::size_t j = 0; j < schedule.k; ++j) training[j] = j % g.spec.layout.data_len;

  for (std::size_t i = 0; i < n; ++i) {
    ByteResult br;
    for (std::size_t round = 1; round <= schedule.max_rounds; ++round) {
      for (auto x : training) session.step(x);
      for (auto line : g.condition_lines) session.evict(line);
      const auto probe = session.probe(
          [&] {
            auto t = session.step(g.exploit_input(i));
            report.transient_count += t.transient_total();
          },
          g.noise_pages);
      br.rounds = round;
      br.status = probe.status;
      br.value = probe.value;
      if (probe.status == ByteStatus::Recovered) break;
    }
    report.bytes.push_back(br);
  }
  return report;
}

// Builds the victim for `variant` from cfg and leaks cfg.gadget.secret.
inline LeakReport recover_secret(Variant variant, const LabConfig& cfg) {
  GadgetSpec spec{variant, cfg.gadget.training, cfg.layout(cfg.gadget.secret.size()), true};
  const auto g = make_gadget(spec, cfg.gadget.secret, cfg.receiver.magic);
  Session s(g, cfg);
  return recover_secret(s, g, cfg.gadget.secret.size(), {cfg.gadget.training, cfg.receiver.max_rounds});
}

struct CovertResult {
  std::vector<std::uint8_t> reconstructed;  // 0 where a round failed
  std::vector<ByteStatus> status;
  bool exact = false;
};

// Runs the covert sender one step per probe round and compares.
inline CovertResult covert_channel_test(const std::vector<std::uint8_t>& pattern, const LabConfig& cfg) {
  CovertResult r;
  if (pattern.empty()) {
    r.exact = true;
    return r;
  }
  const auto layout = cfg.layout(0);
  Session s(build_covert_sender(pattern, layout), victim_state(layout, "", cfg.receiver.magic), cfg);
  s.establish();
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    const auto p = s.probe([&] { s.step(i); });
    r.reconstructed.push_back(p.status == ByteStatus::Recovered ? p.value : 0);
    r.status.push_back(p.status);
  }
  r.exact = r.reconstructed == pattern &&
            std::all_of(r.status.begin(), r.status.end(), [](auto st) { return st == ByteStatus::Recovered; });
  return r;
}

}  // namespace speclab
