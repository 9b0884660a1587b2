#pragma once

// Branch prediction structures: PHT (conditional), BTB (indirect), RSB (return),
// plus the store-bypass policy consulted by memory disambiguation.
//
// Sites are instruction indices. None of this state is checkpointed: a pipeline
// squash leaves every predictor exactly as the transient path left it.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace speclab {

// 2-bit saturating counters, weakly-not-taken at reset.
class Pht {
 public:
  static constexpr std::uint8_t kInitial = 1;
  static constexpr std::uint8_t kMax = 3;

  explicit Pht(std::size_t size = 1024) : counters_(size, kInitial) {
    if (size == 0 || (size & (size - 1)) != 0) throw std::invalid_argument("PHT size must be a power of two");
  }

  [[nodiscard]] bool predict(std::size_t site) const { return counters_[index(site)] >= 2; }

  void update(std::size_t site, bool taken) {
    auto& c = counters_[index(site)];
    if (taken && c < kMax) ++c;
    if (!taken && c > 0) --c;
  }

  [[nodiscard]] std::uint8_t counter(std::size_t site) const { return counters_[index(site)]; }
  [[nodiscard]] std::size_t size() const { return counters_.size(); }

 private:
  [[nodiscard]] std::size_t index(std::size_t site) const { return site & (counters_.size() - 1); }

  std::vector<std::uint8_t> counters_;
};

// Direct-mapped, full-tag BTB.
class Btb {
 public:
  explicit Btb(std::size_t entries = 256) : entries_(entries) {
    if (entries == 0) throw std::invalid_argument("BTB needs at least one entry");
  }

  [[nodiscard]] std::optional<std::size_t> predict(std::size_t site) const {
    const auto& e = entries_[site % entries_.size()];
    if (e.valid && e.tag == site / entries_.size()) return e.target;
    return std::nullopt;
  }

  void update(std::size_t site, std::size_t target) {
    entries_[site % entries_.size()] = {site / entries_.size(), target, true};
  }

  [[nodiscard]] std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::size_t tag = 0;
    std::size_t target = 0;
    bool valid = false;
  };
  std::vector<Entry> entries_;
};

// Circular return stack. Pushing onto a full stack overwrites the oldest entry;
// popping an empty stack yields no prediction. Depth 0 never predicts.
class Rsb {
 public:
  explicit Rsb(std::size_t depth = 16) : slots_(depth) {}

  void push(std::size_t return_to) {
    if (slots_.empty()) return;
    top_ = (top_ + 1) % slots_.size();
    slots_[top_] = return_to;
    if (count_ < slots_.size()) ++count_;
  }

  std::optional<std::size_t> pop() {
    if (count_ == 0) return std::nullopt;
    auto v = slots_[top_];
    top_ = (top_ + slots_.size() - 1) % slots_.size();
    --count_;
    return v;
  }

  [[nodiscard]] std::size_t occupancy() const { return count_; }
  [[nodiscard]] std::size_t depth() const { return slots_.size(); }

 private:
  std::vector<std::size_t> slots_;
  std::size_t top_ = 0;
  std::size_t count_ = 0;
};

struct StoreBypassPolicy {
  bool enabled = true;
};

}  // namespace speclab
