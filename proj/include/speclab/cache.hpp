#pragma once

// Single-level, set-associative, physically-addressed data cache with LRU
// replacement and fixed hit/miss latencies.

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "speclab/isa.hpp"

namespace speclab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CacheConfig {
  std::uint64_t line_size = 64;
  std::uint64_t sets = 64;
  std::uint64_t ways = 8;
  std::uint64_t hit_latency = 40;
  std::uint64_t miss_latency = 300;
  // Uniform +/- jitter applied to every access latency; 0 disables it.
  std::uint64_t jitter = 0;
  std::uint64_t jitter_seed = 0;

  void validate() const {
    auto pow2 = [](std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; };
    if (!pow2(line_size)) throw ConfigError("cache line size must be a power of two");
    if (!pow2(sets)) throw ConfigError("cache set count must be a power of two");
    if (ways == 0) throw ConfigError("cache needs at least one way");
    if (miss_latency <= hit_latency) throw ConfigError("miss latency must exceed hit latency");
    if (jitter >= hit_latency) throw ConfigError("latency jitter must be below the hit latency");
  }

  friend bool operator==(const CacheConfig&, const CacheConfig&) = default;
};

struct AccessResult {
  bool hit = false;
  std::uint64_t latency = 0;
};

class Cache {
 public:
  explicit Cache(CacheConfig cfg = {}) : cfg_(cfg), sets_(cfg.sets), rng_(cfg.jitter_seed) {
    cfg_.validate();
  }

  AccessResult access(std::uint64_t phys) {
    auto& set = sets_[set_index(phys)];
    const auto tag = line_of(phys);
    ++clock_;
    for (auto& line : set) {
      if (line.tag == tag) {
        line.last_use = clock_;
        return {true, jittered(cfg_.hit_latency)};
      }
    }
    if (set.size() >= cfg_.ways) {
      auto victim = set.begin();
      for (auto it = set.begin(); it != set.end(); ++it)
        if (it->last_use < victim->last_use) victim = it;
      set.erase(victim);
    }
    set.push_back({tag, clock_});
    return {false, jittered(cfg_.miss_latency)};
  }

  void flush(std::uint64_t phys) {
    auto& set = sets_[set_index(phys)];
    const auto tag = line_of(phys);
    std::erase_if(set, [&](const Line& l) { return l.tag == tag; });
  }

  // Inspection only: no LRU update, no latency.
  [[nodiscard]] bool contains(std::uint64_t phys) const {
    const auto& set = sets_[set_index(phys)];
    const auto tag = line_of(phys);
    for (const auto& l : set)
      if (l.tag == tag) return true;
    return false;
  }

  [[nodiscard]] std::size_t set_occupancy(std::uint64_t phys) const { return sets_[set_index(phys)].size(); }
  [[nodiscard]] const CacheConfig& config() const { return cfg_; }
  [[nodiscard]] std::uint64_t line_of(std::uint64_t phys) const { return phys / cfg_.line_size; }

 private:
  struct Line {
    std::uint64_t tag;
    std::uint64_t last_use;
  };

  [[nodiscard]] std::size_t set_index(std::uint64_t phys) const { return (phys / cfg_.line_size) & (cfg_.sets - 1); }

  std::uint64_t jittered(std::uint64_t base) {
    if (cfg_.jitter == 0) return base;
    std::uniform_int_distribution<std::int64_t> d(-static_cast<std::int64_t>(cfg_.jitter),
                                                  static_cast<std::int64_t>(cfg_.jitter));
    return static_cast<std::uint64_t>(static_cast<std::int64_t>(base) + d(rng_));
  }

  CacheConfig cfg_;
  std::vector<std::vector<Line>> sets_;
  std::uint64_t clock_ = 0;
  std::mt19937_64 rng_;
};

enum class Residency { Cached, Uncached };

// Latency threshold classifier. The threshold must sit strictly between the
// configured hit and miss latencies.
class Classifier {
 public:
  Classifier(const CacheConfig& cfg, std::uint64_t threshold) : threshold_(threshold) {
    if (threshold <= cfg.hit_latency || threshold >= cfg.miss_latency)
      throw ConfigError("threshold " + std::to_string(threshold) + " not strictly between hit latency " +
                        std::to_string(cfg.hit_latency) + " and miss latency " + std::to_string(cfg.miss_latency));
  }

  [[nodiscard]] Residency operator()(std::uint64_t latency) const {
    return latency < threshold_ ? Residency::Cached : Residency::Uncached;
  }
  [[nodiscard]] std::uint64_t threshold() const { return threshold_; }

 private:
  std::uint64_t threshold_;
};

inline Residency classify(std::uint64_t latency, std::uint64_t threshold, const CacheConfig& cfg = {}) {
  return Classifier(cfg, threshold)(latency);
}

// Page-granular remapping applied before cache lookup. Aliased victim pages
// resolve to the receiver's physical frames; everything else is identity.
class AliasTable {
 public:
  void map(std::uint64_t victim_page, std::uint64_t phys_page) { pages_[victim_page] = phys_page; }
  void clear() { pages_.clear(); }

  [[nodiscard]] std::uint64_t translate(std::uint64_t addr) const {
    auto it = pages_.find(addr / kPageSize);
    if (it == pages_.end()) return addr;
    return it->second * kPageSize + addr % kPageSize;
  }

  [[nodiscard]] std::size_t size() const { return pages_.size(); }
  [[nodiscard]] std::optional<std::uint64_t> lookup(std::uint64_t victim_page) const {
    auto it = pages_.find(victim_page);
    if (it == pages_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::unordered_map<std::uint64_t, std::uint64_t> pages_;
};

}  // namespace speclab
