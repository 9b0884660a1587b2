#pragma once

// Lab configuration: one flat key=value file, `#` comments, blank lines
// ignored. Unknown keys and malformed lines are errors. Every key has a
// default, listed by LabConfig::keys().

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "speclab/cache.hpp"
#include "speclab/gadgets.hpp"
#include "speclab/pipeline.hpp"

namespace speclab {

struct ReceiverConfig {
  std::uint64_t threshold = 150;
  std::size_t max_rounds = 4;
  std::uint64_t magic = kDefaultMagic;

  friend bool operator==(const ReceiverConfig&, const ReceiverConfig&) = default;
};

struct GadgetConfig {
  std::size_t training = 8;
  std::uint64_t data_length = 16;
  std::string secret = "KEY!";

  friend bool operator==(const GadgetConfig&, const GadgetConfig&) = default;
};

struct LabConfig {
  std::uint64_t memory_size = kDefaultImageSize;
  PredictorConfig predictors;
  CacheConfig cache;
  PipelineConfig pipeline;
  ReceiverConfig receiver;
  GadgetConfig gadget;
  bool victim_enabled = true;  // false: the victim step is a no-op
  std::optional<std::uint64_t> aslr_seed;

  struct Key {
    std::string name;
    std::function<std::string(const LabConfig&)> get;
    std::function<void(LabConfig&, std::string_view)> set;
  };

  static const std::vector<Key>& keys();

  void set(std::string_view key, std::string_view value);
  [[nodiscard]] std::string get(std::string_view key) const;
  // (key, value) pairs in keys() order.
  [[nodiscard]] std::vector<std::pair<std::string, std::string>> echo() const;
  [[nodiscard]] std::string serialize() const;
  void validate() const;

  [[nodiscard]] MemoryLayout layout(std::uint64_t secret_len) const {
    return standard_layout(memory_size, aslr_seed, gadget.data_length, secret_len);
  }
};

// Bytes from a hex string ("4b45", two digits per byte).
inline std::string decode_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw ConfigError("hex string has odd length");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw ConfigError("invalid hex digit '" + std::string(1, c) + "'");
  };
  std::string out;
  for (std::size_t i = 0; i < hex.size(); i += 2) out += static_cast<char>(nibble(hex[i]) * 16 + nibble(hex[i + 1]));
  return out;
}

// Printable ASCII secrets are written as is, anything else as "hex:<digits>".
inline std::string encode_secret(const std::string& s) {
  const bool printable = std::all_of(s.begin(), s.end(), [](char c) { return c >= 0x20 && c < 0x7F; });
  if (printable && !s.starts_with("hex:")) return s;
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out = "hex:";
  for (unsigned char c : s) {
    out += kDigits[c >> 4];
    out += kDigits[c & 0xF];
  }
  return out;
}

inline std::string decode_secret(std::string_view v) {
  if (v.starts_with("hex:")) return decode_hex(v.substr(4));
  return std::string(v);
}

namespace detail {

inline std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  int base = 10;
  if (v.size() > 2 && v[0] == '0' && (v[1] == 'x' || v[1] == 'X')) {
    v.remove_prefix(2);
    base = 16;
  }
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out, base);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("invalid unsigned value for " + std::string(key) + ": '" + std::string(v) + "'");
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("invalid boolean for " + std::string(key) + ": '" + std::string(v) + "'");
}

inline std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

inline LabConfig::Key num_key(std::string name, std::function<std::uint64_t&(LabConfig&)> ref) {
  return {name,
          [ref](const LabConfig& c) { return std::to_string(ref(const_cast<LabConfig&>(c))); },
          [ref, name](LabConfig& c, std::string_view v) { ref(c) = parse_u64(name, v); }};
}

inline LabConfig::Key size_key(std::string name, std::function<std::size_t&(LabConfig&)> ref) {
  return {name,
          [ref](const LabConfig& c) { return std::to_string(ref(const_cast<LabConfig&>(c))); },
          [ref, name](LabConfig& c, std::string_view v) { ref(c) = static_cast<std::size_t>(parse_u64(name, v)); }};
}

inline LabConfig::Key bool_key(std::string name, std::function<bool&(LabConfig&)> ref) {
  return {name,
          [ref](const LabConfig& c) { return std::string(ref(const_cast<LabConfig&>(c)) ? "true" : "false"); },
          [ref, name](LabConfig& c, std::string_view v) { ref(c) = parse_bool(name, v); }};
}

}  // namespace detail

inline const std::vector<LabConfig::Key>& LabConfig::keys() {
  using namespace detail;
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back(num_key("memory.size", [](LabConfig& c) -> std::uint64_t& { return c.memory_size; }));
    k.push_back(size_key("pht.size", [](LabConfig& c) -> std::size_t& { return c.predictors.pht_size; }));
    k.push_back(size_key("btb.entries", [](LabConfig& c) -> std::size_t& { return c.predictors.btb_entries; }));
    k.push_back(size_key("rsb.depth", [](LabConfig& c) -> std::size_t& { return c.predictors.rsb_depth; }));
    k.push_back(num_key("cache.line_size", [](LabConfig& c) -> std::uint64_t& { return c.cache.line_size; }));
    k.push_back(num_key("cache.sets", [](LabConfig& c) -> std::uint64_t& { return c.cache.sets; }));
    k.push_back(num_key("cache.ways", [](LabConfig& c) -> std::uint64_t& { return c.cache.ways; }));
    k.push_back(num_key("cache.hit_latency", [](LabConfig& c) -> std::uint64_t& { return c.cache.hit_latency; }));
    k.push_back(num_key("cache.miss_latency", [](LabConfig& c) -> std::uint64_t& { return c.cache.miss_latency; }));
    k.push_back(num_key("cache.jitter", [](LabConfig& c) -> std::uint64_t& { return c.cache.jitter; }));
    k.push_back(num_key("receiver.threshold", [](LabConfig& c) -> std::uint64_t& { return c.receiver.threshold; }));
    k.push_back(size_key("receiver.max_rounds", [](LabConfig& c) -> std::size_t& { return c.receiver.max_rounds; }));
    k.push_back({"receiver.magic", [](const LabConfig& c) { return hex(c.receiver.magic); },
                 [](LabConfig& c, std::string_view v) { c.receiver.magic = parse_u64("receiver.magic", v); }});
    k.push_back(size_key("pipeline.window", [](LabConfig& c) -> std::size_t& { return c.pipeline.window; }));
    k.push_back(bool_key("pipeline.pht", [](LabConfig& c) -> bool& { return c.pipeline.pht; }));
    k.push_back(bool_key("pipeline.btb", [](LabConfig& c) -> bool& { return c.pipeline.btb; }));
    k.push_back(bool_key("pipeline.rsb", [](LabConfig& c) -> bool& { return c.pipeline.rsb; }));
    k.push_back(bool_key("pipeline.stl", [](LabConfig& c) -> bool& { return c.pipeline.stl; }));
    k.push_back(bool_key("pipeline.store_bypass", [](LabConfig& c) -> bool& { return c.pipeline.store_bypass.enabled; }));
    k.push_back(num_key("pipeline.step_limit", [](LabConfig& c) -> std::uint64_t& { return c.pipeline.step_limit; }));
    k.push_back(size_key("gadget.training", [](LabConfig& c) -> std::size_t& { return c.gadget.training; }));
    k.push_back(num_key("gadget.data_length", [](LabConfig& c) -> std::uint64_t& { return c.gadget.data_length; }));
    k.push_back({"gadget.secret", [](const LabConfig& c) { return encode_secret(c.gadget.secret); },
                 [](LabConfig& c, std::string_view v) { c.gadget.secret = decode_secret(v); }});
    k.push_back(bool_key("victim.enabled", [](LabConfig& c) -> bool& { return c.victim_enabled; }));
    k.push_back(num_key("seed.jitter", [](LabConfig& c) -> std::uint64_t& { return c.cache.jitter_seed; }));
    k.push_back({"seed.aslr", [](const LabConfig& c) { return c.aslr_seed ? std::to_string(*c.aslr_seed) : "none"; },
                 [](LabConfig& c, std::string_view v) {
                   if (v == "none" || v.empty())
                     c.aslr_seed.reset();
                   else
                     c.aslr_seed = parse_u64("seed.aslr", v);
                 }});
    return k;
  }();
  return table;
}

inline void LabConfig::set(std::string_view key, std::string_view value) {
  for (const auto& k : keys()) {
    if (k.name == key) {
      k.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

inline std::string LabConfig::get(std::string_view key) const {
  for (const auto& k : keys())
    if (k.name == key) return k.get(*this);
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

inline std::vector<std::pair<std::string, std::string>> LabConfig::echo() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : keys()) out.emplace_back(k.name, k.get(*this));
  return out;
}

inline std::string LabConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : echo()) out += k + " = " + v + "\n";
  return out;
}

inline void LabConfig::validate() const {
  auto pow2 = [](std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; };
  if (!pow2(memory_size)) throw ConfigError("memory.size must be a power of two");
  if (!pow2(predictors.pht_size)) throw ConfigError("pht.size must be a power of two");
  if (predictors.btb_entries == 0) throw ConfigError("btb.entries must be positive");
  cache.validate();
  Classifier(cache, receiver.threshold);
  if (receiver.max_rounds == 0) throw ConfigError("receiver.max_rounds must be positive");
  if (gadget.training == 0) throw ConfigError("gadget.training must be positive");
  if (gadget.data_length == 0 || gadget.data_length > 255) throw ConfigError("gadget.data_length must be in [1, 255]");
  try {
    (void)layout(gadget.secret.size());
  } catch (const LayoutError& e) {
    throw ConfigError(e.what());
  }
}

inline LabConfig parse_config(std::string_view text) {
  LabConfig cfg;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    auto key = detail::trim(line.substr(0, eq));
    auto value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": missing key");
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline LabConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// key=value override, as given on the command line.
inline void apply_override(LabConfig& cfg, std::string_view assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  cfg.set(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

}  // namespace speclab
