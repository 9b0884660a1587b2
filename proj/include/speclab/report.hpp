#pragma once

// JSON forms of traces and reports, and the envelope every CLI report is
// wrapped in. The timestamp lives only in the envelope, so payloads of two
// runs with the same config compare byte-for-byte.
//
// Envelope (schema 1):
//   { "tool", "version", "schema", "kind", "config": {key: value, ...},
//     "timestamp": ISO-8601 UTC, "payload": {...} }

#include <chrono>
#include <ctime>
#include <string>
#include <string_view>

#include "json.hpp"
#include "speclab/config.hpp"
#include "speclab/mitigations.hpp"
#include "speclab/pipeline.hpp"
#include "speclab/speconnector.hpp"

namespace speclab {

using Json = nlohmann::ordered_json;

inline constexpr std::string_view kToolName = "speclab";
inline constexpr std::string_view kToolVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

inline Json to_json(const TraceEntry& e) {
  Json j{{"pc", e.pc}, {"cycle", e.cycle}};
  j["addr"] = e.addr ? Json(*e.addr) : Json(nullptr);
  return j;
}

inline Json to_json(const ExecutionTrace& t) {
  Json committed = Json::array();
  for (const auto& e : t.committed) committed.push_back(to_json(e));
  Json frames = Json::array();
  for (const auto& f : t.frames) {
    Json transient = Json::array();
    for (const auto& e : f.transient) {
      auto j = to_json(e);
      j["executed"] = e.executed;
      transient.push_back(j);
    }
    frames.push_back({{"cause", to_string(f.cause)},
                      {"site", f.site},
                      {"predicted", f.predicted},
                      {"squashed", f.squashed},
                      {"opened_at", f.opened_at},
                      {"resolve_at", f.resolve_at},
                      {"transient_count", f.transient_count},
                      {"transient", transient}});
  }
  return {{"committed_count", t.committed_count},
          {"total_cycles", t.total_cycles},
          {"squashes", t.squash_count()},
          {"committed", committed},
          {"frames", frames}};
}

inline Json config_json(const LabConfig& cfg) {
  Json j = Json::object();
  for (const auto& [k, v] : cfg.echo()) j[k] = v;
  return j;
}

inline Json to_json(const LeakReport& r) {
  Json bytes = Json::array();
  std::string hex;
  static constexpr char kDigits[] = "0123456789abcdef";
  for (std::size_t i = 0; i < r.bytes.size(); ++i) {
    const auto& b = r.bytes[i];
    Json e{{"index", i}, {"status", to_string(b.status)}, {"rounds", b.rounds}};
    e["value"] = b.status == ByteStatus::Recovered ? Json(b.value) : Json(nullptr);
    bytes.push_back(e);
    if (b.status == ByteStatus::Recovered) {
      hex += kDigits[b.value >> 4];
      hex += kDigits[b.value & 0xF];
    }
  }
  return {{"requested", r.bytes.size()},
          {"recovered", r.recovered_count()},
          {"recovered_hex", hex},
          {"transient_count", r.transient_count},
          {"bytes", bytes}};
}

inline Json to_json(const CellResult& c) {
  return {{"variant", to_string(c.variant)},
          {"mitigation", c.mitigations.name()},
          {"applied", c.applied.name()},
          {"leaked", c.leaked},
          {"expected_leaked", expected_leak(c.variant, c.mitigations)},
          {"bytes_recovered", c.bytes_recovered},
          {"transient_count", c.transient_count}};
}

inline Json to_json(const MatrixReport& r) {
  Json cells = Json::array();
  for (const auto& c : r.cells) cells.push_back(to_json(c));
  return {{"matches_expected", unexpected_cells(r).empty()}, {"cells", cells}};
}

inline Json to_json(const WindowSweep& s) {
  Json points = Json::array();
  for (const auto& p : s.points) points.push_back({{"window", p.window}, {"leaked", p.leaked}});
  Json j{{"variant", to_string(s.variant)}, {"monotone", s.monotone()}};
  j["threshold"] = s.threshold() ? Json(*s.threshold()) : Json(nullptr);
  j["points"] = points;
  return j;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline Json envelope(std::string_view kind, const LabConfig& cfg, Json payload, std::string timestamp = utc_timestamp()) {
  return {{"tool", kToolName},       {"version", kToolVersion}, {"schema", kSchemaVersion}, {"kind", kind},
          {"config", config_json(cfg)}, {"timestamp", timestamp}, {"payload", std::move(payload)}};
}

}  // namespace speclab
