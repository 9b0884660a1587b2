// speclab command-line driver.
//
// Exit codes: 0 success / expected outcome, 1 experiment came out negative,
// 2 usage or configuration error.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "speclab/config.hpp"
#include "speclab/gadgets.hpp"
#include "speclab/mitigations.hpp"
#include "speclab/report.hpp"
#include "speclab/speconnector.hpp"

namespace {

using namespace speclab;

constexpr int kOk = 0;
constexpr int kNegative = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::size_t> window;
  std::optional<std::uint64_t> aslr_seed;
  std::string out;

  void attach(CLI::App* cmd, bool with_out = true) {
    cmd->add_option("--config", config_path, "key=value config file");
    cmd->add_option("--set", overrides, "config override KEY=VALUE (repeatable, wins over --config)");
    cmd->add_option("--window", window, "speculation window (overrides pipeline.window)");
    cmd->add_option("--aslr-seed", aslr_seed, "randomize region_base with this seed (overrides seed.aslr)");
    if (with_out) cmd->add_option("--out", out, "write the report here instead of stdout");
  }

  [[nodiscard]] LabConfig resolve() const {
    LabConfig cfg = config_path.empty() ? LabConfig{} : load_config(config_path);
    for (const auto& o : overrides) apply_override(cfg, o);
    if (window) cfg.pipeline.window = *window;
    if (aslr_seed) cfg.aslr_seed = *aslr_seed;
    cfg.validate();
    return cfg;
  }
};

Variant require_variant(const std::string& name) {
  auto v = parse_variant(name);
  if (!v) throw UsageError("unknown variant '" + name + "' (expected pht, btb, rsb or stl)");
  return *v;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw UsageError("cannot write '" + path + "'");
  f << text;
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

int cmd_leak(const CommonOptions& o, const std::string& variant_name, const std::optional<std::string>& secret,
             const std::optional<std::string>& secret_hex, const std::string& mitigation) {
  const auto variant = require_variant(variant_name);
  const auto set = MitigationSet::parse(mitigation);
  LabConfig cfg = o.resolve();
  if (secret || secret_hex) {
    cfg.gadget.secret = secret ? *secret : decode_hex(*secret_hex);
    cfg.validate();
  }

  GadgetSpec spec{variant, cfg.gadget.training, cfg.layout(cfg.gadget.secret.size()), true};
  auto g = make_gadget(spec, cfg.gadget.secret, cfg.receiver.magic);
  auto [program, applied] = apply_applicable(set, g.program);
  g.program = std::move(program);
  LabConfig run_cfg = cfg;
  run_cfg.pipeline = configure(applied, cfg.pipeline);
  Session s(g, run_cfg);
  const auto report = recover_secret(s, g, cfg.gadget.secret.size(), {cfg.gadget.training, cfg.receiver.max_rounds});

  const auto correct = report.correct(cfg.gadget.secret);
  Json payload{{"variant", to_string(variant)},
               {"mitigation", set.name()},
               {"applied", applied.name()},
               {"correct", correct},
               {"report", to_json(report)}};
  emit(o.out, dump(envelope("leak", cfg, payload)));
  return correct == cfg.gadget.secret.size() ? kOk : kNegative;
}

int cmd_matrix(const CommonOptions& o, const std::string& format) {
  const LabConfig cfg = o.resolve();
  const auto m = full_matrix(cfg);
  if (format == "csv")
    emit(o.out, matrix_csv(m));
  else
    emit(o.out, dump(envelope("matrix", cfg, to_json(m))));
  return unexpected_cells(m).empty() ? kOk : kNegative;
}

int cmd_covert(const CommonOptions& o, const std::optional<std::string>& text, const std::optional<std::string>& hex,
               std::optional<std::size_t> random_len, std::uint64_t seed) {
  const LabConfig cfg = o.resolve();
  std::vector<std::uint8_t> pattern;
  if (text) pattern.assign(text->begin(), text->end());
  if (hex) {
    const auto bytes = decode_hex(*hex);
    pattern.assign(bytes.begin(), bytes.end());
  }
  if (random_len) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < *random_len; ++i) pattern.push_back(static_cast<std::uint8_t>(rng() & 0xFF));
  }
  const auto r = covert_channel_test(pattern, cfg);
  Json statuses = Json::array();
  for (auto st : r.status) statuses.push_back(to_string(st));
  Json payload{{"length", pattern.size()}, {"exact", r.exact}, {"pattern", pattern},
               {"reconstructed", r.reconstructed}, {"status", statuses}};
  emit(o.out, dump(envelope("covert", cfg, payload)));
  return r.exact ? kOk : kNegative;
}

int cmd_trace(const CommonOptions& o, const std::string& variant_name) {
  const auto variant = require_variant(variant_name);
  const LabConfig cfg = o.resolve();
  GadgetSpec spec{variant, cfg.gadget.training, cfg.layout(cfg.gadget.secret.size()), true};
  const auto g = make_gadget(spec, cfg.gadget.secret, cfg.receiver.magic);
  Session s(g, cfg);
  for (auto x : g.training_inputs()) s.step(x);
  for (auto line : g.condition_lines) s.evict(line);
  const auto t = s.step(g.exploit_input(0));

  Json program = Json::array();
  for (CodeIndex i = 0; i < g.program.size(); ++i) program.push_back(format_instruction(g.program[i], g.program));
  Json payload{{"variant", to_string(variant)}, {"input", g.exploit_input(0)}, {"program", program},
               {"trace", to_json(t)}};
  emit(o.out, dump(envelope("trace", cfg, payload)));
  return kOk;
}

int cmd_dump(const CommonOptions& o, const std::string& variant_name, const std::string& mitigation) {
  const auto variant = require_variant(variant_name);
  const LabConfig cfg = o.resolve();
  GadgetSpec spec{variant, cfg.gadget.training, cfg.layout(cfg.gadget.secret.size()), true};
  emit(o.out, disassemble(apply(MitigationSet::parse(mitigation), build_gadget(spec))));
  return kOk;
}

int cmd_sweep(const CommonOptions& o, const std::string& variant_name, std::size_t max_window,
              const std::string& format) {
  const auto variant = require_variant(variant_name);
  const LabConfig cfg = o.resolve();
  const auto sweep = window_sweep(variant, cfg, max_window);
  if (format == "csv") {
    std::string text = "window,leaked\n";
    for (const auto& p : sweep.points) text += std::to_string(p.window) + (p.leaked ? ",true\n" : ",false\n");
    emit(o.out, text);
  } else {
    emit(o.out, dump(envelope("sweep", cfg, to_json(sweep))));
  }
  return sweep.monotone() && sweep.threshold() ? kOk : kNegative;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic transient-execution lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  CommonOptions leak_o, matrix_o, covert_o, trace_o, dump_o, sweep_o;

  std::string leak_variant, leak_mitigation = "none";
  std::optional<std::string> leak_secret, leak_secret_hex;
  auto* leak = app.add_subcommand("leak", "recover a secret through one gadget variant");
  leak_o.attach(leak);
  leak->add_option("--variant", leak_variant, "pht, btb, rsb or stl")->required();
  auto* sopt = leak->add_option("--secret", leak_secret, "secret text (default: gadget.secret)");
  leak->add_option("--secret-hex", leak_secret_hex, "secret as hex bytes")->excludes(sopt);
  leak->add_option("--mitigation", leak_mitigation, "none, all, or names joined by ','");

  std::string matrix_format = "json";
  auto* matrix = app.add_subcommand("matrix", "evaluate every variant against every mitigation");
  matrix_o.attach(matrix);
  matrix->add_option("--format", matrix_format, "json envelope or bare csv")->check(CLI::IsMember({"json", "csv"}));

  std::optional<std::string> covert_text, covert_hex;
  std::optional<std::size_t> covert_random;
  std::uint64_t covert_seed = 1;
  auto* covert = app.add_subcommand("covert", "send a pattern over the cache channel and decode it");
  covert_o.attach(covert);
  auto* ptext = covert->add_option("--pattern", covert_text, "pattern text");
  auto* phex = covert->add_option("--pattern-hex", covert_hex, "pattern as hex bytes")->excludes(ptext);
  covert->add_option("--random", covert_random, "random pattern of this many bytes")->excludes(ptext)->excludes(phex);
  covert->add_option("--seed", covert_seed, "seed for --random");

  std::string trace_variant;
  auto* trace = app.add_subcommand("trace", "trace one exploit invocation");
  trace_o.attach(trace);
  trace->add_option("--variant", trace_variant, "pht, btb, rsb or stl")->required();

  std::string dump_variant, dump_mitigation = "none";
  auto* dumpc = app.add_subcommand("dump-gadget", "print a gadget as assembly");
  dump_o.attach(dumpc);
  dumpc->add_option("--variant", dump_variant, "pht, btb, rsb or stl")->required();
  dumpc->add_option("--mitigation", dump_mitigation, "none, all, or names joined by ','");

  std::string sweep_variant = "pht", sweep_format = "json";
  std::size_t sweep_max = 64;
  auto* sweep = app.add_subcommand("sweep", "leak outcome for every window size 0..max");
  sweep_o.attach(sweep);
  sweep->add_option("--variant", sweep_variant, "pht, btb, rsb or stl");
  sweep->add_option("--max-window", sweep_max, "largest window tried");
  sweep->add_option("--format", sweep_format, "json envelope or bare csv")->check(CLI::IsMember({"json", "csv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*leak) return cmd_leak(leak_o, leak_variant, leak_secret, leak_secret_hex, leak_mitigation);
    if (*matrix) return cmd_matrix(matrix_o, matrix_format);
    if (*covert) return cmd_covert(covert_o, covert_text, covert_hex, covert_random, covert_seed);
    if (*trace) return cmd_trace(trace_o, trace_variant);
    if (*dumpc) return cmd_dump(dump_o, dump_variant, dump_mitigation);
    if (*sweep) return cmd_sweep(sweep_o, sweep_variant, sweep_max, sweep_format);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const LayoutError& e) {
    std::cerr << "layout error: " << e.what() << "\n";
    return kUsage;
  } catch (const MitigationError& e) {
    std::cerr << "mitigation error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
