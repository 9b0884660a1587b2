#include <gtest/gtest.h>

#include <random>
#include <string>

#include "speclab/config.hpp"
#include "speclab/gadgets.hpp"
#include "speclab/mitigations.hpp"
#include "speclab/speconnector.hpp"

using namespace speclab;

namespace {

LeakReport leak_with(const GadgetSpec& spec, const std::string& secret, const LabConfig& cfg) {
  const auto g = make_gadget(spec, secret, cfg.receiver.magic);
  Session s(g, cfg);
  return recover_secret(s, g, secret.size(), {spec.k, cfg.receiver.max_rounds});
}

LabConfig with_window(std::size_t w) {
  LabConfig c;
  c.pipeline.window = w;
  return c;
}

}  // namespace

TEST(Layout, DefaultOffsets) {
  const auto l = standard_layout();
  EXPECT_EQ(l.image_size, 4u << 20);
  EXPECT_EQ(l.region_base, kDefaultRegionBase);
  EXPECT_EQ(l.rel(l.data_len_addr), 0x200u);
  EXPECT_EQ(l.rel(l.tmp_addr), 0x240u);
  EXPECT_EQ(l.rel(l.jump_slot_addr), 0x280u);
  EXPECT_EQ(l.rel(l.data_base), 0x1400u);
  EXPECT_EQ(l.secret_base - l.data_base, 16u);
  EXPECT_EQ(l.rel(l.lookup_base), 0x10000u);
  EXPECT_EQ(l.lookup_base % kPageSize, 0u);
}

TEST(Layout, TooSmallImageIsRejected) {
  EXPECT_THROW(standard_layout(64 * 1024), LayoutError);
  EXPECT_THROW(standard_layout(kDefaultImageSize, std::nullopt, 0), LayoutError);
  EXPECT_THROW(standard_layout(kDefaultImageSize, std::nullopt, 16, 4096), LayoutError);
}

TEST(Layout, SmallImageFallsBackToBaseZero) {
  const auto l = standard_layout(2U << 20);  // 2 MiB: 0x100000 + span does not fit
  EXPECT_EQ(l.region_base, 0u);
  EXPECT_TRUE(validate_layout(MemoryImage(l.image_size), l).empty());
}

TEST(Layout, AslrBaseIsSeededPageAlignedAndFits) {
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    const auto l = standard_layout(kDefaultImageSize, seed);
    std::mt19937_64 oracle(seed);
    const std::uint64_t slots = (kDefaultImageSize - (0x10000 + 256 * 4096)) / 4096 + 1;
    ASSERT_EQ(l.region_base, (oracle() % slots) * 4096);
    ASSERT_EQ(l.region_base % kPageSize, 0u);
    ASSERT_TRUE(validate_layout(MemoryImage(l.image_size), l).empty()) << seed;
    ASSERT_EQ(standard_layout(kDefaultImageSize, seed), l);
  }
}

TEST(VictimImage, Contents) {
  const auto l = standard_layout();
  const auto img = victim_image(l, "KEY!");
  for (std::uint64_t a = l.lookup_base; a < l.lookup_base + kTableBytes; a += 8 * 97)
    ASSERT_EQ(img.read64(a & ~std::uint64_t{7}), kDefaultMagic);
  EXPECT_EQ(img.read8(l.data_len_addr), 16);
  EXPECT_EQ(img.read8(l.tmp_addr), 0xFF);
  EXPECT_EQ(img.read8(l.data_base), 't');
  EXPECT_EQ(img.read8(l.secret_base), 'K');
  EXPECT_EQ(img.read8(l.secret_base + 3), '!');
  EXPECT_THROW(victim_image(l, std::string(17, 'x')), LayoutError);

  const auto s = victim_state(l, "KEY!");
  EXPECT_EQ(s.regs[kBaseReg], l.region_base);
  EXPECT_EQ(s.regs[kStackReg], l.stack_top);
}

TEST(Gadgets, OnlyTheBtbGadgetHasIndirectJumpsAndOnlyRsbReturns) {
  GadgetSpec spec;
  auto count = [](const Program& p, Opcode op) {
    return std::count_if(p.code().begin(), p.code().end(), [op](const auto& in) { return in.op == op; });
  };
  spec.variant = Variant::Pht;
  const auto pht = build_gadget(spec);
  EXPECT_EQ(count(pht, Opcode::CmpBranchLess), 1);
  EXPECT_EQ(count(pht, Opcode::JumpIndirect), 0);
  spec.variant = Variant::Btb;
  EXPECT_EQ(count(build_gadget(spec), Opcode::JumpIndirect), 1);
  spec.variant = Variant::Rsb;
  const auto rsb = build_gadget(spec);
  EXPECT_EQ(count(rsb, Opcode::Ret), 1);
  EXPECT_EQ(count(rsb, Opcode::Call), 1);
  spec.variant = Variant::Stl;
  EXPECT_EQ(count(build_gadget(spec), Opcode::Store), 2);
}

TEST(Gadgets, ArchitecturalBehaviourMatchesSource) {
  // In bounds: tmp &= table[data[x] * 4096] leaves 0xFF & magic byte.
  // Out of bounds: the encode never runs architecturally (except STL, which
  // encodes the zero it just stored).
  const std::uint8_t magic_low = kDefaultMagic & 0xFF;
  for (auto v : kAllVariants) {
    GadgetSpec spec;
    spec.variant = v;
    const auto g = make_gadget(spec, "KEY!");
    const std::uint64_t in[] = {3};
    const auto a = reference_run(g.program, g.initial, in);
    ASSERT_FALSE(a.fault) << to_string(v);
    EXPECT_EQ(a.memory.read8(spec.layout.tmp_addr), 0xFF & magic_low) << to_string(v);

    const std::uint64_t out[] = {g.exploit_input(0)};
    const auto b = reference_run(g.program, g.initial, out);
    ASSERT_FALSE(b.fault) << to_string(v);
    if (v == Variant::Stl) {
      EXPECT_EQ(b.memory.read8(spec.layout.secret_base), 0);
    } else {
      EXPECT_EQ(b.memory.read8(spec.layout.tmp_addr), 0xFF) << to_string(v);
      EXPECT_EQ(b.memory.read8(spec.layout.secret_base), 'K');
    }
  }
}

TEST(Gadgets, CovertSenderTouchesOnePagePerInvocation) {
  const auto l = standard_layout();
  const std::vector<std::uint8_t> pattern{9, 0, 255, 9};
  const auto p = build_covert_sender(pattern, l);
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    auto a = victim_state(l, "");
    MicroArchState u;
    const std::uint64_t in[] = {i};
    const auto t = run(p, a, u, {}, in);
    EXPECT_TRUE(t.frames.empty());
    for (std::uint64_t page = 0; page < 256; ++page)
      ASSERT_EQ(u.cache.contains(l.lookup_base + page * kPageSize), page == pattern[i]) << i << " " << page;
  }
  EXPECT_THROW(build_covert_sender({}, l), ProgramError);
}

TEST(Gadgets, LabelsAndEntry) {
  GadgetSpec spec;
  spec.variant = Variant::Btb;
  const auto p = build_gadget(spec);
  EXPECT_TRUE(p.label("process"));
  EXPECT_TRUE(p.label("landing"));
  EXPECT_EQ(p.entry(), 0u);
}

// Spectre-PHT round: architectural results equal a non-speculative run, but
// only the speculative run leaves the secret-indexed table line cached.
TEST(RollbackAsymmetry, PhtExploitRound) {
  const std::string secret = "KEY!";
  GadgetSpec spec;
  const auto g = make_gadget(spec, secret);
  const auto secret_line = spec.layout.lookup_base + static_cast<std::uint8_t>(secret[0]) * kPageSize;

  auto exploit_round = [&](std::size_t window) {
    LabConfig cfg;
    cfg.pipeline.window = window;
    Session s(g, cfg);
    for (auto x : g.training_inputs()) s.step(x);
    for (auto line : g.condition_lines) s.evict(line);
    s.step(g.exploit_input(0));
    return std::pair{s.victim(), s.uarch().cache.contains(secret_line)};
  };
  const auto [spec_state, spec_cached] = exploit_round(64);
  const auto [plain_state, plain_cached] = exploit_round(0);

  auto inputs = g.training_inputs();
  inputs.push_back(g.exploit_input(0));
  const auto ref = reference_run(g.program, g.initial, inputs);

  EXPECT_EQ(spec_state, plain_state);
  EXPECT_EQ(spec_state, ref);
  EXPECT_TRUE(spec_cached);
  EXPECT_FALSE(plain_cached);
}

TEST(Leak, AllVariantsRecoverTheDefaultSecret) {
  for (auto v : kAllVariants) {
    LabConfig cfg;
    const auto r = recover_secret(v, cfg);
    EXPECT_EQ(r.correct("KEY!"), 4u) << to_string(v);
    EXPECT_TRUE(r.complete()) << to_string(v);
    EXPECT_GT(r.transient_count, 0u);
  }
}

TEST(Leak, SixteenByteSecretThroughPht) {
  const std::string secret = "0123456789abcdef";
  LabConfig cfg;
  cfg.gadget.secret = secret;
  const auto r = recover_secret(Variant::Pht, cfg);
  EXPECT_EQ(r.correct(secret), 16u);
  for (const auto& b : r.bytes) EXPECT_EQ(b.rounds, 1u);
}

TEST(Leak, ZeroBytesRequested) {
  GadgetSpec spec;
  const auto g = make_gadget(spec, "KEY!");
  LabConfig cfg;
  Session s(g, cfg);
  const auto r = recover_secret(s, g, 0, {});
  EXPECT_TRUE(r.bytes.empty());
  EXPECT_TRUE(r.complete());
  EXPECT_FALSE(s.established());
}

TEST(Leak, FastConditionControlsDoNotLeak) {
  for (auto v : kAllVariants) {
    GadgetSpec spec;
    spec.variant = v;
    spec.slow_condition = false;
    const auto r = leak_with(spec, "KEY!", LabConfig{});
    EXPECT_EQ(r.correct("KEY!"), 0u) << to_string(v);
  }
}

TEST(Leak, NotTakenTrainingDoesNotLeakPht) {
  GadgetSpec spec;
  const auto g = make_gadget(spec, "KEY!");
  LabConfig cfg;
  Session s(g, cfg);
  s.establish();
  for (int i = 0; i < 8; ++i) s.step(g.exploit_input(1));  // trains not-taken
  s.evict(spec.layout.data_len_addr);
  const auto p = s.probe([&] { s.step(g.exploit_input(0)); });
  EXPECT_EQ(p.status, ByteStatus::None);
}

// Smallest window that leaks: two transient loads for PHT and STL; the BTB and
// RSB leak routines need MOVI, MOVI, BLT, MOVI, ADD, ADD, LOADB, LOADB.
TEST(Window, PerVariantThresholds) {
  const std::pair<Variant, std::size_t> expected[] = {
      {Variant::Pht, 2}, {Variant::Stl, 2}, {Variant::Btb, 8}, {Variant::Rsb, 8}};
  for (const auto& [v, w] : expected) {
    EXPECT_FALSE(evaluate(v, {}, with_window(w - 1)).leaked) << to_string(v);
    EXPECT_TRUE(evaluate(v, {}, with_window(w)).leaked) << to_string(v);
  }
}

TEST(Window, ZeroWindowNeverLeaks) {
  for (auto v : kAllVariants) EXPECT_FALSE(evaluate(v, {}, with_window(0)).leaked) << to_string(v);
}

TEST(Window, PhtSweepIsMonotone) {
  const auto s = window_sweep(Variant::Pht, LabConfig{}, 64);
  ASSERT_EQ(s.points.size(), 65u);
  EXPECT_TRUE(s.monotone());
  ASSERT_TRUE(s.threshold());
  EXPECT_EQ(*s.threshold(), 2u);
}

TEST(Aslr, OffsetsSurviveRelocation) {
  LabConfig a, b;
  a.aslr_seed = 1;
  b.aslr_seed = 2;
  a.gadget.secret = b.gadget.secret = "0123456789abcdef";
  const auto la = a.layout(16), lb = b.layout(16);
  EXPECT_NE(la.region_base, lb.region_base);
  EXPECT_EQ(la.secret_base - la.data_base, lb.secret_base - lb.data_base);
  const auto ra = recover_secret(Variant::Pht, a);
  const auto rb = recover_secret(Variant::Pht, b);
  EXPECT_EQ(ra.recovered(), rb.recovered());
  EXPECT_EQ(ra.correct(a.gadget.secret), 16u);
}
