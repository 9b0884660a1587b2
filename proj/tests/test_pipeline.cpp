#include <gtest/gtest.h>

#include <vector>

#include "fuzz_programs.hpp"
#include "speclab/pipeline.hpp"

using namespace speclab;

namespace {

constexpr std::uint64_t kImage = 1U << 17;
constexpr std::uint64_t kTable = 0x10000;

ArchState blank() { return ArchState(MemoryImage(kImage)); }

std::vector<CodeIndex> committed_pcs(const ExecutionTrace& t) {
  std::vector<CodeIndex> out;
  for (const auto& e : t.committed) out.push_back(e.pc);
  return out;
}

std::vector<std::uint64_t> committed_cycles(const ExecutionTrace& t) {
  std::vector<std::uint64_t> out;
  for (const auto& e : t.committed) out.push_back(e.cycle);
  return out;
}

// r2 <- [r3] with r3 pointing at a cold byte holding 5; then BLT r4(=0) < r2.
const char* kBranchOnColdLoad = R"(
  LOADB r2, r14, r3, 1
  BLT r4, r2, taken
  HALT
taken:
  HALT
)";

}  // namespace

TEST(Timing, ColdLoadThenDependentAdd) {
  const auto p = assemble("LOADB r2, r14, r3, 1\nADD r2, 1\nHALT\n");
  auto a = blank();
  a.regs[3] = 0x40;
  MicroArchState u;
  const auto t = run(p, a, u, {});
  EXPECT_EQ(committed_pcs(t), (std::vector<CodeIndex>{0, 1, 2}));
  EXPECT_EQ(committed_cycles(t), (std::vector<std::uint64_t>{0, 1, 2}));
  // drain waits for the ADD result: 300 (miss) + 1
  EXPECT_EQ(t.total_cycles, 301u);
  EXPECT_TRUE(t.frames.empty());
  EXPECT_EQ(a.regs[2], 1u);
}

TEST(Timing, WarmLoadUsesHitLatency) {
  const auto p = assemble("LOADB r2, r14, r3, 1\nADD r2, 1\nHALT\n");
  auto a = blank();
  a.regs[3] = 0x40;
  MicroArchState u;
  u.cache.access(0x40);
  const auto t = run(p, a, u, {});
  EXPECT_EQ(t.total_cycles, 41u);
}

TEST(Timing, BranchOnColdLoadMispredicts) {
  const auto p = assemble(kBranchOnColdLoad);
  auto a = blank();
  a.regs[3] = 0x80;
  a.memory.write8(0x80, 5);
  MicroArchState u;
  const auto t = run(p, a, u, {});

  ASSERT_EQ(t.frames.size(), 1u);
  const auto& f = t.frames[0];
  EXPECT_EQ(f.cause, SpecCause::Pht);
  EXPECT_EQ(f.site, 1u);
  EXPECT_EQ(f.predicted, 2u);  // weakly not-taken at reset
  EXPECT_TRUE(f.squashed);
  EXPECT_EQ(f.opened_at, 1u);
  EXPECT_EQ(f.resolve_at, 300u);
  EXPECT_EQ(f.transient_count, 1u);  // the HALT on the wrong path ends it
  ASSERT_EQ(f.transient.size(), 1u);
  EXPECT_EQ(f.transient[0].pc, 2u);
  EXPECT_EQ(f.transient[0].cycle, 2u);

  EXPECT_EQ(committed_pcs(t), (std::vector<CodeIndex>{0, 1, 3}));
  EXPECT_EQ(committed_cycles(t), (std::vector<std::uint64_t>{0, 300, 301}));
  EXPECT_EQ(t.total_cycles, 302u);
  EXPECT_EQ(u.pht.counter(1), 2);  // trained once, after resolution
}

TEST(Timing, CorrectPredictionIsNotSquashed) {
  const auto p = assemble(kBranchOnColdLoad);
  auto a = blank();
  a.regs[3] = 0x80;
  a.regs[4] = 9;  // not less than 5: falls through, as predicted
  a.memory.write8(0x80, 5);
  MicroArchState u;
  const auto t = run(p, a, u, {});
  ASSERT_EQ(t.frames.size(), 1u);
  EXPECT_FALSE(t.frames[0].squashed);
  EXPECT_EQ(t.squash_count(), 0u);
  EXPECT_EQ(committed_pcs(t), (std::vector<CodeIndex>{0, 1, 2}));
}

TEST(Timing, WindowZeroNeverSpeculates) {
  const auto p = assemble(kBranchOnColdLoad);
  auto a = blank();
  a.regs[3] = 0x80;
  a.memory.write8(0x80, 5);
  MicroArchState u;
  PipelineConfig cfg;
  cfg.window = 0;
  const auto t = run(p, a, u, cfg);
  EXPECT_TRUE(t.frames.empty());
  // the branch stalls until its operand arrives
  EXPECT_EQ(committed_cycles(t), (std::vector<std::uint64_t>{0, 300, 301}));
}

TEST(Timing, TransientLoadLeavesCacheFootprint) {
  // Mispredicted path: r9 <- table[r6 * 4096] with r6 = 7 already available.
  const auto p = assemble(R"(
    LOADB r2, r14, r3, 1
    BLT r4, r2, taken
    LOADB r9, r10, r6, 4096
    HALT
  taken:
    HALT
  )");
  auto a = blank();
  a.regs[3] = 0x80;
  a.regs[6] = 7;
  a.regs[10] = kTable;
  a.memory.write8(0x80, 5);
  MicroArchState u;
  const auto t = run(p, a, u, {});
  ASSERT_EQ(t.frames.size(), 1u);
  EXPECT_EQ(t.frames[0].transient_count, 2u);
  EXPECT_TRUE(t.frames[0].transient[0].executed);
  EXPECT_EQ(t.frames[0].transient[0].addr, kTable + 7 * 4096);
  EXPECT_TRUE(u.cache.contains(kTable + 7 * 4096));
  EXPECT_EQ(a.regs[9], 0u);  // architecturally never loaded
}

TEST(Timing, TransientLoadNeedingLateInputHasNoEffect) {
  // The index comes from a second cold load, so it arrives after resolution.
  const auto p = assemble(R"(
    LOADB r2, r14, r3, 1
    LOADB r6, r14, r7, 1
    BLT r4, r2, taken
    LOADB r9, r10, r6, 4096
    HALT
  taken:
    HALT
  )");
  auto a = blank();
  a.regs[3] = 0x80;
  a.regs[7] = 0xC0;
  a.regs[10] = kTable;
  a.memory.write8(0x80, 5);
  a.memory.write8(0xC0, 3);
  MicroArchState u;
  const auto t = run(p, a, u, {});
  ASSERT_EQ(t.frames.size(), 1u);
  EXPECT_EQ(t.frames[0].resolve_at, 300u);
  ASSERT_GE(t.frames[0].transient.size(), 1u);
  EXPECT_FALSE(t.frames[0].transient[0].executed);  // r6 ready at 301
  EXPECT_FALSE(u.cache.contains(kTable + 3 * 4096));
}

TEST(Timing, WindowCapsTransientInstructions) {
  // Wrong path: 10 independent MOVIs then HALT.
  std::string src = "LOADB r2, r14, r3, 1\nBLT r4, r2, taken\n";
  for (int i = 0; i < 10; ++i) src += "MOVI r5, " + std::to_string(i) + "\n";
  src += "HALT\ntaken:\nHALT\n";
  const auto p = assemble(src);
  for (std::size_t w : {1u, 4u, 10u, 11u, 64u}) {
    auto a = blank();
    a.regs[3] = 0x80;
    a.memory.write8(0x80, 5);
    MicroArchState u;
    PipelineConfig cfg;
    cfg.window = w;
    const auto t = run(p, a, u, cfg);
    ASSERT_EQ(t.frames.size(), 1u);
    EXPECT_EQ(t.frames[0].transient_count, std::min<std::size_t>(w, 11)) << "window " << w;
  }
}

TEST(Timing, FenceEndsTransientPath) {
  const auto p = assemble(R"(
    LOADB r2, r14, r3, 1
    BLT r4, r2, taken
    MOVI r5, 1
    FENCE
    MOVI r5, 2
    HALT
  taken:
    HALT
  )");
  auto a = blank();
  a.regs[3] = 0x80;
  a.memory.write8(0x80, 5);
  MicroArchState u;
  const auto t = run(p, a, u, {});
  ASSERT_EQ(t.frames.size(), 1u);
  EXPECT_EQ(t.frames[0].transient_count, 2u);  // MOVI, FENCE
}

TEST(Timing, FenceWaitsForOutstandingLoads) {
  const auto p = assemble("LOADB r2, r14, r3, 1\nFENCE\nHALT\n");
  auto a = blank();
  a.regs[3] = 0x80;
  MicroArchState u;
  const auto t = run(p, a, u, {});
  EXPECT_EQ(committed_cycles(t), (std::vector<std::uint64_t>{0, 300, 301}));
}

TEST(Timing, StoreBypassReadsStaleValue) {
  // [0x200] holds 0x10, so the store address 0x10 + 0xF0 = 0x100 is known only
  // when the cold load returns at cycle 300.
  const auto p = assemble(R"(
    LOADB r5, r14, r6, 1
    MOVI r7, 9
    STORE r5, 240, r7
    LOADB r4, r14, r8, 1
    LOADB r9, r10, r4, 4096
    HALT
  )");
  auto a = blank();
  a.regs[6] = 0x200;
  a.regs[8] = 0x100;
  a.regs[10] = kTable;
  a.memory.write8(0x200, 0x10);
  a.memory.write8(0x100, 7);
  MicroArchState u;
  u.cache.access(0x100);
  const auto t = run(p, a, u, {});

  ASSERT_EQ(t.frames.size(), 1u);
  const auto& f = t.frames[0];
  EXPECT_EQ(f.cause, SpecCause::Stl);
  EXPECT_EQ(f.site, 3u);
  EXPECT_EQ(f.opened_at, 3u);
  EXPECT_EQ(f.resolve_at, 300u);
  EXPECT_TRUE(f.squashed);
  EXPECT_EQ(f.transient_count, 3u);  // the load itself, the encode, HALT
  EXPECT_TRUE(u.cache.contains(kTable + 7 * 4096));  // stale value encoded
  EXPECT_TRUE(u.cache.contains(kTable + 9 * 4096));  // architectural value
  EXPECT_EQ(a.regs[4], 9u);
  EXPECT_EQ(a.memory.read8(0x100), 9);
}

TEST(Timing, StoreBypassDisabledWaitsForStoreAddress) {
  const auto p = assemble(R"(
    LOADB r5, r14, r6, 1
    MOVI r7, 9
    STORE r5, 240, r7
    LOADB r4, r14, r8, 1
    LOADB r9, r10, r4, 4096
    HALT
  )");
  auto a = blank();
  a.regs[6] = 0x200;
  a.regs[8] = 0x100;
  a.regs[10] = kTable;
  a.memory.write8(0x200, 0x10);
  a.memory.write8(0x100, 7);
  MicroArchState u;
  PipelineConfig cfg;
  cfg.store_bypass.enabled = false;
  const auto t = run(p, a, u, cfg);
  EXPECT_TRUE(t.frames.empty());
  EXPECT_FALSE(u.cache.contains(kTable + 7 * 4096));
  EXPECT_EQ(a.regs[4], 9u);
}

TEST(Timing, IndirectJumpUsesBtbOnlyOnceTrained) {
  // r2 <- cold byte (the target), JMPI r2.
  const auto p = assemble(R"(
    LOADB r2, r14, r3, 1
    JMPI r2
  a:
    HALT
  b:
    HALT
  )");
  auto a = blank();
  a.regs[3] = 0x80;
  a.memory.write8(0x80, 3);
  MicroArchState u;
  auto t = run(p, a, u, {});
  EXPECT_TRUE(t.frames.empty());  // cold BTB: no prediction, stall
  EXPECT_EQ(u.btb.predict(1), 3u);

  a.memory.write8(0x80, 2);
  u.cache.flush(0x80);
  t = run(p, a, u, {});
  ASSERT_EQ(t.frames.size(), 1u);
  EXPECT_EQ(t.frames[0].cause, SpecCause::Btb);
  EXPECT_EQ(t.frames[0].predicted, 3u);
  EXPECT_TRUE(t.frames[0].squashed);
  EXPECT_EQ(committed_pcs(t), (std::vector<CodeIndex>{0, 1, 2}));
}

TEST(Timing, ReturnSpeculatesFromRsb) {
  // The function overwrites its own return slot, then returns once the slot is
  // flushed, so the RSB still predicts the original call site.
  const auto p = assemble(R"(
    CALL f
    HALT
  other:
    HALT
  f:
    MOVI r5, @other
    STOREQ r13, 0, r5
    FLUSH r13, 0
    RET
  )");
  auto a = blank();
  a.regs[kStackReg] = 0x4000;
  MicroArchState u;
  const auto t = run(p, a, u, {});
  ASSERT_EQ(t.frames.size(), 1u);
  EXPECT_EQ(t.frames[0].cause, SpecCause::Rsb);
  EXPECT_EQ(t.frames[0].predicted, 1u);
  EXPECT_TRUE(t.frames[0].squashed);
  EXPECT_EQ(committed_pcs(t).back(), 2u);
  EXPECT_EQ(a.regs[kStackReg], 0x4000u);
}

TEST(Timing, DisabledCauseNeverOpensFrames) {
  const auto p = assemble(kBranchOnColdLoad);
  auto a = blank();
  a.regs[3] = 0x80;
  a.memory.write8(0x80, 5);
  MicroArchState u;
  PipelineConfig cfg;
  cfg.pht = false;
  EXPECT_TRUE(run(p, a, u, cfg).frames.empty());
}

TEST(Timing, TransientLoadOutsideImageIsAModelError) {
  const auto p = assemble(R"(
    LOADB r2, r14, r3, 1
    BLT r4, r2, taken
    LOADB r9, r10, r14, 1
    HALT
  taken:
    HALT
  )");
  auto a = blank();
  a.regs[3] = 0x80;
  a.regs[10] = 1ULL << 40;
  a.memory.write8(0x80, 5);
  MicroArchState u;
  EXPECT_THROW(run(p, a, u, {}), ModelError);
}

TEST(Faults, MatchReferenceInterpreter) {
  struct Case {
    const char* src;
    FaultKind kind;
  };
  const Case cases[] = {
      {"MOVI r2, 0x1000000\nLOADB r3, r2, r14, 1\nHALT\n", FaultKind::MemoryBounds},
      {"MOVI r2, 99\nJMPI r2\nHALT\n", FaultKind::BadPc},
      {"MOVI r2, 1\nloop:\nBLT r14, r2, loop\nHALT\n", FaultKind::StepLimit},
      {"MOVI r13, 0\nCALL f\nHALT\nf:\nRET\n", FaultKind::MemoryBounds},
  };
  for (const auto& c : cases) {
    const auto p = assemble(c.src);
    auto a = blank();
    a.regs[kStackReg] = 0x4000;
    const auto ref = reference_run(p, a, {}, 1000);
    MicroArchState u;
    PipelineConfig cfg;
    cfg.step_limit = 1000;
    run(p, a, u, cfg);
    ASSERT_TRUE(a.fault) << c.src;
    EXPECT_EQ(a.fault->kind, c.kind) << c.src;
    EXPECT_EQ(a, ref) << c.src;
  }
}

TEST(Invocation, EachInputRunsFromEntry) {
  const auto p = assemble("ADD r5, r1\nHALT\n");
  auto a = blank();
  MicroArchState u;
  const std::vector<std::uint64_t> in{3, 4, 5};
  const auto t = run(p, a, u, {}, in);
  EXPECT_EQ(a.regs[5], 12u);
  EXPECT_EQ(t.committed_count, 6u);
}

TEST(Determinism, IdenticalRunsProduceIdenticalTraces) {
  speclab::testing::ProgramFuzzer fuzz(5);
  for (int i = 0; i < 50; ++i) {
    const auto c = fuzz.next();
    auto a1 = c.initial, a2 = c.initial;
    MicroArchState u1(c.cache, c.predictors), u2(c.cache, c.predictors);
    const auto t1 = run(c.program, a1, u1, c.pipeline, c.inputs);
    const auto t2 = run(c.program, a2, u2, c.pipeline, c.inputs);
    ASSERT_EQ(a1, a2);
    ASSERT_EQ(t1.total_cycles, t2.total_cycles);
    ASSERT_EQ(t1.frames.size(), t2.frames.size());
    ASSERT_EQ(committed_cycles(t1), committed_cycles(t2));
  }
}

// Speculation must never change architectural results.
TEST(Differential, PipelineMatchesReferenceOnFuzzedPrograms) {
  speclab::testing::ProgramFuzzer fuzz(2024);
  std::size_t with_frames = 0, with_squash = 0;
  constexpr int kCases = 1500;
  for (int i = 0; i < kCases; ++i) {
    const auto c = fuzz.next();
    const auto expected = reference_run(c.program, c.initial, c.inputs, c.pipeline.step_limit);
    auto arch = c.initial;
    MicroArchState u(c.cache, c.predictors);
    const auto t = run(c.program, arch, u, c.pipeline, c.inputs);
    ASSERT_EQ(arch.regs, expected.regs) << "case " << i << "\n" << disassemble(c.program);
    ASSERT_EQ(arch.fault, expected.fault) << "case " << i << "\n" << disassemble(c.program);
    ASSERT_TRUE(arch.memory == expected.memory) << "case " << i << "\n" << disassemble(c.program);
    ASSERT_EQ(arch.pc, expected.pc) << "case " << i;

    for (const auto& f : t.frames) {
      ASSERT_LE(f.transient_count, c.pipeline.window);
      ASSERT_TRUE(c.pipeline.enabled(f.cause));
      ASSERT_LT(f.opened_at, f.resolve_at);
      if (c.pipeline.record) {
        ASSERT_EQ(f.transient.size(), f.transient_count);
        for (const auto& e : f.transient) ASSERT_LT(e.cycle, f.resolve_at);
      }
    }
    if (c.pipeline.record) {
      for (std::size_t k = 1; k < t.committed.size(); ++k)
        ASSERT_LE(t.committed[k - 1].cycle, t.committed[k].cycle);
    }
    with_frames += t.frames.empty() ? 0 : 1;
    with_squash += t.squash_count() > 0 ? 1 : 0;
  }
  // the corpus must actually exercise speculation
  EXPECT_GT(with_frames, kCases / 10);
  EXPECT_GT(with_squash, kCases / 20);
}
