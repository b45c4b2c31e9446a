#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <set>

#include "mtetag/trace.hpp"
#include "mtetag/workload.hpp"

namespace mtetag {
namespace {

ParsedTrace parse_sample() {
  std::ifstream in(std::string(MTETAG_TEST_DATA) + "/valgrind_sample.log");
  EXPECT_TRUE(in.good());
  return parse_valgrind(in);
}

TEST(ValgrindParseTest, SingleMallocLine) {
  const auto t = parse_valgrind("--4523-- malloc(1035) = 0x4A2F028\n");
  ASSERT_EQ(t.events.size(), 1u);
  EXPECT_EQ(t.events[0], (TraceEvent{EventKind::kMalloc, 1035, 0, 0x4A2F028, 0}));
  EXPECT_EQ(t.skipped_lines, 0u);
}

TEST(ValgrindParseTest, EmptyInput) {
  const auto t = parse_valgrind("");
  EXPECT_TRUE(t.events.empty());
  EXPECT_EQ(t.skipped_lines, 0u);
}

TEST(ValgrindParseTest, MalformedLineIsCounted) {
  const auto t = parse_valgrind("--4523-- malloc(12 = 0x10\n--4523-- free(0x4A2F028)\n");
  EXPECT_EQ(t.skipped_lines, 1u);
  ASSERT_EQ(t.events.size(), 1u);
  EXPECT_EQ(t.events[0].kind, EventKind::kFree);
}

TEST(ValgrindParseTest, SampleLog) {
  const auto t = parse_sample();
  EXPECT_EQ(t.banner_lines, 9u);
  EXPECT_EQ(t.skipped_lines, 0u);
  EXPECT_EQ(t.null_frees, 1u);
  ASSERT_EQ(t.events.size(), 15u);
  EXPECT_EQ(t.events[2], (TraceEvent{EventKind::kCalloc, 96, 0, 0x4A2F500, 2}));
  EXPECT_EQ(t.events[3], (TraceEvent{EventKind::kMalloc, 32, 0, 0x4A2F5A0, 3}));
  EXPECT_EQ(t.events[4], (TraceEvent{EventKind::kRealloc, 96, 0x4A2F480, 0x4A2F600, 4}));
  EXPECT_EQ(t.events[5], (TraceEvent{EventKind::kMalloc, 40, 0, 0x4A2F6C0, 5}));
  EXPECT_EQ(t.events[6], (TraceEvent{EventKind::kMalloc, 200, 0, 0x4A2F740, 6}));
  EXPECT_EQ(t.events[7], (TraceEvent{EventKind::kFree, 0, 0x4A2F5A0, 0, 7}));
  EXPECT_EQ(t.events[9], (TraceEvent{EventKind::kFree, 0, 0x4A2F6C0, 0, 9}));
  EXPECT_EQ(t.events[10].size, 0u);
  for (std::size_t i = 0; i < t.events.size(); ++i) EXPECT_EQ(t.events[i].seq, i);
}

TEST(NormalizeTest, SampleHasCleanLiveness) {
  const auto n = normalize(parse_sample().events);
  EXPECT_TRUE(n.warnings.empty());
  std::size_t mallocs = 0, frees = 0;
  for (const auto& e : n.events) {
    ASSERT_TRUE(e.kind == EventKind::kMalloc || e.kind == EventKind::kFree);
    (e.kind == EventKind::kMalloc ? mallocs : frees)++;
  }
  EXPECT_EQ(mallocs, 8u);
  EXPECT_EQ(frees, 8u);
}

TEST(NormalizeTest, CallocAndReallocRewrite) {
  const std::vector<TraceEvent> in{{EventKind::kCalloc, 96, 0, 0x1000, 0},
                                   {EventKind::kRealloc, 200, 0x1000, 0x2000, 1}};
  const auto n = normalize(in);
  const std::vector<TraceEvent> want{{EventKind::kMalloc, 96, 0, 0x1000, 0},
                                     {EventKind::kFree, 0, 0x1000, 0, 1},
                                     {EventKind::kMalloc, 200, 0, 0x2000, 2}};
  EXPECT_EQ(n.events, want);
}

TEST(NormalizeTest, UnknownFreeBecomesWarning) {
  const std::vector<TraceEvent> in{{EventKind::kMalloc, 16, 0, 0x1000, 0},
                                   {EventKind::kFree, 0, 0x1000, 0, 1},
                                   {EventKind::kFree, 0, 0x1000, 0, 2},
                                   {EventKind::kFree, 0, 0x5000, 0, 3}};
  const auto n = normalize(in);
  EXPECT_EQ(n.events.size(), 2u);
  ASSERT_EQ(n.warnings.size(), 2u);
  EXPECT_EQ(n.warnings[0].seq, 2u);
  EXPECT_EQ(n.warnings[1].seq, 3u);
}

TEST(NormalizeTest, OverlapFreesTheOlderAllocation) {
  const std::vector<TraceEvent> in{{EventKind::kMalloc, 64, 0, 0x1000, 0},
                                   {EventKind::kMalloc, 16, 0, 0x1020, 1},
                                   {EventKind::kFree, 0, 0x1000, 0, 2}};
  const auto n = normalize(in);
  ASSERT_EQ(n.events.size(), 3u);
  EXPECT_EQ(n.events[1], (TraceEvent{EventKind::kFree, 0, 0x1000, 0, 1}));
  EXPECT_EQ(n.warnings.size(), 2u);  // the overlap, then the stale free
}

TEST(CanonicalTest, RoundTrip) {
  const std::vector<TraceEvent> ev{{EventKind::kMalloc, 1, 0, 0x10, 0},
                                   {EventKind::kCalloc, 96, 0, 0xffffffffffff0, 3},
                                   {EventKind::kRealloc, 7, 0x10, 0x20, 4},
                                   {EventKind::kFree, 0, 0x20, 0, 9}};
  const std::string text = to_canonical(ev);
  EXPECT_EQ(text,
            "# mtetag trace v1\n0 M 1 0x10\n3 C 96 0xffffffffffff0\n4 R 7 0x10 0x20\n9 F 0x20\n");
  EXPECT_EQ(read_canonical(text), ev);
}

TEST(CanonicalTest, FuzzRoundTrip) {
  Rng rng(77);
  std::vector<TraceEvent> ev;
  std::uint64_t seq = 0;
  for (int i = 0; i < 100000; ++i) {
    seq += 1 + rng() % 3;
    TraceEvent e;
    e.kind = static_cast<EventKind>(rng() % 4);
    e.seq = seq;
    if (e.kind != EventKind::kFree) e.size = rng() >> (rng() % 64);
    if (e.kind == EventKind::kRealloc || e.kind == EventKind::kFree) e.old_addr = rng();
    if (e.kind != EventKind::kFree) e.new_addr = rng();
    ev.push_back(e);
  }
  EXPECT_EQ(read_canonical(to_canonical(ev)), ev);
}

TEST(CanonicalTest, ValgrindCrossCheck) {
  const auto direct = parse_sample().events;
  EXPECT_EQ(read_canonical(to_canonical(direct)), direct);
}

TEST(CanonicalTest, ErrorsCarryLineNumbers) {
  const auto line_of = [](std::string_view text) -> std::size_t {
    try {
      read_canonical(text);
    } catch (const TraceParseError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of("# h\n0 M 16 0x10\n1 M 16\n"), 3u);
  EXPECT_EQ(line_of("0 M 16 0x10\n0 F 0x10\n"), 2u);
  EXPECT_EQ(line_of("0 X 16 0x10\n"), 1u);
  EXPECT_EQ(line_of("0 M 16 10\n"), 1u);
  EXPECT_EQ(line_of("\n\n0 F 0xZZ\n"), 3u);
  EXPECT_EQ(line_of("0 M 16 0x10\n"), 0u);
}

TEST(WorkloadTest, DeterministicPerSeed) {
  WorkloadSpec s;
  s.sizes = UniformSize{1, 500};
  s.events = 5000;
  s.live_target = 100;
  s.seed = 42;
  EXPECT_EQ(to_canonical(gen_workload(s)), to_canonical(gen_workload(s)));
  WorkloadSpec t = s;
  t.seed = 43;
  EXPECT_NE(to_canonical(gen_workload(s)), to_canonical(gen_workload(t)));
}

TEST(WorkloadTest, LogNormalMeanMatchesTarget) {
  WorkloadSpec s;
  s.sizes = LogNormalSize{265.3, 0.6};
  s.events = 20000;
  s.frees_per_alloc = 0;
  s.seed = 7;
  const auto ev = gen_workload(s);
  const double mean = std::accumulate(ev.begin(), ev.end(), 0.0,
                                      [](double acc, const TraceEvent& e) { return acc + e.size; }) /
                      ev.size();
  EXPECT_NEAR(mean, 265.3, 0.1 * 265.3);
}

TEST(WorkloadTest, AddressesNeverOverlapLiveBlocks) {
  for (const auto& preset : workload_presets()) {
    const auto ev = gen_workload(preset.spec);
    std::map<std::uint64_t, std::uint64_t> live;
    for (const auto& e : ev) {
      if (e.kind == EventKind::kFree) {
        ASSERT_EQ(live.erase(e.old_addr), 1u) << preset.name;
        continue;
      }
      ASSERT_EQ(e.new_addr % 16, 0u);
      const std::uint64_t end = e.new_addr + round_up_granules(e.size) * 16;
      auto it = live.upper_bound(e.new_addr);
      if (it != live.end()) {
        ASSERT_LE(end, it->first) << preset.name;
      }
      if (it != live.begin()) {
        ASSERT_LE(std::prev(it)->second, e.new_addr) << preset.name;
      }
      live[e.new_addr] = end;
    }
    EXPECT_TRUE(normalize(ev).warnings.empty()) << preset.name;
  }
}

TEST(WorkloadTest, PresetShapes) {
  const auto three48 = gen_workload(*find_preset("three48"));
  ASSERT_EQ(three48.size(), 3u);
  EXPECT_EQ(three48.back().new_addr + 48, 0x10001000u);
  const auto md5 = gen_workload(*find_preset("md5sum"));
  EXPECT_EQ(md5.size(), 462u);
  EXPECT_FALSE(find_preset("nope").has_value());
  WorkloadSpec bad;
  bad.events = 0;
  EXPECT_THROW(gen_workload(bad), std::invalid_argument);
  bad.events = 1;
  bad.frees_per_alloc = 1.5;
  EXPECT_THROW(gen_workload(bad), std::invalid_argument);
}

}  // namespace
}  // namespace mtetag
