#include <gtest/gtest.h>

#include <set>

#include "mtetag/policy.hpp"

namespace mtetag {
namespace {

constexpr std::uint64_t kStart = 0x20000;

Tag tag_at(const TaggedMemory& mem, std::uint64_t addr) { return *mem.ldg(addr); }

TEST(PolicyNamesTest, RoundTrip) {
  for (PolicyId id : all_policies()) {
    const auto parsed = parse_policy(to_string(id));
    ASSERT_TRUE(parsed);
    EXPECT_EQ(*parsed, id);
  }
  EXPECT_FALSE(parse_policy("jemalloc"));
}

TEST(GlibcTest, MallocTagsAllocationAndZeroMetadata) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    TaggedMemory mem(TagWidth::k4);
    TaggedHeap heap({PolicyKind::kGlibcBaseline}, mem, seed);
    const auto p = heap.malloc_at(kStart, 48);
    EXPECT_GE(p.tag, 1u);
    EXPECT_LE(p.tag, 15u);
    for (int g = 0; g < 3; ++g) EXPECT_EQ(tag_at(mem, kStart + 16 * g), p.tag);
    EXPECT_EQ(tag_at(mem, kStart - 16), 0u);
  }
}

TEST(GlibcTest, FreeZeroesAndDoubleFreeIsRejected) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kGlibcBaseline}, mem, 3);
  const auto p = heap.malloc_at(kStart, 48);
  EXPECT_EQ(heap.free(p).status, FreeStatus::kFreed);
  for (int g = 0; g < 3; ++g) EXPECT_EQ(tag_at(mem, kStart + 16 * g), 0u);
  // Freed granules merge with the zero metadata run in front of them.
  EXPECT_EQ(mem.run_at(kStart)->start, 0u);
  EXPECT_EQ(heap.free(p).status, FreeStatus::kDoubleFreeRejected);
}

TEST(GlibcTest, ImprovedMetadataDiffersFromAllocation) {
  std::set<Tag> alloc_tags;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    TaggedMemory mem(TagWidth::k4);
    TaggedHeap heap({PolicyKind::kGlibcImproved}, mem, seed);
    const auto p = heap.malloc_at(kStart, 32);
    alloc_tags.insert(p.tag);
    ASSERT_NE(tag_at(mem, kStart - 16), p.tag);
    ASSERT_EQ(heap.free(p).status, FreeStatus::kFreed);
    ASSERT_NE(tag_at(mem, kStart), p.tag);
    ASSERT_EQ(heap.free(p).status, FreeStatus::kDoubleFreeRejected);
  }
  EXPECT_EQ(alloc_tags.size(), 16u);
}

TEST(SlubTest, SlackGranulesGetNoAccessTag) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kLinuxSlub}, mem, 11);
  EXPECT_EQ(heap.policy().size_class(36), 64u);
  const auto p = heap.malloc_at(kStart, 36);
  for (int g = 0; g < 3; ++g) EXPECT_EQ(tag_at(mem, kStart + 16 * g), p.tag);
  EXPECT_EQ(tag_at(mem, kStart + 48), kSlubNoAccessTag);
  EXPECT_EQ(heap.free(p).status, FreeStatus::kFreed);
  for (int g = 0; g < 4; ++g) EXPECT_EQ(tag_at(mem, kStart + 16 * g), kSlubNoAccessTag);
  EXPECT_EQ(heap.free(p).status, FreeStatus::kDoubleFreeRejected);
}

TEST(SlubTest, SlackStopsAtNextLiveAllocation) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kLinuxSlub}, mem, 11);
  const auto q = heap.malloc_at(kStart + 48, 16);
  heap.malloc_at(kStart, 36);
  EXPECT_EQ(tag_at(mem, kStart + 48), q.tag);
}

TEST(SlubTest, MatchAllPointerPassesDoubleFreeCheck) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kLinuxSlub}, mem, 5);
  const auto p = heap.malloc_at(kStart, 64);
  heap.free(p);
  EXPECT_EQ(heap.free({kStart, kMatchAllTag}).status, FreeStatus::kDoubleFreeAccepted);
}

TEST(SlubTest, NeverAssignsReservedTags) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kLinuxSlub}, mem, 17);
  std::set<Tag> seen;
  for (int i = 0; i < 5000; ++i) {
    const auto p = heap.malloc(16 + (i % 7) * 40);
    ASSERT_NE(p.tag, kSlubNoAccessTag);
    ASSERT_NE(p.tag, kMatchAllTag);
    seen.insert(p.tag);
    if (i % 3 != 0) heap.free(p);
  }
  EXPECT_EQ(seen.size(), 14u);
  for (const auto& [start, rec] : heap.live())
    for (std::uint64_t a = start; a < start + rec.size; a += 16) {
      ASSERT_NE(tag_at(mem, a), kSlubNoAccessTag);
      ASSERT_NE(tag_at(mem, a), kMatchAllTag);
    }
}

TEST(ScudoTest, OddEvenParityFollowsChunk) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kScudoPrimary, true}, mem, 23);
  const auto& scudo = static_cast<const ScudoPolicy&>(heap.policy());
  for (int i = 0; i < 3000; ++i) {
    const std::uint64_t size = 16 + (i % 5) * 100;
    const auto p = heap.malloc(size);
    ASSERT_NE(p.tag, 0u);
    ASSERT_EQ(p.tag % 2, scudo.chunk_index(p.address, size) % 2);
    if (i % 2 == 0) heap.free(p);
  }
  // chunk 3 of the 64-byte class
  EXPECT_EQ(scudo.size_class(48), 64u);
  TaggedMemory mem2(TagWidth::k4);
  TaggedHeap heap2({PolicyKind::kScudoPrimary, true}, mem2, 1);
  EXPECT_EQ(heap2.malloc_at(0x30000 + 3 * 64 + 16, 48).tag % 2, 1u);
}

TEST(ScudoTest, GuardGranuleAndHeaderAreZero) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kScudoPrimary}, mem, 2);
  mem.set_tags(kStart - 64, 256, 9);
  const auto p = heap.malloc_at(kStart, 32);
  EXPECT_EQ(tag_at(mem, kStart - 16), 0u);
  EXPECT_EQ(tag_at(mem, kStart + 32), 0u);
  EXPECT_EQ(tag_at(mem, kStart + 16), p.tag);
}

TEST(ScudoTest, ReallocReusesFreeTagAndLeavesTailUntouched) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kScudoPrimary}, mem, 8);
  const auto a1 = heap.malloc_at(kStart, 640);
  heap.free(a1);
  const Tag freed = tag_at(mem, kStart);
  const auto a2 = heap.malloc_at(kStart, 480);
  EXPECT_EQ(a2.tag, freed);
  EXPECT_EQ(tag_at(mem, kStart + 480), 0u);  // guard after a2
  for (std::uint64_t off = 496; off < 640; off += 16) EXPECT_EQ(tag_at(mem, kStart + off), a2.tag);
  EXPECT_EQ(mem.checked_access({kStart + 500, a2.tag}, 1, AccessKind::kStore), AccessResult::kOk);
}

TEST(ChromeTest, FreeIncrementsAndReallocReuses) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kChromeBaseline}, mem, 4);
  const auto p = heap.malloc_at(kStart, 64);
  heap.free(p);
  EXPECT_EQ(tag_at(mem, kStart), (p.tag + 1) % 16);
  const auto q = heap.malloc_at(kStart, 64);
  EXPECT_EQ(q.tag, (p.tag + 1) % 16);
}

TEST(ChromeTest, OddDeltaOrbitCoversAllTags) {
  for (Tag delta = 1; delta < 16; delta += 2) {
    std::set<Tag> orbit;
    Tag t = 7;
    for (int i = 0; i < 16; ++i) {
      orbit.insert(t);
      t = (t + delta) % 16;
    }
    EXPECT_EQ(orbit.size(), 16u) << "delta " << delta;
    EXPECT_EQ(t, 7u);
  }
  // The delta of 5 from the improvement example.
  EXPECT_EQ((7 + 5) % 16, 12);
}

TEST(ChromeTest, PolicyDeltasAreOddAndCycleThroughAllTags) {
  for (auto kind : {PolicyKind::kChromeRandomOddDelta, PolicyKind::kChromeDeltaTable}) {
    std::set<Tag> deltas;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      TaggedMemory mem(TagWidth::k4);
      TaggedHeap heap({kind}, mem, seed);
      const auto& chrome = static_cast<const ChromePolicy&>(heap.policy());
      for (Tag d : chrome.deltas()) {
        ASSERT_EQ(d % 2, 1u);
        deltas.insert(d);
      }
      if (kind == PolicyKind::kChromeRandomOddDelta) {
        EXPECT_EQ(std::set<Tag>(chrome.deltas().begin(), chrome.deltas().end()).size(), 1u);
      }
      // Repeated malloc/free at one address walks the whole orbit.
      std::set<Tag> seen;
      for (int i = 0; i < 16; ++i) {
        const auto p = heap.malloc_at(kStart, 32);
        seen.insert(p.tag);
        heap.free(p);
      }
      ASSERT_EQ(seen.size(), 16u);
      EXPECT_EQ(tag_at(mem, kStart), heap.malloc_at(kStart, 32).tag);
    }
    EXPECT_EQ(deltas.size(), 8u);
  }
}

TEST(ChromeTest, DeltaTableIndexedByStartBits) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kChromeDeltaTable}, mem, 77);
  const auto& chrome = static_cast<const ChromePolicy&>(heap.policy());
  for (std::uint64_t k = 0; k < 8; ++k) {
    const std::uint64_t start = kStart + 16 * k;
    EXPECT_EQ(chrome.delta_for(start), chrome.deltas()[k % 4]);
    const auto p = heap.malloc_at(start, 16);
    heap.free(p);
    EXPECT_EQ(tag_at(mem, start), (p.tag + chrome.delta_for(start)) % 16);
  }
}

TEST(LlvmStackTest, BaselineIncrementsSkippingZero) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    TaggedMemory mem(TagWidth::k4);
    TaggedHeap heap({PolicyKind::kLlvmStackBaseline}, mem, seed);
    const std::vector<std::uint64_t> sizes(20, 32);
    const auto vars = heap.stack_frame(sizes);
    for (std::size_t k = 0; k < vars.size(); ++k) {
      ASSERT_NE(vars[k].tag, 0u);
      if (k > 0) {
        const Tag expect = vars[k - 1].tag == 15 ? 1 : vars[k - 1].tag + 1;
        ASSERT_EQ(vars[k].tag, expect);
        ASSERT_EQ(vars[k].address, vars[k - 1].address + 32);
      }
      ASSERT_EQ(tag_at(mem, vars[k].address + 16), vars[k].tag);
    }
  }
}

TEST(LlvmStackTest, OddDeltaStepsByOddOffset) {
  std::set<Tag> steps;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    TaggedMemory mem(TagWidth::k4);
    TaggedHeap heap({PolicyKind::kLlvmStackRandomOddDelta}, mem, seed);
    const std::vector<std::uint64_t> sizes{48, 32, 16};
    const auto vars = heap.stack_frame(sizes);
    const Tag step = (vars[1].tag + 16 - vars[0].tag) % 16;
    ASSERT_EQ(step % 2, 1u);
    ASSERT_EQ((vars[2].tag + 16 - vars[1].tag) % 16, step);
    steps.insert(step);
  }
  EXPECT_EQ(steps.size(), 8u);
}

TEST(HeapTest, OverlapIsABug) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kGlibcBaseline}, mem, 1);
  heap.malloc_at(kStart, 64);
  EXPECT_THROW(heap.malloc_at(kStart + 32, 16), std::logic_error);
  EXPECT_THROW(heap.malloc_at(kStart - 16, 32), std::logic_error);
  EXPECT_NO_THROW(heap.malloc_at(kStart + 64, 16));
  EXPECT_THROW(heap.malloc_at(kStart + 8, 16), std::invalid_argument);
}

TEST(HeapTest, UnknownAndWrongTagFrees) {
  TaggedMemory mem(TagWidth::k4);
  TaggedHeap heap({PolicyKind::kGlibcBaseline}, mem, 1);
  EXPECT_EQ(heap.free({0x999990, 1}).status, FreeStatus::kUnknownPointer);
  const auto p = heap.malloc_at(kStart, 16);
  EXPECT_EQ(heap.free({kStart, (p.tag % 15) + 1}).status, FreeStatus::kRejected);
  EXPECT_NE(heap.find_live(kStart), nullptr);
}

TEST(HeapTest, LayoutReusesSameSizeSlots) {
  for (PolicyId id : all_policies()) {
    if (is_stack_policy(id)) continue;
    TaggedMemory mem(TagWidth::k4);
    TaggedHeap heap(id, mem, 9);
    const auto a = heap.malloc(100);
    const auto b = heap.malloc(100);
    EXPECT_NE(a.address, b.address);
    EXPECT_EQ(a.address % 16, 0u);
    heap.free(a);
    EXPECT_EQ(heap.malloc(100).address, a.address) << to_string(id);
  }
}

TEST(HeapTest, WideWidthsWork) {
  for (TagWidth w : {TagWidth::k8, TagWidth::k16, TagWidth::k32}) {
    for (PolicyId id : all_policies()) {
      if (is_stack_policy(id)) continue;
      TaggedMemory mem(w);
      TaggedHeap heap(id, mem, 5);
      std::vector<TaggedAddress> ptrs;
      for (int i = 0; i < 50; ++i) ptrs.push_back(heap.malloc(24 + i * 8));
      for (const auto& p : ptrs) {
        ASSERT_LE(p.tag, tag_mask(w));
        ASSERT_EQ(heap.free(p).status, FreeStatus::kFreed) << to_string(id);
      }
    }
  }
}

}  // namespace
}  // namespace mtetag
