#pragma once

// Allocator tagging policies and a small heap that drives them.
//
// A policy decides which tags an allocation, its metadata granule, its slack
// and its freed granules receive. TaggedHeap owns placement (either chosen by
// the caller, as in trace replay, or by a simple per-policy layout) and the
// bookkeeping of live and freed records.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtetag/memory.hpp"
#include "mtetag/tag_width.hpp"

namespace mtetag {

enum class PolicyKind {
  kGlibcBaseline,
  kGlibcImproved,
  kLinuxSlub,
  kScudoPrimary,
  kChromeBaseline,
  kChromeRandomOddDelta,
  kChromeDeltaTable,
  kLlvmStackBaseline,
  kLlvmStackRandomOddDelta,
};

struct PolicyId {
  PolicyKind kind = PolicyKind::kGlibcBaseline;
  bool odd_even = false;  // only meaningful for kScudoPrimary
  friend bool operator==(const PolicyId&, const PolicyId&) = default;
};

namespace detail {
struct PolicyName {
  std::string_view name;
  PolicyId id;
};
inline constexpr std::array<PolicyName, 10> kPolicyNames{{
    {"glibc", {PolicyKind::kGlibcBaseline}},
    {"glibc-improved", {PolicyKind::kGlibcImproved}},
    {"slub", {PolicyKind::kLinuxSlub}},
    {"scudo", {PolicyKind::kScudoPrimary, false}},
    {"scudo-odd-even", {PolicyKind::kScudoPrimary, true}},
    {"chrome", {PolicyKind::kChromeBaseline}},
    {"chrome-odd-delta", {PolicyKind::kChromeRandomOddDelta}},
    {"chrome-delta-table", {PolicyKind::kChromeDeltaTable}},
    {"llvm-stack", {PolicyKind::kLlvmStackBaseline}},
    {"llvm-stack-odd-delta", {PolicyKind::kLlvmStackRandomOddDelta}},
}};
}  // namespace detail

inline std::optional<PolicyId> parse_policy(std::string_view name) {
  for (const auto& p : detail::kPolicyNames)
    if (p.name == name) return p.id;
  return std::nullopt;
}

inline std::string to_string(PolicyId id) {
  for (const auto& p : detail::kPolicyNames)
    if (p.id == id) return std::string(p.name);
  return "unknown";
}

inline std::vector<PolicyId> all_policies() {
  std::vector<PolicyId> out;
  for (const auto& p : detail::kPolicyNames) out.push_back(p.id);
  return out;
}

inline bool is_stack_policy(PolicyId id) {
  return id.kind == PolicyKind::kLlvmStackBaseline ||
         id.kind == PolicyKind::kLlvmStackRandomOddDelta;
}

struct AllocationRecord {
  std::uint64_t start = 0;
  std::uint64_t size = 0;  // rounded up to whole granules
  std::uint64_t requested = 0;
  Tag tag = 0;
  bool live = false;
};

inline constexpr std::uint64_t round_to_granule(std::uint64_t n) {
  return (n + kGranuleBytes - 1) / kGranuleBytes * kGranuleBytes;
}

inline constexpr std::uint64_t next_pow2(std::uint64_t n) { return std::bit_ceil(n); }

/// Tag used by the SLUB model for slack and freed granules.
inline constexpr Tag kSlubNoAccessTag = 0xE;

enum class DoubleFreeCheck { kNone, kTagMatch, kTagMatchOrMatchAll };

/// What a policy may touch while tagging. Granules owned by other live
/// allocations are protected through the clip helpers.
struct PolicyContext {
  TaggedMemory& mem;
  Rng& rng;
  std::function<std::uint64_t(std::uint64_t)> next_live_start;  // first live start >= addr
  std::function<bool(std::uint64_t)> granule_owned;

  /// Tags [from, to) but stops at the next live allocation.
  void tag_clipped(std::uint64_t from, std::uint64_t to, Tag t) {
    to = std::min(to, next_live_start(from));
    if (to > from) mem.set_tags(from, to - from, t);
  }
  void tag_granule_if_free(std::uint64_t addr, Tag t) {
    if (!granule_owned(addr)) mem.set_tags(addr, kGranuleBytes, t);
  }
};

class TaggingPolicy {
 public:
  TaggingPolicy(PolicyId id, TagWidth w) : id_(id), width_(w) {}
  virtual ~TaggingPolicy() = default;

  PolicyId id() const { return id_; }
  TagWidth width() const { return width_; }

  /// Bytes of allocator metadata directly in front of each allocation.
  virtual std::uint64_t header_bytes() const { return 0; }
  /// Slab size class holding `size` bytes, or 0 for a bump layout.
  virtual std::uint64_t size_class(std::uint64_t) const { return 0; }
  virtual DoubleFreeCheck double_free_check() const { return DoubleFreeCheck::kNone; }

  /// Every tag a fresh allocation at `start` could receive. Only for 4- and
  /// 8-bit widths.
  virtual std::vector<Tag> allocation_tags(std::uint64_t start, std::uint64_t size) const = 0;

  virtual Tag on_malloc(AllocationRecord& rec, PolicyContext& ctx) = 0;
  virtual void on_free(AllocationRecord& rec, PolicyContext& ctx) = 0;

  /// Tags one stack frame; returns each variable's tag.
  virtual std::vector<Tag> tag_frame(std::size_t, Rng&) {
    throw std::logic_error("policy " + to_string(id_) + " does not tag stack frames");
  }

  /// Whether metadata in front of allocations is tagged at all.
  bool metadata_granule = true;

 protected:
  std::vector<Tag> tags_where(const std::function<bool(Tag)>& pred) const {
    if (bits(width_) > 8) throw std::logic_error("tag enumeration needs a 4- or 8-bit width");
    std::vector<Tag> out;
    for (Tag t = 0; t <= tag_mask(width_); ++t)
      if (pred(t)) out.push_back(t);
    return out;
  }

  Tag random_odd(Rng& rng) const {
    std::uniform_int_distribution<std::uint64_t> half(0, tag_space(width_) / 2 - 1);
    return static_cast<Tag>(2 * half(rng) + 1);
  }

  Tag add(Tag t, std::uint64_t delta) const {
    return static_cast<Tag>((std::uint64_t{t} + delta) % tag_space(width_));
  }

  PolicyId id_;
  TagWidth width_;
};

class GlibcPolicy : public TaggingPolicy {
 public:
  GlibcPolicy(PolicyId id, TagWidth w) : TaggingPolicy(id, w) {}

  bool improved() const { return id_.kind == PolicyKind::kGlibcImproved; }
  std::uint64_t header_bytes() const override { return kGranuleBytes; }
  DoubleFreeCheck double_free_check() const override { return DoubleFreeCheck::kTagMatch; }

  std::vector<Tag> allocation_tags(std::uint64_t, std::uint64_t) const override {
    return tags_where([&](Tag t) { return improved() || t != 0; });
  }

  Tag on_malloc(AllocationRecord& rec, PolicyContext& ctx) override {
    const Tag tag = improved() ? irg(width_, {}, ctx.rng) : irg(width_, {0}, ctx.rng);
    ctx.mem.set_tags(rec.start, rec.size, tag);
    if (metadata_granule && rec.start >= kGranuleBytes) {
      const Tag meta = improved() ? irg(width_, {tag}, ctx.rng) : 0;
      ctx.tag_granule_if_free(rec.start - kGranuleBytes, meta);
    }
    return tag;
  }

  void on_free(AllocationRecord& rec, PolicyContext& ctx) override {
    const Tag current = ctx.mem.ldg(rec.start).value_or(rec.tag);
    const Tag t = improved() ? irg(width_, {current}, ctx.rng) : 0;
    ctx.mem.set_tags(rec.start, rec.size, t);
  }
};

class SlubPolicy : public TaggingPolicy {
 public:
  explicit SlubPolicy(TagWidth w) : TaggingPolicy({PolicyKind::kLinuxSlub}, w) {}

  std::uint64_t size_class(std::uint64_t size) const override {
    return next_pow2(std::max<std::uint64_t>(size, kGranuleBytes));
  }
  DoubleFreeCheck double_free_check() const override {
    return DoubleFreeCheck::kTagMatchOrMatchAll;
  }

  std::vector<Tag> allocation_tags(std::uint64_t, std::uint64_t) const override {
    return tags_where([](Tag t) { return t != kSlubNoAccessTag && t != kMatchAllTag; });
  }

  Tag on_malloc(AllocationRecord& rec, PolicyContext& ctx) override {
    const Tag tag = irg(width_, {kSlubNoAccessTag, kMatchAllTag}, ctx.rng);
    ctx.mem.set_tags(rec.start, rec.size, tag);
    ctx.tag_clipped(rec.start + rec.size, rec.start + size_class(rec.requested), kSlubNoAccessTag);
    return tag;
  }

  void on_free(AllocationRecord& rec, PolicyContext& ctx) override {
    ctx.mem.set_tags(rec.start, rec.size, kSlubNoAccessTag);
  }
};

class ScudoPolicy : public TaggingPolicy {
 public:
  ScudoPolicy(bool odd_even, TagWidth w)
      : TaggingPolicy({PolicyKind::kScudoPrimary, odd_even}, w) {}

  bool odd_even() const { return id_.odd_even; }
  std::uint64_t header_bytes() const override { return kGranuleBytes; }
  std::uint64_t size_class(std::uint64_t size) const override {
    return next_pow2(round_to_granule(std::max<std::uint64_t>(size, 1)) + kGranuleBytes);
  }

  /// Chunk number within its page, counted in size-class units.
  std::uint64_t chunk_index(std::uint64_t start, std::uint64_t size) const {
    return ((start - kGranuleBytes) % kPageBytes) / size_class(size);
  }

  std::vector<Tag> allocation_tags(std::uint64_t start, std::uint64_t size) const override {
    const bool odd = odd_even() && chunk_index(start, size) % 2 == 1;
    return tags_where([&](Tag t) { return t != 0 && (!odd_even() || (t % 2 == 1) == odd); });
  }

  Tag on_malloc(AllocationRecord& rec, PolicyContext& ctx) override {
    Tag tag;
    if (const auto it = free_tags_.find(rec.start); it != free_tags_.end()) {
      // Reuse the free-time tag. A larger request extends it; a smaller one
      // leaves the tail of the old chunk untouched.
      tag = it->second.tag;
      if (rec.size > it->second.size)
        ctx.mem.set_tags(rec.start + it->second.size, rec.size - it->second.size, tag);
      free_tags_.erase(it);
    } else {
      tag = draw(rec.start, rec.requested, ctx.rng);
      ctx.mem.set_tags(rec.start, rec.size, tag);
    }
    if (metadata_granule && rec.start >= kGranuleBytes)
      ctx.tag_granule_if_free(rec.start - kGranuleBytes, 0);
    ctx.tag_granule_if_free(rec.start + rec.size, 0);
    return tag;
  }

  void on_free(AllocationRecord& rec, PolicyContext& ctx) override {
    const Tag t = draw(rec.start, rec.requested, ctx.rng);
    ctx.mem.set_tags(rec.start, rec.size, t);
    free_tags_[rec.start] = {t, rec.size};
  }

 private:
  Tag draw(std::uint64_t start, std::uint64_t size, Rng& rng) const {
    if (!odd_even()) return irg(width_, {0}, rng);
    if (chunk_index(start, size) % 2 == 1) return random_odd(rng);
    std::uniform_int_distribution<std::uint64_t> half(1, tag_space(width_) / 2 - 1);
    return static_cast<Tag>(2 * half(rng));
  }

  struct FreedChunk {
    Tag tag;
    std::uint64_t size;
  };
  std::unordered_map<std::uint64_t, FreedChunk> free_tags_;
};

class ChromePolicy : public TaggingPolicy {
 public:
  static constexpr std::size_t kDeltaTableSize = 4;

  ChromePolicy(PolicyKind kind, TagWidth w, Rng& rng) : TaggingPolicy({kind}, w) {
    deltas_.fill(1);
    if (kind == PolicyKind::kChromeRandomOddDelta) deltas_.fill(random_odd(rng));
    if (kind == PolicyKind::kChromeDeltaTable)
      for (auto& d : deltas_) d = random_odd(rng);
  }

  std::uint64_t size_class(std::uint64_t size) const override {
    return next_pow2(round_to_granule(std::max<std::uint64_t>(size, 1)));
  }

  Tag delta_for(std::uint64_t start) const {
    return deltas_[(start / kGranuleBytes) % kDeltaTableSize];
  }
  std::span<const Tag, kDeltaTableSize> deltas() const { return deltas_; }

  std::vector<Tag> allocation_tags(std::uint64_t, std::uint64_t) const override {
    return tags_where([](Tag) { return true; });
  }

  Tag on_malloc(AllocationRecord& rec, PolicyContext& ctx) override {
    Tag tag;
    if (freed_.erase(rec.start) != 0) {
      tag = ctx.mem.ldg(rec.start).value_or(0);
    } else {
      tag = irg(width_, {}, ctx.rng);
    }
    ctx.mem.set_tags(rec.start, rec.size, tag);
    return tag;
  }

  void on_free(AllocationRecord& rec, PolicyContext& ctx) override {
    const Tag current = ctx.mem.ldg(rec.start).value_or(rec.tag);
    ctx.mem.set_tags(rec.start, rec.size, add(current, delta_for(rec.start)));
    freed_.insert(rec.start);
  }

 private:
  std::array<Tag, kDeltaTableSize> deltas_{};
  std::set<std::uint64_t> freed_;
};

class LlvmStackPolicy : public TaggingPolicy {
 public:
  LlvmStackPolicy(PolicyKind kind, TagWidth w) : TaggingPolicy({kind}, w) {}

  bool odd_delta() const { return id_.kind == PolicyKind::kLlvmStackRandomOddDelta; }
  /// Baseline frames never use tag 0.
  bool skips_zero() const { return !odd_delta(); }

  std::vector<Tag> allocation_tags(std::uint64_t, std::uint64_t) const override {
    return tags_where([&](Tag t) { return odd_delta() || t != 0; });
  }

  Tag on_malloc(AllocationRecord&, PolicyContext&) override {
    throw std::logic_error("stack policies have no heap allocator");
  }
  void on_free(AllocationRecord&, PolicyContext&) override {
    throw std::logic_error("stack policies have no heap allocator");
  }

  std::vector<Tag> tag_frame(std::size_t vars, Rng& rng) override {
    const Tag base = irg(width_, {0}, rng);
    const std::uint64_t delta = odd_delta() ? random_odd(rng) : 1;
    std::vector<Tag> out;
    for (std::size_t k = 0; k < vars; ++k) {
      if (skips_zero()) {
        const std::uint64_t cycle = tag_space(width_) - 1;
        out.push_back(static_cast<Tag>((base - 1 + k) % cycle + 1));
      } else {
        out.push_back(add(base, (k * delta) % tag_space(width_)));
      }
    }
    return out;
  }
};

inline std::unique_ptr<TaggingPolicy> make_policy(PolicyId id, TagWidth w, Rng& rng) {
  switch (id.kind) {
    case PolicyKind::kGlibcBaseline:
    case PolicyKind::kGlibcImproved:
      return std::make_unique<GlibcPolicy>(id, w);
    case PolicyKind::kLinuxSlub:
      return std::make_unique<SlubPolicy>(w);
    case PolicyKind::kScudoPrimary:
      return std::make_unique<ScudoPolicy>(id.odd_even, w);
    case PolicyKind::kChromeBaseline:
    case PolicyKind::kChromeRandomOddDelta:
    case PolicyKind::kChromeDeltaTable:
      return std::make_unique<ChromePolicy>(id.kind, w, rng);
    case PolicyKind::kLlvmStackBaseline:
    case PolicyKind::kLlvmStackRandomOddDelta:
      return std::make_unique<LlvmStackPolicy>(id.kind, w);
  }
  throw std::invalid_argument("unknown policy");
}

enum class FreeStatus {
  kFreed,
  kRejected,             // live allocation, pointer tag failed the allocator's check
  kDoubleFreeRejected,
  kDoubleFreeAccepted,
  kUnknownPointer,
};

struct FreeOutcome {
  FreeStatus status = FreeStatus::kFreed;
  std::optional<AllocationRecord> record;
};

struct HeapOptions {
  bool metadata_granule = true;
  std::uint64_t heap_base = 0x10000000;
  std::uint64_t slab_base = 0x100000000;
  std::uint64_t stack_base = 0x7f0000000000;
};

class TaggedHeap {
 public:
  TaggedHeap(PolicyId id, TaggedMemory& mem, std::uint64_t seed, HeapOptions opts = {})
      : mem_(mem), rng_(seed), opts_(opts), policy_(make_policy(id, mem.width(), rng_)) {
    policy_->metadata_granule = opts.metadata_granule;
    bump_ = opts_.heap_base;
    stack_top_ = opts_.stack_base;
  }

  TaggingPolicy& policy() { return *policy_; }
  const TaggingPolicy& policy() const { return *policy_; }
  TaggedMemory& memory() { return mem_; }
  Rng& rng() { return rng_; }

  /// Allocates at an address chosen by this heap's layout.
  TaggedAddress malloc(std::uint64_t size) { return malloc_at(place(size), size); }

  /// Allocates at a caller-chosen start (trace replay, scripted scenarios).
  TaggedAddress malloc_at(std::uint64_t start, std::uint64_t size) {
    if (size == 0) size = 1;
    if (start % kGranuleBytes != 0) throw std::invalid_argument("allocation start not granule aligned");
    AllocationRecord rec{start, round_to_granule(size), size, 0, true};
    check_no_overlap(rec);
    auto ctx = context();
    rec.tag = policy_->on_malloc(rec, ctx);
    dead_.erase(start);
    live_.emplace(start, rec);
    return {start, rec.tag};
  }

  FreeOutcome free(TaggedAddress ptr) {
    if (const auto it = live_.find(ptr.address); it != live_.end()) {
      if (!check_passes(ptr, it->second.start)) return {FreeStatus::kRejected, it->second};
      AllocationRecord rec = it->second;
      live_.erase(it);
      auto ctx = context();
      policy_->on_free(rec, ctx);
      rec.live = false;
      dead_[rec.start] = rec;
      recycle(rec);
      return {FreeStatus::kFreed, rec};
    }
    if (const auto it = dead_.find(ptr.address); it != dead_.end()) {
      if (!check_passes(ptr, it->second.start)) return {FreeStatus::kDoubleFreeRejected, it->second};
      auto ctx = context();
      policy_->on_free(it->second, ctx);
      return {FreeStatus::kDoubleFreeAccepted, it->second};
    }
    return {FreeStatus::kUnknownPointer, std::nullopt};
  }

  /// Lays out one stack frame of 16-byte aligned variables and tags it.
  std::vector<TaggedAddress> stack_frame(std::span<const std::uint64_t> var_sizes) {
    std::uint64_t total = 0;
    for (auto s : var_sizes) total += round_to_granule(std::max<std::uint64_t>(s, 1));
    stack_top_ -= total;
    const auto tags = policy_->tag_frame(var_sizes.size(), rng_);
    std::vector<TaggedAddress> out;
    std::uint64_t at = stack_top_;
    for (std::size_t k = 0; k < var_sizes.size(); ++k) {
      const std::uint64_t len = round_to_granule(std::max<std::uint64_t>(var_sizes[k], 1));
      mem_.set_tags(at, len, tags[k]);
      out.push_back({at, tags[k]});
      at += len;
    }
    return out;
  }

  const std::map<std::uint64_t, AllocationRecord>& live() const { return live_; }
  const AllocationRecord* find_live(std::uint64_t start) const {
    const auto it = live_.find(start);
    return it == live_.end() ? nullptr : &it->second;
  }

 private:
  PolicyContext context() {
    return PolicyContext{
        mem_, rng_,
        [this](std::uint64_t addr) {
          const auto it = live_.lower_bound(addr);
          return it == live_.end() ? ~std::uint64_t{0} : it->first;
        },
        [this](std::uint64_t addr) { return owner(addr) != nullptr; }};
  }

  const AllocationRecord* owner(std::uint64_t addr) const {
    auto it = live_.upper_bound(addr);
    if (it == live_.begin()) return nullptr;
    --it;
    return addr < it->second.start + it->second.size ? &it->second : nullptr;
  }

  void check_no_overlap(const AllocationRecord& rec) const {
    auto it = live_.lower_bound(rec.start);
    if (it != live_.end() && it->first < rec.start + rec.size)
      throw std::logic_error("allocation overlaps a live allocation");
    if (owner(rec.start) != nullptr) throw std::logic_error("allocation overlaps a live allocation");
  }

  bool check_passes(TaggedAddress ptr, std::uint64_t start) const {
    switch (policy_->double_free_check()) {
      case DoubleFreeCheck::kNone:
        return true;
      case DoubleFreeCheck::kTagMatch:
        return mem_.tags_match({start, ptr.tag});
      case DoubleFreeCheck::kTagMatchOrMatchAll:
        return mem_.tags_match({start, ptr.tag}) || ptr.tag == kMatchAllTag;
    }
    return false;
  }

  // Slab classes live in disjoint, page-aligned regions; the bump heap puts a
  // header in front of every allocation. Both reuse freed slots LIFO.
  std::uint64_t place(std::uint64_t size) {
    if (size == 0) size = 1;
    const std::uint64_t cls = policy_->size_class(size);
    const std::uint64_t key = cls != 0 ? cls : round_to_granule(size);
    auto& stack = free_slots_[key];
    while (!stack.empty()) {
      const std::uint64_t start = stack.back();
      stack.pop_back();
      if (!live_.contains(start)) return start;
    }
    if (cls == 0) {
      const std::uint64_t start = bump_ + policy_->header_bytes();
      bump_ = start + round_to_granule(size);
      return start;
    }
    auto& next = slab_next_[cls];
    const std::uint64_t region = opts_.slab_base + std::countr_zero(cls) * (std::uint64_t{1} << 34);
    const std::uint64_t chunk = region + next++ * cls;
    return chunk + policy_->header_bytes();
  }

  void recycle(const AllocationRecord& rec) {
    const std::uint64_t cls = policy_->size_class(rec.requested);
    free_slots_[cls != 0 ? cls : rec.size].push_back(rec.start);
  }

  TaggedMemory& mem_;
  Rng rng_;
  HeapOptions opts_;
  std::unique_ptr<TaggingPolicy> policy_;
  std::map<std::uint64_t, AllocationRecord> live_;
  std::unordered_map<std::uint64_t, AllocationRecord> dead_;
  std::map<std::uint64_t, std::vector<std::uint64_t>> free_slots_;
  std::map<std::uint64_t, std::uint64_t> slab_next_;
  std::uint64_t bump_ = 0;
  std::uint64_t stack_top_ = 0;
};

}  // namespace mtetag
