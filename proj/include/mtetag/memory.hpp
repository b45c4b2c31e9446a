#pragma once

// Granule-tagged memory: tag-checked accesses against per-page adaptive
// stores, check modes, match-all and invalid tags, and the tag arithmetic
// helpers mirroring IRG/ADDG/SUBG.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "mtetag/oracle.hpp"
#include "mtetag/page_store.hpp"
#include "mtetag/tag_width.hpp"

namespace mtetag {

using Rng = std::mt19937_64;

inline constexpr std::uint64_t kTopByteShift = 56;
inline constexpr std::uint64_t kAddressMask = (std::uint64_t{1} << kTopByteShift) - 1;
inline constexpr Tag kMatchAllTag = 0xF;

struct TaggedAddress {
  std::uint64_t address = 0;
  Tag tag = 0;
  friend bool operator==(const TaggedAddress&, const TaggedAddress&) = default;
};

/// Packs a 4- or 8-bit tag into the top byte of a pointer.
inline std::uint64_t encode_pointer(TaggedAddress ta, TagWidth w) {
  if (bits(w) > 8) throw std::invalid_argument("top-byte packing needs a 4- or 8-bit tag");
  return (ta.address & kAddressMask) | (std::uint64_t{ta.tag & tag_mask(w)} << kTopByteShift);
}

/// Inverse of encode_pointer. For 4-bit tags only bits 56..59 are the tag.
inline TaggedAddress decode_pointer(std::uint64_t word, TagWidth w) {
  if (bits(w) > 8) throw std::invalid_argument("top-byte packing needs a 4- or 8-bit tag");
  return {word & kAddressMask, static_cast<Tag>(word >> kTopByteShift) & tag_mask(w)};
}

inline TaggedAddress addg(TaggedAddress ta, TagWidth w, std::uint64_t addr_delta,
                          std::int64_t tag_delta) {
  const std::uint64_t space = tag_space(w);
  const std::uint64_t delta = static_cast<std::uint64_t>(
      ((tag_delta % static_cast<std::int64_t>(space)) + static_cast<std::int64_t>(space)) %
      static_cast<std::int64_t>(space));
  return {ta.address + addr_delta, static_cast<Tag>((ta.tag + delta) % space)};
}

inline TaggedAddress subg(TaggedAddress ta, TagWidth w, std::uint64_t addr_delta,
                          std::int64_t tag_delta) {
  TaggedAddress r = addg(ta, w, 0, -tag_delta);
  r.address = ta.address - addr_delta;
  return r;
}

/// Uniform random tag outside `excluded`.
template <typename Urbg>
Tag irg(TagWidth w, std::span<const Tag> excluded, Urbg& rng) {
  std::set<Tag> ex;
  for (Tag t : excluded)
    if (t <= tag_mask(w)) ex.insert(t);
  if (ex.size() >= tag_space(w)) throw std::invalid_argument("irg: every tag is excluded");
  if (bits(w) <= 8) {
    std::vector<Tag> allowed;
    for (Tag t = 0; t <= tag_mask(w); ++t)
      if (!ex.contains(t)) allowed.push_back(t);
    std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
    return allowed[pick(rng)];
  }
  std::uniform_int_distribution<Tag> pick(0, tag_mask(w));
  for (;;) {
    const Tag t = pick(rng);
    if (!ex.contains(t)) return t;
  }
}

template <typename Urbg>
Tag irg(TagWidth w, std::initializer_list<Tag> excluded, Urbg& rng) {
  return irg(w, std::span<const Tag>(excluded.begin(), excluded.size()), rng);
}

enum class CheckMode { kOff, kSync, kAsync };
enum class AccessKind { kLoad, kStore };
enum class AccessResult { kOk, kTagFault, kUnmapped };

struct CheckConfig {
  CheckMode mode = CheckMode::kSync;
  bool match_all_enabled = false;
  bool privileged = false;
  std::optional<Tag> invalid_tag;
};

struct FaultRecord {
  std::uint64_t event_index = 0;
  std::uint64_t address = 0;
  Tag address_tag = 0;
  Tag memory_tag = 0;
  AccessKind kind = AccessKind::kLoad;
  friend bool operator==(const FaultRecord&, const FaultRecord&) = default;
};

class FaultLog {
 public:
  bool pending() const { return !records_.empty(); }
  const std::vector<FaultRecord>& records() const { return records_; }
  void raise_sync(const FaultRecord& r) { records_.assign(1, r); }
  void accumulate(const FaultRecord& r) { records_.push_back(r); }
  std::vector<FaultRecord> drain() { return std::exchange(records_, {}); }

 private:
  std::vector<FaultRecord> records_;
};

/// Lazily mapped, tag-checked memory. Physical contents are not modelled.
class TaggedMemory {
 public:
  explicit TaggedMemory(TagWidth w, CheckConfig cfg = {}) : region_(w), config_(cfg) {}

  TagWidth width() const { return region_.width(); }
  CheckConfig& config() { return config_; }
  const CheckConfig& config() const { return config_; }

  /// Keeps a full-width flat shadow of every page for oracle comparison.
  void enable_oracle() { oracle_enabled_ = true; }
  bool oracle_enabled() const { return oracle_enabled_; }

  /// Nibble stored for a run when a write forces its page to the 4-bit
  /// array. The default keeps the low bits of the run's tag.
  using SwitchTransform = std::function<Tag(std::uint64_t page_number, const Run&)>;
  void set_switch_transform(SwitchTransform f) { switch_transform_ = std::move(f); }

  void map(std::uint64_t addr, std::uint64_t len) {
    if (len == 0) return;
    for (std::uint64_t p = addr / kPageBytes; p <= (addr + len - 1) / kPageBytes; ++p)
      (void)page_index(p, true);
  }

  bool mapped(std::uint64_t addr) const { return pages_.contains(addr / kPageBytes); }

  std::optional<Tag> ldg(std::uint64_t addr) const {
    const auto it = pages_.find(addr / kPageBytes);
    if (it == pages_.end()) return std::nullopt;
    ++ldg_ops_;
    return region_.page(it->second).ldg(granule_in_page(addr));
  }

  std::optional<Run> run_at(std::uint64_t addr) const {
    const auto it = pages_.find(addr / kPageBytes);
    if (it == pages_.end()) return std::nullopt;
    return region_.page(it->second).run_at(granule_in_page(addr));
  }

  /// Tags every granule overlapping [addr, addr+len); maps pages on demand.
  void set_tags(std::uint64_t addr, std::uint64_t len, Tag tag) {
    if (len == 0) return;
    std::uint64_t g = addr / kGranuleBytes;
    const std::uint64_t g_end = (addr + len - 1) / kGranuleBytes + 1;
    while (g < g_end) {
      const std::uint64_t page = g / kGranulesPerPage;
      const std::uint64_t stop = std::min(g_end, (page + 1) * kGranulesPerPage);
      const Granule first = static_cast<Granule>(g % kGranulesPerPage);
      const Granule count = static_cast<Granule>(stop - g);
      write_page(page, first, count, tag);
      g = stop;
    }
  }

  AccessResult checked_access(TaggedAddress ta, std::uint64_t len, AccessKind kind) {
    const std::uint64_t index = access_counter_++;
    if (len == 0) len = 1;
    for (std::uint64_t g = ta.address / kGranuleBytes; g <= (ta.address + len - 1) / kGranuleBytes;
         ++g)
      if (!pages_.contains(g / kGranulesPerPage)) return AccessResult::kUnmapped;
    if (config_.mode == CheckMode::kOff) return AccessResult::kOk;

    for (std::uint64_t g = ta.address / kGranuleBytes; g <= (ta.address + len - 1) / kGranuleBytes;
         ++g) {
      const auto page = region_.page(pages_.at(g / kGranulesPerPage));
      const Tag mem_tag = page.ldg(static_cast<Granule>(g % kGranulesPerPage));
      ++ldg_ops_;
      if (tag_check_passes(ta.tag, mem_tag, page.is_btree())) continue;
      const FaultRecord rec{index, std::max(ta.address, g * kGranuleBytes), ta.tag, mem_tag, kind};
      if (config_.mode == CheckMode::kSync) {
        faults_.raise_sync(rec);
        return AccessResult::kTagFault;
      }
      faults_.accumulate(rec);
      return AccessResult::kOk;
    }
    return AccessResult::kOk;
  }

  /// Plain tag comparison at one granule, masked as the page stores tags.
  bool tags_match(TaggedAddress ta) const {
    const auto it = pages_.find(ta.address / kPageBytes);
    if (it == pages_.end()) return false;
    const auto page = region_.page(it->second);
    const Tag mask = page.is_btree() ? tag_mask(width()) : 0xFu;
    return (ta.tag & mask) == page.ldg(granule_in_page(ta.address));
  }

  const FaultLog& faults() const { return faults_; }
  std::vector<FaultRecord> drain_faults() { return faults_.drain(); }

  // ---- page-level introspection (simulator) -------------------------------

  std::size_t page_count() const { return pages_.size(); }
  const std::unordered_map<std::uint64_t, std::size_t>& page_table() const { return pages_; }
  const PageRef page(std::uint64_t page_number) const {
    return region_.page(pages_.at(page_number));
  }
  const TagRegion& region() const { return region_; }

  ByteSize total_space() const { return total_space_; }
  std::uint64_t stg_ops() const { return stg_ops_; }
  std::uint64_t ldg_ops() const { return ldg_ops_; }
  std::uint64_t switch_events() const { return switches_; }

  /// Pages written since the last call.
  std::vector<std::uint64_t> take_dirty_pages() {
    std::vector<std::uint64_t> out(dirty_.begin(), dirty_.end());
    dirty_.clear();
    return out;
  }

  /// Granules of `page_number` whose stored tag differs from the shadow.
  std::uint64_t oracle_mismatches(std::uint64_t page_number) const {
    if (!oracle_enabled_) return 0;
    const auto page = region_.page(pages_.at(page_number));
    const FlatTagArray& shadow = shadows_.at(page_number);
    std::uint64_t bad = 0;
    for (Granule g = 0; g < kGranulesPerPage; ++g) {
      ++ldg_ops_;
      if (page.ldg(g) != shadow.oracle_ldg(g)) ++bad;
    }
    return bad;
  }

 private:
  static Granule granule_in_page(std::uint64_t addr) {
    return static_cast<Granule>((addr % kPageBytes) / kGranuleBytes);
  }

  bool tag_check_passes(Tag addr_tag, Tag mem_tag, bool btree_page) const {
    const Tag mask = btree_page ? tag_mask(width()) : 0xFu;
    if (config_.invalid_tag && mem_tag == (*config_.invalid_tag & mask)) return false;
    if (width() == TagWidth::k4 && config_.match_all_enabled && config_.privileged &&
        (addr_tag & 0xFu) == kMatchAllTag)
      return true;
    return (addr_tag & mask) == mem_tag;
  }

  std::size_t page_index(std::uint64_t page_number, bool create) {
    const auto it = pages_.find(page_number);
    if (it != pages_.end()) return it->second;
    if (!create) throw std::out_of_range("unmapped page");
    const std::size_t idx = region_.add_page();
    pages_.emplace(page_number, idx);
    total_space_ += region_.page(idx).space_used();
    if (oracle_enabled_) shadows_.emplace(page_number, FlatTagArray(width()));
    return idx;
  }

  void write_page(std::uint64_t page_number, Granule first, Granule count, Tag tag) {
    auto page = region_.page(page_index(page_number, true));
    const ByteSize before = page.space_used();
    tag &= tag_mask(width());
    bool switched = false;
    if (!switch_transform_) {
      const bool was_btree = page.is_btree();
      page.stg_range(first, count, tag);
      switched = was_btree && !page.is_btree();
    } else if (!page.try_stg_range(first, count, tag)) {
      const auto fn = [&](const Run& r) { return switch_transform_(page_number, r); };
      page.switch_to_array_with(fn);
      page.stg_range(first, count, fn(Run{first, tag}) & 0xFu);
      switched = true;
    }
    ++stg_ops_;
    total_space_ += page.space_used() - before;
    dirty_.insert(page_number);
    if (switched) ++switches_;
    if (oracle_enabled_) {
      FlatTagArray& shadow = shadows_.at(page_number);
      if (switched && switch_transform_) {
        const auto fn = [&](const Run& r) { return switch_transform_(page_number, r); };
        shadow.truncate_with(fn);
        shadow.oracle_stg_range(first, count, fn(Run{first, tag}) & 0xFu);
      } else {
        shadow.oracle_stg_range(first, count, tag);
        if (switched) shadow.truncate_to_nibbles();
      }
    }
  }

  TagRegion region_;
  CheckConfig config_;
  std::unordered_map<std::uint64_t, std::size_t> pages_;
  std::map<std::uint64_t, FlatTagArray> shadows_;
  std::set<std::uint64_t> dirty_;
  FaultLog faults_;
  ByteSize total_space_{};
  std::uint64_t access_counter_ = 0;
  std::uint64_t stg_ops_ = 0;
  mutable std::uint64_t ldg_ops_ = 0;
  std::uint64_t switches_ = 0;
  bool oracle_enabled_ = false;
  SwitchTransform switch_transform_;
};

}  // namespace mtetag
