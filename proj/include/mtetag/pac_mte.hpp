#pragma once

// Combined pointer authentication and memory tagging: each allocation run
// stores a random 16-bit memory tag t_m, and pointers carry a 16-bit MAC
// t_p = MAC_k(t_m, a) where a is the run's start address. Pages that fell
// back to the 4-bit array store the low nibble of t_p instead.
//
// The MAC is SipHash-2-4 (libsodium crypto_shorthash) truncated to 16 bits.

#include <sodium.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "mtetag/memory.hpp"
#include "mtetag/page_store.hpp"

namespace mtetag {

namespace detail {
inline void sodium_ready() {
  static const int rc = sodium_init();
  if (rc < 0) throw std::runtime_error("libsodium initialisation failed");
}
}  // namespace detail

struct PacKey {
  std::array<std::uint8_t, crypto_shorthash_KEYBYTES> bytes{};

  static PacKey random(Rng& rng) {
    PacKey k;
    for (auto& b : k.bytes) b = static_cast<std::uint8_t>(rng());
    return k;
  }
  friend bool operator==(const PacKey&, const PacKey&) = default;
};

struct PacContext {
  std::uint16_t t_m = 0;
  std::uint64_t a = 0;
  std::optional<std::uint32_t> type_id;
};

/// Raw 64-bit SipHash output; exposed for known-answer tests.
inline std::uint64_t siphash64(const PacKey& key, std::span<const std::uint8_t> msg) {
  detail::sodium_ready();
  std::array<std::uint8_t, crypto_shorthash_BYTES> out{};
  crypto_shorthash(out.data(), msg.data(), msg.size(), key.bytes.data());
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | out[i];
  return v;
}

/// Message layout: t_m (2 bytes LE), a (8 bytes LE), then the type id
/// (4 bytes LE) when present.
inline std::uint16_t compute_tp(const PacKey& key, const PacContext& ctx) {
  std::array<std::uint8_t, 14> msg{};
  std::size_t n = 0;
  for (int i = 0; i < 2; ++i) msg[n++] = static_cast<std::uint8_t>(ctx.t_m >> (8 * i));
  for (int i = 0; i < 8; ++i) msg[n++] = static_cast<std::uint8_t>(ctx.a >> (8 * i));
  if (ctx.type_id)
    for (int i = 0; i < 4; ++i) msg[n++] = static_cast<std::uint8_t>(*ctx.type_id >> (8 * i));
  return static_cast<std::uint16_t>(siphash64(key, std::span(msg.data(), n)));
}

enum class PacCheck { kOk, kFault };

/// Checks a 16-bit pointer tag against one page store. `page_base` is the
/// address of the page's first byte.
template <typename Storage>
PacCheck verify_access(const PacKey& key, std::uint64_t address, std::uint16_t tp,
                       const BasicPageStore<Storage>& page, std::uint64_t page_base,
                       std::optional<std::uint32_t> type_id = std::nullopt) {
  if (address < page_base || address - page_base >= kPageBytes)
    throw std::out_of_range("address outside page");
  const auto g = static_cast<Granule>((address - page_base) / kGranuleBytes);
  if (!page.is_btree()) return (tp & 0xFu) == page.ldg(g) ? PacCheck::kOk : PacCheck::kFault;
  if (page.width() != TagWidth::k16) throw std::logic_error("PAC+MTE needs a 16-bit tag store");
  const Run run = page.run_at(g);
  const PacContext ctx{static_cast<std::uint16_t>(run.tag), page_base + run.start * kGranuleBytes,
                       type_id};
  return compute_tp(key, ctx) == tp ? PacCheck::kOk : PacCheck::kFault;
}

/// Memory-level check; kUnmapped for addresses without a tag page.
inline AccessResult verify_access(const PacKey& key, TaggedAddress ta, const TaggedMemory& mem,
                                  std::optional<std::uint32_t> type_id = std::nullopt) {
  const std::uint64_t page_number = ta.address / kPageBytes;
  if (!mem.mapped(ta.address)) return AccessResult::kUnmapped;
  const auto r = verify_access(key, ta.address, static_cast<std::uint16_t>(ta.tag),
                               mem.page(page_number), page_number * kPageBytes, type_id);
  return r == PacCheck::kOk ? AccessResult::kOk : AccessResult::kTagFault;
}

struct PacAllocation {
  std::uint64_t address = 0;
  std::uint16_t tp = 0;
  std::uint16_t t_m = 0;
};

/// Transform used when a PAC page falls back to the 4-bit array.
inline auto pac_switch_transform(const PacKey& key, std::optional<std::uint32_t> type_id = {}) {
  return [key, type_id](std::uint64_t page_number, const Run& r) -> Tag {
    const PacContext ctx{static_cast<std::uint16_t>(r.tag),
                         page_number * kPageBytes + r.start * kGranuleBytes, type_id};
    return compute_tp(key, ctx) & 0xFu;
  };
}

namespace detail {

inline void check_pac_region(std::uint64_t start, std::uint64_t size) {
  if (start % kGranuleBytes != 0) throw std::invalid_argument("allocation start not granule aligned");
  if (size == 0) throw std::invalid_argument("empty allocation");
  if (start / kPageBytes != (start + size - 1) / kPageBytes)
    throw std::invalid_argument("PAC+MTE allocations must fit in one page");
}

// Fresh t_m avoiding the neighbours' run tags (so the run never merges and
// its start stays a) and any extra excluded value.
template <typename Lookup>
std::uint16_t fresh_memory_tag(Lookup&& neighbour_tag, std::uint64_t start, std::uint64_t end,
                               std::optional<Tag> also_exclude, Rng& rng) {
  std::vector<Tag> excluded;
  if (also_exclude) excluded.push_back(*also_exclude);
  if (auto t = neighbour_tag(start, true)) excluded.push_back(*t);
  if (auto t = neighbour_tag(end, false)) excluded.push_back(*t);
  return static_cast<std::uint16_t>(irg(TagWidth::k16, excluded, rng));
}

}  // namespace detail

/// Page-level allocation on a 16-bit store.
template <typename Storage>
PacAllocation alloc_with_pac(const PacKey& key, BasicPageStore<Storage>& page,
                             std::uint64_t page_base, std::uint64_t start, std::uint64_t size,
                             Rng& rng) {
  detail::check_pac_region(start, size);
  if (page.width() != TagWidth::k16) throw std::logic_error("PAC+MTE needs a 16-bit tag store");
  const auto first = static_cast<Granule>((start - page_base) / kGranuleBytes);
  const auto count = static_cast<Granule>(round_up_granules(size));
  const auto neighbour = [&](std::uint64_t, bool left) -> std::optional<Tag> {
    if (!page.is_btree()) return std::nullopt;
    if (left) return first > 0 ? std::optional<Tag>(page.ldg(first - 1)) : std::nullopt;
    return first + count < kGranulesPerPage ? std::optional<Tag>(page.ldg(first + count))
                                            : std::nullopt;
  };
  const std::uint16_t t_m = detail::fresh_memory_tag(neighbour, start, start + size, {}, rng);
  const std::uint16_t tp = compute_tp(key, {t_m, start, {}});
  const auto nibble = [&](const Run& r) {
    return compute_tp(key, {static_cast<std::uint16_t>(r.tag), page_base + r.start * kGranuleBytes, {}});
  };
  if (!page.is_btree()) {
    page.stg_range(first, count, tp & 0xFu);
  } else if (!page.try_stg_range(first, count, t_m)) {
    page.switch_to_array_with(nibble);
    page.stg_range(first, count, tp & 0xFu);
  }
  return {start, tp, t_m};
}

/// Memory-level allocation. Install pac_switch_transform(key) on `mem`
/// first so forced switches keep the low bits of every run's MAC.
inline PacAllocation alloc_with_pac(const PacKey& key, TaggedMemory& mem, std::uint64_t start,
                                    std::uint64_t size, Rng& rng,
                                    std::optional<std::uint32_t> type_id = std::nullopt) {
  detail::check_pac_region(start, size);
  if (mem.width() != TagWidth::k16) throw std::logic_error("PAC+MTE needs a 16-bit tag store");
  const std::uint64_t len = round_up_granules(size) * kGranuleBytes;
  mem.map(start, len);
  const bool btree = mem.page(start / kPageBytes).is_btree();
  const auto neighbour = [&](std::uint64_t addr, bool left) -> std::optional<Tag> {
    if (!btree) return std::nullopt;
    if (left) return addr >= kGranuleBytes ? mem.ldg(addr - kGranuleBytes) : std::nullopt;
    return mem.ldg(addr);
  };
  const std::uint16_t t_m = detail::fresh_memory_tag(neighbour, start, start + len, {}, rng);
  const std::uint16_t tp = compute_tp(key, {t_m, start, type_id});
  mem.set_tags(start, len, btree ? t_m : (tp & 0xFu));
  return {start, tp, t_m};
}

/// Re-tags a freed allocation with t_m' != t_m; the run keeps its start.
inline void free_with_pac(TaggedMemory& mem, const PacAllocation& alloc, std::uint64_t size,
                          Rng& rng) {
  detail::check_pac_region(alloc.address, size);
  const std::uint64_t len = round_up_granules(size) * kGranuleBytes;
  const bool btree = mem.page(alloc.address / kPageBytes).is_btree();
  if (!btree) {
    // Regular 4-bit behaviour: any nibble other than the current one.
    const Tag cur = *mem.ldg(alloc.address);
    mem.set_tags(alloc.address, len, irg(TagWidth::k4, {cur}, rng));
    return;
  }
  const auto neighbour = [&](std::uint64_t addr, bool left) -> std::optional<Tag> {
    if (left) return addr >= kGranuleBytes ? mem.ldg(addr - kGranuleBytes) : std::nullopt;
    return mem.ldg(addr);
  };
  const std::uint16_t t2 =
      detail::fresh_memory_tag(neighbour, alloc.address, alloc.address + len, alloc.t_m, rng);
  mem.set_tags(alloc.address, len, t2);
}

/// 16-bit tagged memory with the PAC fallback transform installed.
class PacMteMemory {
 public:
  explicit PacMteMemory(const PacKey& key, std::optional<std::uint32_t> type_id = std::nullopt)
      : key_(key), type_id_(type_id), mem_(TagWidth::k16) {
    mem_.set_switch_transform(pac_switch_transform(key_, type_id_));
  }

  const PacKey& key() const { return key_; }
  TaggedMemory& memory() { return mem_; }
  const TaggedMemory& memory() const { return mem_; }

  PacAllocation alloc(std::uint64_t start, std::uint64_t size, Rng& rng) {
    return alloc_with_pac(key_, mem_, start, size, rng, type_id_);
  }
  void free(const PacAllocation& a, std::uint64_t size, Rng& rng) { free_with_pac(mem_, a, size, rng); }
  AccessResult verify(TaggedAddress ta) const { return verify_access(key_, ta, mem_, type_id_); }

 private:
  PacKey key_;
  std::optional<std::uint32_t> type_id_;
  TaggedMemory mem_;
};

}  // namespace mtetag
