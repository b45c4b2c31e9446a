#pragma once

// Scripted attack gadgets against each tagging policy, run as Monte Carlo
// trials. A trial succeeds when the attacker's final access passes the tag
// check (or, for double free, when the allocator accepts the second free).

#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mtetag/memory.hpp"
#include "mtetag/policy.hpp"

namespace mtetag {

enum class AttackId {
  kMetadataOverwrite,
  kUafZeroTag,
  kUafIncrement,
  kUafRealloc,
  kAdjacentOverflow,
  kNonAdjacentOverflow,
  kStackNeighborOverflow,
  kMatchAllEscalation,
  kSlackGranuleAccess,
  kDoubleFree,
};

inline constexpr std::array<std::pair<std::string_view, AttackId>, 10> kAttackNames{{
    {"metadata-overwrite", AttackId::kMetadataOverwrite},
    {"uaf-zero-tag", AttackId::kUafZeroTag},
    {"uaf-increment", AttackId::kUafIncrement},
    {"uaf-realloc", AttackId::kUafRealloc},
    {"adjacent-overflow", AttackId::kAdjacentOverflow},
    {"non-adjacent-overflow", AttackId::kNonAdjacentOverflow},
    {"stack-neighbor-overflow", AttackId::kStackNeighborOverflow},
    {"match-all-escalation", AttackId::kMatchAllEscalation},
    {"slack-granule-access", AttackId::kSlackGranuleAccess},
    {"double-free", AttackId::kDoubleFree},
}};

inline std::optional<AttackId> parse_attack(std::string_view name) {
  for (const auto& [n, id] : kAttackNames)
    if (n == name) return id;
  return std::nullopt;
}

inline std::string to_string(AttackId id) {
  for (const auto& [n, a] : kAttackNames)
    if (a == id) return std::string(n);
  return "unknown";
}

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Rational of(std::int64_t n, std::int64_t d) {
    const std::int64_t g = std::gcd(n, d);
    return {n / g, d / g};
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den); }
  friend bool operator==(const Rational&, const Rational&) = default;
};

struct AttackScenario {
  AttackId id = AttackId::kUafZeroTag;
  PolicyId policy;
  std::uint64_t trials = 1;
  bool match_all_enabled = true;  // only consulted by the SLUB kernel model
};

struct AttackOutcome {
  std::uint64_t successes = 0;
  std::uint64_t trials = 0;
  double success_rate = 0;
  std::optional<Rational> exact_expected;
};

inline bool applicable(AttackId id, PolicyId p) {
  const bool stack = is_stack_policy(p);
  switch (id) {
    case AttackId::kStackNeighborOverflow:
      return stack;
    case AttackId::kMetadataOverwrite:
      return p.kind == PolicyKind::kGlibcBaseline || p.kind == PolicyKind::kGlibcImproved ||
             p.kind == PolicyKind::kScudoPrimary;
    case AttackId::kMatchAllEscalation:
    case AttackId::kSlackGranuleAccess:
      return p.kind == PolicyKind::kLinuxSlub;
    default:
      return !stack;
  }
}

/// Closed-form success probability, when one exists.
inline std::optional<Rational> expected_rate(const AttackScenario& s) {
  if (!applicable(s.id, s.policy)) return std::nullopt;
  const auto r = [](std::int64_t n, std::int64_t d) { return Rational::of(n, d); };
  const PolicyKind k = s.policy.kind;
  const bool odd_even = k == PolicyKind::kScudoPrimary && s.policy.odd_even;
  const bool chrome_secret = k == PolicyKind::kChromeRandomOddDelta || k == PolicyKind::kChromeDeltaTable;
  switch (s.id) {
    case AttackId::kMetadataOverwrite:
      return k == PolicyKind::kGlibcImproved ? r(1, 16) : r(1, 1);
    case AttackId::kUafZeroTag:
      switch (k) {
        case PolicyKind::kGlibcBaseline: return r(1, 1);
        case PolicyKind::kLinuxSlub:
        case PolicyKind::kScudoPrimary: return r(0, 1);
        default: return r(1, 16);  // improved glibc and every chrome variant
      }
    case AttackId::kUafIncrement:
      switch (k) {
        case PolicyKind::kGlibcBaseline:
        case PolicyKind::kGlibcImproved: return r(1, 15);
        case PolicyKind::kLinuxSlub: return r(1, 14);
        case PolicyKind::kScudoPrimary: return odd_even ? r(0, 1) : r(14, 225);
        case PolicyKind::kChromeBaseline: return r(1, 1);
        default: return r(1, 8);
      }
    case AttackId::kUafRealloc:
      switch (k) {
        case PolicyKind::kGlibcBaseline: return r(1, 15);
        case PolicyKind::kGlibcImproved: return r(1, 16);
        case PolicyKind::kLinuxSlub: return r(1, 14);
        case PolicyKind::kScudoPrimary: return odd_even ? r(1, 8) : r(1, 15);
        default: return r(0, 1);
      }
    case AttackId::kAdjacentOverflow:
    case AttackId::kNonAdjacentOverflow:
      switch (k) {
        case PolicyKind::kGlibcBaseline: return r(1, 15);
        case PolicyKind::kLinuxSlub: return r(1, 14);
        case PolicyKind::kScudoPrimary: return odd_even ? r(1, 8) : r(1, 15);
        default: return r(1, 16);
      }
    case AttackId::kStackNeighborOverflow:
      return k == PolicyKind::kLlvmStackBaseline ? r(1, 1) : r(1, 8);
    case AttackId::kMatchAllEscalation:
      return s.match_all_enabled ? r(1, 1) : r(0, 1);
    case AttackId::kSlackGranuleAccess:
      return r(1, 1);
    case AttackId::kDoubleFree:
      return (k == PolicyKind::kScudoPrimary || chrome_secret || k == PolicyKind::kChromeBaseline)
                 ? r(1, 1)
                 : r(0, 1);
  }
  return std::nullopt;
}

namespace detail {

inline constexpr std::uint64_t kTagStep = 0x0100000000000000;

// The gadget loop: walk the pointer's top byte until its tag reads `target`.
inline TaggedAddress walk_tag_until(TaggedAddress p, Tag target, bool upward) {
  std::uint64_t word = encode_pointer(p, TagWidth::k4);
  for (int i = 0; i < 16 && decode_pointer(word, TagWidth::k4).tag != target; ++i)
    word = upward ? word + kTagStep : word - kTagStep;
  return decode_pointer(word, TagWidth::k4);
}

template <typename T>
T pick(const std::vector<T>& v, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

inline bool run_trial(const AttackScenario& s, Rng& rng) {
  const bool kernel = s.policy.kind == PolicyKind::kLinuxSlub;
  TaggedMemory mem(TagWidth::k4,
                   CheckConfig{CheckMode::kSync, kernel && s.match_all_enabled, kernel, {}});
  TaggedHeap heap(s.policy, mem, rng());
  const auto ok = [&](TaggedAddress p, std::uint64_t len = 8) {
    return mem.checked_access(p, len, AccessKind::kStore) == AccessResult::kOk;
  };

  switch (s.id) {
    case AttackId::kMetadataOverwrite: {
      const auto p = heap.malloc(48);
      const auto crafted = walk_tag_until(p, 0, false);
      return ok({p.address - kGranuleBytes, crafted.tag});
    }
    case AttackId::kUafZeroTag: {
      const auto p = heap.malloc(64);
      heap.free(p);
      return ok(walk_tag_until(p, 0, false));
    }
    case AttackId::kUafIncrement: {
      const auto p = heap.malloc(64);
      heap.free(p);
      return ok(decode_pointer(encode_pointer(p, TagWidth::k4) + kTagStep, TagWidth::k4));
    }
    case AttackId::kUafRealloc: {
      heap.malloc(48);
      const auto dangling = heap.malloc(48);  // second chunk: odd index in slab layouts
      heap.free(dangling);
      heap.malloc_at(dangling.address, 48);
      return ok(dangling);
    }
    case AttackId::kAdjacentOverflow:
    case AttackId::kNonAdjacentOverflow: {
      const auto attacker = heap.malloc(48);
      TaggedAddress victim = heap.malloc(48);
      if (s.id == AttackId::kNonAdjacentOverflow) {
        heap.malloc(48);
        victim = heap.malloc(48);
      }
      (void)attacker;
      const Tag guess = pick(heap.policy().allocation_tags(victim.address, 48), rng);
      return ok({victim.address, guess});
    }
    case AttackId::kStackNeighborOverflow: {
      const std::array<std::uint64_t, 2> sizes{48, 32};
      const auto vars = heap.stack_frame(sizes);
      TaggedAddress p = subg(vars[1], TagWidth::k4, 0, 1);
      const auto& llvm = static_cast<const LlvmStackPolicy&>(heap.policy());
      if (llvm.skips_zero() && p.tag == 0) p.tag = 15;
      return ok({vars[0].address + 8, p.tag});
    }
    case AttackId::kMatchAllEscalation: {
      const auto p = heap.malloc(640);
      const auto victim = heap.malloc(64);
      const auto crafted = walk_tag_until(p, kMatchAllTag, true);
      return ok({victim.address, crafted.tag});
    }
    case AttackId::kSlackGranuleAccess: {
      const auto p = heap.malloc(36);
      const auto crafted = walk_tag_until(p, kSlubNoAccessTag, true);
      return ok({p.address + 3 * kGranuleBytes, crafted.tag}, 4);
    }
    case AttackId::kDoubleFree: {
      const auto p = heap.malloc(64);
      heap.free(p);
      return heap.free(p).status == FreeStatus::kDoubleFreeAccepted;
    }
  }
  return false;
}

}  // namespace detail

/// Per-trial generator: trial i always sees the same stream for a given seed.
inline Rng trial_rng(std::uint64_t seed, std::uint64_t trial) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial), static_cast<std::uint32_t>(trial >> 32)};
  return Rng(seq);
}

inline AttackOutcome run_attack(const AttackScenario& s, std::uint64_t seed) {
  if (s.trials < 1) throw std::invalid_argument("trials must be at least 1");
  if (!applicable(s.id, s.policy))
    throw std::invalid_argument("scenario " + to_string(s.id) + " does not apply to policy " +
                                to_string(s.policy));
  AttackOutcome out;
  out.trials = s.trials;
  for (std::uint64_t t = 0; t < s.trials; ++t) {
    Rng rng = trial_rng(seed, t);
    if (detail::run_trial(s, rng)) ++out.successes;
  }
  out.success_rate = static_cast<double>(out.successes) / static_cast<double>(out.trials);
  out.exact_expected = expected_rate(s);
  return out;
}

inline void write_attack_csv_header(std::ostream& os) {
  os << "scenario,policy,trials,successes,rate,expected\n";
}

inline void write_attack_csv_row(std::ostream& os, const AttackScenario& s, const AttackOutcome& o) {
  char rate[32];
  std::snprintf(rate, sizeof rate, "%.6f", o.success_rate);
  os << to_string(s.id) << ',' << to_string(s.policy) << ',' << o.trials << ',' << o.successes
     << ',' << rate << ',' << (o.exact_expected ? o.exact_expected->str() : "") << '\n';
}

}  // namespace mtetag
