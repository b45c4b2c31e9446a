#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <sstream>

#include "mtetag/attack.hpp"

namespace mtetag {
namespace {

AttackScenario scenario(AttackId id, std::string_view policy, std::uint64_t trials) {
  return {id, *parse_policy(policy), trials};
}

void expect_within_4_sigma(const AttackScenario& s, std::uint64_t seed = 42) {
  const auto out = run_attack(s, seed);
  ASSERT_TRUE(out.exact_expected) << to_string(s.id) << " " << to_string(s.policy);
  const double p = out.exact_expected->value();
  if (p == 0.0 || p == 1.0) {
    EXPECT_EQ(out.success_rate, p) << to_string(s.id) << " " << to_string(s.policy);
    return;
  }
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(out.trials));
  EXPECT_NEAR(out.success_rate, p, 4 * sigma)
      << to_string(s.id) << " " << to_string(s.policy) << " expected " << out.exact_expected->str();
}

TEST(AttackTest, NamesRoundTrip) {
  for (const auto& [name, id] : kAttackNames) EXPECT_EQ(parse_attack(to_string(id)), id);
  EXPECT_FALSE(parse_attack("rowhammer"));
}

TEST(AttackTest, DeterministicOutcomesAreExact) {
  const std::pair<AttackId, std::string_view> cases[] = {
      {AttackId::kMetadataOverwrite, "glibc"},
      {AttackId::kMetadataOverwrite, "scudo"},
      {AttackId::kUafZeroTag, "glibc"},
      {AttackId::kUafZeroTag, "slub"},
      {AttackId::kUafZeroTag, "scudo-odd-even"},
      {AttackId::kUafIncrement, "chrome"},
      {AttackId::kUafIncrement, "scudo-odd-even"},
      {AttackId::kUafRealloc, "chrome"},
      {AttackId::kUafRealloc, "chrome-odd-delta"},
      {AttackId::kStackNeighborOverflow, "llvm-stack"},
      {AttackId::kMatchAllEscalation, "slub"},
      {AttackId::kSlackGranuleAccess, "slub"},
      {AttackId::kDoubleFree, "glibc"},
      {AttackId::kDoubleFree, "glibc-improved"},
      {AttackId::kDoubleFree, "slub"},
      {AttackId::kDoubleFree, "chrome"},
  };
  for (const auto& [id, policy] : cases) expect_within_4_sigma(scenario(id, policy, 500));
}

TEST(AttackTest, MatchAllDisabledBlocksEscalation) {
  auto s = scenario(AttackId::kMatchAllEscalation, "slub", 300);
  s.match_all_enabled = false;
  const auto out = run_attack(s, 1);
  EXPECT_EQ(out.successes, 0u);
  EXPECT_EQ(*out.exact_expected, Rational::of(0, 1));
}

TEST(AttackTest, ProbabilisticRatesMatchClosedForm) {
  for (PolicyId policy : all_policies()) {
    for (const auto& [name, id] : kAttackNames) {
      if (!applicable(id, policy)) continue;
      expect_within_4_sigma({id, policy, 20000}, 7);
    }
  }
}

TEST(AttackTest, OddDeltaIncrementEnumeratesDeltas) {
  // The attacker's +1 guess wins for exactly one of the eight odd deltas.
  int wins = 0;
  for (Tag delta = 1; delta < 16; delta += 2)
    for (Tag t = 0; t < 16; ++t) wins += ((t + delta) % 16 == (t + 1) % 16);
  EXPECT_EQ(Rational::of(wins, 8 * 16), Rational::of(1, 8));
}

TEST(AttackTest, ScudoOddEvenAdjacentGuess) {
  expect_within_4_sigma(scenario(AttackId::kAdjacentOverflow, "scudo-odd-even", 100000));
  const auto s = scenario(AttackId::kAdjacentOverflow, "scudo-odd-even", 1);
  EXPECT_EQ(*expected_rate(s), Rational::of(1, 8));
}

TEST(AttackTest, GlibcReallocIsOneInFifteen) {
  expect_within_4_sigma(scenario(AttackId::kUafRealloc, "glibc", 100000));
}

TEST(AttackTest, ImprovedGlibcBoundsZeroTagAttack) {
  const auto s = scenario(AttackId::kUafZeroTag, "glibc-improved", 100000);
  EXPECT_LE(expected_rate(s)->value(), 1.0 / 16);
  expect_within_4_sigma(s);
  expect_within_4_sigma(scenario(AttackId::kMetadataOverwrite, "glibc-improved", 100000));
}

TEST(AttackTest, SeedReproducible) {
  const auto s = scenario(AttackId::kUafRealloc, "slub", 3000);
  EXPECT_EQ(run_attack(s, 5).successes, run_attack(s, 5).successes);
  EXPECT_NE(run_attack(s, 5).successes, run_attack(s, 6).successes);
}

TEST(AttackTest, InapplicableAndInvalid) {
  EXPECT_THROW(run_attack(scenario(AttackId::kStackNeighborOverflow, "glibc", 10), 1),
               std::invalid_argument);
  EXPECT_THROW(run_attack(scenario(AttackId::kUafZeroTag, "glibc", 0), 1), std::invalid_argument);
  EXPECT_FALSE(expected_rate(scenario(AttackId::kSlackGranuleAccess, "chrome", 1)));
}

TEST(AttackTest, CsvRow) {
  const auto s = scenario(AttackId::kUafIncrement, "chrome", 4);
  std::ostringstream os;
  write_attack_csv_header(os);
  write_attack_csv_row(os, s, run_attack(s, 1));
  EXPECT_EQ(os.str(),
            "scenario,policy,trials,successes,rate,expected\n"
            "uaf-increment,chrome,4,4,1.000000,1\n");
}

}  // namespace
}  // namespace mtetag
