#pragma once

// Committed regression fixtures: five canonical page images, a parsed trace
// snippet, seed-pinned attack outcomes and PAC test vectors. verify() rebuilds
// each one in memory and compares it byte for byte with the files on disk.

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtetag/attack.hpp"
#include "mtetag/pac_mte.hpp"
#include "mtetag/page_store.hpp"
#include "mtetag/trace.hpp"

namespace mtetag::golden {

namespace fs = std::filesystem;

struct PageRecipe {
  std::string name;
  std::string description;
  std::function<PageTagStore()> build;
};

inline std::vector<PageRecipe> page_recipes() {
  return {
      {"empty_4bit", "fresh page, one zero run", [] { return PageTagStore(TagWidth::k4); }},
      {"three_allocs_4bit", "three 48-byte blocks with zero headers at the page end",
       [] {
         PageTagStore p(TagWidth::k4);
         for (Granule i = 0; i < 3; ++i) p.stg_range(245 + 4 * i, 3, static_cast<Tag>(3 + 4 * i));
         return p;
       }},
      {"two_level_16bit", "twenty alternating runs, root plus leaves",
       [] {
         PageTagStore p(TagWidth::k16);
         for (Granule i = 0; i < 10; ++i) p.stg_range(8 * i + 1, 4, static_cast<Tag>(0x1111 * (i + 1)));
         return p;
       }},
      {"full_4bit", "twenty-nine runs, the most a 4-bit tree holds",
       [] {
         PageTagStore p(TagWidth::k4);
         for (Granule i = 0; i < 14; ++i) p.stg_range(2 * i + 1, 1, static_cast<Tag>(1 + i));
         return p;
       }},
      {"switched_32bit", "32-bit page pushed past its run limit into the flat array",
       [] {
         PageTagStore p(TagWidth::k32);
         for (Granule i = 0; i < 20; ++i) p.stg_range(2 * i, 1, 0xA0000000u + i);
         return p;
       }},
  };
}

inline constexpr std::string_view kTraceSnippet =
    "==77== Using Valgrind-3.18.1 and LibVEX; rerun with -h for copyright info\n"
    "--77-- malloc(48) = 0x5204040\n"
    "--77-- calloc(3,16) = 0x52040A0\n"
    "--77-- realloc(0x5204040,200) = 0x5204100\n"
    "--77-- realloc(0x0,8)malloc(8) = 0x5204200\n"
    "--77-- _Znam(64) = 0x5204260\n"
    "--77-- free(0x0)\n"
    "--77-- _ZdaPv(0x5204260)\n"
    "--77-- free(0x5204100)\n"
    "--77-- Reading syms from /usr/lib/libc.so.6\n";

struct AttackCase {
  AttackId id;
  PolicyId policy;
};

inline std::vector<AttackCase> attack_cases() {
  using K = PolicyKind;
  return {{AttackId::kMetadataOverwrite, {K::kGlibcBaseline}},
          {AttackId::kUafIncrement, {K::kChromeBaseline}},
          {AttackId::kUafIncrement, {K::kChromeRandomOddDelta}},
          {AttackId::kUafRealloc, {K::kGlibcBaseline}},
          {AttackId::kAdjacentOverflow, {K::kScudoPrimary, true}},
          {AttackId::kUafZeroTag, {K::kGlibcImproved}},
          {AttackId::kMatchAllEscalation, {K::kLinuxSlub}},
          {AttackId::kStackNeighborOverflow, {K::kLlvmStackRandomOddDelta}},
          {AttackId::kDoubleFree, {K::kScudoPrimary}}};
}

inline constexpr std::uint64_t kAttackSeed = 20240601;
inline constexpr std::uint64_t kAttackTrials = 2000;

namespace detail {

inline std::string page_bytes(const PageTagStore& p) {
  const auto img = p.image();
  return std::string(reinterpret_cast<const char*>(img.data()), img.size());
}

inline std::string attack_csv() {
  std::ostringstream os;
  write_attack_csv_header(os);
  for (const auto& c : attack_cases()) {
    const AttackScenario s{c.id, c.policy, kAttackTrials};
    write_attack_csv_row(os, s, run_attack(s, kAttackSeed));
  }
  return os.str();
}

inline std::string pac_vectors() {
  PacKey key;
  std::iota(key.bytes.begin(), key.bytes.end(), std::uint8_t{0});
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  const std::array<PacContext, 5> ctxs{{{0x0000, 0x0, std::nullopt},
                                        {0x1234, 0x7f0000001000, std::nullopt},
                                        {0xffff, 0xfffffffffff0, std::nullopt},
                                        {0x1234, 0x7f0000001010, std::nullopt},
                                        {0x1234, 0x7f0000001000, 42u}}};
  for (const auto& c : ctxs) {
    nlohmann::ordered_json j{{"t_m", c.t_m}, {"a", mtetag::detail::hex(c.a)}};
    if (c.type_id) j["type_id"] = *c.type_id;
    j["t_p"] = compute_tp(key, c);
    arr.push_back(j);
  }
  return nlohmann::ordered_json{{"key", "000102030405060708090a0b0c0d0e0f"}, {"vectors", arr}}.dump(2) +
         "\n";
}

}  // namespace detail

/// Every fixture as (relative path, exact contents).
inline std::vector<std::pair<std::string, std::string>> expected_fixtures() {
  std::vector<std::pair<std::string, std::string>> out;
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  for (const auto& r : page_recipes()) {
    const PageTagStore p = r.build();
    out.emplace_back("pages/" + r.name + ".bin", detail::page_bytes(p));
    manifest.push_back({{"name", r.name},
                        {"description", r.description},
                        {"width", bits(p.width())},
                        {"mode", p.is_btree() ? "btree" : "flat"},
                        {"runs", p.run_count()},
                        {"space_eighths", p.space_used().eighths()}});
  }
  out.emplace_back("pages/manifest.json", manifest.dump(2) + "\n");
  out.emplace_back("trace/snippet.log", std::string(kTraceSnippet));
  out.emplace_back("trace/snippet.canon", to_canonical(parse_valgrind(kTraceSnippet).events));
  out.emplace_back("attacks.csv", detail::attack_csv());
  out.emplace_back("pac_vectors.json", detail::pac_vectors());
  return out;
}

struct VerifyResult {
  std::vector<std::string> passed;
  std::vector<std::string> failures;  // "<path>: <reason>"
  bool ok() const { return failures.empty(); }
};

inline std::string first_difference(const std::string& want, const std::string& got) {
  const std::size_t n = std::min(want.size(), got.size());
  std::size_t i = 0;
  while (i < n && want[i] == got[i]) ++i;
  std::ostringstream os;
  if (i == n && want.size() != got.size()) {
    os << "size " << got.size() << ", expected " << want.size();
  } else {
    os << "byte " << i << " is 0x" << std::hex << (static_cast<unsigned>(got[i]) & 0xFF)
       << ", expected 0x" << (static_cast<unsigned>(want[i]) & 0xFF);
  }
  return os.str();
}

inline VerifyResult verify(const fs::path& dir) {
  VerifyResult r;
  for (const auto& [rel, want] : expected_fixtures()) {
    std::ifstream in(dir / rel, std::ios::binary);
    if (!in) {
      r.failures.push_back(rel + ": missing");
      continue;
    }
    const std::string got((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (got == want) {
      r.passed.push_back(rel);
    } else {
      r.failures.push_back(rel + ": " + first_difference(want, got));
    }
  }
  return r;
}

inline void regenerate(const fs::path& dir) {
  for (const auto& [rel, contents] : expected_fixtures()) {
    fs::create_directories((dir / rel).parent_path());
    std::ofstream out(dir / rel, std::ios::binary | std::ios::trunc);
    out << contents;
    if (!out) throw std::runtime_error("cannot write " + (dir / rel).string());
  }
}

}  // namespace mtetag::golden
