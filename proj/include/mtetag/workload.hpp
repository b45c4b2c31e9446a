#pragma once

// Synthetic heap workloads. Sizes come from a chosen distribution; addresses
// from a bump allocator that puts a 16-byte header in front of every block
// and optionally reuses freed blocks of the same rounded size, newest first.
//
// The named presets approximate the allocation count and mean size of five
// recorded programs. They are shaped stand-ins, not the original traces.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "mtetag/memory.hpp"
#include "mtetag/trace.hpp"

namespace mtetag {

struct PointSize {
  std::uint64_t bytes = 16;
};
struct UniformSize {
  std::uint64_t lo = 1, hi = 64;
};
struct LogNormalSize {
  double mean = 256;   // arithmetic mean in bytes
  double sigma = 1.0;  // shape of the underlying normal
};
/// Piecewise-constant CDF: (size, cumulative probability) with the last
/// probability equal to 1.
struct CdfSize {
  std::vector<std::pair<std::uint64_t, double>> points;
};

using SizeDistribution = std::variant<PointSize, UniformSize, LogNormalSize, CdfSize>;

struct WorkloadSpec {
  SizeDistribution sizes = PointSize{};
  std::uint64_t events = 1;          // total malloc + free events
  std::uint64_t live_target = 0;     // live allocations before frees are forced; 0 = unbounded
  double frees_per_alloc = 1.0;      // long-run free:alloc ratio in [0, 1]
  bool reuse = true;                 // LIFO reuse of same-size freed blocks
  std::uint64_t base_address = 0x10000000;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::uint64_t draw_size(const SizeDistribution& d, Rng& rng) {
  return std::visit(
      [&](const auto& s) -> std::uint64_t {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, PointSize>) {
          return s.bytes;
        } else if constexpr (std::is_same_v<T, UniformSize>) {
          return std::uniform_int_distribution<std::uint64_t>(s.lo, s.hi)(rng);
        } else if constexpr (std::is_same_v<T, LogNormalSize>) {
          const double mu = std::log(s.mean) - s.sigma * s.sigma / 2;
          const double v = std::lognormal_distribution<double>(mu, s.sigma)(rng);
          return static_cast<std::uint64_t>(std::max(1.0, std::round(v)));
        } else {
          const double u = std::uniform_real_distribution<double>(0, 1)(rng);
          for (const auto& [size, p] : s.points)
            if (u < p) return size;
          return s.points.back().first;
        }
      },
      d);
}

inline void validate(const WorkloadSpec& spec) {
  if (spec.events < 1) throw std::invalid_argument("workload needs at least one event");
  if (spec.frees_per_alloc < 0 || spec.frees_per_alloc > 1)
    throw std::invalid_argument("frees_per_alloc must lie in [0, 1]");
  if (spec.base_address % kGranuleBytes != 0)
    throw std::invalid_argument("base address must be granule aligned");
  if (const auto* p = std::get_if<PointSize>(&spec.sizes); p && p->bytes < 1)
    throw std::invalid_argument("sizes must be at least one byte");
  if (const auto* u = std::get_if<UniformSize>(&spec.sizes); u && (u->lo < 1 || u->hi < u->lo))
    throw std::invalid_argument("bad uniform size range");
  if (const auto* l = std::get_if<LogNormalSize>(&spec.sizes); l && (l->mean < 1 || l->sigma < 0))
    throw std::invalid_argument("bad log-normal parameters");
  if (const auto* c = std::get_if<CdfSize>(&spec.sizes)) {
    if (c->points.empty() || std::abs(c->points.back().second - 1.0) > 1e-9)
      throw std::invalid_argument("CDF must end at probability 1");
    for (const auto& [size, p] : c->points)
      if (size < 1) throw std::invalid_argument("sizes must be at least one byte");
  }
}

}  // namespace detail

inline std::vector<TraceEvent> gen_workload(const WorkloadSpec& spec) {
  detail::validate(spec);
  Rng rng(spec.seed);
  std::vector<TraceEvent> out;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> live;  // (addr, rounded size)
  std::map<std::uint64_t, std::vector<std::uint64_t>> free_blocks;
  std::uint64_t bump = spec.base_address;
  const double p_alloc = 1.0 / (1.0 + spec.frees_per_alloc);

  while (out.size() < spec.events) {
    const bool must_free = spec.live_target != 0 && live.size() >= spec.live_target;
    const bool do_free =
        !live.empty() && (must_free || std::bernoulli_distribution(1.0 - p_alloc)(rng));
    if (do_free && spec.frees_per_alloc > 0) {
      std::uniform_int_distribution<std::size_t> pick(0, live.size() - 1);
      const std::size_t i = pick(rng);
      const auto [addr, rounded] = live[i];
      live[i] = live.back();
      live.pop_back();
      if (spec.reuse) free_blocks[rounded].push_back(addr);
      out.push_back({EventKind::kFree, 0, addr, 0, out.size()});
      continue;
    }
    const std::uint64_t size = detail::draw_size(spec.sizes, rng);
    const std::uint64_t rounded = (size + kGranuleBytes - 1) / kGranuleBytes * kGranuleBytes;
    std::uint64_t addr;
    if (auto it = free_blocks.find(rounded); it != free_blocks.end() && !it->second.empty()) {
      addr = it->second.back();
      it->second.pop_back();
    } else {
      addr = bump + kGranuleBytes;
      bump = addr + rounded;
    }
    live.emplace_back(addr, rounded);
    out.push_back({EventKind::kMalloc, size, 0, addr, out.size()});
  }
  return out;
}

struct WorkloadPreset {
  std::string_view name;
  std::string_view description;
  WorkloadSpec spec;
};

/// Named presets. The five program-named ones are approximations of
/// allocation count and mean size only.
inline std::vector<WorkloadPreset> workload_presets() {
  const auto lognormal = [](std::uint64_t allocs, double mean, double sigma, std::uint64_t live) {
    WorkloadSpec s;
    s.sizes = LogNormalSize{mean, sigma};
    s.events = 2 * allocs;
    s.frees_per_alloc = 1.0;
    s.live_target = live;
    return s;
  };
  WorkloadSpec three48;
  three48.sizes = PointSize{48};
  three48.events = 3;
  three48.frees_per_alloc = 0;
  // Three 64-byte blocks (header + 48 bytes) ending exactly at a page end.
  three48.base_address = 0x10000000 + kPageBytes - 3 * 64;

  WorkloadSpec small40;
  small40.sizes = PointSize{16};
  small40.events = 40;
  small40.frees_per_alloc = 0;

  return {
      {"three48", "three 48-byte allocations at the end of one page", three48},
      {"small40", "forty 16-byte allocations with headers", small40},
      {"md5sum", "approximation: 231 allocations, mean 265 bytes", lognormal(231, 265.3, 0.6, 64)},
      {"apache2", "approximation: 771 allocations, mean 1035 bytes", lognormal(771, 1035.0, 1.2, 200)},
      {"ffmpeg", "approximation: 4734 allocations, mean 5597 bytes", lognormal(4734, 5597.0, 1.5, 600)},
      {"axel", "approximation: 231 allocations, mean 144746 bytes", lognormal(231, 144745.7, 0.8, 40)},
      {"pbzip2", "approximation: 34 allocations, mean 818860 bytes", lognormal(34, 818859.7, 0.5, 12)},
  };
}

inline std::optional<WorkloadSpec> find_preset(std::string_view name) {
  for (const auto& p : workload_presets())
    if (p.name == name) return p.spec;
  return std::nullopt;
}

}  // namespace mtetag
