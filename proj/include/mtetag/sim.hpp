#pragma once

// Trace-driven simulation: replay a normalised heap trace through a tagging
// policy once per tag width and measure how the per-page stores behave.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtetag/memory.hpp"
#include "mtetag/policy.hpp"
#include "mtetag/trace.hpp"

namespace mtetag {

struct SimConfig {
  PolicyId policy;
  std::vector<TagWidth> widths{kAllWidths.begin(), kAllWidths.end()};
  CheckMode check_mode = CheckMode::kSync;
  std::uint64_t seed = 0;
  bool metadata_granule = true;
  bool oracle = false;      // compare dirty pages with a flat shadow after every event
  bool timestamps = false;  // record wall time per width
};

struct WidthReport {
  TagWidth width = TagWidth::k4;
  std::uint64_t pages_total = 0;
  std::uint64_t pages_btree = 0;
  double fraction_btree = 1.0;
  double max_space_bytes = 0;  // peak of the summed per-page footprint
  double space_ratio = 0;      // peak footprint / (128 * pages_total)
  double avg_max_runs = 0;     // mean over pages of each page's peak run count
  unsigned max_runs = 0;
  double depth_avg = 0;        // over pages still in tree mode at the end
  unsigned depth_max = 0;      // peak over the whole replay
  std::uint64_t stg_ops = 0;
  std::uint64_t ldg_ops = 0;
  std::uint64_t switch_events = 0;
  std::uint64_t oracle_mismatches = 0;
  std::uint64_t free_rejections = 0;
  std::optional<double> wall_ms;
};

struct SimReport {
  std::string workload;
  PolicyId policy;
  std::uint64_t seed = 0;
  std::uint64_t events = 0;
  std::vector<TraceWarning> warnings;
  std::vector<WidthReport> widths;
};

namespace detail {

// Widens every allocation to the granules it touches. Two allocations that
// share a granule cannot both be tagged, so the older one is freed first.
inline NormalizedTrace align_to_granules(NormalizedTrace in) {
  NormalizedTrace out;
  out.warnings = std::move(in.warnings);
  std::map<std::uint64_t, std::uint64_t> live;         // aligned start -> aligned end
  std::map<std::uint64_t, std::uint64_t> aligned_of;   // recorded address -> aligned start
  std::uint64_t seq = 0;
  for (const TraceEvent& e : in.events) {
    if (e.kind == EventKind::kFree) {
      const auto it = aligned_of.find(e.old_addr);
      if (it == aligned_of.end()) continue;  // already evicted and reported
      live.erase(it->second);
      out.events.push_back({EventKind::kFree, 0, it->second, 0, seq++});
      aligned_of.erase(it);
      continue;
    }
    const std::uint64_t start = e.new_addr / kGranuleBytes * kGranuleBytes;
    const std::uint64_t end = round_up_granules(e.new_addr + std::max<std::uint64_t>(e.size, 1)) * kGranuleBytes;
    auto it = live.upper_bound(start);
    if (it != live.begin()) --it;
    while (it != live.end() && it->first < end) {
      if (it->second <= start) {
        ++it;
        continue;
      }
      out.warnings.push_back({e.seq, "allocation at " + hex(e.new_addr) + " shares a granule with " +
                                         hex(it->first) + "; treating that one as freed"});
      out.events.push_back({EventKind::kFree, 0, it->first, 0, seq++});
      std::erase_if(aligned_of, [&](const auto& kv) { return kv.second == it->first; });
      it = live.erase(it);
    }
    live[start] = end;
    aligned_of[e.new_addr] = start;
    const std::uint64_t size = start == e.new_addr ? std::max<std::uint64_t>(e.size, 1) : end - start;
    out.events.push_back({EventKind::kMalloc, size, 0, start, seq++});
  }
  return out;
}

inline WidthReport simulate_width(const std::vector<TraceEvent>& events, const SimConfig& cfg,
                                  TagWidth w) {
  const auto t0 = std::chrono::steady_clock::now();
  TaggedMemory mem(w, CheckConfig{cfg.check_mode, false, false, {}});
  if (cfg.oracle) mem.enable_oracle();
  HeapOptions opts;
  opts.metadata_granule = cfg.metadata_granule;
  TaggedHeap heap(cfg.policy, mem, cfg.seed, opts);

  WidthReport r;
  r.width = w;
  std::map<std::uint64_t, unsigned> peak_runs;
  ByteSize peak_space{};

  for (const TraceEvent& e : events) {
    if (e.kind == EventKind::kMalloc) {
      heap.malloc_at(e.new_addr, e.size);
    } else if (e.kind == EventKind::kFree) {
      const AllocationRecord* rec = heap.find_live(e.old_addr);
      const Tag tag = rec ? rec->tag : 0;
      if (heap.free({e.old_addr, tag}).status != FreeStatus::kFreed) ++r.free_rejections;
    } else {
      throw std::invalid_argument("simulate expects a normalised trace");
    }
    peak_space = std::max(peak_space, mem.total_space());
    for (std::uint64_t p : mem.take_dirty_pages()) {
      const auto page = mem.page(p);
      auto& peak = peak_runs[p];
      peak = std::max(peak, page.run_count());
      if (auto d = page.depth()) r.depth_max = std::max(r.depth_max, *d);
      if (cfg.oracle) r.oracle_mismatches += mem.oracle_mismatches(p);
    }
  }

  r.pages_total = mem.page_count();
  std::uint64_t depth_sum = 0;
  for (const auto& [p, idx] : mem.page_table()) {
    (void)idx;
    const auto page = mem.page(p);
    if (page.is_btree()) {
      ++r.pages_btree;
      depth_sum += *page.depth();
    }
  }
  r.fraction_btree =
      r.pages_total == 0 ? 1.0 : static_cast<double>(r.pages_btree) / static_cast<double>(r.pages_total);
  r.max_space_bytes = peak_space.bytes();
  r.space_ratio = r.pages_total == 0 ? 0.0
                                     : r.max_space_bytes / (static_cast<double>(kPageBufferBytes) *
                                                            static_cast<double>(r.pages_total));
  std::uint64_t run_sum = 0;
  for (const auto& [p, n] : peak_runs) {
    run_sum += n;
    r.max_runs = std::max(r.max_runs, n);
  }
  r.avg_max_runs = peak_runs.empty() ? 0.0 : static_cast<double>(run_sum) / peak_runs.size();
  r.depth_avg = r.pages_btree == 0 ? 0.0 : static_cast<double>(depth_sum) / r.pages_btree;
  r.stg_ops = mem.stg_ops();
  r.ldg_ops = mem.ldg_ops();
  r.switch_events = mem.switch_events();
  if (cfg.timestamps)
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace detail

/// Replays a trace (raw or normalised) once per configured width.
inline SimReport simulate(const std::vector<TraceEvent>& trace, const SimConfig& cfg,
                          std::string workload = "trace") {
  if (cfg.widths.empty()) throw std::invalid_argument("at least one tag width is required");
  if (is_stack_policy(cfg.policy))
    throw std::invalid_argument("stack tagging policies cannot replay heap traces");
  const NormalizedTrace norm = detail::align_to_granules(normalize(trace));
  SimReport rep;
  rep.workload = std::move(workload);
  rep.policy = cfg.policy;
  rep.seed = cfg.seed;
  rep.events = norm.events.size();
  rep.warnings = norm.warnings;
  for (TagWidth w : cfg.widths) rep.widths.push_back(detail::simulate_width(norm.events, cfg, w));
  return rep;
}

/// fraction_btree never increases as the width grows.
inline bool fraction_monotone(const SimReport& r) {
  std::vector<WidthReport> ws = r.widths;
  std::sort(ws.begin(), ws.end(), [](const auto& a, const auto& b) { return bits(a.width) < bits(b.width); });
  for (std::size_t i = 1; i < ws.size(); ++i)
    if (ws[i].fraction_btree > ws[i - 1].fraction_btree) return false;
  return true;
}

namespace detail {
inline std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}
}  // namespace detail

inline void write_report_csv(std::ostream& os, const std::vector<SimReport>& reports,
                             bool header = true) {
  const bool timed = std::any_of(reports.begin(), reports.end(), [](const SimReport& r) {
    return std::any_of(r.widths.begin(), r.widths.end(), [](const auto& w) { return w.wall_ms.has_value(); });
  });
  if (header) {
    os << "workload,policy,width,events,pages_total,pages_btree,fraction_btree,max_space_bytes,"
          "space_ratio,avg_max_runs,max_runs,depth_avg,depth_max,stg_ops,ldg_ops,switch_events,"
          "oracle_mismatches,free_rejections,warnings";
    if (timed) os << ",wall_ms";
    os << '\n';
  }
  for (const SimReport& r : reports) {
    for (const WidthReport& w : r.widths) {
      os << r.workload << ',' << to_string(r.policy) << ',' << bits(w.width) << ',' << r.events << ','
         << w.pages_total << ',' << w.pages_btree << ',' << detail::fixed(w.fraction_btree) << ','
         << detail::fixed(w.max_space_bytes, 3) << ',' << detail::fixed(w.space_ratio) << ','
         << detail::fixed(w.avg_max_runs, 3) << ',' << w.max_runs << ','
         << detail::fixed(w.depth_avg, 3) << ',' << w.depth_max << ',' << w.stg_ops << ','
         << w.ldg_ops << ',' << w.switch_events << ',' << w.oracle_mismatches << ','
         << w.free_rejections << ',' << r.warnings.size();
      if (timed) os << ',' << (w.wall_ms ? detail::fixed(*w.wall_ms, 3) : "");
      os << '\n';
    }
  }
}

inline nlohmann::ordered_json report_json(const SimReport& r) {
  nlohmann::ordered_json j;
  j["workload"] = r.workload;
  j["policy"] = to_string(r.policy);
  j["seed"] = r.seed;
  j["events"] = r.events;
  auto& warnings = j["warnings"] = nlohmann::ordered_json::array();
  for (const auto& w : r.warnings) warnings.push_back({{"seq", w.seq}, {"message", w.message}});
  auto& widths = j["widths"] = nlohmann::ordered_json::array();
  for (const WidthReport& w : r.widths) {
    nlohmann::ordered_json x;
    x["width"] = bits(w.width);
    x["pages_total"] = w.pages_total;
    x["pages_btree"] = w.pages_btree;
    x["fraction_btree"] = w.fraction_btree;
    x["max_space_bytes"] = w.max_space_bytes;
    x["space_ratio"] = w.space_ratio;
    x["avg_max_runs"] = w.avg_max_runs;
    x["max_runs"] = w.max_runs;
    x["depth_avg"] = w.depth_avg;
    x["depth_max"] = w.depth_max;
    x["stg_ops"] = w.stg_ops;
    x["ldg_ops"] = w.ldg_ops;
    x["switch_events"] = w.switch_events;
    x["oracle_mismatches"] = w.oracle_mismatches;
    x["free_rejections"] = w.free_rejections;
    if (w.wall_ms) x["wall_ms"] = *w.wall_ms;
    widths.push_back(std::move(x));
  }
  return j;
}

inline void write_report_json(std::ostream& os, const std::vector<SimReport>& reports) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) arr.push_back(report_json(r));
  os << arr.dump(2) << '\n';
}

struct SummaryRow {
  std::string workload;
  std::string policy;
  unsigned width = 4;
  double fraction_btree = 1.0;
  double space_ratio = 0;
  double avg_max_runs = 0;
  bool fraction_monotone = true;
};

/// One row per (workload, width), for plotting retention and space.
inline std::vector<SummaryRow> summarize(const std::vector<SimReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("summarize needs at least one report");
  std::vector<SummaryRow> rows;
  for (const SimReport& r : reports) {
    const bool mono = fraction_monotone(r);
    for (const WidthReport& w : r.widths)
      rows.push_back({r.workload, to_string(r.policy), bits(w.width), w.fraction_btree, w.space_ratio,
                      w.avg_max_runs, mono});
  }
  return rows;
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "workload,policy,width,fraction_btree,space_ratio,avg_max_runs,fraction_monotone\n";
  for (const auto& s : rows)
    os << s.workload << ',' << s.policy << ',' << s.width << ',' << detail::fixed(s.fraction_btree)
       << ',' << detail::fixed(s.space_ratio) << ',' << detail::fixed(s.avg_max_runs, 3) << ','
       << (s.fraction_monotone ? "true" : "false") << '\n';
}

inline void write_summary_json(std::ostream& os, const std::vector<SummaryRow>& rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& s : rows)
    arr.push_back({{"workload", s.workload},
                   {"policy", s.policy},
                   {"width", s.width},
                   {"fraction_btree", s.fraction_btree},
                   {"space_ratio", s.space_ratio},
                   {"avg_max_runs", s.avg_max_runs},
                   {"fraction_monotone", s.fraction_monotone}});
  os << arr.dump(2) << '\n';
}

}  // namespace mtetag
