#pragma once

// Heap event streams: Valgrind --trace-malloc=yes parsing, normalisation to
// plain malloc/free, and a line-oriented canonical text format.
//
// Canonical format, one record per line:
//
//   # comment                       (ignored, as are blank lines)
//   <seq> M <size> <addr>           malloc
//   <seq> C <size> <addr>           calloc, size already multiplied out
//   <seq> R <size> <old> <new>      realloc
//   <seq> F <addr>                  free
//
// <seq> is a decimal event index, strictly increasing. Sizes are decimal,
// addresses are 0x-prefixed hex. Fields are separated by single spaces.

#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mtetag {

enum class EventKind { kMalloc, kCalloc, kRealloc, kFree };

struct TraceEvent {
  EventKind kind = EventKind::kMalloc;
  std::uint64_t size = 0;
  std::uint64_t old_addr = 0;
  std::uint64_t new_addr = 0;
  std::uint64_t seq = 0;
  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

struct TraceWarning {
  std::uint64_t seq = 0;
  std::string message;
  friend bool operator==(const TraceWarning&, const TraceWarning&) = default;
};

struct ParsedTrace {
  std::vector<TraceEvent> events;
  std::uint64_t skipped_lines = 0;   // unrecognised non-banner lines
  std::uint64_t banner_lines = 0;    // "==PID==" tool output
  std::uint64_t null_frees = 0;
  std::uint64_t failed_allocs = 0;   // returned 0x0
};

class TraceParseError : public std::runtime_error {
 public:
  TraceParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::optional<std::uint64_t> parse_uint(std::string_view s, int base) {
  if (base == 16) {
    if (s.size() < 3 || s[0] != '0' || (s[1] != 'x' && s[1] != 'X')) return std::nullopt;
    s.remove_prefix(2);
  }
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

}  // namespace detail

/// Reads Valgrind trace-malloc output. Operator new/delete variants and
/// memalign count as malloc/free.
inline ParsedTrace parse_valgrind(std::istream& in) {
  static const std::regex kLine(R"(^--\d+--\s+(\w+)\((.*)\)(?:\s*=\s*(0x[0-9A-Fa-f]+))?\s*$)");
  static const std::regex kMemalign(R"(^al\s+\d+,\s*size\s+(\d+)$)");
  // realloc(NULL, n) and realloc(p, 0) print the delegated call on the same line.
  static const std::regex kChained(
      R"(^--\d+--\s+realloc\((0x[0-9A-Fa-f]+),(\d+)\)(malloc|free)\([^)]*\)(?:\s*=\s*(0x[0-9A-Fa-f]+))?\s*$)");
  ParsedTrace out;
  std::string line;
  std::uint64_t seq = 0;
  const auto emit = [&](TraceEvent e) {
    e.seq = seq++;
    out.events.push_back(e);
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.starts_with("==")) {
      ++out.banner_lines;
      continue;
    }
    std::smatch m;
    if (std::regex_match(line, m, kChained)) {
      const auto old = detail::parse_uint(m[1].str(), 16);
      const auto sz = detail::parse_uint(m[2].str(), 10);
      std::optional<std::uint64_t> ret;
      if (m[4].matched) ret = detail::parse_uint(m[4].str(), 16);
      if (m[3] == "malloc" && sz && ret) {
        if (*ret == 0) {
          ++out.failed_allocs;
        } else {
          emit({EventKind::kMalloc, *sz, 0, *ret, 0});
        }
      } else if (m[3] == "free" && old) {
        if (*old == 0) {
          ++out.null_frees;
        } else {
          emit({EventKind::kFree, 0, *old, 0, 0});
        }
      } else {
        ++out.skipped_lines;
      }
      continue;
    }
    if (!std::regex_match(line, m, kLine)) {
      ++out.skipped_lines;
      continue;
    }
    const std::string fn = m[1];
    const std::string args = m[2];
    std::optional<std::uint64_t> ret;
    if (m[3].matched) ret = detail::parse_uint(m[3].str(), 16);
    const auto comma = args.find(',');
    bool ok = true;

    if (fn == "malloc" || fn == "_Znwm" || fn == "_Znam" || fn == "_ZnwmRKSt9nothrow_t" ||
        fn == "_ZnamRKSt9nothrow_t" || fn == "memalign" || fn == "_ZnwmSt11align_val_t" ||
        fn == "_ZnamSt11align_val_t") {
      std::optional<std::uint64_t> size;
      std::smatch am;
      if (fn == "memalign" && std::regex_match(args, am, kMemalign)) {
        size = detail::parse_uint(am[1].str(), 10);
      } else {
        size = detail::parse_uint(args.substr(0, comma), 10);
      }
      if (!size || !m[3].matched || !ret) {
        ok = false;
      } else if (*ret == 0) {
        ++out.failed_allocs;
      } else {
        emit({EventKind::kMalloc, *size, 0, *ret, 0});
      }
    } else if (fn == "calloc") {
      const auto n = comma == std::string::npos ? std::nullopt : detail::parse_uint(args.substr(0, comma), 10);
      const auto sz = comma == std::string::npos ? std::nullopt : detail::parse_uint(args.substr(comma + 1), 10);
      if (!n || !sz || !ret) {
        ok = false;
      } else if (*ret == 0) {
        ++out.failed_allocs;
      } else {
        emit({EventKind::kCalloc, *n * *sz, 0, *ret, 0});
      }
    } else if (fn == "realloc") {
      const auto old = comma == std::string::npos ? std::nullopt : detail::parse_uint(args.substr(0, comma), 16);
      const auto sz = comma == std::string::npos ? std::nullopt : detail::parse_uint(args.substr(comma + 1), 10);
      if (!old || !sz || !ret) {
        ok = false;
      } else {
        emit({EventKind::kRealloc, *sz, *old, *ret, 0});
      }
    } else if (fn == "free" || fn == "_ZdlPv" || fn == "_ZdaPv" || fn == "_ZdlPvm" ||
               fn == "_ZdaPvm" || fn == "_ZdlPvSt11align_val_t" || fn == "_ZdaPvSt11align_val_t" ||
               fn == "_ZdlPvmSt11align_val_t" || fn == "_ZdaPvmSt11align_val_t") {
      const auto addr = detail::parse_uint(args.substr(0, comma), 16);
      if (!addr) {
        ok = false;
      } else if (*addr == 0) {
        ++out.null_frees;
      } else {
        emit({EventKind::kFree, 0, *addr, 0, 0});
      }
    } else {
      ok = false;
    }
    if (!ok) ++out.skipped_lines;
  }
  return out;
}

inline ParsedTrace parse_valgrind(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_valgrind(in);
}

struct NormalizedTrace {
  std::vector<TraceEvent> events;  // only kMalloc and kFree
  std::vector<TraceWarning> warnings;
};

/// Rewrites calloc as malloc and realloc as free + malloc, and enforces the
/// liveness discipline: frees of unknown addresses are dropped with a
/// warning; allocations overlapping live ones first free those (also with a
/// warning). Sequence numbers are reassigned densely.
inline NormalizedTrace normalize(const std::vector<TraceEvent>& in) {
  NormalizedTrace out;
  std::map<std::uint64_t, std::uint64_t> live;  // start -> end (exclusive)
  std::uint64_t seq = 0;
  const auto free_at = [&](std::uint64_t addr, std::uint64_t src) {
    if (live.erase(addr) == 0) {
      out.warnings.push_back({src, "free of unknown address " + detail::hex(addr)});
      return;
    }
    out.events.push_back({EventKind::kFree, 0, addr, 0, seq++});
  };
  const auto malloc_at = [&](std::uint64_t addr, std::uint64_t size, std::uint64_t src) {
    const std::uint64_t end = addr + std::max<std::uint64_t>(size, 1);
    auto it = live.upper_bound(addr);
    if (it != live.begin()) --it;
    while (it != live.end() && it->first < end) {
      if (it->second > addr) {
        out.warnings.push_back({src, "allocation at " + detail::hex(addr) +
                                         " overlaps live allocation at " + detail::hex(it->first) +
                                         "; treating that one as freed"});
        out.events.push_back({EventKind::kFree, 0, it->first, 0, seq++});
        it = live.erase(it);
      } else {
        ++it;
      }
    }
    live[addr] = end;
    out.events.push_back({EventKind::kMalloc, size, 0, addr, seq++});
  };
  for (const TraceEvent& e : in) {
    switch (e.kind) {
      case EventKind::kMalloc:
      case EventKind::kCalloc:
        malloc_at(e.new_addr, e.size, e.seq);
        break;
      case EventKind::kRealloc:
        if (e.old_addr != 0) free_at(e.old_addr, e.seq);
        if (e.new_addr != 0) malloc_at(e.new_addr, e.size, e.seq);
        break;
      case EventKind::kFree:
        free_at(e.old_addr, e.seq);
        break;
    }
  }
  return out;
}

inline void write_canonical(std::ostream& os, const std::vector<TraceEvent>& events) {
  os << "# mtetag trace v1\n";
  for (const TraceEvent& e : events) {
    os << e.seq << ' ';
    switch (e.kind) {
      case EventKind::kMalloc:
        os << "M " << e.size << ' ' << detail::hex(e.new_addr);
        break;
      case EventKind::kCalloc:
        os << "C " << e.size << ' ' << detail::hex(e.new_addr);
        break;
      case EventKind::kRealloc:
        os << "R " << e.size << ' ' << detail::hex(e.old_addr) << ' ' << detail::hex(e.new_addr);
        break;
      case EventKind::kFree:
        os << "F " << detail::hex(e.old_addr);
        break;
    }
    os << '\n';
  }
}

inline std::vector<TraceEvent> read_canonical(std::istream& in) {
  std::vector<TraceEvent> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string_view> f;
    std::string_view rest = line;
    while (!rest.empty()) {
      const auto sp = rest.find(' ');
      f.push_back(rest.substr(0, sp));
      if (sp == std::string_view::npos) break;
      rest.remove_prefix(sp + 1);
    }
    const auto need = [&](std::size_t n) {
      if (f.size() != n) throw TraceParseError(lineno, "expected " + std::to_string(n) + " fields");
    };
    const auto num = [&](std::size_t i, int base) {
      const auto v = detail::parse_uint(f[i], base);
      if (!v) throw TraceParseError(lineno, "bad number '" + std::string(f[i]) + "'");
      return *v;
    };
    if (f.size() < 2) throw TraceParseError(lineno, "truncated record");
    TraceEvent e;
    e.seq = num(0, 10);
    if (!out.empty() && e.seq <= out.back().seq)
      throw TraceParseError(lineno, "sequence number not increasing");
    if (f[1] == "M" || f[1] == "C") {
      need(4);
      e.kind = f[1] == "M" ? EventKind::kMalloc : EventKind::kCalloc;
      e.size = num(2, 10);
      e.new_addr = num(3, 16);
    } else if (f[1] == "R") {
      need(5);
      e.kind = EventKind::kRealloc;
      e.size = num(2, 10);
      e.old_addr = num(3, 16);
      e.new_addr = num(4, 16);
    } else if (f[1] == "F") {
      need(3);
      e.kind = EventKind::kFree;
      e.old_addr = num(2, 16);
    } else {
      throw TraceParseError(lineno, "unknown record kind '" + std::string(f[1]) + "'");
    }
    out.push_back(e);
  }
  return out;
}

inline std::vector<TraceEvent> read_canonical(std::string_view text) {
  std::istringstream in{std::string(text)};
  return read_canonical(in);
}

inline std::string to_canonical(const std::vector<TraceEvent>& events) {
  std::ostringstream os;
  write_canonical(os, events);
  return os.str();
}

}  // namespace mtetag
