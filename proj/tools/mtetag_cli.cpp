// mtetag: command-line front end for the tag-storage simulator.
//
// Exit codes: 0 success, 1 data error (bad trace, failed verify, strict
// warnings), 2 usage error.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtetag/attack.hpp"
#include "mtetag/golden.hpp"
#include "mtetag/oracle.hpp"
#include "mtetag/page_store.hpp"
#include "mtetag/sim.hpp"
#include "mtetag/trace.hpp"
#include "mtetag/workload.hpp"

namespace {

using namespace mtetag;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  if (const char* s = std::getenv("MTETAG_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw UsageError("MTETAG_SEED is not a number");
    }
  }
  return 1;
}

std::vector<TagWidth> parse_widths(const std::vector<unsigned>& raw) {
  std::vector<TagWidth> out;
  for (unsigned b : raw) {
    try {
      out.push_back(width_from_bits(b));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (out.empty()) throw UsageError("no tag widths given");
  return out;
}

PolicyId policy_or_throw(const std::string& name) {
  const auto p = parse_policy(name);
  if (!p) throw UsageError("unknown policy '" + name + "'");
  return *p;
}

// Output goes to --out when given, stdout otherwise.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc);
    if (!*file_) throw DataError("cannot open " + path + " for writing");
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Canonical traces start with a comment or a sequence number; anything else
// is treated as Valgrind output.
std::vector<TraceEvent> load_trace(const std::string& path, std::uint64_t& skipped) {
  const std::string text = read_file(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && (text[first] == '#' || std::isdigit(static_cast<unsigned char>(text[first])))) {
    try {
      return read_canonical(text);
    } catch (const TraceParseError& e) {
      throw DataError(path + ": " + e.what());
    }
  }
  auto parsed = parse_valgrind(text);
  skipped = parsed.skipped_lines;
  return std::move(parsed.events);
}

SizeDistribution parse_sizes(const std::string& s) {
  std::vector<std::string> f;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ':');) f.push_back(part);
  try {
    if (f.size() == 2 && f[0] == "point") return PointSize{std::stoull(f[1])};
    if (f.size() == 3 && f[0] == "uniform") return UniformSize{std::stoull(f[1]), std::stoull(f[2])};
    if (f.size() == 3 && f[0] == "lognormal") return LogNormalSize{std::stod(f[1]), std::stod(f[2])};
  } catch (const std::exception&) {
  }
  throw UsageError("bad size distribution '" + s + "' (point:N, uniform:LO:HI, lognormal:MEAN:SIGMA)");
}

// Deterministic bench op stream. The page is cut into eight 32-granule
// blocks and each op retags one block (allocation-sized writes keep the
// adaptive store in tree mode at every width), then reads it back.
struct BenchOp {
  Granule first, count;
  Tag tag;
};

std::vector<BenchOp> bench_ops(TagWidth w, std::uint64_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<BenchOp> ops;
  ops.reserve(n);
  const Tag mask = static_cast<Tag>(tag_space(w) - 1);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto first = static_cast<Granule>(32 * (rng() % 8));
    ops.push_back({first, 32, static_cast<Tag>(rng() & mask)});
  }
  return ops;
}

struct FlatBench {
  FlatTagArray a;
  void stg_range(Granule f, Granule c, Tag t) { a.oracle_stg_range(f, c, t); }
  Tag ldg(Granule g) const { return a.oracle_ldg(g); }
};

template <typename Store>
std::pair<double, std::uint64_t> time_ops(Store& s, const std::vector<BenchOp>& ops) {
  std::uint64_t checksum = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& op : ops) {
    s.stg_range(op.first, op.count, op.tag);
    for (Granule g = op.first; g < op.first + op.count; ++g) checksum = checksum * 31 + s.ldg(g);
  }
  const double ns = std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - t0).count();
  return {ns, checksum};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive memory-tag storage simulator"};
  app.require_subcommand(1, 1);
  bool no_timestamp = false;
  app.add_flag("--no-timestamp", no_timestamp, "Omit wall-clock fields so output is reproducible");

  std::uint64_t seed = 0;
  std::string out_path;

  // simulate
  auto* sim = app.add_subcommand("simulate", "Replay a trace or workload through a tagging policy");
  std::string trace_path, workload_name, policy_name = "glibc", format = "csv", oracle = "off";
  std::vector<unsigned> widths{4, 8, 16, 32};
  bool strict = false, summary = false;
  auto* trace_opt = sim->add_option("--trace", trace_path, "Valgrind log or canonical trace");
  auto* work_opt = sim->add_option("--workload", workload_name, "Preset workload name");
  trace_opt->excludes(work_opt);
  sim->add_option("--policy", policy_name, "Tagging policy");
  sim->add_option("--widths", widths, "Tag widths in bits")->delimiter(',');
  sim->add_option("--seed", seed, "RNG seed (default: MTETAG_SEED or 1)");
  sim->add_option("--oracle", oracle, "Check pages against a flat shadow")->check(CLI::IsMember({"on", "off"}));
  sim->add_option("--out", out_path, "Output file (default stdout)");
  sim->add_option("--format", format)->check(CLI::IsMember({"csv", "json"}));
  sim->add_flag("--strict", strict, "Treat trace warnings as errors");
  sim->add_flag("--summary", summary, "Emit the per-width summary table instead of the full report");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic workload as a canonical trace");
  std::string sizes_spec;
  std::uint64_t gen_events = 1000, gen_live = 0;
  double frees_per_alloc = 1.0;
  auto* gen_work = gen->add_option("--workload", workload_name, "Preset workload name");
  gen->add_option("--sizes", sizes_spec, "point:N | uniform:LO:HI | lognormal:MEAN:SIGMA")->excludes(gen_work);
  gen->add_option("--events", gen_events);
  gen->add_option("--live", gen_live, "Live-set target (0 = unbounded)");
  gen->add_option("--frees-per-alloc", frees_per_alloc)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--seed", seed);
  gen->add_option("--out", out_path);

  // parse
  auto* parse = app.add_subcommand("parse", "Convert a Valgrind trace-malloc log to a canonical trace");
  std::string in_path;
  bool normalize_flag = false;
  parse->add_option("--in", in_path, "Valgrind log")->required();
  parse->add_option("--out", out_path);
  parse->add_flag("--normalize", normalize_flag, "Rewrite to malloc/free and drop liveness violations");
  parse->add_flag("--strict", strict);

  // attack
  auto* attack = app.add_subcommand("attack", "Estimate attack success rates");
  std::string scenario_name = "all", attack_policy = "all";
  std::uint64_t trials = 10000;
  attack->add_option("--scenario", scenario_name, "Scenario name or 'all'");
  attack->add_option("--policy", attack_policy, "Policy name or 'all'");
  attack->add_option("--trials", trials);
  attack->add_option("--seed", seed);
  attack->add_option("--out", out_path);

  // bench
  auto* bench = app.add_subcommand("bench", "Time stg/ldg on the adaptive store against a flat array");
  std::uint64_t ops = 100000;
  bench->add_option("--widths", widths)->delimiter(',');
  bench->add_option("--ops", ops);
  bench->add_option("--seed", seed);
  bench->add_option("--out", out_path);

  // verify
  auto* verify = app.add_subcommand("verify", "Check committed golden fixtures");
  std::string golden_dir = "tests/golden";
  bool regenerate = false;
  verify->add_option("--golden", golden_dir, "Fixture directory");
  verify->add_flag("--regenerate", regenerate, "Rewrite the fixtures instead of checking them");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    for (auto* sc : {sim, gen, attack, bench}) {
      if (sc->parsed() && sc->count("--seed") == 0) seed = default_seed();
    }

    if (sim->parsed()) {
      SimConfig cfg;
      cfg.policy = policy_or_throw(policy_name);
      cfg.widths = parse_widths(widths);
      cfg.seed = seed;
      cfg.oracle = oracle == "on";
      cfg.timestamps = !no_timestamp;
      if (is_stack_policy(cfg.policy)) throw UsageError("stack tagging policies cannot replay heap traces");
      std::vector<TraceEvent> events;
      std::string label;
      std::uint64_t skipped = 0;
      if (!trace_path.empty()) {
        events = load_trace(trace_path, skipped);
        label = std::filesystem::path(trace_path).stem().string();
      } else {
        const auto spec = find_preset(workload_name.empty() ? "three48" : workload_name);
        if (!spec) throw UsageError("unknown workload '" + workload_name + "'");
        events = gen_workload(*spec);
        label = workload_name.empty() ? "three48" : workload_name;
      }
      const SimReport rep = simulate(events, cfg, label);
      for (const auto& w : rep.warnings) std::cerr << "warning: event " << w.seq << ": " << w.message << '\n';
      if (skipped) std::cerr << "warning: " << skipped << " unrecognised trace lines skipped\n";
      Output out(out_path);
      if (summary) {
        const auto rows = summarize({rep});
        format == "json" ? write_summary_json(out.stream(), rows) : write_summary_csv(out.stream(), rows);
      } else {
        format == "json" ? write_report_json(out.stream(), {rep}) : write_report_csv(out.stream(), {rep});
      }
      std::uint64_t mismatches = 0;
      for (const auto& w : rep.widths) mismatches += w.oracle_mismatches;
      if (mismatches) {
        std::cerr << "error: " << mismatches << " oracle mismatches\n";
        return 1;
      }
      if (strict && (!rep.warnings.empty() || skipped)) return 1;
      return 0;
    }

    if (gen->parsed()) {
      WorkloadSpec spec;
      if (!workload_name.empty()) {
        const auto p = find_preset(workload_name);
        if (!p) throw UsageError("unknown workload '" + workload_name + "'");
        spec = *p;
        if (gen->count("--seed")) spec.seed = seed;
      } else {
        spec.sizes = parse_sizes(sizes_spec.empty() ? "uniform:1:256" : sizes_spec);
        spec.events = gen_events;
        spec.live_target = gen_live;
        spec.frees_per_alloc = frees_per_alloc;
        spec.seed = seed;
      }
      std::vector<TraceEvent> events;
      try {
        events = gen_workload(spec);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      Output out(out_path);
      write_canonical(out.stream(), events);
      return 0;
    }

    if (parse->parsed()) {
      std::ifstream in(in_path);
      if (!in) throw DataError("cannot read " + in_path);
      const ParsedTrace t = parse_valgrind(in);
      std::vector<TraceEvent> events = t.events;
      std::size_t warnings = 0;
      if (normalize_flag) {
        auto n = normalize(t.events);
        for (const auto& w : n.warnings) std::cerr << "warning: event " << w.seq << ": " << w.message << '\n';
        warnings = n.warnings.size();
        events = std::move(n.events);
      }
      Output out(out_path);
      write_canonical(out.stream(), events);
      std::cerr << t.events.size() << " events, " << t.skipped_lines << " skipped lines, " << t.null_frees
                << " null frees, " << t.failed_allocs << " failed allocations\n";
      return strict && (warnings || t.skipped_lines) ? 1 : 0;
    }

    if (attack->parsed()) {
      if (trials < 1) throw UsageError("--trials must be at least 1");
      std::vector<AttackId> scenarios;
      if (scenario_name == "all") {
        for (const auto& [n, id] : kAttackNames) scenarios.push_back(id);
      } else {
        const auto id = parse_attack(scenario_name);
        if (!id) throw UsageError("unknown scenario '" + scenario_name + "'");
        scenarios.push_back(*id);
      }
      std::vector<PolicyId> policies;
      if (attack_policy == "all") {
        policies = all_policies();
      } else {
        policies.push_back(policy_or_throw(attack_policy));
      }
      Output out(out_path);
      write_attack_csv_header(out.stream());
      bool any = false;
      for (AttackId id : scenarios) {
        for (PolicyId p : policies) {
          if (!applicable(id, p)) continue;
          const AttackScenario s{id, p, trials};
          write_attack_csv_row(out.stream(), s, run_attack(s, seed));
          any = true;
        }
      }
      if (!any) throw UsageError("scenario does not apply to that policy");
      return 0;
    }

    if (bench->parsed()) {
      if (ops < 1) throw UsageError("--ops must be at least 1");
      Output out(out_path);
      auto& os = out.stream();
      os << "width,backend,ops,checksum";
      if (!no_timestamp) os << ",ns_per_op,ratio_vs_flat";
      os << '\n';
      for (TagWidth w : parse_widths(widths)) {
        const auto stream = bench_ops(w, ops, seed);
        FlatBench flat{FlatTagArray(w)};
        PageTagStore page(w);
        const auto [flat_ns, flat_sum] = time_ops(flat, stream);
        const auto [page_ns, page_sum] = time_ops(page, stream);
        if (flat_sum != page_sum) throw DataError("adaptive store disagrees with the flat array");
        if (!page.is_btree()) throw DataError("bench page left tree mode");
        const auto row = [&](const char* backend, double ns, std::uint64_t sum) {
          os << bits(w) << ',' << backend << ',' << ops << ',' << std::hex << "0x" << sum << std::dec;
          if (!no_timestamp) os << ',' << detail::fixed(ns / ops, 2) << ',' << detail::fixed(ns / flat_ns, 3);
          os << '\n';
        };
        row("flat", flat_ns, flat_sum);
        row("adaptive", page_ns, page_sum);
      }
      return 0;
    }

    if (verify->parsed()) {
      if (regenerate) {
        golden::regenerate(golden_dir);
        std::cout << "regenerated fixtures in " << golden_dir << '\n';
        return 0;
      }
      const auto r = golden::verify(golden_dir);
      for (const auto& p : r.passed) std::cout << "ok   " << p << '\n';
      for (const auto& f : r.failures) std::cout << "FAIL " << f << '\n';
      return r.ok() ? 0 : 1;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
