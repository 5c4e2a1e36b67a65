// pmemprims: benchmark runner and image inspection.

#include <pmemprims/bench.hpp>
#include <pmemprims/hex_image.hpp>

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using namespace pmemprims;

constexpr int kInvalidSpec = 2;

std::uint64_t parse_size(const std::string& text)
{
  std::size_t used = 0;
  const std::uint64_t value = std::stoull(text, &used);
  const std::string unit = text.substr(used);
  if (unit.empty()) return value;
  if (unit == "K" || unit == "KiB") return value << 10;
  if (unit == "M" || unit == "MiB") return value << 20;
  if (unit == "G" || unit == "GiB") return value << 30;
  throw Error(Errc::kInvalidArgument, "bad size '" + text + "'");
}

struct BenchArgs {
  std::string experiment;
  std::string backend = "sim";
  std::string threads = "1";
  std::string adjacent_lines = "1";
  std::string flavor = "streaming";
  std::string algo;
  std::string entry_size = "64";
  bool aligned = false;
  std::uint32_t dance_k = 64;
  std::string dirty = "16";
  std::string pattern = "random";
  std::uint64_t ops = 10000;
  std::uint64_t seed = 1;
  std::string working_set = "10GiB";
  std::string path;
  std::string durability = "cacheline";
  std::string out;
};

BenchSpec to_spec(const BenchArgs& args)
{
  BenchSpec spec;
  auto experiment = parse_experiment(args.experiment);
  if (!experiment) throw Error(Errc::kInvalidArgument, "unknown experiment '" + args.experiment + "'");
  spec.experiment = *experiment;
  if (args.backend == "real") {
    spec.backend = Backend::kReal;
  } else if (args.backend == "sim") {
    spec.backend = Backend::kSimulated;
  } else {
    throw Error(Errc::kInvalidArgument, "backend must be real or sim");
  }
  spec.threads = parse_sweep(args.threads);
  spec.adjacent_lines = parse_sweep(args.adjacent_lines);
  auto flavor = parse_flavor(args.flavor);
  if (!flavor) throw Error(Errc::kInvalidArgument, "unknown flavor '" + args.flavor + "'");
  spec.flavor = *flavor;
  spec.algo = args.algo;
  spec.entry_sizes = parse_sweep(args.entry_size);
  spec.aligned = args.aligned;
  spec.dance_k = args.dance_k;
  spec.dirty = parse_sweep(args.dirty);
  spec.patterns.clear();
  std::string_view patterns = args.pattern;
  while (!patterns.empty()) {
    const auto comma = patterns.find(',');
    const auto name = patterns.substr(0, comma);
    auto pattern = parse_pattern(name);
    if (!pattern) throw Error(Errc::kInvalidArgument, "unknown pattern '" + std::string(name) + "'");
    if (std::find(spec.patterns.begin(), spec.patterns.end(), *pattern) != spec.patterns.end()) {
      throw Error(Errc::kInvalidArgument, "pattern repeated");
    }
    spec.patterns.push_back(*pattern);
    patterns = comma == std::string_view::npos ? std::string_view{} : patterns.substr(comma + 1);
  }
  spec.ops = args.ops;
  spec.seed = args.seed;
  spec.working_set = parse_size(args.working_set);
  if (!args.path.empty()) spec.path = args.path;
  if (args.durability == "auto") {
    spec.durability = Durability::kAuto;
  } else if (args.durability == "cacheline") {
    spec.durability = Durability::kCacheLineFlush;
  } else if (args.durability == "filesync") {
    spec.durability = Durability::kFileSync;
  } else {
    throw Error(Errc::kInvalidArgument, "durability must be auto, cacheline or filesync");
  }
  spec.validate();
  return spec;
}

int run_bench_command(const BenchArgs& args)
{
  BenchSpec spec;
  try {
    spec = to_spec(args);
  } catch (const std::exception& e) {
    std::cerr << "pmemprims bench: " << e.what() << "\n";
    return kInvalidSpec;
  }
  std::ofstream file;
  if (!args.out.empty()) {
    file.open(args.out);
    if (!file) {
      std::cerr << "pmemprims bench: cannot write " << args.out << "\n";
      return 1;
    }
  }
  std::ostream& out = args.out.empty() ? std::cout : file;
  try {
    out << bench_csv(run_bench(spec));
  } catch (const std::exception& e) {
    std::cerr << "pmemprims bench: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int run_log_dump(const std::string& image_path, const std::string& algo, bool aligned,
                 std::uint32_t dance_k)
{
  const Bytes image = load_hex_image(image_path);
  LogOptions options;
  auto parsed = parse_log_algo(algo);
  if (!parsed) {
    std::cerr << "unknown log algorithm '" << algo << "'\n";
    return kInvalidSpec;
  }
  options.algo = *parsed;
  options.aligned = aligned;
  options.dance_k = dance_k;
  options.region = LogRegion{0, round_down(image.size(), kCacheLineSize)};
  const RecoveredLog log = log_recover(image, options);
  for (const LogEntry& entry : log.entries) {
    std::cout << "lsn=" << entry.lsn << " len=" << entry.payload.size()
              << " payload=" << to_hex(entry.payload) << "\n";
  }
  std::cout << "next_lsn=" << log.next_lsn << " tail=" << log.tail << "\n";
  return 0;
}

int run_page_dump(const std::string& image_path, const PageStoreConfig& config)
{
  const Bytes image = load_hex_image(image_path);
  for (const auto& [pid, entry] : recover_directory(image, config)) {
    std::cout << "pid=" << pid << " slot=" << entry.slot << " pvn=" << entry.pvn
              << " data=" << to_hex(ByteSpan(entry.image).first(std::min<std::size_t>(16, entry.image.size())))
              << "...\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Persistent-memory storage primitives: benchmarks and image inspection"};
  app.require_subcommand(1);

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Run a benchmark sweep and emit CSV");
  bench_cmd->add_option("experiment", bench.experiment, "bandwidth | latency | log | flush | ycsb")
      ->required();
  bench_cmd->add_option("--backend", bench.backend, "real | sim")->capture_default_str();
  bench_cmd->add_option("--threads", bench.threads, "Worker threads (sweep: 1-12 or 1,2,4)")
      ->capture_default_str();
  bench_cmd->add_option("--adjacent-lines", bench.adjacent_lines, "Lines per access (bandwidth sweep)")
      ->capture_default_str();
  bench_cmd->add_option("--flavor", bench.flavor,
                        "plain | plain+writeback | streaming | load | clflush | clflushopt | clwb")
      ->capture_default_str();
  bench_cmd->add_option("--algo", bench.algo,
                        "log: classic | header | header-dance | zero; flush: cow | mulog | hybrid");
  bench_cmd->add_option("--entry-size", bench.entry_size, "Log payload bytes (sweep)")
      ->capture_default_str();
  bench_cmd->add_flag("--aligned", bench.aligned, "Cache-line aligned log entries");
  bench_cmd->add_option("--dance-k", bench.dance_k, "Dancing size fields")->capture_default_str();
  bench_cmd->add_option("--dirty", bench.dirty, "Dirty lines per flush (sweep)")->capture_default_str();
  bench_cmd->add_option("--pattern", bench.pattern, "Write latency: same-line,sequential,random")
      ->capture_default_str();
  bench_cmd->add_option("--ops", bench.ops, "Operations per worker")->capture_default_str();
  bench_cmd->add_option("--seed", bench.seed, "Random seed")->capture_default_str();
  bench_cmd->add_option("--working-set", bench.working_set, "Bandwidth/latency region size")
      ->capture_default_str();
  bench_cmd->add_option("--path", bench.path, "Real-backend file (must not exist)");
  bench_cmd->add_option("--durability", bench.durability, "auto | cacheline | filesync")
      ->capture_default_str();
  bench_cmd->add_option("--out", bench.out, "CSV output file (default stdout)");

  std::string log_image, log_algo = "zero";
  bool log_aligned = false;
  std::uint32_t log_dance_k = 64;
  auto* log_cmd = app.add_subcommand("log-dump", "Recover a log from a hex image and print it");
  log_cmd->add_option("image", log_image, "Hex image file")->required();
  log_cmd->add_option("--algo", log_algo, "classic | header | header-dance | zero")->capture_default_str();
  log_cmd->add_flag("--aligned", log_aligned, "Aligned layout");
  log_cmd->add_option("--dance-k", log_dance_k, "Dancing size fields")->capture_default_str();

  std::string page_image;
  PageStoreConfig page_config;
  auto* page_cmd = app.add_subcommand("page-dump", "Recover a page store from a hex image");
  page_cmd->add_option("image", page_image, "Hex image file")->required();
  page_cmd->add_option("--page-size", page_config.page_size, "Page bytes")->capture_default_str();
  page_cmd->add_option("--slots", page_config.slot_count, "Slot count")->required();
  page_cmd->add_option("--mulogs", page_config.mulog_count, "Micro-log count")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalidSpec;
  }

  try {
    if (*bench_cmd) return run_bench_command(bench);
    if (*log_cmd) return run_log_dump(log_image, log_algo, log_aligned, log_dance_k);
    if (*page_cmd) return run_page_dump(page_image, page_config);
  } catch (const pmemprims::Error& e) {
    std::cerr << "pmemprims: " << e.what() << "\n";
    return e.code() == pmemprims::Errc::kInvalidArgument || e.code() == pmemprims::Errc::kInvalidConfig
               ? kInvalidSpec
               : 1;
  }
  return 0;
}
