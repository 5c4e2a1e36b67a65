#pragma once

// Benchmark harness: access-pattern microbenchmarks, log and page-flush
// throughput, and a write-only YCSB-style loop. Real-backend rows carry
// timings; simulated rows carry structural statistics only, so their CSV is
// reproducible byte for byte.

#include <pmemprims/page_flush.hpp>
#include <pmemprims/wal.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <latch>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include <unistd.h>

namespace pmemprims {

enum class Experiment { kBandwidth, kLatency, kLog, kFlush, kYcsb };

enum class BenchFlavor {
  kPlain,           // store only
  kPlainWriteBack,  // store, write back each line, fence
  kStreaming,       // non-temporal store, fence
  kLoad,            // reads
  kClflush,         // latency only: a specific flush instruction
  kClflushOpt,
  kClwb,
};

enum class FlushAlgo { kCopyOnWrite, kMicroLog, kHybrid };

enum class LatencyPattern { kSameLine, kSequential, kRandom };

inline const char* experiment_name(Experiment e)
{
  switch (e) {
    case Experiment::kBandwidth: return "bandwidth";
    case Experiment::kLatency: return "latency";
    case Experiment::kLog: return "log";
    case Experiment::kFlush: return "flush";
    case Experiment::kYcsb: return "ycsb";
  }
  return "?";
}

inline std::optional<Experiment> parse_experiment(std::string_view name)
{
  for (Experiment e : {Experiment::kBandwidth, Experiment::kLatency, Experiment::kLog,
                       Experiment::kFlush, Experiment::kYcsb}) {
    if (name == experiment_name(e)) return e;
  }
  return std::nullopt;
}

inline const char* flavor_name(BenchFlavor f)
{
  switch (f) {
    case BenchFlavor::kPlain: return "plain";
    case BenchFlavor::kPlainWriteBack: return "plain+writeback";
    case BenchFlavor::kStreaming: return "streaming";
    case BenchFlavor::kLoad: return "load";
    case BenchFlavor::kClflush: return "clflush";
    case BenchFlavor::kClflushOpt: return "clflushopt";
    case BenchFlavor::kClwb: return "clwb";
  }
  return "?";
}

inline std::optional<BenchFlavor> parse_flavor(std::string_view name)
{
  for (BenchFlavor f : {BenchFlavor::kPlain, BenchFlavor::kPlainWriteBack, BenchFlavor::kStreaming,
                        BenchFlavor::kLoad, BenchFlavor::kClflush, BenchFlavor::kClflushOpt,
                        BenchFlavor::kClwb}) {
    if (name == flavor_name(f)) return f;
  }
  return std::nullopt;
}

inline const char* flush_algo_name(FlushAlgo a)
{
  switch (a) {
    case FlushAlgo::kCopyOnWrite: return "cow";
    case FlushAlgo::kMicroLog: return "mulog";
    case FlushAlgo::kHybrid: return "hybrid";
  }
  return "?";
}

inline std::optional<FlushAlgo> parse_flush_algo(std::string_view name)
{
  if (name == "cow") return FlushAlgo::kCopyOnWrite;
  if (name == "mulog") return FlushAlgo::kMicroLog;
  if (name == "hybrid") return FlushAlgo::kHybrid;
  return std::nullopt;
}

inline const char* pattern_name(LatencyPattern p)
{
  switch (p) {
    case LatencyPattern::kSameLine: return "same-line";
    case LatencyPattern::kSequential: return "sequential";
    case LatencyPattern::kRandom: return "random";
  }
  return "?";
}

inline std::optional<LatencyPattern> parse_pattern(std::string_view name)
{
  if (name == "same-line") return LatencyPattern::kSameLine;
  if (name == "sequential") return LatencyPattern::kSequential;
  if (name == "random") return LatencyPattern::kRandom;
  return std::nullopt;
}

// "4", "1-12", "1,2,4-6". Duplicates are rejected so every point runs once.
inline std::vector<std::uint32_t> parse_sweep(std::string_view text)
{
  std::vector<std::uint32_t> out;
  std::set<std::uint32_t> seen;
  auto number = [&](std::string_view s) -> std::uint32_t {
    std::uint32_t v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || end != s.data() + s.size()) {
      throw Error(Errc::kInvalidArgument, "bad sweep value '" + std::string(s) + "'");
    }
    return v;
  };
  while (!text.empty()) {
    const auto comma = text.find(',');
    const std::string_view item = text.substr(0, comma);
    text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
    std::uint32_t lo, hi;
    if (const auto dash = item.find('-'); dash != std::string_view::npos) {
      lo = number(item.substr(0, dash));
      hi = number(item.substr(dash + 1));
      if (lo > hi) throw Error(Errc::kInvalidArgument, "descending range in sweep");
    } else {
      lo = hi = number(item);
    }
    for (std::uint64_t v = lo; v <= hi; ++v) {
      if (!seen.insert(static_cast<std::uint32_t>(v)).second) {
        throw Error(Errc::kInvalidArgument, "sweep repeats " + std::to_string(v));
      }
      out.push_back(static_cast<std::uint32_t>(v));
    }
  }
  if (out.empty()) throw Error(Errc::kInvalidArgument, "empty sweep");
  return out;
}

struct BenchSpec {
  Experiment experiment = Experiment::kLog;
  Backend backend = Backend::kSimulated;
  std::vector<std::uint32_t> threads{1};
  std::vector<std::uint32_t> adjacent_lines{1};
  BenchFlavor flavor = BenchFlavor::kStreaming;
  // Log algorithm for log/ycsb, flush algorithm for flush; empty picks a default.
  std::string algo;
  std::vector<std::uint32_t> entry_sizes{64};
  bool aligned = false;
  std::uint32_t dance_k = 64;
  std::vector<std::uint32_t> dirty{16};
  std::vector<LatencyPattern> patterns{LatencyPattern::kRandom};
  std::uint64_t ops = 10000;  // per worker thread
  std::uint64_t seed = 1;
  std::uint64_t working_set = std::uint64_t{10} << 30;
  std::optional<std::filesystem::path> path;
  Durability durability = Durability::kCacheLineFlush;
  std::uint32_t pages_per_thread = 4;
  std::uint32_t ycsb_records = 10000;

  LogAlgo log_algo() const
  {
    return algo.empty() ? LogAlgo::kZero : *parse_log_algo(algo);
  }

  FlushAlgo flush_algo() const
  {
    return algo.empty() ? FlushAlgo::kHybrid : *parse_flush_algo(algo);
  }

  void validate() const
  {
    auto fail = [](const std::string& why) { throw Error(Errc::kInvalidArgument, why); };
    auto within = [&](const std::vector<std::uint32_t>& values, std::uint32_t lo, std::uint32_t hi,
                      const char* what) {
      for (std::uint32_t v : values) {
        if (v < lo || v > hi) {
          fail(std::string(what) + " must be in [" + std::to_string(lo) + ", " +
               std::to_string(hi) + "], got " + std::to_string(v));
        }
      }
    };
    within(threads, 1, 31, "threads");
    const bool timing_only =
        experiment == Experiment::kBandwidth || experiment == Experiment::kLatency;
    if (timing_only && backend == Backend::kSimulated) {
      fail(std::string(experiment_name(experiment)) + " measures time and needs --backend real");
    }
    switch (experiment) {
      case Experiment::kBandwidth:
        within(adjacent_lines, 1, 12, "adjacent lines");
        if (flavor >= BenchFlavor::kClflush) fail("bandwidth flavors: plain, plain+writeback, streaming, load");
        if (working_set < std::uint64_t{12} * kCacheLineSize * 16) fail("working set too small");
        break;
      case Experiment::kLatency:
        if (flavor == BenchFlavor::kPlain) fail("latency writes must persist; pick a flush flavor");
        if (flavor == BenchFlavor::kLoad && patterns.size() != 1) fail("load latency has no pattern sweep");
        if (working_set < kBlockSize * 16) fail("working set too small");
        break;
      case Experiment::kLog:
      case Experiment::kYcsb:
        within(entry_sizes, 56, 512, "entry size");
        if (!algo.empty() && !parse_log_algo(algo)) fail("unknown log algorithm '" + algo + "'");
        if (dance_k == 0) fail("dance-k must be positive");
        if (flavor != BenchFlavor::kStreaming && flavor != BenchFlavor::kPlainWriteBack) {
          fail("log flavors: streaming, plain+writeback");
        }
        if (experiment == Experiment::kYcsb && (threads.size() != 1 || threads[0] != 1)) {
          fail("ycsb runs single-threaded");
        }
        break;
      case Experiment::kFlush:
        within(dirty, 1, 256, "dirty lines");
        if (!algo.empty() && !parse_flush_algo(algo)) fail("unknown flush algorithm '" + algo + "'");
        if (flavor != BenchFlavor::kStreaming && flavor != BenchFlavor::kPlainWriteBack) {
          fail("flush flavors: streaming, plain+writeback");
        }
        if (pages_per_thread == 0) fail("pages per thread must be positive");
        break;
    }
  }
};

struct BenchRow {
  std::string experiment;
  std::string algo;
  std::uint32_t threads = 1;
  std::string param;
  std::optional<double> ops_per_s;
  std::optional<double> bytes_per_s;
  std::optional<double> ns_mean;
  std::optional<double> ns_p50;
  std::optional<double> ns_p99;
  std::optional<double> fences_per_op;
  std::optional<double> bytes_per_op;
  std::optional<std::uint64_t> repeat_lines;
};

inline constexpr std::string_view kBenchCsvHeader =
    "experiment,algo,threads,param,ops_per_s,bytes_per_s,ns_mean,ns_p50,ns_p99,fences_per_op,"
    "bytes_per_op,repeat_lines";

inline std::string to_csv(const BenchRow& row)
{
  auto num = [](const std::optional<double>& v, const char* format) {
    if (!v) return std::string();
    char buf[64];
    std::snprintf(buf, sizeof buf, format, *v);
    return std::string(buf);
  };
  std::string out = row.experiment + "," + row.algo + "," + std::to_string(row.threads) + "," +
                    row.param + ",";
  out += num(row.ops_per_s, "%.0f") + "," + num(row.bytes_per_s, "%.0f") + ",";
  out += num(row.ns_mean, "%.1f") + "," + num(row.ns_p50, "%.1f") + "," + num(row.ns_p99, "%.1f") + ",";
  out += num(row.fences_per_op, "%.4f") + "," + num(row.bytes_per_op, "%.2f") + ",";
  if (row.repeat_lines) out += std::to_string(*row.repeat_lines);
  return out;
}

namespace bench_detail {

inline BenchRow make_row(std::string experiment, std::string algo, std::uint32_t threads,
                         std::string param)
{
  BenchRow row;
  row.experiment = std::move(experiment);
  row.algo = std::move(algo);
  row.threads = threads;
  row.param = std::move(param);
  return row;
}

using Clock = std::chrono::steady_clock;

inline std::mt19937_64 worker_rng(std::uint64_t seed, std::uint64_t point, std::uint64_t worker)
{
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(point), static_cast<std::uint32_t>(worker)};
  return std::mt19937_64(seq);
}

inline std::uint64_t uniform(std::mt19937_64& rng, std::uint64_t bound)
{
  return std::uniform_int_distribution<std::uint64_t>(0, bound - 1)(rng);
}

// Per-op timings gathered by each worker, merged after the run.
struct Timings {
  std::vector<std::uint32_t> ns;
  double wall_s = 0;
};

inline void fill_timing(BenchRow& row, std::vector<std::vector<std::uint32_t>>& per_worker,
                        double wall_s, double app_bytes_per_op)
{
  std::vector<std::uint32_t> all;
  for (auto& v : per_worker) all.insert(all.end(), v.begin(), v.end());
  if (all.empty()) return;
  const double ops = static_cast<double>(all.size());
  row.ops_per_s = wall_s > 0 ? ops / wall_s : 0.0;
  row.bytes_per_s = *row.ops_per_s * app_bytes_per_op;
  double sum = 0;
  for (std::uint32_t v : all) sum += v;
  row.ns_mean = sum / ops;
  auto at = [&](double q) {
    const auto k = std::min(all.size() - 1, static_cast<std::size_t>(q * ops));
    std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
    return static_cast<double>(all[k]);
  };
  row.ns_p50 = at(0.50);
  row.ns_p99 = at(0.99);
}

inline void fill_structure(BenchRow& row, const DeviceStats& stats, std::uint64_t ops)
{
  if (ops == 0) return;
  row.fences_per_op = static_cast<double>(stats.barriers) / static_cast<double>(ops);
  row.bytes_per_op = static_cast<double>(stats.bytes_stored) / static_cast<double>(ops);
  row.repeat_lines = stats.repeat_persist_lines;
}

inline std::uint32_t elapsed_ns(Clock::time_point start)
{
  const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count();
  return static_cast<std::uint32_t>(std::min<std::int64_t>(ns, UINT32_MAX));
}

// A backing device for one sweep point; real-backend files are removed after.
class ScratchDevice {
 public:
  ScratchDevice(const BenchSpec& spec, std::uint64_t capacity)
  {
    DeviceConfig config;
    config.capacity = round_up(capacity, kBlockSize);
    config.backend = spec.backend;
    config.durability = spec.durability;
    config.stats_level =
        spec.backend == Backend::kReal ? StatsLevel::kNone : StatsLevel::kDetailed;
    config.record_trace = false;
    if (spec.backend == Backend::kReal) {
      path_ = spec.path.value_or(std::filesystem::temp_directory_path() /
                                 ("pmemprims-bench-" + std::to_string(::getpid()) + ".img"));
      if (std::filesystem::exists(*path_)) {
        throw Error(Errc::kFileUnavailable, path_->string() + " already exists");
      }
      device_.emplace(Device::open(config, *path_));
    } else {
      if (config.capacity > (std::uint64_t{1} << 30)) {
        throw Error(Errc::kInvalidArgument, "simulated run needs more than 1 GiB; lower --ops");
      }
      device_.emplace(Device::open(config));
    }
  }

  ~ScratchDevice()
  {
    device_.reset();
    if (path_) {
      std::error_code ignored;
      std::filesystem::remove(*path_, ignored);
    }
  }

  ScratchDevice(const ScratchDevice&) = delete;
  ScratchDevice& operator=(const ScratchDevice&) = delete;

  Device& operator*() { return *device_; }
  Device* operator->() { return &*device_; }

 private:
  std::optional<std::filesystem::path> path_;
  std::optional<Device> device_;
};

// Touches every page so first-touch faults stay out of the timed loop.
inline void prefault(Device& device)
{
  const auto page = static_cast<std::uint64_t>(::sysconf(_SC_PAGESIZE));
  auto bytes = device.mutable_view();
  for (std::uint64_t at = 0; at < bytes.size(); at += page) {
    reinterpret_cast<volatile std::byte&>(bytes[at]) = bytes[at];
  }
}

// Runs `work(worker)` on `threads` workers released together; the simulated
// backend runs them one after another.
template <class Work>
inline double run_workers(const BenchSpec& spec, std::uint32_t threads, Work&& work)
{
  if (spec.backend == Backend::kSimulated) {
    for (std::uint32_t w = 0; w < threads; ++w) work(w);
    return 0;
  }
  std::latch ready(threads);
  std::vector<Clock::time_point> begin(threads), end(threads);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::uint32_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      ready.arrive_and_wait();
      begin[w] = Clock::now();
      work(w);
      end[w] = Clock::now();
    });
  }
  for (auto& t : pool) t.join();
  const auto first = *std::min_element(begin.begin(), begin.end());
  const auto last = *std::max_element(end.begin(), end.end());
  return std::chrono::duration<double>(last - first).count();
}

inline bool cpu_supports(BenchFlavor flavor)
{
#if defined(PMEMPRIMS_X86)
  unsigned eax = 0, ebx = 0, ecx = 0, edx = 0;
  switch (flavor) {
    case BenchFlavor::kClwb:
      return __get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx) && (ebx & (1u << 24));
    case BenchFlavor::kClflushOpt:
      return __get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx) && (ebx & (1u << 23));
    case BenchFlavor::kClflush:
      return __get_cpuid(1, &eax, &ebx, &ecx, &edx) && (edx & (1u << 19));
    default:
      return true;
  }
#else
  return flavor < BenchFlavor::kClflush;
#endif
}

inline BenchRow bandwidth_point(const BenchSpec& spec, std::uint32_t threads, std::uint32_t lines,
                                std::uint64_t point)
{
  ScratchDevice device(spec, spec.working_set);
  prefault(*device);
  const std::uint64_t span = std::uint64_t{lines} * kCacheLineSize;
  const std::uint64_t slots = (device->capacity() - span) / kBlockSize;
  std::vector<std::vector<std::uint32_t>> ns(threads);
  std::vector<std::uint64_t> sinks(threads);
  const double wall = run_workers(spec, threads, [&](std::uint32_t w) {
    auto rng = worker_rng(spec.seed, point, w);
    Bytes data(span, static_cast<std::byte>(w + 1));
    ns[w].reserve(spec.ops);
    const std::byte* base = device->view().data();
    for (std::uint64_t op = 0; op < spec.ops; ++op) {
      const std::uint64_t at = uniform(rng, slots) * kBlockSize;
      const auto start = Clock::now();
      switch (spec.flavor) {
        case BenchFlavor::kLoad: {
          std::uint64_t sum = 0;
          for (std::uint64_t i = 0; i < span; i += 8) {
            std::uint64_t word;
            std::memcpy(&word, base + at + i, 8);
            sum += word;
          }
          sinks[w] += sum;
          break;
        }
        case BenchFlavor::kPlain:
          device->store(at, data);
          break;
        case BenchFlavor::kPlainWriteBack:
          device->store(at, data);
          device->write_back_range(at, span);
          device->fence();
          break;
        default:
          device->store_streaming(at, data);
          device->fence();
          break;
      }
      ns[w].push_back(elapsed_ns(start));
    }
  });
  BenchRow row = make_row("bandwidth", flavor_name(spec.flavor), threads, std::to_string(lines));
  fill_timing(row, ns, wall, static_cast<double>(span));
  return row;
}

inline BenchRow latency_point(const BenchSpec& spec, std::uint32_t threads, LatencyPattern pattern,
                              std::uint64_t point)
{
  if (!cpu_supports(spec.flavor)) {
    throw Error(Errc::kInvalidConfig, std::string(flavor_name(spec.flavor)) +
                                          " is not supported by this CPU");
  }
  ScratchDevice device(spec, spec.working_set);
  prefault(*device);
  const std::uint64_t region = round_down(device->capacity() / threads, kBlockSize);
  const std::uint64_t lines = region / kCacheLineSize;
  std::vector<std::vector<std::uint32_t>> ns(threads);
  std::vector<std::uint64_t> sinks(threads);
  std::byte* base = device->mutable_view().data();

  if (spec.flavor == BenchFlavor::kLoad) {
    // One random cycle through every line of each region; each load's address
    // comes from the previous load.
    for (std::uint32_t w = 0; w < threads; ++w) {
      auto rng = worker_rng(spec.seed, point, threads + w);
      std::vector<std::uint64_t> order(lines);
      std::iota(order.begin(), order.end(), 0);
      for (std::uint64_t i = lines - 1; i > 0; --i) {
        std::swap(order[i], order[uniform(rng, i)]);
      }
      std::byte* r = base + std::uint64_t{w} * region;
      for (std::uint64_t i = 0; i < lines; ++i) {
        const std::uint64_t next = order[(i + 1) % lines] * kCacheLineSize;
        std::memcpy(r + order[i] * kCacheLineSize, &next, 8);
      }
    }
  }

  const DurabilityMapping insn = spec.flavor == BenchFlavor::kClflush     ? DurabilityMapping::kClflush
                                 : spec.flavor == BenchFlavor::kClflushOpt ? DurabilityMapping::kClflushOpt
                                 : spec.flavor == BenchFlavor::kClwb       ? DurabilityMapping::kClwb
                                                                           : device->durability_mapping();
  const double wall = run_workers(spec, threads, [&](std::uint32_t w) {
    auto rng = worker_rng(spec.seed, point, w);
    std::byte* r = base + std::uint64_t{w} * region;
    ns[w].reserve(spec.ops);
    if (spec.flavor == BenchFlavor::kLoad) {
      std::uint64_t at = 0;
      for (std::uint64_t op = 0; op < spec.ops; ++op) {
        const auto start = Clock::now();
        std::memcpy(&at, r + at, 8);
        ns[w].push_back(elapsed_ns(start));
      }
      sinks[w] = at;
      return;
    }
    std::array<std::byte, kCacheLineSize> line;
    line.fill(static_cast<std::byte>(w + 1));
    for (std::uint64_t op = 0; op < spec.ops; ++op) {
      std::uint64_t index = 0;
      if (pattern == LatencyPattern::kSequential) index = op % lines;
      if (pattern == LatencyPattern::kRandom) index = uniform(rng, lines);
      std::byte* p = r + index * kCacheLineSize;
      std::memcpy(line.data(), &op, 8);
      const auto start = Clock::now();
      if (spec.flavor == BenchFlavor::kStreaming) {
        device->store_streaming(static_cast<std::uint64_t>(p - base), line);
        detail::store_fence();
      } else {
        std::memcpy(p, line.data(), line.size());
        asm volatile("" ::: "memory");
        detail::flush_line(insn, p);
        detail::store_fence();
      }
      ns[w].push_back(elapsed_ns(start));
    }
  });
  BenchRow row = make_row("latency", flavor_name(spec.flavor), threads,
               spec.flavor == BenchFlavor::kLoad ? "chain" : pattern_name(pattern));
  fill_timing(row, ns, wall, static_cast<double>(kCacheLineSize));
  return row;
}

inline LogOptions bench_log_options(const BenchSpec& spec, std::uint64_t offset, std::uint64_t length)
{
  LogOptions options;
  options.algo = spec.log_algo();
  options.aligned = spec.aligned;
  options.dance_k = spec.dance_k;
  options.region = LogRegion{offset, length};
  options.flavor = spec.flavor == BenchFlavor::kPlainWriteBack ? StoreFlavor::kPlainWriteBack
                                                               : StoreFlavor::kStreaming;
  return options;
}

inline std::uint64_t log_region_size(const BenchSpec& spec, std::uint32_t entry_size,
                                     std::uint64_t ops)
{
  const std::uint64_t per_entry = round_up(entry_size + kZeroEntryHeader + kClassicFooter, kCacheLineSize) +
                                  kCacheLineSize;
  const std::uint64_t header = std::uint64_t{spec.dance_k} * kCacheLineSize;
  return round_up(header + ops * per_entry + kCacheLineSize, kBlockSize);
}

inline std::string log_label(const BenchSpec& spec)
{
  return std::string(log_algo_name(spec.log_algo())) + (spec.aligned ? "+aligned" : "");
}

inline BenchRow log_point(const BenchSpec& spec, std::uint32_t threads, std::uint32_t entry_size,
                          std::uint64_t point)
{
  const std::uint64_t region = log_region_size(spec, entry_size, spec.ops);
  ScratchDevice device(spec, region * threads);
  std::vector<std::vector<std::uint32_t>> ns(threads);
  std::vector<Log> logs;
  for (std::uint32_t w = 0; w < threads; ++w) {
    logs.push_back(Log::create(*device, bench_log_options(spec, w * region, region)));
  }
  device->reset_stats();
  const double wall = run_workers(spec, threads, [&](std::uint32_t w) {
    auto rng = worker_rng(spec.seed, point, w);
    Bytes payload(entry_size);
    for (auto& b : payload) b = static_cast<std::byte>(rng());
    ns[w].reserve(spec.ops);
    for (std::uint64_t op = 0; op < spec.ops; ++op) {
      std::memcpy(payload.data(), &op, 8);
      const auto start = Clock::now();
      logs[w].append(payload);
      ns[w].push_back(elapsed_ns(start));
    }
  });
  BenchRow row = make_row("log", log_label(spec), threads, std::to_string(entry_size));
  if (spec.backend == Backend::kReal) {
    fill_timing(row, ns, wall, entry_size);
  } else {
    fill_structure(row, device->stats(), spec.ops * threads);
  }
  return row;
}

inline BenchRow flush_point(const BenchSpec& spec, std::uint32_t threads, std::uint32_t dirty,
                            std::uint64_t point)
{
  PageStoreConfig config;
  config.slot_count = threads * (spec.pages_per_thread + 1);
  config.mulog_count = threads;
  config.flavor = spec.flavor == BenchFlavor::kPlainWriteBack ? StoreFlavor::kPlainWriteBack
                                                              : StoreFlavor::kStreaming;
  ScratchDevice device(spec, config.required_capacity());
  PageStore store = PageStore::create(*device, config);
  const FlushAlgo algo = spec.flush_algo();
  const std::uint64_t page_lines = config.page_lines();

  std::vector<Bytes> pages(std::size_t{threads} * spec.pages_per_thread, Bytes(config.page_size));
  for (std::size_t i = 0; i < pages.size(); ++i) {
    std::fill(pages[i].begin(), pages[i].end(), static_cast<std::byte>(i + 1));
    store.flush_cow(i + 1, pages[i]);
  }
  device->reset_stats();

  std::vector<std::vector<std::uint32_t>> ns(threads);
  const double wall = run_workers(spec, threads, [&](std::uint32_t w) {
    auto rng = worker_rng(spec.seed, point, w);
    std::vector<std::uint32_t> order(page_lines);
    std::iota(order.begin(), order.end(), 0);
    ns[w].reserve(spec.ops);
    for (std::uint64_t op = 0; op < spec.ops; ++op) {
      const std::size_t local = uniform(rng, spec.pages_per_thread);
      const std::size_t index = std::size_t{w} * spec.pages_per_thread + local;
      Bytes& page = pages[index];
      DirtyMask mask;
      for (std::uint32_t i = 0; i < dirty; ++i) {
        std::swap(order[i], order[i + uniform(rng, page_lines - i)]);
        mask.set(order[i]);
        std::memcpy(page.data() + std::uint64_t{order[i]} * kCacheLineSize, &op, 8);
      }
      const auto start = Clock::now();
      switch (algo) {
        case FlushAlgo::kCopyOnWrite: store.flush_cow(index + 1, page); break;
        case FlushAlgo::kMicroLog: store.flush_mulog(w, index + 1, page, mask); break;
        case FlushAlgo::kHybrid: store.flush_hybrid(w, index + 1, page, mask); break;
      }
      ns[w].push_back(elapsed_ns(start));
    }
  });
  BenchRow row = make_row("flush", flush_algo_name(algo), threads, std::to_string(dirty));
  if (spec.backend == Backend::kReal) {
    fill_timing(row, ns, wall, static_cast<double>(config.page_size));
  } else {
    fill_structure(row, device->stats(), spec.ops * threads);
  }
  return row;
}

// Zipfian key chooser with the usual YCSB constant (theta = 0.99).
class ZipfianKeys {
 public:
  explicit ZipfianKeys(std::uint64_t n, double theta = 0.99) : n_(n), theta_(theta)
  {
    for (std::uint64_t i = 1; i <= n; ++i) zetan_ += 1.0 / std::pow(static_cast<double>(i), theta);
    const double zeta2 = 1.0 + 1.0 / std::pow(2.0, theta);
    alpha_ = 1.0 / (1.0 - theta);
    eta_ = (1.0 - std::pow(2.0 / static_cast<double>(n), 1.0 - theta)) / (1.0 - zeta2 / zetan_);
  }

  std::uint64_t operator()(std::mt19937_64& rng) const
  {
    const double u = static_cast<double>(rng() >> 11) * 0x1p-53;
    const double uz = u * zetan_;
    if (uz < 1.0) return 0;
    if (uz < 1.0 + std::pow(0.5, theta_)) return 1 % n_;
    const auto k = static_cast<std::uint64_t>(static_cast<double>(n_) *
                                              std::pow(eta_ * u - eta_ + 1.0, alpha_));
    return std::min(k, n_ - 1);
  }

 private:
  std::uint64_t n_;
  double theta_;
  double zetan_ = 0;
  double alpha_ = 0;
  double eta_ = 0;
};

inline BenchRow ycsb_point(const BenchSpec& spec, std::uint32_t entry_size, std::uint64_t point)
{
  const std::uint64_t region = log_region_size(spec, entry_size, spec.ops);
  ScratchDevice device(spec, region);
  Log log = Log::create(*device, bench_log_options(spec, 0, region));
  device->reset_stats();

  const std::uint32_t value_size = entry_size - 8;
  std::vector<Bytes> table(spec.ycsb_records, Bytes(value_size));
  const ZipfianKeys keys(spec.ycsb_records);
  auto rng = worker_rng(spec.seed, point, 0);
  Bytes entry(entry_size);
  std::vector<std::vector<std::uint32_t>> ns(1);
  ns[0].reserve(spec.ops);
  const auto begin = Clock::now();
  for (std::uint64_t op = 0; op < spec.ops; ++op) {
    const auto start = Clock::now();
    const std::uint64_t key = keys(rng);
    Bytes& value = table[key];
    for (std::uint32_t i = 0; i < value_size; i += 8) {
      const std::uint64_t word = rng();
      std::memcpy(value.data() + i, &word, std::min<std::uint32_t>(8, value_size - i));
    }
    std::memcpy(entry.data(), &key, 8);
    std::memcpy(entry.data() + 8, value.data(), value_size);
    log.append(entry);
    ns[0].push_back(elapsed_ns(start));
  }
  const double wall = std::chrono::duration<double>(Clock::now() - begin).count();
  BenchRow row = make_row("ycsb", log_label(spec), 1, std::to_string(entry_size));
  if (spec.backend == Backend::kReal) {
    fill_timing(row, ns, wall, entry_size);
  } else {
    fill_structure(row, device->stats(), spec.ops);
  }
  return row;
}

}  // namespace bench_detail

// One row per (threads, parameter) point, in sweep order. Zero ops yields no rows.
inline std::vector<BenchRow> run_bench(const BenchSpec& spec)
{
  spec.validate();
  std::vector<BenchRow> rows;
  if (spec.ops == 0) return rows;
  std::uint64_t point = 0;
  for (std::uint32_t threads : spec.threads) {
    switch (spec.experiment) {
      case Experiment::kBandwidth:
        for (std::uint32_t lines : spec.adjacent_lines) {
          rows.push_back(bench_detail::bandwidth_point(spec, threads, lines, point++));
        }
        break;
      case Experiment::kLatency:
        for (LatencyPattern pattern : spec.patterns) {
          rows.push_back(bench_detail::latency_point(spec, threads, pattern, point++));
        }
        break;
      case Experiment::kLog:
        for (std::uint32_t size : spec.entry_sizes) {
          rows.push_back(bench_detail::log_point(spec, threads, size, point++));
        }
        break;
      case Experiment::kFlush:
        for (std::uint32_t dirty : spec.dirty) {
          rows.push_back(bench_detail::flush_point(spec, threads, dirty, point++));
        }
        break;
      case Experiment::kYcsb:
        for (std::uint32_t size : spec.entry_sizes) {
          rows.push_back(bench_detail::ycsb_point(spec, size, point++));
        }
        break;
    }
  }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows)
{
  std::string out(kBenchCsvHeader);
  out += "\n";
  for (const BenchRow& row : rows) {
    out += to_csv(row);
    out += "\n";
  }
  return out;
}

}  // namespace pmemprims
