#pragma once

// Crash-checks a fresh log receiving one append per payload size: recovery must
// always yield an exact prefix of the appends, plus at most the in-flight one.

#include "support.hpp"

namespace pmemprims::testing {

inline LogOptions options_for(LogAlgo algo, bool aligned, std::uint64_t length, std::uint32_t k = 64)
{
  LogOptions o;
  o.algo = algo;
  o.aligned = aligned;
  o.dance_k = k;
  o.region = LogRegion{0, length};
  return o;
}

inline CrashReport crash_check_log(LogAlgo algo, bool aligned, LogFault fault,
                                   const std::vector<std::uint64_t>& sizes, std::uint32_t dance_k = 4,
                                   CheckMode mode = CheckMode::exhaustive())
{
  const std::uint64_t length = 8192;
  LogOptions options = options_for(algo, aligned, length, dance_k);
  options.fault = fault;
  std::vector<Bytes> payloads;
  Rng rng(99);
  for (std::uint64_t s : sizes) payloads.push_back(rng.bytes(s));

  CrashCheck<RecoveredLog> check;
  check.capacity = length;
  for (const Bytes& payload : payloads) {
    check.workload.push_back([options, payload](Device& device) {
      Log log = Log::create(device, options);
      log.append(payload);
    });
  }
  check.recover = [options](ByteSpan image) { return log_recover(image, options); };
  check.predicate = [payloads](const RecoveredLog& log,
                               const WorkloadProgress& p) -> std::optional<std::string> {
    const std::size_t n = log.entries.size();
    if (n < p.completed_ops) return "lost a completed append";
    if (n > p.completed_ops + (p.in_flight_op ? 1 : 0)) return "recovered an entry never appended";
    for (std::size_t i = 0; i < n; ++i) {
      if (log.entries[i].lsn != i + 1 || log.entries[i].payload != payloads[i]) {
        return "entry " + std::to_string(i + 1) + " differs";
      }
    }
    return std::nullopt;
  };
  check.mode = mode;
  return check_crash_consistency(check);
}

}  // namespace pmemprims::testing
