// Crash-checks a two-field update with and without a fence between the fields.
// Without it, a crash can persist the flag but not the value it guards.

#include <pmemprims/pmemprims.hpp>

#include <cstdio>

using namespace pmemprims;

namespace {

struct State {
  std::uint64_t value;
  std::uint64_t ready;
};

CrashReport check(bool fenced)
{
  CrashCheck<State> check;
  check.capacity = 4096;
  check.workload.push_back([fenced](Device& device) {
    device.store_value<std::uint64_t>(0, 1234);
    device.write_back(0);
    if (fenced) device.fence();
    device.store_value<std::uint64_t>(128, 1);
    device.persist(128, 8);
  });
  check.recover = [](ByteSpan image) {
    return State{load_le<std::uint64_t>(image, 0), load_le<std::uint64_t>(image, 128)};
  };
  check.predicate = [](const State& s, const WorkloadProgress&) -> std::optional<std::string> {
    if (s.ready == 1 && s.value != 1234) return "flag persisted before its value";
    return std::nullopt;
  };
  return check_crash_consistency(check);
}

}  // namespace

int main()
{
  for (bool fenced : {true, false}) {
    const CrashReport report = check(fenced);
    std::printf("%s: %llu images, %llu failures\n", fenced ? "fenced" : "unfenced",
                static_cast<unsigned long long>(report.images_checked),
                static_cast<unsigned long long>(report.failed));
    if (!report.ok()) std::fputs(report.to_text().c_str(), stdout);
  }
}
