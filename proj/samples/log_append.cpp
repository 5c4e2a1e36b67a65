// Appends a few entries to a Zero log on a file-backed device, reopens it and
// prints what recovery finds.

#include <pmemprims/pmemprims.hpp>

#include <cstdio>
#include <filesystem>
#include <string>

using namespace pmemprims;

int main(int argc, char** argv)
{
  const std::filesystem::path path =
      argc > 1 ? argv[1] : std::filesystem::temp_directory_path() / "pmemprims-sample.log";
  std::filesystem::remove(path);

  DeviceConfig config;
  config.capacity = 1 << 20;
  config.backend = Backend::kReal;

  LogOptions options;
  options.algo = LogAlgo::kZero;
  options.aligned = true;
  options.region = {0, config.capacity};

  {
    Device device = Device::open(config, path);
    Log log = Log::create(device, options);
    for (const std::string text : {"begin tx 7", "set a = 1", "commit tx 7"}) {
      const std::uint64_t lsn = log.append(std::as_bytes(std::span(text)));
      std::printf("appended lsn %llu (%zu bytes)\n", static_cast<unsigned long long>(lsn), text.size());
    }
    const DeviceStats stats = device.stats();
    std::printf("fences: %llu\n", static_cast<unsigned long long>(stats.barriers));
  }

  Device device = Device::open(config, path);
  for (const LogEntry& entry : log_recover(device, options).entries) {
    std::printf("recovered lsn %llu: %.*s\n", static_cast<unsigned long long>(entry.lsn),
                static_cast<int>(entry.payload.size()), reinterpret_cast<const char*>(entry.payload.data()));
  }
  std::filesystem::remove(path);
}
