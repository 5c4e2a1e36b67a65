// Flushes one page with copy-on-write, then two small deltas through the
// micro-log, and recovers the store from a copy of the simulated region.

#include <pmemprims/pmemprims.hpp>

#include <cstdio>

using namespace pmemprims;

int main()
{
  PageStoreConfig config;
  config.slot_count = 4;
  config.mulog_count = 1;

  DeviceConfig device_config;
  device_config.capacity = round_up(config.required_capacity(), kBlockSize);
  device_config.backend = Backend::kSimulated;
  Device device = Device::open(device_config);
  PageStore store = PageStore::create(device, config);

  Bytes page(config.page_size, std::byte{0x11});
  store.flush_cow(42, page);

  for (std::uint32_t line : {3u, 200u}) {
    page[line * kCacheLineSize] = std::byte{0x99};
    device.reset_stats();
    const FlushKind kind = store.flush_hybrid(0, 42, page, DirtyMask::of({line}));
    std::printf("line %u via %s: %llu fences, %llu bytes stored\n", line,
                kind == FlushKind::kMicroLog ? "micro-log" : "copy-on-write",
                static_cast<unsigned long long>(device.stats().barriers),
                static_cast<unsigned long long>(device.stats().bytes_stored));
  }

  Device copy = Device::from_image(device.view());
  auto [recovered, directory] = PageStore::recover(copy, config);
  const DirectoryEntry& entry = directory.at(42);
  std::printf("recovered pid 42: slot %u pvn %llu, %s\n", entry.slot,
              static_cast<unsigned long long>(entry.pvn), entry.image == page ? "matches" : "DIFFERS");
}
