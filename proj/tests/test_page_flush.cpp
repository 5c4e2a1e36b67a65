#include "page_crash.hpp"

#include <gtest/gtest.h>

#include <thread>

using namespace pmemprims;
using pmemprims::testing::FlushStep;
using pmemprims::testing::PageCrashPlan;
using pmemprims::testing::Rng;
using pmemprims::testing::TempFile;
using pmemprims::testing::filled;
using pmemprims::testing::fixture_path;
using pmemprims::testing::run_page_crash_check;
using pmemprims::testing::sim_device;

namespace {

PageStoreConfig small_config(std::uint32_t slots = 4, std::uint32_t mulogs = 1)
{
  PageStoreConfig config;
  config.page_size = 256;
  config.slot_count = slots;
  config.mulog_count = mulogs;
  return config;
}

PageStoreConfig full_config(std::uint32_t slots = 3, std::uint32_t mulogs = 1)
{
  PageStoreConfig config;
  config.slot_count = slots;
  config.mulog_count = mulogs;
  return config;
}

Device device_for(const PageStoreConfig& config)
{
  return sim_device(round_up(config.required_capacity(), kBlockSize));
}

Errc error_of(const std::function<void()>& body)
{
  try {
    body();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return Errc::kInvalidConfig;
}

// Copy of `page` with the listed lines overwritten by `value`.
Bytes with_lines(Bytes page, std::initializer_list<std::uint32_t> lines, int value)
{
  for (std::uint32_t line : lines) {
    std::fill_n(page.begin() + line * kCacheLineSize, kCacheLineSize, static_cast<std::byte>(value));
  }
  return page;
}

std::vector<std::uint64_t> fence_seqs(const EventTrace& trace)
{
  std::vector<std::uint64_t> out;
  for (const Event& e : trace) {
    if (e.kind == EventKind::kFence) out.push_back(e.seq);
  }
  return out;
}

// Every crash image strictly after fence `after` (1-based) and up to fence
// `upto` of the traced operation, recovered to a directory.
std::vector<Directory> directories_between(ByteSpan base, const EventTrace& trace,
                                           const PageStoreConfig& config, std::size_t after,
                                           std::size_t upto)
{
  const std::vector<std::uint64_t> fences = fence_seqs(trace);
  const std::uint64_t lo = after == 0 ? 0 : fences.at(after - 1);
  const std::uint64_t hi = fences.at(upto - 1) - 1;
  std::vector<Directory> out;
  for (std::uint64_t c = lo; c <= hi; ++c) {
    for (const CrashImage& image : crash_images(base, trace, c, CheckMode::exhaustive())) {
      out.push_back(recover_directory(image.content, config));
    }
  }
  return out;
}

TEST(PageFlush, TimelineFinalFixtureRecovers)
{
  const Bytes image = load_hex_image(fixture_path("page_timeline_final.hex"));
  const PageStoreConfig config = small_config(3, 1);
  const Directory directory = recover_directory(image, config);
  ASSERT_EQ(directory.size(), 2u);
  EXPECT_EQ(directory.at(1).pvn, 3u);
  EXPECT_EQ(directory.at(1).slot, 0u);
  EXPECT_EQ(directory.at(1).image, filled(256, 0xa1));
  EXPECT_EQ(directory.at(2).pvn, 5u);
  EXPECT_EQ(directory.at(2).image, filled(256, 0xb1));

  Device device = Device::from_image(image);
  auto [store, live] = PageStore::recover(device, config);
  EXPECT_EQ(store.read_page(1), filled(256, 0xa1));
  EXPECT_EQ(store.free_slots(), std::vector<std::uint32_t>{1});
}

TEST(PageFlush, TimelineIntermediateFixtureRecovers)
{
  const Bytes image = load_hex_image(fixture_path("page_timeline_intermediate.hex"));
  const Directory directory = recover_directory(image, small_config(3, 1));
  EXPECT_EQ(directory.at(1).pvn, 4u);
  EXPECT_EQ(directory.at(1).image, filled(256, 0xa1));
  EXPECT_EQ(directory.at(2).pvn, 5u);
}

TEST(PageFlush, FreshStoreHasEmptyDirectory)
{
  const PageStoreConfig config = small_config();
  Device device = device_for(config);
  PageStore::create(device, config);
  EXPECT_TRUE(recover_directory(device.view(), config).empty());
  auto [store, directory] = PageStore::recover(device, config);
  EXPECT_TRUE(directory.empty());
  EXPECT_EQ(store.free_slots().size(), 4u);
}

TEST(PageFlush, CreateRefusesPopulatedRegion)
{
  const PageStoreConfig config = small_config();
  Device device = device_for(config);
  PageStore store = PageStore::create(device, config);
  store.flush_cow(1, filled(256, 1));
  EXPECT_EQ(error_of([&] { PageStore::create(device, config); }), Errc::kInvalidArgument);
}

TEST(PageFlush, FenceCounts)
{
  const PageStoreConfig config = full_config(3, 1);
  Device device = device_for(config);
  PageStore store = PageStore::create(device, config);
  Bytes page = filled(config.page_size, 7);
  device.reset_stats();
  store.flush_cow(9, page);
  EXPECT_EQ(device.stats().barriers, 2u);
  device.reset_stats();
  page = with_lines(page, {3}, 8);
  store.flush_mulog(0, 9, page, DirtyMask::of({3}));
  EXPECT_EQ(device.stats().barriers, 4u);
}

TEST(PageFlush, BytesStoredPerFlush)
{
  const PageStoreConfig config = full_config(3, 1);
  Device device = device_for(config);
  PageStore store = PageStore::create(device, config);
  Bytes page = filled(config.page_size, 7);
  device.reset_stats();
  store.flush_cow(9, page);
  EXPECT_EQ(device.stats().bytes_stored, config.page_size + 16);

  for (std::uint32_t d : {1u, 2u, 16u, 100u, 256u}) {
    device.reset_stats();
    store.flush_mulog(0, 9, page, DirtyMask::first(d));
    const std::uint64_t stored = device.stats().bytes_stored;
    EXPECT_EQ(stored, 130u * d + 36) << d;
    EXPECT_LE(stored, 64 + 512 + 128u * d + 16) << d;
  }
}

TEST(PageFlush, MicroLogBytesCrossCowAt126)
{
  // First-principles byte model: invalidate, pvn, count, offsets, log data,
  // validate, in-place data, slot pvn.
  const PageStoreConfig config = full_config(3, 1);
  const auto mulog_model = [](std::uint64_t d) { return 8 + 8 + 4 + 2 * d + 64 * d + 8 + 64 * d + 8; };
  const std::uint64_t cow_model = config.page_size + 8 + 8;
  std::uint64_t crossover = 0;
  for (std::uint64_t d = 1; d <= 256 && crossover == 0; ++d) {
    if (mulog_model(d) > cow_model) crossover = d;
  }
  EXPECT_EQ(crossover, 126u);

  for (std::uint32_t d = 1; d <= 256; d += 5) {
    Device device = device_for(config);
    PageStore store = PageStore::create(device, config);
    const Bytes page = filled(config.page_size, 3);
    store.flush_cow(1, page);
    device.reset_stats();
    store.flush_mulog(0, 1, page, DirtyMask::first(d));
    const std::uint64_t mulog = device.stats().bytes_stored;
    device.reset_stats();
    store.flush_cow(1, page);
    const std::uint64_t cow = device.stats().bytes_stored;
    EXPECT_EQ(mulog, mulog_model(d));
    EXPECT_EQ(mulog > cow, d >= crossover) << d;
  }
}

TEST(PageFlush, HybridChoice)
{
  const Bytes page = filled(16384, 5);
  {
    const PageStoreConfig config = full_config(3, 1);
    Device device = device_for(config);
    PageStore store = PageStore::create(device, config);
    EXPECT_EQ(store.choose_flush(1, DirtyMask::first(100)), FlushKind::kCopyOnWrite);  // no slot yet
    store.flush_cow(1, page);
    EXPECT_EQ(store.flush_hybrid(0, 1, page, DirtyMask::first(100)), FlushKind::kMicroLog);
    EXPECT_EQ(store.choose_flush(1, DirtyMask::first(111)), FlushKind::kMicroLog);
    EXPECT_EQ(store.choose_flush(1, DirtyMask::first(112)), FlushKind::kCopyOnWrite);
    EXPECT_EQ(store.flush_hybrid(0, 1, page, DirtyMask::first(256)), FlushKind::kCopyOnWrite);
  }
  {
    const PageStoreConfig config = full_config(9, 7);
    Device device = device_for(config);
    PageStore store = PageStore::create(device, config);
    store.flush_cow(1, page);
    EXPECT_EQ(store.flush_hybrid(6, 1, page, DirtyMask::first(100)), FlushKind::kCopyOnWrite);
    EXPECT_EQ(store.flush_hybrid(6, 1, page, DirtyMask::first(31)), FlushKind::kMicroLog);
    EXPECT_EQ(store.choose_flush(1, DirtyMask::first(32)), FlushKind::kCopyOnWrite);
  }
}

TEST(PageFlush, RejectsBadRequests)
{
  const PageStoreConfig config = small_config(2, 1);
  Device device = device_for(config);
  PageStore store = PageStore::create(device, config);
  const Bytes page = filled(256, 1);
  EXPECT_EQ(error_of([&] { store.flush_mulog(0, 5, page, DirtyMask::of({0})); }), Errc::kUnknownPage);
  EXPECT_EQ(error_of([&] { store.read_page(5); }), Errc::kUnknownPage);
  EXPECT_EQ(error_of([&] { store.flush_cow(0, page); }), Errc::kInvalidArgument);
  EXPECT_EQ(error_of([&] { store.flush_cow(1, filled(255, 1)); }), Errc::kInvalidArgument);
  store.flush_cow(1, page);
  EXPECT_EQ(error_of([&] { store.flush_mulog(0, 1, page, DirtyMask{}); }), Errc::kInvalidArgument);
  EXPECT_EQ(error_of([&] { store.flush_mulog(1, 1, page, DirtyMask::of({0})); }), Errc::kInvalidArgument);
  EXPECT_EQ(error_of([&] { store.flush_mulog(0, 1, page, DirtyMask::of({4})); }), Errc::kInvalidArgument);
  store.flush_cow(2, page);
  EXPECT_EQ(error_of([&] { store.flush_cow(3, page); }), Errc::kNoFreeSlot);
  EXPECT_EQ(error_of([&] { store.flush_cow(1, page); }), Errc::kNoFreeSlot);
  EXPECT_EQ(store.read_page(1), page);  // failed flushes leave the store intact
}

TEST(PageFlush, DuplicateNewestVersionIsCorruption)
{
  const PageStoreConfig config = small_config(3, 1);
  Bytes image(round_up(config.required_capacity(), kBlockSize));
  for (std::uint32_t slot : {0u, 2u}) {
    store_le<std::uint64_t>(image, config.slot_offset(slot), 1);
    store_le<std::uint64_t>(image, config.slot_offset(slot) + 8, 3);
  }
  EXPECT_EQ(error_of([&] { scan_page_store(image, config); }), Errc::kCorruption);

  // An older duplicate under a newer copy is ignored.
  store_le<std::uint64_t>(image, config.slot_offset(1), 1);
  store_le<std::uint64_t>(image, config.slot_offset(1) + 8, 4);
  EXPECT_EQ(scan_page_store(image, config).pages.at(1).slot, 1u);
}

TEST(PageFlush, ReadPageReflectsOnlyDirtyLines)
{
  const PageStoreConfig config = small_config(3, 1);
  Device device = device_for(config);
  PageStore store = PageStore::create(device, config);
  const Bytes base = filled(256, 1);
  store.flush_cow(1, base);
  const Bytes next = with_lines(base, {0, 2, 3}, 9);
  store.flush_mulog(0, 1, next, DirtyMask::of({2}));
  EXPECT_EQ(store.read_page(1), with_lines(base, {2}, 9));
  EXPECT_EQ(store.pvn(1), 2u);
  EXPECT_EQ(recover_directory(device.view(), config).at(1).image, with_lines(base, {2}, 9));
}

TEST(PageFlush, CrashBeforeMicroLogValidationKeepsOldImage)
{
  const PageStoreConfig config = small_config(3, 1);
  Device device = device_for(config);
  PageStore store = PageStore::create(device, config);
  const Bytes old_page = filled(256, 1);
  store.flush_cow(1, old_page);
  const Bytes base(device.view().begin(), device.view().end());
  device.clear_trace();
  const Bytes new_page = with_lines(old_page, {1}, 2);
  store.flush_mulog(0, 1, new_page, DirtyMask::of({1}));
  const EventTrace trace = device.trace();
  ASSERT_EQ(fence_seqs(trace).size(), 4u);

  for (const Directory& d : directories_between(base, trace, config, 0, 2)) {
    EXPECT_EQ(d.at(1).image, old_page);
    EXPECT_EQ(d.at(1).pvn, 1u);
  }
  // Once filled, the log commits as soon as its pid store happens to persist.
  for (const Directory& d : directories_between(base, trace, config, 2, 3)) {
    EXPECT_TRUE((d.at(1).image == old_page && d.at(1).pvn == 1) ||
                (d.at(1).image == new_page && d.at(1).pvn == 2));
  }
  const std::vector<Directory> late = directories_between(base, trace, config, 3, 4);
  ASSERT_FALSE(late.empty());
  for (const Directory& d : late) {
    EXPECT_EQ(d.at(1).image, new_page);
    EXPECT_EQ(d.at(1).pvn, 2u);
  }
}

TEST(PageFlush, CrashInsideCowKeepsOldSlot)
{
  const PageStoreConfig config = small_config(3, 1);
  Device device = device_for(config);
  PageStore store = PageStore::create(device, config);
  const Bytes old_page = filled(256, 1);
  store.flush_cow(1, old_page);
  const Bytes base(device.view().begin(), device.view().end());
  device.clear_trace();
  store.flush_cow(1, filled(256, 2));
  const EventTrace trace = device.trace();
  ASSERT_EQ(fence_seqs(trace).size(), 2u);

  for (const Directory& d : directories_between(base, trace, config, 0, 1)) {
    EXPECT_EQ(d.at(1).image, old_page);
    EXPECT_EQ(d.at(1).slot, 0u);
  }
  std::size_t seen_new = 0;
  for (const Directory& d : directories_between(base, trace, config, 1, 2)) {
    ASSERT_TRUE(d.at(1).image == old_page || d.at(1).image == filled(256, 2));
    if (d.at(1).slot == 1) {
      EXPECT_EQ(d.at(1).pvn, 2u);
      ++seen_new;
    }
  }
  EXPECT_GT(seen_new, 0u);  // pid and pvn on one line can persist together
}

TEST(PageFlushProperty, PageComparisonAgreesWithMaterialize)
{
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    Rng rng(seed);
    const PageStoreConfig config = small_config(2, 3);
    Bytes image = rng.bytes(round_up(config.required_capacity(), kBlockSize));
    RecoveredPage page;
    page.slot = static_cast<std::uint32_t>(rng.between(0, 1));
    for (std::uint32_t index = 0; index < 3; ++index) {
      if (!rng.coin()) continue;
      std::vector<std::uint16_t> lines;
      for (std::uint16_t line = 0; line < config.page_lines(); ++line) {
        if (rng.coin()) lines.push_back(line);
      }
      if (lines.empty()) lines.push_back(0);
      const std::uint64_t base = config.mulog_offset(index);
      store_le<std::uint32_t>(image, base + 16, static_cast<std::uint32_t>(lines.size()));
      for (std::size_t i = 0; i < lines.size(); ++i) {
        store_le<std::uint16_t>(image, base + kMicroLogHeaderSize + 2 * i, lines[i]);
      }
      page.mulogs.push_back(index);
    }
    const Bytes expected = materialize_page(image, config, page);
    ASSERT_TRUE(recovered_page_equals(image, config, page, expected)) << seed;
    Bytes wrong = expected;
    wrong[rng.between(0, wrong.size() - 1)] ^= std::byte{1};
    EXPECT_FALSE(recovered_page_equals(image, config, page, wrong)) << seed;
  }
}

TEST(PageFlush, CrashCheckMixedSequence)
{
  PageCrashPlan plan;
  plan.config = small_config(3, 1);
  plan.pids = {1, 2};
  plan.steps = {{FlushStep::Kind::kMulog, 0, 1, 1},
                {FlushStep::Kind::kCow, 0, 2, 4},
                {FlushStep::Kind::kMulog, 0, 1, 3},
                {FlushStep::Kind::kCow, 0, 1, 1},
                {FlushStep::Kind::kMulog, 0, 2, 2}};
  plan.deep_check_every = 7;
  const auto result = run_page_crash_check(plan);
  EXPECT_TRUE(result.report.ok()) << result.report.to_text();
  EXPECT_GT(result.report.images_checked, 1000u);
}

TEST(PageFlush, CrashCheckTwoFlushersSharePage)
{
  PageCrashPlan plan;
  plan.config = small_config(2, 2);
  plan.pids = {1};
  for (std::uint32_t i = 0; i < 6; ++i) {
    plan.steps.push_back({FlushStep::Kind::kMulog, i % 2, 1, 1 + i % 4});
  }
  plan.deep_check_every = 5;
  const auto result = run_page_crash_check(plan);
  EXPECT_TRUE(result.report.ok()) << result.report.to_text();
}

TEST(PageFlush, CrashCheckRandomPlans)
{
  Rng rng(77);
  for (int round = 0; round < 12; ++round) {
    PageCrashPlan plan;
    plan.config = small_config(static_cast<std::uint32_t>(rng.between(3, 4)),
                               static_cast<std::uint32_t>(rng.between(1, 2)));
    plan.config.dirty_threshold_single = 3;
    plan.config.dirty_threshold_multi = 2;
    plan.pids = {1, 2};
    const int steps = static_cast<int>(rng.between(2, 5));
    for (int i = 0; i < steps; ++i) {
      const auto kind = static_cast<FlushStep::Kind>(rng.between(0, 2));
      plan.steps.push_back({kind, static_cast<std::uint32_t>(rng.between(0, plan.config.mulog_count - 1)),
                            rng.between(1, 2), static_cast<std::uint32_t>(rng.between(1, 4))});
    }
    plan.mode = CheckMode::sampled(64, rng.next());
    plan.deep_check_every = 11;
    const auto result = run_page_crash_check(plan);
    EXPECT_TRUE(result.report.ok()) << "round " << round << "\n" << result.report.to_text();
  }
}

TEST(PageFlush, RecoveryNeverReissuesDurableVersion)
{
  // CoW into a slot whose stale pvn equals the live one, repeatedly.
  PageCrashPlan plan;
  plan.config = small_config(2, 1);
  plan.pids = {1};
  for (int i = 0; i < 5; ++i) plan.steps.push_back({FlushStep::Kind::kCow, 0, 1, 1});
  plan.steps.push_back({FlushStep::Kind::kMulog, 0, 1, 2});
  plan.steps.push_back({FlushStep::Kind::kCow, 0, 1, 1});
  plan.deep_check_every = 1;
  const auto result = run_page_crash_check(plan);
  EXPECT_TRUE(result.report.ok()) << result.report.to_text();
}

TEST(PageFlush, RecoverThenContinue)
{
  const PageStoreConfig config = small_config(4, 2);
  Device device = device_for(config);
  Bytes page = filled(256, 1);
  {
    PageStore store = PageStore::create(device, config);
    store.flush_cow(1, page);
    page = with_lines(page, {0}, 2);
    store.flush_mulog(1, 1, page, DirtyMask::of({0}));
  }
  auto [store, directory] = PageStore::recover(device, config);
  EXPECT_EQ(directory.at(1).pvn, 2u);
  page = with_lines(page, {3}, 3);
  store.flush_hybrid(0, 1, page, DirtyMask::of({3}));
  EXPECT_EQ(store.pvn(1), 3u);
  EXPECT_EQ(recover_directory(device.view(), config).at(1).image, page);
}

TEST(PageFlush, ConcurrentFlushersOnRealBackend)
{
  TempFile file("pmemprims-pages");
  PageStoreConfig config = full_config(16, 4);
  config.flavor = StoreFlavor::kPlainWriteBack;
  DeviceConfig device_config;
  device_config.capacity = round_up(config.required_capacity(), kBlockSize);
  device_config.backend = Backend::kReal;
  std::map<std::uint64_t, Bytes> last;
  {
    Device device = Device::open(device_config, file.path());
    PageStore store = PageStore::create(device, config);
    std::vector<std::thread> workers;
    std::vector<std::map<std::uint64_t, Bytes>> finals(4);
    for (std::uint32_t t = 0; t < 4; ++t) {
      workers.emplace_back([&, t] {
        Rng rng(t + 1);
        for (std::uint64_t pid = 1 + 2 * t; pid <= 2 + 2 * t; ++pid) {
          Bytes page = rng.bytes(config.page_size);
          store.flush_cow(pid, page);
          for (int i = 0; i < 20; ++i) {
            DirtyMask mask;
            for (int k = 0; k < static_cast<int>(rng.between(1, 60)); ++k) {
              const auto line = static_cast<std::uint32_t>(rng.between(0, 255));
              mask.set(line);
              std::fill_n(page.begin() + line * kCacheLineSize, kCacheLineSize,
                          static_cast<std::byte>(rng.next()));
            }
            store.flush_hybrid(t, pid, page, mask);
          }
          finals[t][pid] = page;
        }
      });
    }
    for (auto& w : workers) w.join();
    for (const auto& f : finals) last.insert(f.begin(), f.end());
  }
  Device reopened = Device::open(device_config, file.path());
  const Directory directory = recover_directory(reopened.view(), config);
  ASSERT_EQ(directory.size(), 8u);
  for (const auto& [pid, page] : last) {
    EXPECT_EQ(directory.at(pid).image, page) << pid;
    EXPECT_EQ(directory.at(pid).pvn, 21u) << pid;
  }
}

}  // namespace
