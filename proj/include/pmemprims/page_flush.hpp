#pragma once

// Failure-atomic propagation of volatile pages into persistent page slots.
//
// Region layout (little-endian), starting at PageStoreConfig::region_offset:
//
//   slot i      [256-byte header: pid u64, pvn u64, zero][page_size data bytes]
//   micro-log j [64-byte header: pid u64, pvn u64, count u32, zero]
//               [512 bytes: count u16 line indices, strictly increasing]
//               [count x 64-byte line images]   (stride rounded up to 256)
//
// pid 0 marks a free slot / invalid micro-log. For each pid the valid slot with
// the largest pvn is authoritative. A valid micro-log is (re)applied on
// recovery when its pvn is the authoritative pvn or the one after it.

#include <pmemprims/device.hpp>

#include <bitset>
#include <map>
#include <memory>
#include <mutex>

namespace pmemprims {

inline constexpr std::uint64_t kSlotHeaderSize = kBlockSize;
inline constexpr std::uint64_t kMicroLogHeaderSize = kCacheLineSize;
inline constexpr std::uint64_t kMicroLogOffsetsSize = 512;
inline constexpr std::uint64_t kMaxPageLines = kMicroLogOffsetsSize / 2;

struct PageStoreConfig {
  std::uint64_t region_offset = 0;
  std::uint64_t page_size = 16384;
  std::uint32_t slot_count = 0;
  std::uint32_t mulog_count = 1;
  std::uint32_t dirty_threshold_single = 112;
  std::uint32_t dirty_threshold_multi = 32;
  StoreFlavor flavor = StoreFlavor::kStreaming;

  std::uint64_t page_lines() const { return page_size / kCacheLineSize; }
  std::uint64_t slot_stride() const { return kSlotHeaderSize + page_size; }
  std::uint64_t mulog_stride() const
  {
    return round_up(kMicroLogHeaderSize + kMicroLogOffsetsSize + page_size, kBlockSize);
  }
  std::uint64_t slot_offset(std::uint32_t slot) const
  {
    return region_offset + std::uint64_t{slot} * slot_stride();
  }
  std::uint64_t mulog_offset(std::uint32_t index) const
  {
    return region_offset + std::uint64_t{slot_count} * slot_stride() +
           std::uint64_t{index} * mulog_stride();
  }
  std::uint64_t required_capacity() const { return mulog_offset(mulog_count); }

  void validate() const
  {
    if (page_size < kBlockSize || page_size > kMaxPageLines * kCacheLineSize ||
        (page_size & (page_size - 1)) != 0) {
      throw Error(Errc::kInvalidConfig,
                  "page size must be a power of two between 256 and 16384 bytes");
    }
    if (slot_count == 0) {
      throw Error(Errc::kInvalidConfig, "page store needs at least one slot");
    }
    if (region_offset % kBlockSize != 0) {
      throw Error(Errc::kInvalidConfig, "page store region must be block aligned");
    }
  }
};

class DirtyMask {
 public:
  DirtyMask() = default;

  static DirtyMask of(std::initializer_list<std::uint32_t> lines)
  {
    DirtyMask mask;
    for (std::uint32_t line : lines) mask.set(line);
    return mask;
  }

  static DirtyMask first(std::uint32_t count)
  {
    DirtyMask mask;
    for (std::uint32_t line = 0; line < count; ++line) mask.set(line);
    return mask;
  }

  void set(std::uint32_t line) { bits_.set(line); }
  bool test(std::uint32_t line) const { return bits_.test(line); }
  std::uint32_t count() const { return static_cast<std::uint32_t>(bits_.count()); }

  std::vector<std::uint16_t> lines() const
  {
    std::vector<std::uint16_t> out;
    for (std::uint32_t line = 0; line < kMaxPageLines; ++line) {
      if (bits_.test(line)) out.push_back(static_cast<std::uint16_t>(line));
    }
    return out;
  }

  friend bool operator==(const DirtyMask&, const DirtyMask&) = default;

 private:
  std::bitset<kMaxPageLines> bits_;
};

struct SlotHeader {
  std::uint64_t pid = 0;
  std::uint64_t pvn = 0;

  bool valid() const { return pid != 0 && pvn != 0; }
};

struct MicroLogHeader {
  std::uint64_t pid = 0;
  std::uint64_t pvn = 0;
  std::uint32_t count = 0;
};

// Authoritative location of a page after recovery, before materialization.
struct RecoveredPage {
  std::uint32_t slot = 0;
  std::uint64_t slot_pvn = 0;
  std::uint64_t pvn = 0;
  // Micro-logs to apply over the slot data, in order.
  std::vector<std::uint32_t> mulogs;
};

struct PageStoreScan {
  std::map<std::uint64_t, RecoveredPage> pages;
  std::vector<SlotHeader> slots;
  std::vector<std::uint32_t> free_slots;
};

struct DirectoryEntry {
  std::uint32_t slot = 0;
  std::uint64_t pvn = 0;
  Bytes image;
};

using Directory = std::map<std::uint64_t, DirectoryEntry>;

enum class FlushKind { kCopyOnWrite, kMicroLog };

inline SlotHeader read_slot_header(ByteSpan image, const PageStoreConfig& config,
                                   std::uint32_t slot)
{
  const std::uint64_t at = config.slot_offset(slot);
  return SlotHeader{load_le<std::uint64_t>(image, at), load_le<std::uint64_t>(image, at + 8)};
}

inline MicroLogHeader read_mulog_header(ByteSpan image, const PageStoreConfig& config,
                                        std::uint32_t index)
{
  const std::uint64_t at = config.mulog_offset(index);
  return MicroLogHeader{load_le<std::uint64_t>(image, at), load_le<std::uint64_t>(image, at + 8),
                        load_le<std::uint32_t>(image, at + 16)};
}

// Read-only recovery: locates every page and the micro-logs that still apply.
inline PageStoreScan scan_page_store(ByteSpan image, const PageStoreConfig& config)
{
  config.validate();
  if (config.required_capacity() > image.size()) {
    throw Error(Errc::kOutOfRange, "page store exceeds image");
  }
  PageStoreScan scan;
  scan.slots.reserve(config.slot_count);
  for (std::uint32_t slot = 0; slot < config.slot_count; ++slot) {
    const SlotHeader header = read_slot_header(image, config, slot);
    scan.slots.push_back(header);
    if (!header.valid()) continue;
    auto [it, inserted] = scan.pages.try_emplace(header.pid);
    RecoveredPage& page = it->second;
    if (inserted || header.pvn > page.pvn) {
      page.slot = slot;
      page.pvn = header.pvn;
      page.slot_pvn = header.pvn;
    }
  }
  // Two slots claiming the newest version of one page cannot be told apart.
  for (std::uint32_t slot = 0; slot < config.slot_count; ++slot) {
    const SlotHeader& header = scan.slots[slot];
    if (!header.valid()) continue;
    const RecoveredPage& page = scan.pages.at(header.pid);
    if (page.slot != slot && page.pvn == header.pvn) {
      throw Error(Errc::kCorruption, "slots " + std::to_string(page.slot) + " and " +
                                         std::to_string(slot) + " both hold pid " +
                                         std::to_string(header.pid) + " pvn " +
                                         std::to_string(header.pvn));
    }
  }

  struct Pending {
    std::uint32_t index;
    MicroLogHeader header;
  };
  std::vector<Pending> valid;
  for (std::uint32_t index = 0; index < config.mulog_count; ++index) {
    const MicroLogHeader header = read_mulog_header(image, config, index);
    if (header.pid == 0) continue;
    if (header.count == 0 || header.count > config.page_lines()) {
      throw Error(Errc::kCorruption, "micro-log " + std::to_string(index) + " has bad count");
    }
    const std::uint64_t offsets = config.mulog_offset(index) + kMicroLogHeaderSize;
    std::int64_t previous = -1;
    for (std::uint32_t i = 0; i < header.count; ++i) {
      const auto line = load_le<std::uint16_t>(image, offsets + 2 * i);
      if (line <= previous || line >= config.page_lines()) {
        throw Error(Errc::kCorruption, "micro-log " + std::to_string(index) + " has bad offsets");
      }
      previous = line;
    }
    valid.push_back(Pending{index, header});
  }
  std::sort(valid.begin(), valid.end(), [](const Pending& a, const Pending& b) {
    return a.header.pvn != b.header.pvn ? a.header.pvn < b.header.pvn : a.index < b.index;
  });
  for (const Pending& log : valid) {
    auto it = scan.pages.find(log.header.pid);
    if (it == scan.pages.end()) continue;
    RecoveredPage& page = it->second;
    // pvn == page.pvn: the in-place write may be torn behind an already durable
    // slot pvn; reapplying is idempotent.
    if (log.header.pvn == page.pvn || log.header.pvn == page.pvn + 1) {
      page.mulogs.push_back(log.index);
      page.pvn = log.header.pvn;
    }
  }

  for (std::uint32_t slot = 0; slot < config.slot_count; ++slot) {
    const SlotHeader& header = scan.slots[slot];
    if (!header.valid() || scan.pages.at(header.pid).slot != slot) {
      scan.free_slots.push_back(slot);
    }
  }
  return scan;
}

// Visits the recovered image of `page` one 64-byte line at a time.
template <class Visit>
inline void for_each_recovered_line(ByteSpan image, const PageStoreConfig& config,
                                    const RecoveredPage& page, Visit&& visit)
{
  // Source of each line: slot data, or the last micro-log that covers it.
  std::array<std::uint64_t, kMaxPageLines> source{};
  const std::uint64_t data = config.slot_offset(page.slot) + kSlotHeaderSize;
  for (std::uint64_t line = 0; line < config.page_lines(); ++line) {
    source[line] = data + line * kCacheLineSize;
  }
  for (std::uint32_t index : page.mulogs) {
    const std::uint64_t base = config.mulog_offset(index);
    const auto count = load_le<std::uint32_t>(image, base + 16);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto line = load_le<std::uint16_t>(image, base + kMicroLogHeaderSize + 2 * i);
      source[line] =
          base + kMicroLogHeaderSize + kMicroLogOffsetsSize + std::uint64_t{i} * kCacheLineSize;
    }
  }
  for (std::uint64_t line = 0; line < config.page_lines(); ++line) {
    if (!visit(line, image.subspan(source[line], kCacheLineSize))) return;
  }
}

inline Bytes materialize_page(ByteSpan image, const PageStoreConfig& config,
                              const RecoveredPage& page)
{
  Bytes out(config.page_size);
  for_each_recovered_line(image, config, page, [&](std::uint64_t line, ByteSpan bytes) {
    std::memcpy(out.data() + line * kCacheLineSize, bytes.data(), kCacheLineSize);
    return true;
  });
  return out;
}

inline bool recovered_page_equals(ByteSpan image, const PageStoreConfig& config,
                                  const RecoveredPage& page, ByteSpan expected)
{
  if (expected.size() != config.page_size) return false;
  const std::byte* data = image.data() + config.slot_offset(page.slot) + kSlotHeaderSize;
  if (page.mulogs.empty()) return std::memcmp(data, expected.data(), config.page_size) == 0;
  auto line_at = [&](const std::byte* offsets, std::uint32_t i) {
    return std::uint64_t{std::to_integer<unsigned>(offsets[2 * i]) |
                         std::to_integer<unsigned>(offsets[2 * i + 1]) << 8};
  };
  if (page.mulogs.size() == 1) {
    // Offsets are strictly increasing: alternate slot runs and log runs.
    const std::uint64_t base = config.mulog_offset(page.mulogs[0]);
    const auto count = load_le<std::uint32_t>(image, base + 16);
    const std::byte* offsets = image.data() + base + kMicroLogHeaderSize;
    const std::byte* lines = offsets + kMicroLogOffsetsSize;
    auto same = [&](const std::byte* from, std::uint64_t line, std::uint64_t n) {
      return std::memcmp(from, expected.data() + line * kCacheLineSize, n * kCacheLineSize) == 0;
    };
    std::uint64_t next = 0;
    for (std::uint32_t i = 0; i < count;) {
      const std::uint64_t first = line_at(offsets, i);
      std::uint32_t j = i + 1;
      while (j < count && line_at(offsets, j) == first + (j - i)) ++j;
      if (!same(data + next * kCacheLineSize, next, first - next)) return false;
      if (!same(lines + std::uint64_t{i} * kCacheLineSize, first, j - i)) return false;
      next = first + (j - i);
      i = j;
    }
    return same(data + next * kCacheLineSize, next, config.page_lines() - next);
  }
  // Source of every line; runs that are contiguous in both the image and the
  // page compare with a single memcmp.
  std::array<const std::byte*, kMaxPageLines> source;
  const std::uint64_t total = config.page_lines();
  for (std::uint64_t line = 0; line < total; ++line) source[line] = data + line * kCacheLineSize;
  for (std::uint32_t index : page.mulogs) {
    const std::uint64_t base = config.mulog_offset(index);
    const auto count = load_le<std::uint32_t>(image, base + 16);
    const std::byte* offsets = image.data() + base + kMicroLogHeaderSize;
    const std::byte* lines = offsets + kMicroLogOffsetsSize;
    for (std::uint32_t i = 0; i < count; ++i) {
      source[line_at(offsets, i)] = lines + std::uint64_t{i} * kCacheLineSize;
    }
  }
  std::uint64_t start = 0;
  for (std::uint64_t line = 1; line <= total; ++line) {
    if (line < total && source[line] == source[line - 1] + kCacheLineSize) continue;
    const std::uint64_t from = start * kCacheLineSize;
    if (std::memcmp(source[start], expected.data() + from, (line - start) * kCacheLineSize) != 0) {
      return false;
    }
    start = line;
  }
  return true;
}

inline Directory recover_directory(ByteSpan image, const PageStoreConfig& config)
{
  const PageStoreScan scan = scan_page_store(image, config);
  Directory directory;
  for (const auto& [pid, page] : scan.pages) {
    directory.emplace(pid, DirectoryEntry{page.slot, page.pvn, materialize_page(image, config, page)});
  }
  return directory;
}

class PageStore {
 public:
  // Fresh, zeroed region.
  static PageStore create(Device& device, const PageStoreConfig& config)
  {
    config.validate();
    if (config.required_capacity() > device.capacity()) {
      throw Error(Errc::kOutOfRange, "page store needs " + std::to_string(config.required_capacity()) +
                                         " bytes, device has " + std::to_string(device.capacity()));
    }
    PageStore store(device, config);
    for (std::uint32_t slot = 0; slot < config.slot_count; ++slot) {
      const SlotHeader header = read_slot_header(device.view(), config, slot);
      if (header.valid()) {
        throw Error(Errc::kInvalidArgument, "region already holds pages; recover it instead");
      }
      store.slots_.push_back(header);
      store.free_.push_back(slot);
    }
    return store;
  }

  // Scans all slot headers, reapplies valid micro-logs in place and returns the
  // resulting directory.
  static std::pair<PageStore, Directory> recover(Device& device, const PageStoreConfig& config)
  {
    config.validate();
    if (config.required_capacity() > device.capacity()) {
      throw Error(Errc::kOutOfRange, "page store exceeds device capacity");
    }
    const PageStoreScan scan = scan_page_store(device.view(), config);
    PageStore store(device, config);
    store.slots_ = scan.slots;
    store.free_ = scan.free_slots;
    Directory directory;
    for (const auto& [pid, page] : scan.pages) {
      Bytes image = materialize_page(device.view(), config, page);
      if (!page.mulogs.empty()) {
        store.write_in_place(page.slot, image, page.pvn);
      }
      store.pages_[pid] = Location{page.slot, page.pvn};
      directory.emplace(pid, DirectoryEntry{page.slot, page.pvn, std::move(image)});
    }
    return {std::move(store), std::move(directory)};
  }

  const PageStoreConfig& config() const { return config_; }

  // Copy-on-write flush: image into a free slot, then validate its header.
  // Two fences; the previous slot is released after the second.
  void flush_cow(std::uint64_t pid, ByteSpan image)
  {
    check_page(pid, image);
    std::uint32_t slot = 0;
    std::uint64_t current_pvn = 0;
    std::optional<std::uint32_t> previous;
    bool collides = false;
    {
      std::lock_guard lock(*mutex_);
      if (auto it = pages_.find(pid); it != pages_.end()) {
        current_pvn = it->second.pvn;
        previous = it->second.slot;
      }
      if (free_.empty()) {
        throw Error(Errc::kNoFreeSlot, "no free page slot for pid " + std::to_string(pid));
      }
      // Storing the pid first briefly yields (pid, stale pvn); a stale pvn equal
      // to the current one would make two slots claim the newest version.
      auto pick = std::find_if(free_.begin(), free_.end(), [&](std::uint32_t candidate) {
        return current_pvn == 0 || slots_[candidate].pvn != current_pvn;
      });
      if (pick == free_.end()) {
        pick = free_.begin();
        collides = true;
      }
      slot = *pick;
      free_.erase(pick);
    }
    const std::uint64_t new_pvn = current_pvn + 1;
    const std::uint64_t header = config_.slot_offset(slot);
    const std::uint64_t data = header + kSlotHeaderSize;
    const StoreFlavor flavor = config_.flavor;

    // 1. data
    flavored_store(*device_, flavor, data, image);
    flavored_write_back(*device_, flavor, data, image.size());
    if (collides) {
      store_u64(header + 8, 0);
    }
    device_->fence();
    // 2. header: pid, then pvn, ordered on the same line
    store_u64(header, pid);
    store_u64(header + 8, new_pvn);
    flavored_write_back(*device_, flavor, header, 16);
    device_->fence();

    std::lock_guard lock(*mutex_);
    slots_[slot] = SlotHeader{pid, new_pvn};
    pages_[pid] = Location{slot, new_pvn};
    if (previous) {
      free_.insert(std::upper_bound(free_.begin(), free_.end(), *previous), *previous);
    }
  }

  // Delta flush through the flusher's micro-log. Four fences.
  void flush_mulog(std::uint32_t flusher, std::uint64_t pid, ByteSpan image,
                   const DirtyMask& dirty)
  {
    check_page(pid, image);
    if (flusher >= config_.mulog_count) {
      throw Error(Errc::kInvalidArgument, "flusher " + std::to_string(flusher) +
                                              " has no micro-log");
    }
    const std::vector<std::uint16_t> lines = dirty.lines();
    if (lines.empty()) {
      throw Error(Errc::kInvalidArgument, "dirty mask is empty");
    }
    if (lines.back() >= config_.page_lines()) {
      throw Error(Errc::kInvalidArgument, "dirty line beyond page end");
    }
    Location location;
    {
      std::lock_guard lock(*mutex_);
      auto it = pages_.find(pid);
      if (it == pages_.end()) {
        throw Error(Errc::kUnknownPage, "pid " + std::to_string(pid) + " has no slot");
      }
      location = it->second;
    }
    const std::uint64_t new_pvn = location.pvn + 1;
    const StoreFlavor flavor = config_.flavor;
    const std::uint64_t log = config_.mulog_offset(flusher);
    const std::uint64_t offsets = log + kMicroLogHeaderSize;
    const std::uint64_t log_data = offsets + kMicroLogOffsetsSize;
    const std::uint64_t slot_header = config_.slot_offset(location.slot);
    const std::uint64_t slot_data = slot_header + kSlotHeaderSize;
    const auto count = static_cast<std::uint32_t>(lines.size());

    // 1. invalidate
    store_u64(log, 0);
    flavored_write_back(*device_, flavor, log, 8);
    device_->fence();

    // 2. fill
    store_u64(log + 8, new_pvn);
    flavored_store(*device_, flavor, log + 16, le_bytes<std::uint32_t>(count));
    Bytes packed(2 * lines.size());
    for (std::size_t i = 0; i < lines.size(); ++i) {
      store_le<std::uint16_t>(packed, 2 * i, lines[i]);
    }
    flavored_store(*device_, flavor, offsets, packed);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      flavored_store(*device_, flavor, log_data + i * kCacheLineSize,
                     image.subspan(std::size_t{lines[i]} * kCacheLineSize, kCacheLineSize));
    }
    flavored_write_back(*device_, flavor, log, kMicroLogHeaderSize);
    flavored_write_back(*device_, flavor, offsets, packed.size());
    flavored_write_back(*device_, flavor, log_data, lines.size() * kCacheLineSize);
    device_->fence();

    // 3. validate
    store_u64(log, pid);
    flavored_write_back(*device_, flavor, log, 8);
    device_->fence();

    // 4. apply in place
    for (std::uint16_t line : lines) {
      const std::uint64_t at = std::uint64_t{line} * kCacheLineSize;
      flavored_store(*device_, flavor, slot_data + at, image.subspan(at, kCacheLineSize));
      flavored_write_back(*device_, flavor, slot_data + at, kCacheLineSize);
    }
    store_u64(slot_header + 8, new_pvn);
    flavored_write_back(*device_, flavor, slot_header, 16);
    device_->fence();

    std::lock_guard lock(*mutex_);
    slots_[location.slot].pvn = new_pvn;
    pages_[pid].pvn = new_pvn;
  }

  FlushKind choose_flush(std::uint64_t pid, const DirtyMask& dirty) const
  {
    const std::uint32_t threshold = config_.mulog_count <= 1 ? config_.dirty_threshold_single
                                                             : config_.dirty_threshold_multi;
    std::lock_guard lock(*mutex_);
    if (dirty.count() < threshold && pages_.contains(pid)) {
      return FlushKind::kMicroLog;
    }
    return FlushKind::kCopyOnWrite;
  }

  FlushKind flush_hybrid(std::uint32_t flusher, std::uint64_t pid, ByteSpan image,
                         const DirtyMask& dirty)
  {
    const FlushKind kind = choose_flush(pid, dirty);
    if (kind == FlushKind::kMicroLog) {
      flush_mulog(flusher, pid, image, dirty);
    } else {
      flush_cow(pid, image);
    }
    return kind;
  }

  Bytes read_page(std::uint64_t pid) const
  {
    std::uint32_t slot;
    {
      std::lock_guard lock(*mutex_);
      auto it = pages_.find(pid);
      if (it == pages_.end()) {
        throw Error(Errc::kUnknownPage, "pid " + std::to_string(pid) + " is not stored");
      }
      slot = it->second.slot;
    }
    return device_->read(config_.slot_offset(slot) + kSlotHeaderSize, config_.page_size);
  }

  bool contains(std::uint64_t pid) const
  {
    std::lock_guard lock(*mutex_);
    return pages_.contains(pid);
  }

  std::uint64_t pvn(std::uint64_t pid) const { return location(pid).pvn; }
  std::uint32_t slot_of(std::uint64_t pid) const { return location(pid).slot; }

  std::vector<std::uint32_t> free_slots() const
  {
    std::lock_guard lock(*mutex_);
    return free_;
  }

 private:
  struct Location {
    std::uint32_t slot = 0;
    std::uint64_t pvn = 0;
  };

  PageStore(Device& device, const PageStoreConfig& config)
      : device_(&device), config_(config), mutex_(std::make_unique<std::mutex>())
  {
  }

  Location location(std::uint64_t pid) const
  {
    std::lock_guard lock(*mutex_);
    auto it = pages_.find(pid);
    if (it == pages_.end()) {
      throw Error(Errc::kUnknownPage, "pid " + std::to_string(pid) + " is not stored");
    }
    return it->second;
  }

  void check_page(std::uint64_t pid, ByteSpan image) const
  {
    if (pid == 0) {
      throw Error(Errc::kInvalidArgument, "pid 0 is reserved");
    }
    if (image.size() != config_.page_size) {
      throw Error(Errc::kInvalidArgument, "page image must be " + std::to_string(config_.page_size) +
                                              " bytes");
    }
  }

  void store_u64(std::uint64_t offset, std::uint64_t value)
  {
    flavored_store(*device_, config_.flavor, offset, le_bytes<std::uint64_t>(value));
  }

  void write_in_place(std::uint32_t slot, ByteSpan image, std::uint64_t pvn)
  {
    const std::uint64_t header = config_.slot_offset(slot);
    flavored_store(*device_, config_.flavor, header + kSlotHeaderSize, image);
    flavored_write_back(*device_, config_.flavor, header + kSlotHeaderSize, image.size());
    store_u64(header + 8, pvn);
    flavored_write_back(*device_, config_.flavor, header, 16);
    device_->fence();
    slots_[slot].pvn = pvn;
  }

  Device* device_;
  PageStoreConfig config_;
  std::unique_ptr<std::mutex> mutex_;
  std::vector<SlotHeader> slots_;
  std::vector<std::uint32_t> free_;
  std::map<std::uint64_t, Location> pages_;
};

}  // namespace pmemprims
