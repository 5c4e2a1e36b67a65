#pragma once

// Byte-addressable persistence region with an explicit durability contract.
//
// A Device exposes the four primitives a persistent-memory algorithm is built
// from: plain stores, streaming (non-temporal) stores, cache-line write-back and
// store fences. Content is durable only once it was written back (or streamed)
// and a later fence completed.
//
// Two backends share one interface:
//   * simulated: an in-memory region that records every primitive into an
//     EventTrace, which the crash checker turns into crash images;
//   * real: a memory-mapped file. write_back/fence map onto cache-line flush
//     instructions on DAX mappings and onto msync elsewhere.

#include <pmemprims/bytes.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <unordered_map>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#if defined(__x86_64__) || defined(__i386__)
#include <cpuid.h>
#include <immintrin.h>
#define PMEMPRIMS_X86 1
#endif

#ifndef MAP_SHARED_VALIDATE
#define MAP_SHARED_VALIDATE 0x03
#endif
#ifndef MAP_SYNC
#define MAP_SYNC 0x80000
#endif

namespace pmemprims {

enum class Backend { kReal, kSimulated };

// How write_back/fence reach the media on the real backend.
enum class Durability { kAuto, kCacheLineFlush, kFileSync };

enum class StatsLevel { kNone, kCounters, kDetailed };

struct DeviceConfig {
  static constexpr std::uint64_t cache_line_size = kCacheLineSize;
  static constexpr std::uint64_t block_size = kBlockSize;

  std::uint64_t capacity = 0;
  Backend backend = Backend::kSimulated;
  Durability durability = Durability::kAuto;
  // Real-backend throughput runs turn this down; the simulated backend always
  // keeps full statistics.
  StatsLevel stats_level = StatsLevel::kDetailed;
  bool record_trace = true;

  void validate() const
  {
    if (capacity == 0 || capacity % block_size != 0) {
      throw Error(Errc::kInvalidConfig,
                  "capacity " + std::to_string(capacity) + " is not a positive multiple of " +
                      std::to_string(block_size));
    }
  }
};

enum class EventKind : std::uint8_t { kStore, kStreamingStore, kWriteBack, kFence };

inline const char* event_kind_name(EventKind kind)
{
  switch (kind) {
    case EventKind::kStore: return "Store";
    case EventKind::kStreamingStore: return "StreamingStore";
    case EventKind::kWriteBack: return "WriteBack";
    case EventKind::kFence: return "Fence";
  }
  return "?";
}

struct Event {
  EventKind kind = EventKind::kFence;
  // 1-based; 0 denotes "before the trace".
  std::uint64_t seq = 0;
  std::uint64_t offset = 0;
  std::uint8_t len = 0;
  std::array<std::byte, kStoreUnit> payload{};

  ByteSpan bytes() const { return ByteSpan(payload.data(), len); }
  bool is_store() const { return kind == EventKind::kStore || kind == EventKind::kStreamingStore; }
  std::uint64_t line() const { return offset / kCacheLineSize; }
};

using EventTrace = std::vector<Event>;

struct DeviceStats {
  std::uint64_t barriers = 0;
  std::uint64_t lines_written_back = 0;
  std::uint64_t distinct_blocks_touched = 0;
  std::uint64_t bytes_stored = 0;
  std::uint64_t repeat_persist_lines = 0;

  friend bool operator==(const DeviceStats&, const DeviceStats&) = default;

  // Counter deltas between two snapshots taken without an intervening reset.
  friend DeviceStats operator-(const DeviceStats& a, const DeviceStats& b)
  {
    return DeviceStats{a.barriers - b.barriers, a.lines_written_back - b.lines_written_back,
                       a.distinct_blocks_touched - b.distinct_blocks_touched,
                       a.bytes_stored - b.bytes_stored,
                       a.repeat_persist_lines - b.repeat_persist_lines};
  }
};

enum class DurabilityMapping { kSimulated, kClwb, kClflushOpt, kClflush, kMsync };

inline const char* durability_mapping_name(DurabilityMapping mapping)
{
  switch (mapping) {
    case DurabilityMapping::kSimulated: return "simulated";
    case DurabilityMapping::kClwb: return "clwb+sfence";
    case DurabilityMapping::kClflushOpt: return "clflushopt+sfence";
    case DurabilityMapping::kClflush: return "clflush+sfence";
    case DurabilityMapping::kMsync: return "msync";
  }
  return "?";
}

namespace detail {

inline DurabilityMapping best_cache_flush()
{
#if defined(PMEMPRIMS_X86)
  unsigned eax = 0, ebx = 0, ecx = 0, edx = 0;
  if (__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) {
    if (ebx & (1u << 24)) return DurabilityMapping::kClwb;
    if (ebx & (1u << 23)) return DurabilityMapping::kClflushOpt;
  }
  if (__get_cpuid(1, &eax, &ebx, &ecx, &edx) && (edx & (1u << 19))) {
    return DurabilityMapping::kClflush;
  }
#endif
  return DurabilityMapping::kMsync;
}

inline void flush_line(DurabilityMapping mapping, const void* address)
{
#if defined(PMEMPRIMS_X86)
  auto* p = const_cast<char*>(static_cast<const char*>(address));
  switch (mapping) {
    case DurabilityMapping::kClwb:
      asm volatile(".byte 0x66; xsaveopt %0" : "+m"(*p));
      break;
    case DurabilityMapping::kClflushOpt:
      asm volatile(".byte 0x66; clflush %0" : "+m"(*p));
      break;
    case DurabilityMapping::kClflush:
      _mm_clflush(p);
      break;
    default:
      break;
  }
#else
  (void)mapping;
  (void)address;
#endif
}

inline void store_fence()
{
#if defined(PMEMPRIMS_X86)
  _mm_sfence();
#else
  std::atomic_thread_fence(std::memory_order_seq_cst);
#endif
}

// Visits [offset, offset+len) in pieces that never cross an 8-byte boundary.
template <class F>
inline void for_each_store_unit(std::uint64_t offset, std::uint64_t len, F&& visit)
{
  std::uint64_t pos = offset;
  const std::uint64_t end = offset + len;
  while (pos < end) {
    const std::uint64_t next = std::min(end, round_down(pos, kStoreUnit) + kStoreUnit);
    visit(pos, next - pos);
    pos = next;
  }
}

}  // namespace detail

class Device {
 public:
  // Opens a fresh or existing region. Real-backend files are created zero-filled;
  // an existing file of exactly `capacity` bytes is reopened with its content.
  static Device open(const DeviceConfig& config,
                     std::optional<std::filesystem::path> path = std::nullopt)
  {
    config.validate();
    auto impl = std::make_unique<Impl>();
    impl->config = config;
    if (config.backend == Backend::kSimulated) {
      impl->memory.assign(config.capacity, std::byte{0});
      impl->data = impl->memory.data();
      impl->mapping = DurabilityMapping::kSimulated;
      impl->config.stats_level = StatsLevel::kDetailed;
      if (config.record_trace) {
        impl->trace.emplace();
      }
    } else {
      if (!path) {
        throw Error(Errc::kFileUnavailable, "real backend requires a file path");
      }
      impl->map_file(*path);
    }
    impl->blocks.assign((config.capacity / kBlockSize + 63) / 64, 0);
    if (const char* report = std::getenv("PMEMPRIMS_BACKEND_REPORT");
        report != nullptr && std::string_view(report) == "1") {
      std::fprintf(stderr, "pmemprims: backend=%s capacity=%llu durability=%s\n",
                   config.backend == Backend::kReal ? "real" : "simulated",
                   static_cast<unsigned long long>(config.capacity),
                   durability_mapping_name(impl->mapping));
    }
    return Device(std::move(impl));
  }

  // Simulated device preloaded with `image` (used for recovery of fixtures and
  // crash images). The trace starts empty.
  static Device from_image(ByteSpan image)
  {
    DeviceConfig config;
    config.capacity = round_up(std::max<std::uint64_t>(image.size(), 1), kBlockSize);
    Device device = open(config);
    std::memcpy(device.impl_->data, image.data(), image.size());
    return device;
  }

  Device(Device&&) noexcept = default;
  Device& operator=(Device&&) noexcept = default;
  ~Device() = default;

  const DeviceConfig& config() const { return impl_->config; }
  std::uint64_t capacity() const { return impl_->config.capacity; }
  Backend backend() const { return impl_->config.backend; }
  DurabilityMapping durability_mapping() const { return impl_->mapping; }

  void store(std::uint64_t offset, ByteSpan bytes) { impl_->store(offset, bytes, false); }
  void store_streaming(std::uint64_t offset, ByteSpan bytes) { impl_->store(offset, bytes, true); }

  template <class T>
  void store_value(std::uint64_t offset, T value, bool streaming = false)
  {
    const auto bytes = le_bytes<T>(value);
    impl_->store(offset, bytes, streaming);
  }

  void write_back(std::uint64_t offset) { impl_->write_back(offset); }

  // write_back of every line covering [offset, offset+len), no fence.
  void write_back_range(std::uint64_t offset, std::uint64_t len)
  {
    impl_->check_range(offset, len);
    if (len == 0) return;
    for (std::uint64_t line = round_down(offset, kCacheLineSize); line < offset + len;
         line += kCacheLineSize) {
      impl_->write_back(line);
    }
  }

  void fence() { impl_->fence(); }

  void persist(std::uint64_t offset, std::uint64_t len)
  {
    write_back_range(offset, len);
    fence();
  }

  Bytes read(std::uint64_t offset, std::uint64_t len) const
  {
    impl_->check_range(offset, len);
    return Bytes(impl_->data + offset, impl_->data + offset + len);
  }

  template <class T>
  T read_value(std::uint64_t offset) const
  {
    impl_->check_range(offset, sizeof(T));
    return load_le<T>(view(), offset);
  }

  // Volatile view of the whole region.
  ByteSpan view() const { return ByteSpan(impl_->data, impl_->config.capacity); }
  std::span<std::byte> mutable_view() { return {impl_->data, impl_->config.capacity}; }

  DeviceStats stats() const { return impl_->snapshot(); }
  void reset_stats() { impl_->reset_stats(); }

  const EventTrace& trace() const
  {
    if (!impl_->trace) {
      throw Error(Errc::kWrongBackend, "event trace is only recorded by the simulated backend");
    }
    return *impl_->trace;
  }

  void clear_trace()
  {
    if (!impl_->trace) {
      throw Error(Errc::kWrongBackend, "event trace is only recorded by the simulated backend");
    }
    impl_->trace->clear();
    impl_->next_seq = 1;
  }

 private:
  struct Impl {
    DeviceConfig config;
    Bytes memory;
    std::byte* data = nullptr;
    int fd = -1;
    DurabilityMapping mapping = DurabilityMapping::kSimulated;
    std::optional<EventTrace> trace;
    std::uint64_t next_seq = 1;

    std::atomic<std::uint64_t> barriers{0};
    std::atomic<std::uint64_t> lines_written_back{0};
    std::atomic<std::uint64_t> bytes_stored{0};
    std::atomic<std::uint64_t> epoch{0};

    std::mutex detail_mutex;
    std::vector<std::uint64_t> blocks;
    std::uint64_t distinct_blocks = 0;
    std::unordered_map<std::uint64_t, std::uint64_t> line_epoch;
    std::uint64_t repeat_lines = 0;
    std::set<std::uint64_t> pending_sync_lines;

    Impl() = default;
    Impl(const Impl&) = delete;
    Impl& operator=(const Impl&) = delete;

    ~Impl()
    {
      if (fd >= 0) {
        ::munmap(data, config.capacity);
        ::close(fd);
      }
    }

    void map_file(const std::filesystem::path& path)
    {
      fd = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
      if (fd < 0) {
        throw Error(Errc::kFileUnavailable, "cannot open " + path.string());
      }
      struct stat st {};
      if (::fstat(fd, &st) != 0) {
        ::close(fd);
        fd = -1;
        throw Error(Errc::kFileUnavailable, "cannot stat " + path.string());
      }
      if (static_cast<std::uint64_t>(st.st_size) != config.capacity) {
        if (st.st_size != 0) {
          ::close(fd);
          fd = -1;
          throw Error(Errc::kFileUnavailable,
                      path.string() + " exists with size " + std::to_string(st.st_size) +
                          ", expected " + std::to_string(config.capacity));
        }
        if (::ftruncate(fd, static_cast<off_t>(config.capacity)) != 0) {
          ::close(fd);
          fd = -1;
          throw Error(Errc::kFileUnavailable, "cannot size " + path.string());
        }
      }
      void* addr = MAP_FAILED;
      bool dax = false;
      if (config.durability != Durability::kFileSync) {
        addr = ::mmap(nullptr, config.capacity, PROT_READ | PROT_WRITE,
                      MAP_SHARED_VALIDATE | MAP_SYNC, fd, 0);
        dax = addr != MAP_FAILED;
      }
      if (addr == MAP_FAILED) {
        addr = ::mmap(nullptr, config.capacity, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
      }
      if (addr == MAP_FAILED) {
        ::close(fd);
        fd = -1;
        throw Error(Errc::kFileUnavailable, "cannot map " + path.string());
      }
      data = static_cast<std::byte*>(addr);
      switch (config.durability) {
        case Durability::kAuto:
          mapping = dax ? detail::best_cache_flush() : DurabilityMapping::kMsync;
          break;
        case Durability::kCacheLineFlush:
          mapping = detail::best_cache_flush();
          break;
        case Durability::kFileSync:
          mapping = DurabilityMapping::kMsync;
          break;
      }
    }

    bool is_sim() const { return config.backend == Backend::kSimulated; }

    void check_range(std::uint64_t offset, std::uint64_t len) const
    {
      if (offset > config.capacity || len > config.capacity - offset) {
        throw Error(Errc::kOutOfRange, "range [" + std::to_string(offset) + ", +" +
                                           std::to_string(len) + ") exceeds capacity " +
                                           std::to_string(config.capacity));
      }
    }

    void store(std::uint64_t offset, ByteSpan bytes, bool streaming)
    {
      check_range(offset, bytes.size());
      if (offset == config.capacity) {
        throw Error(Errc::kOutOfRange, "store at end of region");
      }
      if (bytes.empty()) return;
      if (is_sim()) {
        detail::for_each_store_unit(offset, bytes.size(), [&](std::uint64_t pos, std::uint64_t n) {
          std::memcpy(data + pos, bytes.data() + (pos - offset), n);
          if (trace) {
            Event event;
            event.kind = streaming ? EventKind::kStreamingStore : EventKind::kStore;
            event.seq = next_seq++;
            event.offset = pos;
            event.len = static_cast<std::uint8_t>(n);
            std::memcpy(event.payload.data(), bytes.data() + (pos - offset), n);
            trace->push_back(event);
          }
        });
      } else if (streaming) {
        store_streaming_real(offset, bytes);
      } else {
        std::memcpy(data + offset, bytes.data(), bytes.size());
      }
      note_store(offset, bytes.size(), streaming);
    }

    void store_streaming_real(std::uint64_t offset, ByteSpan bytes)
    {
      detail::for_each_store_unit(offset, bytes.size(), [&](std::uint64_t pos, std::uint64_t n) {
        const std::byte* src = bytes.data() + (pos - offset);
#if defined(PMEMPRIMS_X86)
        if (n == kStoreUnit && mapping != DurabilityMapping::kMsync) {
          long long word;
          std::memcpy(&word, src, sizeof(word));
          _mm_stream_si64(reinterpret_cast<long long*>(data + pos), word);
          return;
        }
#endif
        // Partial units have no non-temporal form; write back the line instead
        // so the next fence still covers them.
        std::memcpy(data + pos, src, n);
        raw_write_back(round_down(pos, kCacheLineSize));
      });
    }

    void raw_write_back(std::uint64_t line_offset)
    {
      if (mapping == DurabilityMapping::kMsync) {
        std::lock_guard lock(detail_mutex);
        pending_sync_lines.insert(line_offset / kCacheLineSize);
      } else {
        detail::flush_line(mapping, data + line_offset);
      }
    }

    void write_back(std::uint64_t offset)
    {
      check_range(offset, 1);
      const std::uint64_t line_offset = round_down(offset, kCacheLineSize);
      if (is_sim()) {
        if (trace) {
          Event event;
          event.kind = EventKind::kWriteBack;
          event.seq = next_seq++;
          event.offset = line_offset;
          trace->push_back(event);
        }
      } else {
        raw_write_back(line_offset);
      }
      if (config.stats_level != StatsLevel::kNone) {
        lines_written_back.fetch_add(1, std::memory_order_relaxed);
        if (config.stats_level == StatsLevel::kDetailed) {
          std::lock_guard lock(detail_mutex);
          note_persist_intent(line_offset / kCacheLineSize);
        }
      }
    }

    void fence()
    {
      if (is_sim()) {
        if (trace) {
          Event event;
          event.kind = EventKind::kFence;
          event.seq = next_seq++;
          trace->push_back(event);
        }
      } else {
        detail::store_fence();
        if (mapping == DurabilityMapping::kMsync) {
          sync_pending();
        }
      }
      epoch.fetch_add(1, std::memory_order_relaxed);
      if (config.stats_level != StatsLevel::kNone) {
        barriers.fetch_add(1, std::memory_order_relaxed);
      }
    }

    void sync_pending()
    {
      std::set<std::uint64_t> lines;
      {
        std::lock_guard lock(detail_mutex);
        lines.swap(pending_sync_lines);
      }
      const auto page = static_cast<std::uint64_t>(::sysconf(_SC_PAGESIZE));
      std::uint64_t run_begin = 0;
      std::uint64_t run_end = 0;
      auto flush_run = [&] {
        if (run_end > run_begin) {
          ::msync(data + run_begin, run_end - run_begin, MS_SYNC);
        }
      };
      for (std::uint64_t line : lines) {
        const std::uint64_t begin = round_down(line * kCacheLineSize, page);
        const std::uint64_t end = std::min(begin + page, config.capacity);
        if (begin <= run_end && run_end > run_begin) {
          run_end = std::max(run_end, end);
        } else {
          flush_run();
          run_begin = begin;
          run_end = end;
        }
      }
      flush_run();
    }

    void note_store(std::uint64_t offset, std::uint64_t len, bool streaming)
    {
      if (config.stats_level == StatsLevel::kNone) return;
      bytes_stored.fetch_add(len, std::memory_order_relaxed);
      if (config.stats_level != StatsLevel::kDetailed) return;
      std::lock_guard lock(detail_mutex);
      for (std::uint64_t block = offset / kBlockSize; block <= (offset + len - 1) / kBlockSize;
           ++block) {
        const std::uint64_t bit = 1ull << (block % 64);
        if ((blocks[block / 64] & bit) == 0) {
          blocks[block / 64] |= bit;
          ++distinct_blocks;
        }
      }
      if (streaming) {
        for (std::uint64_t line = offset / kCacheLineSize;
             line <= (offset + len - 1) / kCacheLineSize; ++line) {
          note_persist_intent(line);
        }
      }
    }

    // A line persisted (written back or streamed) in a new fence epoch after an
    // earlier one counts as one repeat.
    void note_persist_intent(std::uint64_t line)
    {
      const std::uint64_t now = epoch.load(std::memory_order_relaxed);
      auto [it, inserted] = line_epoch.try_emplace(line, now);
      if (!inserted && it->second != now) {
        ++repeat_lines;
        it->second = now;
      }
    }

    DeviceStats snapshot()
    {
      DeviceStats stats;
      stats.barriers = barriers.load(std::memory_order_relaxed);
      stats.lines_written_back = lines_written_back.load(std::memory_order_relaxed);
      stats.bytes_stored = bytes_stored.load(std::memory_order_relaxed);
      std::lock_guard lock(detail_mutex);
      stats.distinct_blocks_touched = distinct_blocks;
      stats.repeat_persist_lines = repeat_lines;
      return stats;
    }

    void reset_stats()
    {
      barriers = 0;
      lines_written_back = 0;
      bytes_stored = 0;
      std::lock_guard lock(detail_mutex);
      std::fill(blocks.begin(), blocks.end(), 0);
      distinct_blocks = 0;
      line_epoch.clear();
      repeat_lines = 0;
    }
  };

  explicit Device(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

  std::unique_ptr<Impl> impl_;
};

// Store flavor used by the higher-level primitives.
enum class StoreFlavor { kPlainWriteBack, kStreaming };

// Writes `bytes` with the chosen flavor; durability still needs make_durable.
inline void flavored_store(Device& device, StoreFlavor flavor, std::uint64_t offset,
                           ByteSpan bytes)
{
  if (flavor == StoreFlavor::kStreaming) {
    device.store_streaming(offset, bytes);
  } else {
    device.store(offset, bytes);
  }
}

// Streamed lines need no write-back before the fence.
inline void flavored_write_back(Device& device, StoreFlavor flavor, std::uint64_t offset,
                                std::uint64_t len)
{
  if (flavor == StoreFlavor::kPlainWriteBack) {
    device.write_back_range(offset, len);
  }
}

}  // namespace pmemprims
