#pragma once

// Failure-atomic append-only logs.
//
// On-media layouts (little-endian, offsets relative to the log region):
//
//   Classic      Entry = {lsn u64, payload_len u32, pad u32} payload {lsn u64}
//                aligned: footer on the next line boundary after the payload,
//                next entry on the next line boundary after the footer.
//   Header       line 0 = {size u64}; entries from offset 64;
//                Entry = {lsn u64, payload_len u32, pad u32} payload
//   HeaderDance  k size lines at 0, 64, .., (k-1)*64; entries from k*64;
//                append with lsn n updates size line (n-1) mod k; size = max.
//   Zero         Entry = {lsn u64, payload_len u32, pad u32, pop_cnt u64} payload
//                pop_cnt counts the set bits of the entry with pop_cnt as zero.
//
// Header variants store `size` = bytes of valid entries after the size lines.
// Aligned Header/Zero entries are padded to a multiple of 64 bytes.

#include <pmemprims/device.hpp>

#include <algorithm>
#include <limits>
#include <optional>
#include <string_view>

namespace pmemprims {

enum class LogAlgo { kClassic, kHeader, kHeaderDance, kZero };

inline const char* log_algo_name(LogAlgo algo)
{
  switch (algo) {
    case LogAlgo::kClassic: return "classic";
    case LogAlgo::kHeader: return "header";
    case LogAlgo::kHeaderDance: return "header-dance";
    case LogAlgo::kZero: return "zero";
  }
  return "?";
}

inline std::optional<LogAlgo> parse_log_algo(std::string_view name)
{
  if (name == "classic") return LogAlgo::kClassic;
  if (name == "header") return LogAlgo::kHeader;
  if (name == "header-dance" || name == "dance") return LogAlgo::kHeaderDance;
  if (name == "zero") return LogAlgo::kZero;
  return std::nullopt;
}

// Deliberately broken variants, used to show the crash checker catches them.
enum class LogFault {
  kNone,
  kSkipFirstBarrier,   // no fence between the entry body and its commit record
  kSkipValidityCheck,  // Zero recovery trusts the lsn without the popcount
};

struct LogRegion {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct LogOptions {
  LogAlgo algo = LogAlgo::kZero;
  bool aligned = false;
  std::uint32_t dance_k = 64;
  LogRegion region;
  StoreFlavor flavor = StoreFlavor::kStreaming;
  LogFault fault = LogFault::kNone;

  // Bytes reserved for size fields at the start of the region.
  std::uint64_t header_area() const
  {
    switch (algo) {
      case LogAlgo::kHeader: return kCacheLineSize;
      case LogAlgo::kHeaderDance: return std::uint64_t{dance_k} * kCacheLineSize;
      default: return 0;
    }
  }

  void validate() const
  {
    if (region.offset % kCacheLineSize != 0 || region.length % kCacheLineSize != 0 ||
        region.length == 0) {
      throw Error(Errc::kInvalidConfig, "log region must be non-empty and cache-line aligned");
    }
    if (algo == LogAlgo::kHeaderDance && dance_k == 0) {
      throw Error(Errc::kInvalidConfig, "dance_k must be at least 1");
    }
    if (header_area() >= region.length) {
      throw Error(Errc::kInvalidConfig, "log region too small for its size fields");
    }
  }
};

struct LogEntry {
  std::uint64_t lsn = 0;
  Bytes payload;

  friend bool operator==(const LogEntry&, const LogEntry&) = default;
};

struct RecoveredLog {
  std::vector<LogEntry> entries;
  std::uint64_t next_lsn = 1;
  // First free byte, relative to the region.
  std::uint64_t tail = 0;
};

inline constexpr std::uint64_t kBasicEntryHeader = 16;
inline constexpr std::uint64_t kZeroEntryHeader = 24;
inline constexpr std::uint64_t kClassicFooter = 8;
inline constexpr std::uint64_t kPopCountOffset = 16;

struct EntryPlacement {
  std::uint64_t start = 0;
  std::uint64_t header_size = 0;
  std::uint64_t footer = 0;  // Classic only
  std::uint64_t end = 0;     // start of the next entry
};

inline EntryPlacement place_entry(const LogOptions& options, std::uint64_t start,
                                  std::uint64_t payload_len)
{
  EntryPlacement p;
  p.start = start;
  p.header_size = options.algo == LogAlgo::kZero ? kZeroEntryHeader : kBasicEntryHeader;
  const std::uint64_t payload_end = start + p.header_size + payload_len;
  if (options.algo == LogAlgo::kClassic) {
    p.footer = options.aligned ? round_up(payload_end, kCacheLineSize) : payload_end;
    p.end = p.footer + kClassicFooter;
  } else {
    p.end = payload_end;
  }
  if (options.aligned) {
    p.end = round_up(p.end, kCacheLineSize);
  }
  return p;
}

// Set bits over the 24-byte Zero header (its pop_cnt field read as zero) and
// the payload.
inline std::uint64_t popcount_entry(ByteSpan header, ByteSpan payload)
{
  if (header.size() != kZeroEntryHeader) {
    throw Error(Errc::kInvalidArgument, "Zero entry header is 24 bytes");
  }
  return popcount_bytes(header.first(kPopCountOffset)) + popcount_bytes(payload);
}

namespace detail {

inline Bytes basic_entry_header(std::uint64_t lsn, std::uint64_t payload_len, std::size_t size)
{
  Bytes header(size, std::byte{0});
  store_le<std::uint64_t>(header, 0, lsn);
  store_le<std::uint32_t>(header, 8, static_cast<std::uint32_t>(payload_len));
  return header;
}

inline std::uint64_t header_log_size(ByteSpan region, const LogOptions& options)
{
  if (options.algo == LogAlgo::kHeader) {
    return load_le<std::uint64_t>(region, 0);
  }
  std::uint64_t size = 0;
  for (std::uint32_t i = 0; i < options.dance_k; ++i) {
    size = std::max(size, load_le<std::uint64_t>(region, std::size_t{i} * kCacheLineSize));
  }
  return size;
}

}  // namespace detail

// Longest valid prefix of the log in `image` (a whole-device image).
inline RecoveredLog log_recover(ByteSpan image, const LogOptions& options)
{
  options.validate();
  if (options.region.offset + options.region.length > image.size()) {
    throw Error(Errc::kOutOfRange, "log region outside image");
  }
  const ByteSpan region = image.subspan(options.region.offset, options.region.length);
  const std::uint64_t length = options.region.length;

  RecoveredLog log;
  std::uint64_t pos = options.header_area();
  std::uint64_t limit = length;
  if (options.algo == LogAlgo::kHeader || options.algo == LogAlgo::kHeaderDance) {
    const std::uint64_t size = detail::header_log_size(region, options);
    limit = size > length - pos ? length : pos + size;
  }

  while (true) {
    const std::uint64_t header_size =
        options.algo == LogAlgo::kZero ? kZeroEntryHeader : kBasicEntryHeader;
    if (pos + header_size > limit) break;
    const auto lsn = load_le<std::uint64_t>(region, pos);
    const auto payload_len = load_le<std::uint32_t>(region, pos + 8);
    if (lsn != log.next_lsn) break;
    const EntryPlacement placement = place_entry(options, pos, payload_len);
    const std::uint64_t needed =
        options.algo == LogAlgo::kClassic ? placement.footer + kClassicFooter
                                          : pos + header_size + payload_len;
    if (needed > limit) break;
    const ByteSpan payload = region.subspan(pos + header_size, payload_len);

    if (options.algo == LogAlgo::kClassic) {
      if (load_le<std::uint64_t>(region, placement.footer) != lsn) break;
    } else if (options.algo == LogAlgo::kZero && options.fault != LogFault::kSkipValidityCheck) {
      const auto stored = load_le<std::uint64_t>(region, pos + kPopCountOffset);
      if (stored == 0) break;
      if (popcount_entry(region.subspan(pos, kZeroEntryHeader), payload) != stored) break;
    }

    log.entries.push_back(LogEntry{lsn, Bytes(payload.begin(), payload.end())});
    ++log.next_lsn;
    pos = std::min(placement.end, length);
  }
  log.tail = (options.algo == LogAlgo::kHeader || options.algo == LogAlgo::kHeaderDance)
                 ? limit
                 : pos;
  return log;
}

inline RecoveredLog log_recover(const Device& device, const LogOptions& options)
{
  return log_recover(device.view(), options);
}

// Single-writer log over a device region.
class Log {
 public:
  // Opens the log at `options.region`, continuing after any recoverable entries
  // (a fresh zeroed region starts at lsn 1).
  static Log create(Device& device, const LogOptions& options)
  {
    options.validate();
    if (options.region.offset + options.region.length > device.capacity()) {
      throw Error(Errc::kOutOfRange, "log region exceeds device capacity");
    }
    const RecoveredLog recovered = log_recover(device.view(), options);
    return Log(device, options, recovered.tail, recovered.next_lsn);
  }

  const LogOptions& options() const { return options_; }
  std::uint64_t next_lsn() const { return next_lsn_; }
  std::uint64_t tail() const { return tail_; }
  std::uint64_t remaining() const { return options_.region.length - tail_; }

  // Durable on return. Returns the assigned lsn.
  std::uint64_t append(ByteSpan payload)
  {
    if (payload.size() > std::numeric_limits<std::uint32_t>::max()) {
      throw Error(Errc::kLogFull, "payload exceeds entry size limit");
    }
    const EntryPlacement placement = place_entry(options_, tail_, payload.size());
    if (placement.end > options_.region.length) {
      throw Error(Errc::kLogFull, "entry of " + std::to_string(placement.end - tail_) +
                                      " bytes does not fit in " + std::to_string(remaining()) +
                                      " remaining");
    }
    const std::uint64_t lsn = next_lsn_;
    const std::uint64_t base = options_.region.offset;
    const StoreFlavor flavor = options_.flavor;
    const bool first_barrier = options_.fault != LogFault::kSkipFirstBarrier;

    Bytes entry = detail::basic_entry_header(lsn, payload.size(), placement.header_size);
    entry.insert(entry.end(), payload.begin(), payload.end());
    if (options_.algo == LogAlgo::kZero) {
      const std::uint64_t count =
          popcount_entry(ByteSpan(entry).first(kZeroEntryHeader), payload);
      store_le<std::uint64_t>(entry, kPopCountOffset, count);
    }
    const std::uint64_t entry_offset = base + placement.start;
    flavored_store(*device_, flavor, entry_offset, entry);

    switch (options_.algo) {
      case LogAlgo::kZero:
        flavored_write_back(*device_, flavor, entry_offset, entry.size());
        device_->fence();
        break;

      case LogAlgo::kClassic: {
        if (first_barrier) {
          flavored_write_back(*device_, flavor, entry_offset, entry.size());
          device_->fence();
        }
        const auto footer = le_bytes<std::uint64_t>(lsn);
        flavored_store(*device_, flavor, base + placement.footer, footer);
        if (!first_barrier) {
          flavored_write_back(*device_, flavor, entry_offset, entry.size());
        }
        flavored_write_back(*device_, flavor, base + placement.footer, footer.size());
        device_->fence();
        break;
      }

      case LogAlgo::kHeader:
      case LogAlgo::kHeaderDance: {
        if (first_barrier) {
          flavored_write_back(*device_, flavor, entry_offset, entry.size());
          device_->fence();
        }
        const std::uint64_t field =
            options_.algo == LogAlgo::kHeader ? 0 : (lsn - 1) % options_.dance_k;
        const std::uint64_t field_offset = base + field * kCacheLineSize;
        const auto size = le_bytes<std::uint64_t>(placement.end - options_.header_area());
        flavored_store(*device_, flavor, field_offset, size);
        if (!first_barrier) {
          flavored_write_back(*device_, flavor, entry_offset, entry.size());
        }
        flavored_write_back(*device_, flavor, field_offset, size.size());
        device_->fence();
        break;
      }
    }

    tail_ = placement.end;
    ++next_lsn_;
    return lsn;
  }

 private:
  Log(Device& device, const LogOptions& options, std::uint64_t tail, std::uint64_t next_lsn)
      : device_(&device), options_(options), tail_(tail), next_lsn_(next_lsn)
  {
  }

  Device* device_;
  LogOptions options_;
  std::uint64_t tail_;
  std::uint64_t next_lsn_;
};

}  // namespace pmemprims
