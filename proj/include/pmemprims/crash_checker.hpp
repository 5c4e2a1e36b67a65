#pragma once

// Crash-image enumeration over a simulated device's event trace.
//
// Crash model: a crash lands between two traced events. Every cache line
// persists independently and monotonically. After the crash a line holds its
// volatile content as of some event boundary in [floor, crash], where floor is
// the last WriteBack of the line (or StreamingStore into it) that a later Fence
// completed before the crash. Stores are atomic in aligned 8-byte units, which
// the trace already reflects.
//
// The enumerator keeps one working image per crash point and rewrites only the
// lines that still have more than one legal content, so visiting an image
// costs O(changed lines).

#include <pmemprims/device.hpp>

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace pmemprims {

inline constexpr std::uint64_t kDefaultImageCap = std::uint64_t{1} << 20;

struct CrashImage {
  Bytes content;
  std::uint64_t crash_seq = 0;
  // Event boundary through which each stored-to line was replayed (0 = base).
  std::map<std::uint64_t, std::uint64_t> per_line_persist_seq;
};

struct CheckMode {
  enum class Kind { kExhaustive, kSampled };

  Kind kind = Kind::kExhaustive;
  std::uint64_t samples = 0;
  std::uint64_t seed = 0;
  // Sampled mode enumerates exhaustively when the point has at most `samples`
  // distinct images.
  bool exhaustive_when_smaller = true;
  std::uint64_t cap = kDefaultImageCap;

  static CheckMode exhaustive(std::uint64_t cap = kDefaultImageCap)
  {
    CheckMode mode;
    mode.cap = cap;
    return mode;
  }

  static CheckMode sampled(std::uint64_t samples, std::uint64_t seed)
  {
    CheckMode mode;
    mode.kind = Kind::kSampled;
    mode.samples = samples;
    mode.seed = seed;
    return mode;
  }
};

class CrashEnumerator;

// An image owned by the enumerator; valid only inside the visiting callback.
class CrashImageView {
 public:
  ByteSpan content() const { return content_; }
  std::uint64_t crash_seq() const { return crash_seq_; }
  std::uint64_t persist_seq(std::uint64_t line) const;
  CrashImage materialize() const;

 private:
  friend class CrashEnumerator;
  CrashImageView(const CrashEnumerator& owner, ByteSpan content, std::uint64_t crash_seq)
      : owner_(&owner), content_(content), crash_seq_(crash_seq)
  {
  }

  const CrashEnumerator* owner_;
  ByteSpan content_;
  std::uint64_t crash_seq_;
};

class CrashEnumerator {
 public:
  using Line = std::array<std::byte, kCacheLineSize>;

  // `base` is the durable image before the first traced event.
  CrashEnumerator(ByteSpan base, const EventTrace& trace) : base_(base.begin(), base.end()), trace_(trace)
  {
    for (std::size_t i = 0; i < trace_.size(); ++i) {
      const Event& event = trace_[i];
      if (event.seq != i + 1) {
        throw Error(Errc::kInvalidArgument, "trace sequence numbers must be 1..n");
      }
      if (event.kind == EventKind::kFence) continue;
      if (event.offset + std::max<std::uint64_t>(event.len, 1) > base_.size()) {
        throw Error(Errc::kOutOfRange, "trace event outside base image");
      }
      if (!event.is_store()) continue;
      LineState& line = line_for(event.line());
      Line next = line.versions.back();
      std::memcpy(next.data() + event.offset % kCacheLineSize, event.payload.data(), event.len);
      line.versions.push_back(next);
      line.version_seq.push_back(event.seq);
    }
    image_ = base_;
  }

  std::uint64_t trace_length() const { return trace_.size(); }
  std::uint64_t crash_seq() const { return position_; }

  // Places the crash after the first `crash_seq` events.
  void seek(std::uint64_t crash_seq)
  {
    if (crash_seq > trace_.size()) {
      throw Error(Errc::kOutOfRange, "crash point beyond trace end");
    }
    if (crash_seq < position_) {
      reset();
    }
    while (position_ < crash_seq) {
      apply(trace_[position_]);
      ++position_;
    }
  }

  // Number of distinct images at the current point, saturating at UINT64_MAX.
  std::uint64_t image_count() const
  {
    std::uint64_t count = 1;
    for (std::uint32_t id : free_) {
      const std::uint64_t n = lines_[id].choices.size();
      if (count > std::numeric_limits<std::uint64_t>::max() / n) {
        return std::numeric_limits<std::uint64_t>::max();
      }
      count *= n;
    }
    return count;
  }

  std::size_t free_line_count() const { return free_.size(); }

  // Content of `line` in the volatile view at the current crash point.
  ByteSpan volatile_line(std::uint64_t line) const
  {
    if (auto it = index_.find(line); it != index_.end()) {
      const LineState& state = lines_[it->second];
      return state.versions[state.executed];
    }
    return ByteSpan(base_).subspan(line * kCacheLineSize, kCacheLineSize);
  }

  // Durable-in-every-image floor version index and the newest executed version
  // for a stored-to line; nullopt for lines with no stores in the trace.
  struct LineRange {
    std::uint32_t floor;
    std::uint32_t executed;
    std::size_t distinct;
  };
  std::optional<LineRange> line_range(std::uint64_t line) const
  {
    auto it = index_.find(line);
    if (it == index_.end()) return std::nullopt;
    const LineState& state = lines_[it->second];
    return LineRange{state.floor, state.executed, state.choices.size()};
  }

  template <class Visit>
  void for_each_exhaustive(Visit&& visit, std::uint64_t cap = kDefaultImageCap)
  {
    const std::uint64_t count = image_count();
    if (count > cap) {
      throw Error(Errc::kCapExceeded, std::to_string(count) + " images at crash point " +
                                          std::to_string(position_) + " exceed cap " +
                                          std::to_string(cap) + "; use sampled mode");
    }
    std::vector<std::uint32_t> ids(free_.begin(), free_.end());
    std::vector<std::uint32_t> digits(ids.size(), 0);
    while (true) {
      visit(CrashImageView(*this, image_, position_));
      std::size_t i = 0;
      for (; i < ids.size(); ++i) {
        LineState& line = lines_[ids[i]];
        if (++digits[i] < line.choices.size()) {
          place(line, line.choices[digits[i]]);
          break;
        }
        digits[i] = 0;
        place(line, line.choices[0]);
      }
      if (i == ids.size()) break;
    }
  }

  // `samples` images, each line drawn uniformly over its distinct legal contents.
  template <class Visit>
  void for_each_sampled(std::uint64_t samples, std::uint64_t seed, Visit&& visit)
  {
    // Flat copy of the free lines so the per-sample loop stays in cache.
    struct Free {
      std::byte* dest;
      const Line* versions;
      const std::uint32_t* choices;
      std::uint32_t* placed;
      std::uint32_t range;
    };
    std::vector<Free> free;
    free.reserve(free_.size());
    for (std::uint32_t id : free_) {
      LineState& line = lines_[id];
      free.push_back(Free{image_.data() + line.line * kCacheLineSize, line.versions.data(),
                          line.choices.data(), &line.placed,
                          static_cast<std::uint32_t>(line.choices.size())});
    }
    std::mt19937_64 rng(seed);
    for (std::uint64_t s = 0; s < samples; ++s) {
      std::uint64_t word = 0;
      int bits = 0;
      auto draw = [&](int width) {
        if (bits < width) {
          word = rng();
          bits = 64;
        }
        const std::uint64_t x = word & ((std::uint64_t{1} << width) - 1);
        word >>= width;
        bits -= width;
        return x;
      };
      for (Free& line : free) {
        const std::uint32_t range = line.range;
        // Lemire's bounded draw on a 16-bit (or, for wide ranges, 32-bit)
        // slice of one 64-bit output.
        const int width = range <= 0xffff ? 16 : 32;
        const std::uint64_t limit = std::uint64_t{1} << width;
        std::uint32_t pick;
        while (true) {
          const std::uint64_t m = draw(width) * range;
          const std::uint64_t low = m & (limit - 1);
          if (low >= range || low >= (limit - range) % range) {
            pick = static_cast<std::uint32_t>(m >> width);
            break;
          }
        }
        const std::uint32_t version = line.choices[pick];
        if (version != *line.placed) {
          std::memcpy(line.dest, line.versions[version].data(), kCacheLineSize);
          *line.placed = version;
        }
      }
      visit(CrashImageView(*this, image_, position_));
    }
    for (std::uint32_t id : free_) {
      place(lines_[id], lines_[id].choices[0]);
    }
  }

  template <class Visit>
  void for_each(const CheckMode& mode, std::uint64_t point_seed, Visit&& visit)
  {
    if (mode.kind == CheckMode::Kind::kExhaustive) {
      for_each_exhaustive(visit, mode.cap);
    } else if (mode.exhaustive_when_smaller && image_count() <= mode.samples) {
      for_each_exhaustive(visit, mode.cap);
    } else {
      for_each_sampled(mode.samples, point_seed, visit);
    }
  }

 private:
  friend class CrashImageView;

  struct LineState {
    std::uint64_t line = 0;
    std::vector<Line> versions;
    std::vector<std::uint64_t> version_seq;
    std::uint32_t executed = 0;
    std::uint32_t floor = 0;
    std::uint64_t floor_seq = 0;
    std::uint32_t pending = 0;
    std::uint64_t pending_seq = 0;
    bool has_pending = false;
    std::vector<std::uint32_t> choices{0};
    std::uint32_t placed = 0;
    std::int64_t free_pos = -1;
  };

  LineState& line_for(std::uint64_t line)
  {
    auto [it, inserted] = index_.try_emplace(line, static_cast<std::uint32_t>(lines_.size()));
    if (inserted) {
      LineState state;
      state.line = line;
      Line content{};
      std::memcpy(content.data(), base_.data() + line * kCacheLineSize, kCacheLineSize);
      state.versions.push_back(content);
      state.version_seq.push_back(0);
      lines_.push_back(std::move(state));
    }
    return lines_[it->second];
  }

  void reset()
  {
    for (LineState& line : lines_) {
      line.executed = 0;
      line.floor = 0;
      line.floor_seq = 0;
      line.has_pending = false;
      line.choices.assign(1, 0);
      line.placed = 0;
      line.free_pos = -1;
    }
    free_.clear();
    pending_.clear();
    image_ = base_;
    position_ = 0;
  }

  void apply(const Event& event)
  {
    switch (event.kind) {
      case EventKind::kStore:
      case EventKind::kStreamingStore: {
        LineState& line = lines_[index_.at(event.line())];
        ++line.executed;
        add_choice(line, line.executed);
        if (event.kind == EventKind::kStreamingStore) {
          mark_pending(line, event.seq);
        }
        break;
      }
      case EventKind::kWriteBack: {
        if (auto it = index_.find(event.line()); it != index_.end()) {
          mark_pending(lines_[it->second], event.seq);
        }
        break;
      }
      case EventKind::kFence: {
        for (std::uint32_t id : pending_) {
          LineState& line = lines_[id];
          line.has_pending = false;
          line.floor_seq = line.pending_seq;
          if (line.pending != line.floor) {
            line.floor = line.pending;
            recompute_choices(line);
          }
        }
        pending_.clear();
        break;
      }
    }
  }

  void mark_pending(LineState& line, std::uint64_t seq)
  {
    if (!line.has_pending) {
      line.has_pending = true;
      pending_.push_back(static_cast<std::uint32_t>(&line - lines_.data()));
    }
    line.pending = line.executed;
    line.pending_seq = seq;
  }

  bool same(const LineState& line, std::uint32_t a, std::uint32_t b) const
  {
    return std::memcmp(line.versions[a].data(), line.versions[b].data(), kCacheLineSize) == 0;
  }

  void add_choice(LineState& line, std::uint32_t version)
  {
    for (std::uint32_t existing : line.choices) {
      if (same(line, existing, version)) return;
    }
    line.choices.push_back(version);
    update_free(line);
  }

  void recompute_choices(LineState& line)
  {
    line.choices.clear();
    for (std::uint32_t v = line.floor; v <= line.executed; ++v) {
      bool duplicate = false;
      for (std::uint32_t existing : line.choices) {
        if (same(line, existing, v)) {
          duplicate = true;
          break;
        }
      }
      if (!duplicate) line.choices.push_back(v);
    }
    place(line, line.choices[0]);
    update_free(line);
  }

  void update_free(LineState& line)
  {
    const auto id = static_cast<std::uint32_t>(&line - lines_.data());
    const bool is_free = line.choices.size() > 1;
    if (is_free && line.free_pos < 0) {
      line.free_pos = static_cast<std::int64_t>(free_.size());
      free_.push_back(id);
    } else if (!is_free && line.free_pos >= 0) {
      const auto pos = static_cast<std::size_t>(line.free_pos);
      free_[pos] = free_.back();
      lines_[free_[pos]].free_pos = static_cast<std::int64_t>(pos);
      free_.pop_back();
      line.free_pos = -1;
    }
  }

  void place(LineState& line, std::uint32_t version)
  {
    if (line.placed == version) return;
    std::memcpy(image_.data() + line.line * kCacheLineSize, line.versions[version].data(),
                kCacheLineSize);
    line.placed = version;
  }

  std::uint64_t persist_seq_of(std::uint64_t line_number) const
  {
    auto it = index_.find(line_number);
    if (it == index_.end()) return 0;
    const LineState& line = lines_[it->second];
    return std::max(line.floor_seq, line.version_seq[line.placed]);
  }

  Bytes base_;
  const EventTrace& trace_;
  std::unordered_map<std::uint64_t, std::uint32_t> index_;
  std::vector<LineState> lines_;
  std::vector<std::uint32_t> free_;
  std::vector<std::uint32_t> pending_;
  Bytes image_;
  std::uint64_t position_ = 0;
};

inline std::uint64_t CrashImageView::persist_seq(std::uint64_t line) const
{
  return owner_->persist_seq_of(line);
}

inline CrashImage CrashImageView::materialize() const
{
  CrashImage image;
  image.content.assign(content_.begin(), content_.end());
  image.crash_seq = crash_seq_;
  for (const auto& state : owner_->lines_) {
    if (state.executed > 0) {
      image.per_line_persist_seq[state.line] = owner_->persist_seq_of(state.line);
    }
  }
  return image;
}

inline std::uint64_t crash_point_seed(std::uint64_t seed, std::uint64_t crash_seq)
{
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(crash_seq),
                    static_cast<std::uint32_t>(crash_seq >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (std::uint64_t{out[0]} << 32) | out[1];
}

// Every (or a sampled subset of) crash image at `crash_seq`, materialized.
inline std::vector<CrashImage> crash_images(ByteSpan base, const EventTrace& trace,
                                            std::uint64_t crash_seq, const CheckMode& mode)
{
  CrashEnumerator enumerator(base, trace);
  enumerator.seek(crash_seq);
  std::vector<CrashImage> images;
  enumerator.for_each(mode, crash_point_seed(mode.seed, crash_seq),
                      [&](const CrashImageView& view) { images.push_back(view.materialize()); });
  return images;
}

// ---------------------------------------------------------------------------
// Recovery harness

struct CrashPoints {
  std::optional<std::vector<std::uint64_t>> points;

  static CrashPoints all() { return {}; }
  static CrashPoints at(std::vector<std::uint64_t> points) { return CrashPoints{std::move(points)}; }
};

struct WorkloadProgress {
  std::uint64_t crash_seq = 0;
  // Workload operations that returned before the crash.
  std::size_t completed_ops = 0;
  // Operation interrupted by the crash, if any of its events executed.
  std::optional<std::size_t> in_flight_op;
};

struct CrashFailure {
  CrashImage image;
  std::string diagnostic;
  // Lines whose durable content differs from the volatile view at the crash.
  std::vector<std::pair<std::uint64_t, Bytes>> differing_lines;
};

struct CrashReport {
  std::uint64_t images_checked = 0;
  std::uint64_t crash_points = 0;
  std::uint64_t failed = 0;
  // First failures only; `failed` counts all of them.
  std::vector<CrashFailure> failures;
  CheckMode mode;

  bool ok() const { return failed == 0; }

  std::string to_text() const
  {
    std::ostringstream out;
    for (const CrashFailure& failure : failures) {
      out << "failure crash_seq=" << failure.image.crash_seq << " lines=";
      for (std::size_t i = 0; i < failure.differing_lines.size(); ++i) {
        if (i > 0) out << ',';
        out << failure.differing_lines[i].first * kCacheLineSize << ':'
            << to_hex(failure.differing_lines[i].second);
      }
      out << " diagnostic=" << failure.diagnostic << '\n';
    }
    out << "checked=" << images_checked << " failed=" << failed << '\n';
    return out.str();
  }
};

template <class State>
struct CrashCheck {
  std::uint64_t capacity = 0;
  // Runs before tracing starts; its effects form the durable base image.
  std::function<void(Device&)> setup;
  std::vector<std::function<void(Device&)>> workload;
  std::function<State(ByteSpan image)> recover;
  // Returns a diagnostic on failure.
  std::function<std::optional<std::string>(const State&, const WorkloadProgress&)> predicate;
  CrashPoints crash_points = CrashPoints::all();
  CheckMode mode;
  std::size_t max_recorded_failures = 16;
};

template <class State>
CrashReport check_crash_consistency(const CrashCheck<State>& check)
{
  DeviceConfig config;
  config.capacity = check.capacity;
  config.backend = Backend::kSimulated;
  Device device = Device::open(config);
  if (check.setup) {
    check.setup(device);
  }
  const Bytes base(device.view().begin(), device.view().end());
  device.clear_trace();

  std::vector<std::uint64_t> boundaries;
  boundaries.reserve(check.workload.size());
  for (const auto& op : check.workload) {
    op(device);
    boundaries.push_back(device.trace().size());
  }
  const EventTrace& trace = device.trace();

  std::vector<std::uint64_t> points;
  if (check.crash_points.points) {
    points = *check.crash_points.points;
    std::sort(points.begin(), points.end());
  } else {
    points.resize(trace.size() + 1);
    std::iota(points.begin(), points.end(), 0);
  }

  CrashReport report;
  report.mode = check.mode;
  CrashEnumerator enumerator(base, trace);
  for (std::uint64_t point : points) {
    enumerator.seek(point);
    ++report.crash_points;

    WorkloadProgress progress;
    progress.crash_seq = point;
    progress.completed_ops = static_cast<std::size_t>(
        std::upper_bound(boundaries.begin(), boundaries.end(), point) - boundaries.begin());
    if (progress.completed_ops < boundaries.size()) {
      const std::uint64_t start =
          progress.completed_ops == 0 ? 0 : boundaries[progress.completed_ops - 1];
      if (point > start) {
        progress.in_flight_op = progress.completed_ops;
      }
    }

    enumerator.for_each(check.mode, crash_point_seed(check.mode.seed, point),
                        [&](const CrashImageView& view) {
                          ++report.images_checked;
                          std::optional<std::string> diagnostic;
                          try {
                            diagnostic = check.predicate(check.recover(view.content()), progress);
                          } catch (const std::exception& e) {
                            diagnostic = std::string("recovery threw: ") + e.what();
                          }
                          if (!diagnostic) return;
                          ++report.failed;
                          if (report.failures.size() >= check.max_recorded_failures) return;
                          CrashFailure failure;
                          failure.image = view.materialize();
                          failure.diagnostic = *diagnostic;
                          const ByteSpan content = view.content();
                          for (std::uint64_t line = 0; line < content.size() / kCacheLineSize;
                               ++line) {
                            const ByteSpan durable =
                                content.subspan(line * kCacheLineSize, kCacheLineSize);
                            const ByteSpan live = enumerator.volatile_line(line);
                            if (std::memcmp(durable.data(), live.data(), kCacheLineSize) != 0) {
                              failure.differing_lines.emplace_back(
                                  line, Bytes(durable.begin(), durable.end()));
                            }
                          }
                          report.failures.push_back(std::move(failure));
                        });
  }
  return report;
}

}  // namespace pmemprims
