#pragma once

#include <pmemprims/pmemprims.hpp>

#include <filesystem>
#include <string>

namespace pmemprims::testing {

// SplitMix64: tiny, seedable and independent of the library's RNG choices.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next()
  {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [lo, hi].
  std::uint64_t between(std::uint64_t lo, std::uint64_t hi) { return lo + next() % (hi - lo + 1); }

  bool coin() { return (next() & 1) != 0; }

  Bytes bytes(std::size_t n)
  {
    Bytes out(n);
    for (auto& b : out) b = static_cast<std::byte>(next());
    return out;
  }

 private:
  std::uint64_t state_;
};

inline Device sim_device(std::uint64_t capacity)
{
  DeviceConfig config;
  config.capacity = capacity;
  config.backend = Backend::kSimulated;
  return Device::open(config);
}

inline Bytes filled(std::size_t n, int value) { return Bytes(n, static_cast<std::byte>(value)); }

inline std::filesystem::path fixture_path(const std::string& name)
{
  return std::filesystem::path(PMEMPRIMS_FIXTURE_DIR) / name;
}

// One random device primitive.
struct Op {
  enum Kind { kStore, kStream, kWriteBack, kFence, kPersist } kind;
  std::uint64_t offset;
  Bytes bytes;
  std::uint64_t len;
};

inline Op random_op(Rng& rng, std::uint64_t capacity)
{
  Op op{static_cast<Op::Kind>(rng.between(0, 4)), 0, {}, 0};
  const std::uint64_t len = rng.between(1, 96);
  op.offset = rng.between(0, capacity - len);
  op.len = len;
  if (op.kind == Op::kStore || op.kind == Op::kStream) op.bytes = rng.bytes(len);
  return op;
}

inline void apply(Device& device, const Op& op)
{
  switch (op.kind) {
    case Op::kStore: device.store(op.offset, op.bytes); break;
    case Op::kStream: device.store_streaming(op.offset, op.bytes); break;
    case Op::kWriteBack: device.write_back(op.offset); break;
    case Op::kFence: device.fence(); break;
    case Op::kPersist: device.persist(op.offset, op.len); break;
  }
}

// Scratch file removed on scope exit.
class TempFile {
 public:
  explicit TempFile(const std::string& stem)
      : path_(std::filesystem::temp_directory_path() /
              (stem + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++)))
  {
    std::filesystem::remove(path_);
  }
  ~TempFile()
  {
    std::error_code ignored;
    std::filesystem::remove(path_, ignored);
  }
  TempFile(const TempFile&) = delete;
  TempFile& operator=(const TempFile&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  static int& counter()
  {
    static int n = 0;
    return n;
  }
  std::filesystem::path path_;
};

}  // namespace pmemprims::testing
