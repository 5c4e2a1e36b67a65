#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pmemprims {

inline constexpr std::uint64_t kCacheLineSize = 64;
inline constexpr std::uint64_t kBlockSize = 256;
inline constexpr std::uint64_t kStoreUnit = 8;

using Bytes = std::vector<std::byte>;
using ByteSpan = std::span<const std::byte>;

enum class Errc {
  kInvalidConfig,
  kOutOfRange,
  kFileUnavailable,
  kWrongBackend,
  kCapExceeded,
  kLogFull,
  kInvalidArgument,
  kNoFreeSlot,
  kUnknownPage,
  kCorruption,
};

inline const char* errc_name(Errc code)
{
  switch (code) {
    case Errc::kInvalidConfig: return "invalid config";
    case Errc::kOutOfRange: return "out of range";
    case Errc::kFileUnavailable: return "file unavailable";
    case Errc::kWrongBackend: return "wrong backend";
    case Errc::kCapExceeded: return "enumeration cap exceeded";
    case Errc::kLogFull: return "log full";
    case Errc::kInvalidArgument: return "invalid argument";
    case Errc::kNoFreeSlot: return "no free slot";
    case Errc::kUnknownPage: return "unknown page";
    case Errc::kCorruption: return "corruption";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code)
  {
  }

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

constexpr std::uint64_t round_up(std::uint64_t value, std::uint64_t alignment)
{
  return (value + alignment - 1) / alignment * alignment;
}

constexpr std::uint64_t round_down(std::uint64_t value, std::uint64_t alignment)
{
  return value / alignment * alignment;
}

// Little-endian field access; on-media layouts never depend on host order.
template <class T>
inline T load_le(ByteSpan bytes, std::size_t offset)
{
  static_assert(std::is_unsigned_v<T>);
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(std::to_integer<std::uint8_t>(bytes[offset + i])) << (8 * i);
  }
  return value;
}

template <class T>
inline void store_le(std::span<std::byte> bytes, std::size_t offset, T value)
{
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[offset + i] = static_cast<std::byte>((value >> (8 * i)) & 0xff);
  }
}

template <class T>
inline std::array<std::byte, sizeof(T)> le_bytes(T value)
{
  std::array<std::byte, sizeof(T)> out{};
  store_le<T>(out, 0, value);
  return out;
}

inline std::uint64_t popcount_bytes(ByteSpan bytes)
{
  std::uint64_t count = 0;
  std::size_t i = 0;
  for (; i + 8 <= bytes.size(); i += 8) {
    std::uint64_t word;
    std::memcpy(&word, bytes.data() + i, 8);
    count += static_cast<std::uint64_t>(std::popcount(word));
  }
  for (; i < bytes.size(); ++i) {
    count += static_cast<std::uint64_t>(std::popcount(std::to_integer<std::uint8_t>(bytes[i])));
  }
  return count;
}

inline std::string to_hex(ByteSpan bytes)
{
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (std::byte b : bytes) {
    const auto v = std::to_integer<unsigned>(b);
    out.push_back(kDigits[v >> 4]);
    out.push_back(kDigits[v & 0xf]);
  }
  return out;
}

inline Bytes from_hex(std::string_view hex)
{
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (hex.size() % 2 != 0) {
    throw Error(Errc::kInvalidArgument, "odd-length hex string");
  }
  Bytes out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int hi = nibble(hex[2 * i]);
    const int lo = nibble(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) {
      throw Error(Errc::kInvalidArgument, "bad hex digit");
    }
    out[i] = static_cast<std::byte>((hi << 4) | lo);
  }
  return out;
}

inline Bytes make_bytes(std::initializer_list<int> values)
{
  Bytes out;
  out.reserve(values.size());
  for (int v : values) {
    out.push_back(static_cast<std::byte>(v));
  }
  return out;
}

}  // namespace pmemprims
