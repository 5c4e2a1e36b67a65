#pragma once

// Sparse hex dumps of region images, used for shipped fixtures.
//
//   # comment
//   size 2048
//   0100: 01000000 00000000 ...
//
// Unlisted bytes are zero; whitespace inside a row is ignored.

#include <pmemprims/bytes.hpp>

#include <charconv>
#include <fstream>
#include <filesystem>
#include <sstream>

namespace pmemprims {

inline Bytes parse_hex_image(std::string_view text)
{
  Bytes image;
  bool sized = false;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  auto fail = [&](const std::string& why) {
    throw Error(Errc::kInvalidArgument, "hex image line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::string_view row(line);
    row.remove_prefix(first);
    if (row.starts_with("size")) {
      std::uint64_t size = 0;
      std::istringstream fields{std::string(row.substr(4))};
      if (!(fields >> size)) fail("bad size");
      image.assign(size, std::byte{0});
      sized = true;
      continue;
    }
    if (!sized) fail("data before size");
    const auto colon = row.find(':');
    if (colon == std::string_view::npos) fail("missing ':'");
    std::uint64_t offset = 0;
    const auto head = row.substr(0, colon);
    auto [end, ec] = std::from_chars(head.data(), head.data() + head.size(), offset, 16);
    if (ec != std::errc{} || end != head.data() + head.size()) fail("bad offset");
    std::string digits;
    for (char c : row.substr(colon + 1)) {
      if (c != ' ' && c != '\t' && c != '\r') digits.push_back(c);
    }
    const Bytes bytes = from_hex(digits);
    if (offset + bytes.size() > image.size()) fail("row past end of image");
    std::copy(bytes.begin(), bytes.end(), image.begin() + static_cast<std::ptrdiff_t>(offset));
  }
  if (!sized) throw Error(Errc::kInvalidArgument, "hex image has no size line");
  return image;
}

inline std::string format_hex_image(ByteSpan image, std::size_t row_size = 32)
{
  std::ostringstream out;
  out << "size " << image.size() << "\n";
  for (std::size_t at = 0; at < image.size(); at += row_size) {
    const auto row = image.subspan(at, std::min(row_size, image.size() - at));
    if (std::all_of(row.begin(), row.end(), [](std::byte b) { return b == std::byte{0}; })) {
      continue;
    }
    char offset[32];
    std::snprintf(offset, sizeof offset, "%06zx:", at);
    out << offset;
    for (std::size_t i = 0; i < row.size(); i += 8) {
      out << ' ' << to_hex(row.subspan(i, std::min<std::size_t>(8, row.size() - i)));
    }
    out << "\n";
  }
  return out.str();
}

inline Bytes load_hex_image(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in) {
    throw Error(Errc::kFileUnavailable, "cannot read " + path.string());
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_hex_image(buffer.str());
}

}  // namespace pmemprims
