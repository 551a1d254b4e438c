#pragma once

// Binary PPM (P6) / PGM (P5) with 8-bit samples, and a raw f64 grid dump.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "earth_adapter/tensor.hpp"

namespace ea::io {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "' for reading");
  return is;
}

inline std::size_t read_header_int(std::istream& is, const std::filesystem::path& path) {
  int ch = is.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = is.get();
  }
  std::string digits;
  while (ch != EOF && std::isdigit(ch)) {
    digits.push_back(static_cast<char>(ch));
    ch = is.get();
  }
  if (digits.empty()) throw IoError("malformed PNM header in '" + path.string() + "'");
  return std::stoul(digits);
}

inline void read_magic(std::istream& is, const char* want, const std::filesystem::path& path) {
  char m[2] = {};
  is.read(m, 2);
  if (!is || m[0] != want[0] || m[1] != want[1])
    throw IoError("'" + path.string() + "' is not a " + want + " file");
}

}  // namespace detail

/// Writes a 3 x H x W image with values in [0,1].
inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw DimensionError("write_ppm: expected 3 x H x W");
  const std::size_t h = image.dim(1), w = image.dim(2);
  auto os = detail::open_out(path);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<char> buf(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) buf[(y * w + x) * 3 + c] = static_cast<char>(to_byte(image[(c * h + y) * w + x]));
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  detail::read_magic(is, "P6", path);
  const std::size_t w = detail::read_header_int(is, path);
  const std::size_t h = detail::read_header_int(is, path);
  const std::size_t maxv = detail::read_header_int(is, path);
  if (maxv != 255) throw IoError("'" + path.string() + "': only 8-bit PPM is supported");
  std::vector<unsigned char> buf(h * w * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw IoError("'" + path.string() + "': truncated pixel data");
  Tensor image(Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) image[(c * h + y) * w + x] = buf[(y * w + x) * 3 + c] / 255.0;
  return image;
}

inline void write_pgm(const std::filesystem::path& path, const std::vector<int>& values, std::size_t h,
                      std::size_t w) {
  if (values.size() != h * w) throw DimensionError("write_pgm: size mismatch");
  auto os = detail::open_out(path);
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<char> buf(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] < 0 || values[i] > 255) throw RangeError("write_pgm: value outside [0,255]");
    buf[i] = static_cast<char>(static_cast<unsigned char>(values[i]));
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline std::vector<int> read_pgm(const std::filesystem::path& path, std::size_t* h = nullptr, std::size_t* w = nullptr) {
  auto is = detail::open_in(path);
  detail::read_magic(is, "P5", path);
  const std::size_t ww = detail::read_header_int(is, path);
  const std::size_t hh = detail::read_header_int(is, path);
  const std::size_t maxv = detail::read_header_int(is, path);
  if (maxv > 255) throw IoError("'" + path.string() + "': only 8-bit PGM is supported");
  std::vector<unsigned char> buf(hh * ww);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw IoError("'" + path.string() + "': truncated pixel data");
  if (h) *h = hh;
  if (w) *w = ww;
  return {buf.begin(), buf.end()};
}

/// Raw grid dump: "EAGRID1\n<c> <h> <w>\n" followed by little-endian f64 values.
inline void write_raw_grid(const std::filesystem::path& path, const Tensor& grid) {
  if (grid.ndim() != 3) throw DimensionError("write_raw_grid: expected c x H x W");
  auto os = detail::open_out(path);
  os << "EAGRID1\n" << grid.dim(0) << ' ' << grid.dim(1) << ' ' << grid.dim(2) << '\n';
  os.write(reinterpret_cast<const char*>(grid.ptr()), static_cast<std::streamsize>(grid.size() * sizeof(double)));
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline Tensor read_raw_grid(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  std::string magic;
  std::getline(is, magic);
  if (magic != "EAGRID1") throw IoError("'" + path.string() + "' is not a raw grid file");
  std::size_t c = 0, h = 0, w = 0;
  is >> c >> h >> w;
  is.get();
  if (!is || c == 0 || h == 0 || w == 0) throw IoError("'" + path.string() + "': bad grid header");
  Tensor grid(Shape{c, h, w});
  is.read(reinterpret_cast<char*>(grid.ptr()), static_cast<std::streamsize>(grid.size() * sizeof(double)));
  if (!is) throw IoError("'" + path.string() + "': truncated grid data");
  return grid;
}

}  // namespace ea::io
