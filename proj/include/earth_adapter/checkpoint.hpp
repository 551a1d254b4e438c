#pragma once

// Checkpoint container.
//
//   "EADK1"                      5-byte magic
//   u32 version
//   u64 step
//   u64 config length, config text (UTF-8, default-filled echo)
//   u32 entry count
//   per entry: u32 name length, name, u8 dtype (1 = f64), u32 ndim,
//              u64 extents[ndim], u64 byte offset into the data section
//   data section: raw little-endian f64 arrays in entry order
//
// All integers are little-endian.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "earth_adapter/image_io.hpp"
#include "earth_adapter/optim.hpp"
#include "earth_adapter/tensor.hpp"

namespace ea::ckpt {

inline constexpr char kMagic[5] = {'E', 'A', 'D', 'K', '1'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct Checkpoint {
  std::uint32_t version = kVersion;
  std::uint64_t step = 0;
  std::string config;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return &t;
    return nullptr;
  }
  const Tensor& get(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw io::IoError("checkpoint has no array named '" + name + "'");
    return *t;
  }
  void put(std::string name, const Tensor& t) {
    Tensor copy(t.shape(), t.storage());
    arrays.emplace_back(std::move(name), std::move(copy));
  }
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw io::IoError("checkpoint truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  std::string out(kMagic, kMagic + 5);
  detail::put_le<std::uint32_t>(out, c.version);
  detail::put_le<std::uint64_t>(out, c.step);
  detail::put_le<std::uint64_t>(out, c.config.size());
  out += c.config;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.arrays.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.arrays) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(kDtypeF64));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto e : t.shape()) detail::put_le<std::uint64_t>(out, e);
    detail::put_le<std::uint64_t>(out, offset);
    offset += t.size() * sizeof(double);
  }
  for (const auto& [name, t] : c.arrays)
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      detail::put_le<std::uint64_t>(out, bits);
    }
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(5) != std::string(kMagic, kMagic + 5)) throw io::IoError("not an EADK1 checkpoint");
  Checkpoint c;
  c.version = r.get<std::uint32_t>();
  if (c.version != kVersion) throw io::IoError("unsupported checkpoint version " + std::to_string(c.version));
  c.step = r.get<std::uint64_t>();
  c.config = r.bytes(r.get<std::uint64_t>());
  const auto count = r.get<std::uint32_t>();
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.bytes(r.get<std::uint32_t>());
    if (static_cast<std::uint8_t>(r.bytes(1)[0]) != kDtypeF64)
      throw io::IoError("array '" + e.name + "' has an unsupported dtype");
    const auto nd = r.get<std::uint32_t>();
    if (nd == 0 || nd > 8) throw io::IoError("array '" + e.name + "' declares " + std::to_string(nd) + " dimensions");
    for (std::uint32_t k = 0; k < nd; ++k) {
      const auto ext = r.get<std::uint64_t>();
      if (ext == 0) throw io::IoError("array '" + e.name + "' declares a zero extent");
      e.shape.push_back(ext);
    }
    e.offset = r.get<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  const std::size_t data_start = r.pos();
  const std::size_t data_size = bytes.size() - data_start;
  std::uint64_t expected = 0;
  for (auto& e : entries) {
    const std::uint64_t nbytes = shape_volume(e.shape) * sizeof(double);
    if (e.offset != expected || e.offset + nbytes > data_size)
      throw io::IoError("array '" + e.name + "' has an invalid offset or shape " + shape_str(e.shape));
    expected += nbytes;
    std::vector<double> data(shape_volume(e.shape));
    for (std::size_t k = 0; k < data.size(); ++k) {
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[data_start + e.offset + k * 8 + b])) << (8 * b);
      std::memcpy(&data[k], &bits, sizeof bits);
    }
    c.arrays.emplace_back(e.name, Tensor(e.shape, std::move(data)));
  }
  if (expected != data_size) throw io::IoError("checkpoint has trailing bytes after the data section");
  return c;
}

inline void save(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io::IoError("cannot open '" + path.string() + "' for writing");
  const std::string bytes = serialize(c);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw io::IoError("failed writing '" + path.string() + "'");
}

inline Checkpoint load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io::IoError("cannot open '" + path.string() + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

/// Copies named parameters into the checkpoint under `prefix`.
inline void put_params(Checkpoint& c, const std::vector<NamedParam>& params, const std::string& prefix = "") {
  for (const auto& p : params) c.put(prefix + p.name, *p.tensor);
}

/// Restores named parameters, validating each shape.
inline void get_params(const Checkpoint& c, const std::vector<NamedParam>& params, const std::string& prefix = "") {
  for (const auto& p : params) {
    const Tensor& src = c.get(prefix + p.name);
    if (src.shape() != p.tensor->shape())
      throw DimensionError("checkpoint array '" + prefix + p.name + "' has shape " + shape_str(src.shape()) +
                           ", model expects " + shape_str(p.tensor->shape()));
    std::copy(src.data().begin(), src.data().end(), p.tensor->data().begin());
  }
}

}  // namespace ea::ckpt
