#pragma once

// Named-tensor container used for checkpoints:
//
//   "FUNC" | version u32 | count u32
//   per entry: name_len u32 | name | ndim u32 | dims u64 x ndim | dtype u32 | payload
//
// Everything little-endian. Text blobs (config, RNG state) are u8 entries.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fun/hsi.hpp"

namespace fun {

class TensorContainer {
 public:
  static constexpr char kMagic[4] = {'F', 'U', 'N', 'C'};
  static constexpr std::uint32_t kVersion = 1;

  struct Entry {
    Shape shape;
    io::DType dtype = io::DType::f32;
    std::vector<unsigned char> bytes;  // little-endian payload
  };

  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    Entry e{t.shape(), io::dtype_of<T>(), {}};
    e.bytes.resize(t.numel() * sizeof(T));
    for (std::size_t i = 0; i < t.numel(); ++i) store_le(e.bytes.data() + i * sizeof(T), t[i]);
    insert(name, std::move(e));
  }

  void put_text(const std::string& name, const std::string& s) {
    Entry e{{s.size()}, io::DType::u8, {s.begin(), s.end()}};
    insert(name, std::move(e));
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  std::size_t size() const noexcept { return order_.size(); }
  const std::vector<std::string>& names() const noexcept { return order_; }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("container has no entry '" + name + "'");
    return it->second;
  }

  template <class T>
  Tensor<T> get(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != io::dtype_of<T>()) throw FormatError("entry '" + name + "' has a different dtype");
    Tensor<T> t(e.shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = load_le<T>(e.bytes.data() + i * sizeof(T));
    return t;
  }

  std::string text(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != io::DType::u8) throw FormatError("entry '" + name + "' is not a text blob");
    return {e.bytes.begin(), e.bytes.end()};
  }

  void write(std::ostream& os) const {
    os.write(kMagic, 4);
    io::put_le<std::uint32_t>(os, kVersion);
    io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(order_.size()));
    for (const auto& name : order_) {
      const Entry& e = entries_.at(name);
      io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) io::put_le<std::uint64_t>(os, d);
      io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.dtype));
      os.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
  }

  static TensorContainer read(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4)) throw FormatError("truncated checkpoint: missing magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a FUNC checkpoint (bad magic)");
    const auto version = io::get_le<std::uint32_t>(is, "version");
    if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = io::get_le<std::uint32_t>(is, "entry count");
    TensorContainer c;
    for (std::uint32_t k = 0; k < count; ++k) {
      const auto len = io::get_le<std::uint32_t>(is, "name length");
      if (len > (1u << 16)) throw FormatError("implausible entry name length " + std::to_string(len));
      std::string name(len, '\0');
      if (!is.read(name.data(), len)) throw FormatError("truncated entry name");
      const auto ndim = io::get_le<std::uint32_t>(is, name + " rank");
      if (ndim > 8) throw FormatError(name + ": rank " + std::to_string(ndim) + " too large");
      Entry e;
      std::size_t numel = 1;
      for (std::uint32_t d = 0; d < ndim; ++d) {
        const auto dim = io::get_le<std::uint64_t>(is, name + " dims");
        if (dim > (1ull << 32)) throw FormatError(name + ": implausible dimension");
        e.shape.push_back(static_cast<std::size_t>(dim));
        numel *= static_cast<std::size_t>(dim);
      }
      const auto code = io::get_le<std::uint32_t>(is, name + " dtype");
      if (code > 2) throw FormatError(name + ": unknown dtype code " + std::to_string(code));
      e.dtype = static_cast<io::DType>(code);
      e.bytes.resize(numel * io::dtype_size(e.dtype));
      if (!is.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size())))
        throw FormatError(name + ": truncated payload");
      if (c.contains(name)) throw FormatError("duplicate entry '" + name + "'");
      c.insert(name, std::move(e));
    }
    return c;
  }

  void save(const std::string& path) const {
    // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
    const std::string tmp = path + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary);
      if (!os) throw FormatError("cannot open " + tmp + " for writing");
      write(os);
      if (!os) throw FormatError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static TensorContainer load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    TensorContainer c = read(is);
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after last entry");
    return c;
  }

 private:
  void insert(const std::string& name, Entry e) {
    if (!entries_.count(name)) order_.push_back(name);
    entries_[name] = std::move(e);
  }

  template <class U>
  static void store_le(unsigned char* dst, U v) {
    std::memcpy(dst, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(dst, dst + sizeof(U));
  }
  template <class U>
  static U load_le(const unsigned char* src) {
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, src, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
  }

  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
};

}  // namespace fun
