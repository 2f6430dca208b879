#pragma once

// Hyperspectral cube, coded aperture and measurement types, plus the FUNH
// binary container:
//
//   "FUNH" | version u32 | H u32 | W u32 | bands u32 | dtype u32 (0 f32, 1 f64)
//   payload: band-sequential, row-major, little-endian
//
// Masks and measurements are stored as single-band containers.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "fun/tensor.hpp"

namespace fun {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Spectral scene X with shape H x W x bands, stored channels-last.
template <class T>
class HsiCube {
 public:
  HsiCube() = default;
  HsiCube(std::size_t h, std::size_t w, std::size_t bands) : data_({h, w, bands}) {
    if (bands == 0) throw ShapeError("HsiCube needs at least one band");
  }
  explicit HsiCube(Tensor<T> t) : data_(std::move(t)) {
    if (data_.rank() != 3 || data_.dim(2) == 0) throw ShapeError("HsiCube expects [H,W,bands], got " + to_string(data_.shape()));
  }

  std::size_t height() const { return data_.dim(0); }
  std::size_t width() const { return data_.dim(1); }
  std::size_t bands() const { return data_.dim(2); }

  T& at(std::size_t h, std::size_t w, std::size_t b) { return data_[(h * width() + w) * bands() + b]; }
  const T& at(std::size_t h, std::size_t w, std::size_t b) const { return data_[(h * width() + w) * bands() + b]; }

  const Tensor<T>& tensor() const noexcept { return data_; }
  Tensor<T>& tensor() noexcept { return data_; }

  bool all_finite() const {
    for (T v : data_.data())
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const HsiCube& a, const HsiCube& b) { return a.data_ == b.data_; }

 private:
  Tensor<T> data_;
};

/// Coded aperture M: H x W transmission values in [0, 1].
template <class T>
class CodedAperture {
 public:
  CodedAperture() = default;
  CodedAperture(std::size_t h, std::size_t w, T fill = T(1)) : data_({h, w}, fill) {}
  explicit CodedAperture(Tensor<T> t) : data_(std::move(t)) {
    if (data_.rank() != 2) throw ShapeError("CodedAperture expects [H,W], got " + to_string(data_.shape()));
    for (T v : data_.data())
      if (!(v >= T(0) && v <= T(1))) throw ContractError("CodedAperture values must lie in [0,1]");
  }
  std::size_t height() const { return data_.dim(0); }
  std::size_t width() const { return data_.dim(1); }
  T& at(std::size_t h, std::size_t w) { return data_[h * width() + w]; }
  const T& at(std::size_t h, std::size_t w) const { return data_[h * width() + w]; }
  const Tensor<T>& tensor() const noexcept { return data_; }

 private:
  Tensor<T> data_;
};

/// Per-band lateral shifts d[b] = step * b (columns).
struct DispersionSpec {
  std::vector<std::size_t> shifts;

  static DispersionSpec uniform(std::size_t step, std::size_t bands) {
    DispersionSpec d;
    for (std::size_t b = 0; b < bands; ++b) d.shifts.push_back(step * b);
    return d;
  }
  std::size_t bands() const noexcept { return shifts.size(); }
  std::size_t max_shift() const noexcept { return shifts.empty() ? 0 : shifts.back(); }

  void validate() const {
    if (shifts.empty()) throw ContractError("DispersionSpec has no bands");
    if (shifts[0] != 0) throw ContractError("DispersionSpec: first shift must be 0");
    for (std::size_t i = 1; i < shifts.size(); ++i)
      if (shifts[i] < shifts[i - 1]) throw ContractError("DispersionSpec: shifts must be nondecreasing");
  }
};

/// Detector image Y of shape H x (W + max shift).
template <class T>
struct Measurement {
  Tensor<T> values;  // [H, W + d_max]
  double sigma = 0.0;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

// ---------------------------------------------------------------------------
// FUNH container

namespace io {

inline constexpr char kCubeMagic[4] = {'F', 'U', 'N', 'H'};
inline constexpr std::uint32_t kCubeVersion = 1;

enum class DType : std::uint32_t { f32 = 0, f64 = 1, u8 = 2 };

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else return DType::u8;
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw FormatError("unknown dtype code " + std::to_string(static_cast<std::uint32_t>(d)));
}

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const std::string& what) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("truncated container while reading " + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

struct CubeHeader {
  std::uint32_t version = kCubeVersion;
  std::uint32_t height = 0, width = 0, bands = 0;
  DType dtype = DType::f32;
};

template <class T>
void write_cube(std::ostream& os, const Tensor<T>& hwc) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if (hwc.rank() != 3) throw ShapeError("write_cube expects [H,W,bands]");
  const std::size_t h = hwc.dim(0), w = hwc.dim(1), b = hwc.dim(2);
  os.write(kCubeMagic, 4);
  put_le<std::uint32_t>(os, kCubeVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(h));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(b));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(dtype_of<T>()));
  for (std::size_t band = 0; band < b; ++band)
    for (std::size_t i = 0; i < h * w; ++i) put_le<T>(os, hwc[i * b + band]);
}

inline CubeHeader read_header(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated container: missing magic");
  if (std::memcmp(magic, kCubeMagic, 4) != 0) throw FormatError("not a FUNH container (bad magic)");
  CubeHeader hd;
  hd.version = get_le<std::uint32_t>(is, "version");
  if (hd.version != kCubeVersion) throw FormatError("unsupported FUNH version " + std::to_string(hd.version));
  hd.height = get_le<std::uint32_t>(is, "height");
  hd.width = get_le<std::uint32_t>(is, "width");
  hd.bands = get_le<std::uint32_t>(is, "bands");
  const auto code = get_le<std::uint32_t>(is, "dtype");
  if (code > 1) throw FormatError("unsupported FUNH dtype code " + std::to_string(code));
  hd.dtype = static_cast<DType>(code);
  if (hd.bands == 0) throw FormatError("FUNH container declares zero bands");
  return hd;
}

/// Reads a container into [H,W,bands]; f32 payloads widen losslessly when T is double.
template <class T>
Tensor<T> read_cube(std::istream& is, CubeHeader* header_out = nullptr) {
  const CubeHeader hd = read_header(is);
  if (header_out) *header_out = hd;
  if constexpr (std::is_same_v<T, float>) {
    if (hd.dtype == DType::f64) throw FormatError("container holds f64 data; load it as double");
  }
  const std::size_t h = hd.height, w = hd.width, b = hd.bands;
  Tensor<T> out({h, w, b});
  for (std::size_t band = 0; band < b; ++band)
    for (std::size_t i = 0; i < h * w; ++i)
      out[i * b + band] = hd.dtype == DType::f32 ? static_cast<T>(get_le<float>(is, "payload"))
                                                 : static_cast<T>(get_le<double>(is, "payload"));
  return out;
}

template <class T>
void save_tensor_file(const std::string& path, const Tensor<T>& hwc) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_cube(os, hwc);
  if (!os) throw FormatError("write failed for " + path);
}

template <class T>
Tensor<T> load_tensor_file(const std::string& path, CubeHeader* header_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  Tensor<T> t = read_cube<T>(is, header_out);
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after payload");
  return t;
}

}  // namespace io

template <class T>
void save_cube(const std::string& path, const HsiCube<T>& cube) {
  io::save_tensor_file(path, cube.tensor());
}

template <class T>
HsiCube<T> load_cube(const std::string& path) {
  return HsiCube<T>(io::load_tensor_file<T>(path));
}

template <class T>
void save_mask(const std::string& path, const CodedAperture<T>& m) {
  io::save_tensor_file(path, m.tensor().reshaped({m.height(), m.width(), 1}));
}

template <class T>
CodedAperture<T> load_mask(const std::string& path) {
  Tensor<T> t = io::load_tensor_file<T>(path);
  if (t.dim(2) != 1) throw FormatError(path + ": mask container must have exactly one band");
  return CodedAperture<T>(t.reshaped({t.dim(0), t.dim(1)}));
}

template <class T>
void save_measurement(const std::string& path, const Measurement<T>& y) {
  io::save_tensor_file(path, y.values.reshaped({y.height(), y.width(), 1}));
}

template <class T>
Measurement<T> load_measurement(const std::string& path) {
  Tensor<T> t = io::load_tensor_file<T>(path);
  if (t.dim(2) != 1) throw FormatError(path + ": measurement container must have exactly one band");
  return Measurement<T>{t.reshaped({t.dim(0), t.dim(1)}), 0.0};
}

}  // namespace fun
