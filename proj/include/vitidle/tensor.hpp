#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "vitidle/errors.hpp"

namespace vitidle {

/// Dense row-major tensor, 64-bit values throughout. Most of the codebase
/// treats these as matrices (rank 2); images are rank 3, dataset files rank 4.
struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> d, double fill = 0.0)
      : dims(std::move(d)) {
    data.assign(checked_numel(dims), fill);
  }

  Tensor(std::vector<std::size_t> d, std::vector<double> values)
      : dims(std::move(d)), data(std::move(values)) {
    if (checked_numel(dims) != data.size()) {
      throw ShapeError("tensor: dims do not match value count");
    }
  }

  static Tensor matrix(std::size_t r, std::size_t c, double fill = 0.0) {
    return Tensor({r, c}, fill);
  }

  /// 2-D convenience: Tensor::from_rows({{1,2},{3,4}}).
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Tensor t({r, c});
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("from_rows: ragged rows");
      for (double v : row) t.data[i++] = v;
    }
    return t;
  }

  static Tensor row_vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return dims.size(); }

  std::size_t rows() const {
    require_matrix();
    return dims[0];
  }
  std::size_t cols() const {
    require_matrix();
    return dims[1];
  }

  double& at(std::size_t r, std::size_t c) { return data[r * dims[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * dims[1] + c]; }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void require_matrix() const {
    if (dims.size() != 2) throw ShapeError("tensor: expected rank 2");
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& d) {
    std::size_t n = 1;
    for (std::size_t e : d) {
      if (e == 0) throw ShapeError("tensor: zero extent");
      n *= e;
    }
    return n;
  }
};

// ---------------------------------------------------------------------------
// Tensor binary format v1, used for checkpoints, datasets and single images.
//
//   magic "TNSR" | version 0x01 | dtype (0x00 = f32, 0x01 = f64)
//   rank  u32 LE | extents u64 LE each | row-major payload LE
//
// Values are widened to f64 on read. Writers may narrow to f32 on request.
// ---------------------------------------------------------------------------

enum class Dtype : std::uint8_t { f32 = 0x00, f64 = 0x01 };

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ContractError("tensor file: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw ContractError("tensor file: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t, Dtype dtype = Dtype::f64) {
  os.write("TNSR", 4);
  const unsigned char version = 0x01;
  os.write(reinterpret_cast<const char*>(&version), 1);
  const unsigned char d = static_cast<unsigned char>(dtype);
  os.write(reinterpret_cast<const char*>(&d), 1);
  detail::put_u32(os, static_cast<std::uint32_t>(t.dims.size()));
  for (std::size_t e : t.dims) detail::put_u64(os, static_cast<std::uint64_t>(e));
  if (dtype == Dtype::f64) {
    for (double v : t.data) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  } else {
    for (double v : t.data) {
      const float f = static_cast<float>(v);
      detail::put_u32(os, std::bit_cast<std::uint32_t>(f));
    }
  }
  if (!os) throw ContractError("tensor file: write failure");
}

inline void write_tensor(const std::string& path, const Tensor& t, Dtype dtype = Dtype::f64) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("tensor file: cannot open for write: " + path);
  write_tensor(os, t, dtype);
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "TNSR") {
    throw ContractError("tensor file: bad magic");
  }
  unsigned char version = 0, dtype = 0;
  is.read(reinterpret_cast<char*>(&version), 1);
  is.read(reinterpret_cast<char*>(&dtype), 1);
  if (!is || version != 0x01) throw ContractError("tensor file: unsupported version");
  if (dtype != 0x00 && dtype != 0x01) throw ContractError("tensor file: unknown dtype");
  const std::uint32_t rank = detail::get_u32(is);
  std::vector<std::size_t> dims(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    dims[i] = static_cast<std::size_t>(detail::get_u64(is));
    if (dims[i] == 0) throw ContractError("tensor file: zero extent");
    numel *= dims[i];
  }
  Tensor t(std::move(dims));
  if (dtype == 0x01) {
    for (std::size_t i = 0; i < numel; ++i) {
      t.data[i] = std::bit_cast<double>(detail::get_u64(is));
    }
  } else {
    for (std::size_t i = 0; i < numel; ++i) {
      // 32-bit payloads are widened on read.
      t.data[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(is)));
    }
  }
  if (!is) throw ContractError("tensor file: truncated payload");
  return t;
}

inline Tensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("tensor file: cannot open: " + path);
  return read_tensor(is);
}

}  // namespace vitidle
