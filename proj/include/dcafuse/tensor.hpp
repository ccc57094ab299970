// Copyright (c) 2026 The dcafuse Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace dcafuse {

using Real = double;

/// Shape or width disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation invoked in the wrong lifecycle state (e.g. backward before forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed file, header or manifest.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace detail

/// Dense row-major array of Real with an explicit shape.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, Real fill = 0.0)
      : shape_(std::move(shape)) {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("tensor dimension must be positive, got " + detail::shape_str(shape_));
    }
    data_.assign(count(shape_), fill);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<Real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + detail::shape_str(shape_));
    }
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  std::vector<Real>& vec() { return data_; }
  const std::vector<Real>& vec() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Row `r` of a tensor viewed as dim(0) x (everything else).
  std::span<Real> row(std::size_t r) {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<Real>(data_).subspan(r * w, w);
  }
  std::span<const Real> row(std::size_t r) const {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<const Real>(data_).subspan(r * w, w);
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  Tensor zeros_like() const { return Tensor(shape_); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (!same_shape(o)) {
      throw DimensionError(std::string(what) + ": shape " + detail::shape_str(shape_) + " vs " +
                           detail::shape_str(o.shape_));
    }
  }

  void require_shape(const std::vector<std::size_t>& expected, const std::string& what) const {
    if (shape_ != expected) {
      throw DimensionError(what + ": expected shape " + detail::shape_str(expected) + ", got " +
                           detail::shape_str(shape_));
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<Real> data_;
};

// ---------------------------------------------------------------------------
// Tensor files: one JSON header line {"shape":[...]} then the payload as
// little-endian IEEE-754 binary32, row-major.

inline void write_tensor(std::ostream& os, const Tensor& t) {
  nlohmann::json header;
  header["shape"] = t.shape();
  os << header.dump() << '\n';
  std::vector<unsigned char> buf(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float f = static_cast<float>(t[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    buf[4 * i + 0] = static_cast<unsigned char>(bits & 0xFFu);
    buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xFFu);
    buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xFFu);
    buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xFFu);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw FormatError("tensor write failed");
}

inline Tensor read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("tensor header missing");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tensor header is not JSON: ") + e.what());
  }
  if (!header.contains("shape") || !header["shape"].is_array()) {
    throw FormatError("tensor header lacks a \"shape\" array");
  }
  std::vector<std::size_t> shape;
  for (const auto& d : header["shape"]) {
    if (!d.is_number_integer() || d.get<long long>() <= 0) throw FormatError("tensor shape entries must be positive integers");
    shape.push_back(d.get<std::size_t>());
  }
  const std::size_t n = Tensor::count(shape);
  std::vector<unsigned char> buf(n * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw FormatError("tensor payload truncated");
  std::vector<Real> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(buf[4 * i]) |
                               (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                               (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                               (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
    float f;
    std::memcpy(&f, &bits, sizeof f);
    data[i] = f;
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace dcafuse
