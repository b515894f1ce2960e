// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mam/error.hpp"

namespace mam {

enum class DType { F32, F64 };

inline std::string_view dtype_name(DType d) { return d == DType::F32 ? "F32" : "F64"; }
inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

using Shape = std::vector<std::uint64_t>;

inline std::uint64_t shape_numel(const Shape& shape) {
  std::uint64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major tensor. F32 tensors store floats, F64 tensors store doubles;
/// all reductions accumulate in double regardless of storage.
class Tensor {
 public:
  using Storage = std::variant<std::vector<float>, std::vector<double>>;

  Tensor() : storage_(std::vector<float>{}) {}

  Tensor(Shape shape, std::vector<float> data) : Tensor(std::move(shape), Storage(std::move(data)), true) {}
  Tensor(Shape shape, std::vector<double> data) : Tensor(std::move(shape), Storage(std::move(data)), true) {}

  /// Converts `values` to the requested storage type.
  static Tensor from_values(DType dtype, Shape shape, std::span<const double> values) {
    if (dtype == DType::F64) return Tensor(std::move(shape), std::vector<double>(values.begin(), values.end()));
    std::vector<float> f(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) f[i] = static_cast<float>(values[i]);
    return Tensor(std::move(shape), std::move(f));
  }

  static Tensor zeros(DType dtype, Shape shape) {
    std::vector<double> z(shape_numel(shape), 0.0);
    return from_values(dtype, std::move(shape), z);
  }

  /// Skips the finiteness check; used by fuzzers that need to build invalid inputs.
  static Tensor unchecked(Shape shape, Storage data) { return Tensor(std::move(shape), std::move(data), false); }

  DType dtype() const { return std::holds_alternative<std::vector<float>>(storage_) ? DType::F32 : DType::F64; }
  const Shape& shape() const { return shape_; }
  std::size_t numel() const {
    return std::visit([](const auto& v) { return v.size(); }, storage_);
  }
  std::size_t rank() const { return shape_.size(); }

  double operator[](std::size_t i) const {
    return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, storage_);
  }

  const Storage& storage() const { return storage_; }

  template <typename T>
  std::span<const T> view() const { return std::get<std::vector<T>>(storage_); }

  std::vector<double> to_f64() const {
    return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, storage_);
  }

  std::span<const std::byte> bytes() const {
    return std::visit(
        [](const auto& v) { return std::as_bytes(std::span(v.data(), v.size())); }, storage_);
  }

  std::size_t byte_size() const { return numel() * dtype_size(dtype()); }

  /// Bitwise equality of dtype, shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype() || a.shape_ != b.shape_) return false;
    auto x = a.bytes();
    auto y = b.bytes();
    return x.size() == y.size() && (x.empty() || std::memcmp(x.data(), y.data(), x.size()) == 0);
  }

 private:
  Tensor(Shape shape, Storage data, bool check) : shape_(std::move(shape)), storage_(std::move(data)) {
    for (auto s : shape_)
      if (s == 0) fail(ErrorCode::ShapeError, "tensor dimensions must be positive, got " + shape_string(shape_));
    if (shape_numel(shape_) != numel())
      fail(ErrorCode::ShapeError,
           "data length " + std::to_string(numel()) + " does not match shape " + shape_string(shape_));
    if (check) {
      std::visit(
          [](const auto& v) {
            for (std::size_t i = 0; i < v.size(); ++i)
              if (!std::isfinite(v[i])) fail(ErrorCode::NonFiniteValue, "element " + std::to_string(i) + " is not finite");
          },
          storage_);
    }
  }

  Shape shape_;
  Storage storage_;
};

/// splitmix64 stream with Box-Muller normals. Normals are produced in pairs from
/// two consecutive uniforms; the second member of the pair is cached.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    fail(ErrorCode::LambdaOutOfRange, "lambda must lie in [0,1], got " + std::to_string(lambda));
}

/// Elementwise lambda*source + (1-lambda)*target, computed in double and stored
/// in the operands' dtype. The endpoints return the operand itself so signed
/// zeros survive bit-for-bit.
inline Tensor lerp(const Tensor& source, const Tensor& target, double lambda) {
  if (source.shape() != target.shape())
    fail(ErrorCode::ShapeMismatch, shape_string(source.shape()) + " vs " + shape_string(target.shape()));
  if (source.dtype() != target.dtype())
    fail(ErrorCode::DtypeMismatch,
         std::string(dtype_name(source.dtype())) + " vs " + std::string(dtype_name(target.dtype())));
  check_lambda(lambda);
  if (lambda == 0.0) return target;
  if (lambda == 1.0) return source;
  const double rest = 1.0 - lambda;
  return std::visit(
      [&](const auto& s) -> Tensor {
        using T = typename std::decay_t<decltype(s)>::value_type;
        auto t = target.view<T>();
        std::vector<T> out(s.size());
        for (std::size_t i = 0; i < s.size(); ++i)
          out[i] = static_cast<T>(lambda * static_cast<double>(s[i]) + rest * static_cast<double>(t[i]));
        return Tensor(target.shape(), std::move(out));
      },
      source.storage());
}

struct TensorStats {
  double mean = 0.0;
  double variance = 0.0;  // population variance (divides by N)
};

/// Welford accumulation in double.
inline TensorStats tensor_stats(const Tensor& t) {
  if (t.numel() == 0) fail(ErrorCode::EmptyTensor, "tensor_stats of an empty tensor");
  return std::visit(
      [](const auto& v) {
        double mean = 0.0;
        double m2 = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double x = static_cast<double>(v[i]);
          const double delta = x - mean;
          mean += delta / static_cast<double>(i + 1);
          m2 += delta * (x - mean);
        }
        return TensorStats{mean, m2 / static_cast<double>(v.size())};
      },
      t.storage());
}

inline Tensor sample_gaussian(const Shape& shape, double mean, double variance, Rng& rng, DType dtype = DType::F32) {
  if (!(variance >= 0.0)) fail(ErrorCode::NegativeVariance, "variance must be >= 0, got " + std::to_string(variance));
  const double sd = std::sqrt(variance);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = mean + sd * rng.normal();
  return Tensor::from_values(dtype, shape, v);
}

inline double frobenius_inner(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(ErrorCode::ShapeMismatch, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace mam
