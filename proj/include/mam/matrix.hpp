// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mam/error.hpp"
#include "mam/tensor.hpp"

namespace mam {

/// Row-major double matrix used for representations and toy-model weights.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) fail(ErrorCode::ShapeError, "matrix data does not match its shape");
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

  static Matrix from_tensor(const Tensor& t) {
    if (t.rank() != 2) fail(ErrorCode::ShapeError, "expected a rank-2 tensor, got " + shape_string(t.shape()));
    return Matrix(t.shape()[0], t.shape()[1], t.to_f64());
  }

  Tensor to_tensor(DType dtype = DType::F64) const { return Tensor::from_values(dtype, {rows, cols}, data); }
};

}  // namespace mam
