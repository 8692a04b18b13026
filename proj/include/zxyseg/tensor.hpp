#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "zxyseg/error.hpp"

namespace zxyseg {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense n-d array: a shape plus a flat Eigen array, row-major with the last
// axis fastest. Feature maps use [C, Z, Y, X].
template <typename S>
struct Tensor {
  Shape shape;
  Eigen::Array<S, Eigen::Dynamic, 1> data;

  using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatMap =
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.data = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(numel(t.shape));
    return t;
  }

  static Tensor full(Shape s, S value) {
    Tensor t;
    t.shape = std::move(s);
    t.data = Eigen::Array<S, Eigen::Dynamic, 1>::Constant(numel(t.shape), value);
    return t;
  }

  static Tensor from(Shape s, std::initializer_list<S> values) {
    Tensor t = zeros(std::move(s));
    require(static_cast<std::int64_t>(values.size()) == t.size(), "tensor.shape",
            "initializer size does not match shape " + shape_str(t.shape));
    std::int64_t i = 0;
    for (S v : values) t.data[i++] = v;
    return t;
  }

  std::int64_t size() const { return data.size(); }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  S& operator[](std::int64_t i) { return data[i]; }
  S operator[](std::int64_t i) const { return data[i]; }

  // 2-d matrix view over the flat buffer, row-major
  MatMap mat(std::int64_t rows, std::int64_t cols) {
    require(rows * cols == size(), "tensor.shape", "matrix view size mismatch");
    return MatMap(data.data(), rows, cols);
  }
  ConstMatMap mat(std::int64_t rows, std::int64_t cols) const {
    require(rows * cols == size(), "tensor.shape", "matrix view size mismatch");
    return ConstMatMap(data.data(), rows, cols);
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data = data.template cast<T>();
    return out;
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

}  // namespace zxyseg
