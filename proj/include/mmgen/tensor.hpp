#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace mmgen {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

// out[c] += sum over rows of m(r, c), rows visited in order so the result
// does not depend on memory alignment.
template <typename T>
void add_column_sums(const Mat<T>& m, T* out) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const T* row = m.data() + r * m.cols();
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[c] += row[c];
  }
}
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

// Dense row-major tensor. Owns its storage; copy is a deep copy.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s)
      : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape))) {}
  Tensor(Shape s, std::vector<T> values)
      : shape(std::move(s)), data(std::move(values)) {}

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // View as rows x cols where rows = shape[0] and cols = product of the rest.
  MatMap<T> matrix() { return MatMap<T>(data.data(), rows(), cols()); }
  ConstMatMap<T> matrix() const {
    return ConstMatMap<T>(data.data(), rows(), cols());
  }
  int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  int64_t cols() const { return rows() == 0 ? 0 : numel() / rows(); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

}  // namespace mmgen
