#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <vector>

#include "groundling/errors.hpp"

namespace groundling {

// Dense row-major tensor of rank 0..4.  Storage is one flat Eigen array; 2-d
// views are Eigen maps, so matmul and friends go through Eigen directly.
template <typename S>
struct Tensor {
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;

  std::vector<int> shape;
  Array data;
  bool requires_grad = false;
  std::optional<Array> grad;  // filled on leaves by backpropagate

  Tensor() = default;

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeMismatch("negative dimension in " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = Array::Zero(count(t.shape));
    return t;
  }

  static Tensor full(std::vector<int> shape, S v) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = Array::Constant(count(t.shape), v);
    return t;
  }

  static Tensor scalar(S v) { return full({1, 1}, v); }

  static Tensor from(std::vector<int> shape, const std::vector<S>& vals) {
    Tensor t;
    t.shape = std::move(shape);
    if (int64_t(vals.size()) != count(t.shape))
      throw ShapeMismatch("value count " + std::to_string(vals.size()) +
                          " does not fill " + shape_str(t.shape));
    t.data = Eigen::Map<const Array>(vals.data(), int64_t(vals.size()));
    return t;
  }

  static Tensor from(std::vector<int> shape, std::initializer_list<S> vals) {
    return from(std::move(shape), std::vector<S>(vals));
  }

  int rank() const { return int(shape.size()); }
  // From the shape, not the storage; callers may set shape first and then
  // resize data to match.
  int64_t numel() const { return count(shape); }
  int dim(int i) const { return shape.at(size_t(i)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  S item() const {
    if (numel() != 1) throw NonScalarLoss("item() on tensor " + shape_str(shape));
    return data[0];
  }

  // Rank-2 view.
  MatMap mat() {
    require_rank(2, "mat()");
    return MatMap(data.data(), shape[0], shape[1]);
  }
  ConstMatMap mat() const {
    require_rank(2, "mat()");
    return ConstMatMap(data.data(), shape[0], shape[1]);
  }

  // Arbitrary [r x c] view over the flat data, r*c must equal numel().
  MatMap as(int r, int c) {
    if (int64_t(r) * c != numel())
      throw ShapeMismatch("as(" + std::to_string(r) + "," + std::to_string(c) +
                          ") on " + shape_str(shape));
    return MatMap(data.data(), r, c);
  }
  ConstMatMap as(int r, int c) const {
    if (int64_t(r) * c != numel())
      throw ShapeMismatch("as(" + std::to_string(r) + "," + std::to_string(c) +
                          ") on " + shape_str(shape));
    return ConstMatMap(data.data(), r, c);
  }

  // Batch b of a rank-3 tensor as a [d1 x d2] map.
  MatMap batch(int b) {
    require_rank(3, "batch()");
    return MatMap(data.data() + int64_t(b) * shape[1] * shape[2], shape[1], shape[2]);
  }
  ConstMatMap batch(int b) const {
    require_rank(3, "batch()");
    return ConstMatMap(data.data() + int64_t(b) * shape[1] * shape[2], shape[1], shape[2]);
  }

  S& at(std::initializer_list<int> idx) { return data[flat(idx)]; }
  S at(std::initializer_list<int> idx) const { return data[flat(idx)]; }

  bool all_finite() const { return data.isFinite().all(); }

  void require_rank(int r, const char* where) const {
    if (rank() != r)
      throw ShapeMismatch(std::string(where) + " needs rank " + std::to_string(r) +
                          ", got " + shape_str(shape));
  }

 private:
  int64_t flat(std::initializer_list<int> idx) const {
    if (int(idx.size()) != rank())
      throw IndexError("index rank " + std::to_string(idx.size()) + " vs tensor " +
                       shape_str(shape));
    int64_t f = 0;
    int k = 0;
    for (int i : idx) {
      if (i < 0 || i >= shape[size_t(k)])
        throw IndexError("index " + std::to_string(i) + " out of range for " +
                         shape_str(shape));
      f = f * shape[size_t(k)] + i;
      ++k;
    }
    return f;
  }
};

}  // namespace groundling
