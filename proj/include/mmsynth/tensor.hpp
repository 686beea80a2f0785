#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "mmsynth/core.hpp"
#include "mmsynth/rng.hpp"

namespace mmsynth {

// Dense row-major tensor, rank <= 4. Plain value type: copy copies storage.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    v_.assign(static_cast<size_t>(count(shape_)), T(0));
  }

  Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    for (auto& x : t.v_) x = value;
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (auto& x : t.v_) x = static_cast<T>(rng.normal() * static_cast<double>(stddev));
    return t;
  }

  bool empty() const { return v_.empty(); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(v_.size()); }

  T* data() { return v_.data(); }
  const T* data() const { return v_.data(); }

  T& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

  // [C,H,W] indexing
  T& at(int c, int h, int w) {
    return v_[static_cast<size_t>((static_cast<int64_t>(c) * shape_[1] + h) * shape_[2] + w)];
  }
  const T& at(int c, int h, int w) const {
    return v_[static_cast<size_t>((static_cast<int64_t>(c) * shape_[1] + h) * shape_[2] + w)];
  }

  void fill(T value) {
    for (auto& x : v_) x = value;
  }

  void add_(const Tensor& other) {
    if (other.numel() != numel()) throw ShapeError("tensor add_: size mismatch");
    for (int64_t i = 0; i < numel(); ++i) v_[static_cast<size_t>(i)] += other.v_[static_cast<size_t>(i)];
  }

  void scale_(T s) {
    for (auto& x : v_) x *= s;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(v_[static_cast<size_t>(i)]);
    return out;
  }

 private:
  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> v_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mmsynth
