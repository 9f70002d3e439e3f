/* Copyright 2026 The natsearch Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef NATS_TENSOR_HPP_
#define NATS_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nats/common.hpp"

namespace nats {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Dense row-major tensor. Activations are (N,C,H,W), convolution weights
// (C_out,C_in,K_h,K_w), matrices (rows,cols).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
  Tensor(std::initializer_list<int> shape) : Tensor(Shape(shape)) {}

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int a, int b) { return data_[static_cast<std::size_t>(a) * dim(1) + b]; }
  const T& at(int a, int b) const {
    return data_[static_cast<std::size_t>(a) * dim(1) + b];
  }
  T& at(int a, int b, int c) {
    return data_[(static_cast<std::size_t>(a) * dim(1) + b) * dim(2) + c];
  }
  T& at(int a, int b, int c, int d) {
    return data_[((static_cast<std::size_t>(a) * dim(1) + b) * dim(2) + c) *
                     dim(3) +
                 d];
  }
  const T& at(int a, int b, int c, int d) const {
    return data_[((static_cast<std::size_t>(a) * dim(1) + b) * dim(2) + c) *
                     dim(3) +
                 d];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
void check_shape(const Tensor<T>& t, const Shape& want, const char* what) {
  if (t.shape() != want)
    throw ShapeError(std::string(what) + ": expected " + shape_str(want) +
                     ", got " + shape_str(t.shape()));
}

template <typename T, typename Rng>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
}

template <typename T, typename Rng>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
}

// He initialization for convolution / linear weights (fan-in scaled normal).
template <typename T, typename Rng>
void fill_he_normal(Tensor<T>& t, Rng& rng, std::size_t fan_in) {
  fill_normal(t, rng, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b))
    throw ShapeError("max_abs_diff: shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) -
                             static_cast<double>(b[i])));
  return m;
}

}  // namespace nats

#endif  // NATS_TENSOR_HPP_
