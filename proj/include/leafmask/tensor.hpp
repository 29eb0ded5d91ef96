#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "leafmask/errors.hpp"

namespace leafmask {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4)
    throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + to_string(shape));
}

// Dense row-major array of rank 1..4. A default-constructed tensor is the
// "unset" placeholder (rank 0, no elements); every other tensor satisfies
// size() == product(shape()) with all extents >= 1.
//
// Real-valued code is templated on T: float is the runtime precision and
// double the verification precision used by the gradient checks.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != element_count(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{}); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

  bool empty() const noexcept { return data_.empty(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <class... I>
  T& operator()(I... idx) noexcept {
    return data_[offset(idx...)];
  }
  template <class... I>
  const T& operator()(I... idx) const noexcept {
    return data_[offset(idx...)];
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool operator==(const Tensor& other) const = default;

 private:
  template <class... I>
  std::size_t offset(I... idx) const noexcept {
    const std::array<std::size_t, sizeof...(I)> ix{static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < ix.size(); ++a) off = off * shape_[a] + ix[a];
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  if (t.empty()) return {};
  return Tensor<T>::zeros(t.shape());
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

template <class T>
T sum(const Tensor<T>& t) {
  T acc{};
  for (T v : t.data()) acc += v;
  return acc;
}

template <class T>
T max_abs(const Tensor<T>& t) {
  T m{};
  for (T v : t.data()) m = std::max(m, static_cast<T>(std::abs(v)));
  return m;
}

// a += scale * b, shapes must match.
template <class T>
void accumulate(Tensor<T>& a, const Tensor<T>& b, T scale = T{1}) {
  if (a.shape() != b.shape())
    throw ShapeError("accumulate: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
}

template <class T>
Tensor<T> scaled(Tensor<T> t, T s) {
  for (auto& v : t.data()) v *= s;
  return t;
}

}  // namespace leafmask
