#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace recvsr {

/// Every failure in the library is reported with this exception type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array. Image-like tensors use the (C, H, W) layout with an
/// optional leading batch dimension.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw Error("tensor data length " + std::to_string(data_.size()) +
                  " does not match shape " + to_string(shape_));
    }
  }

  static BasicTensor chw(std::size_t c, std::size_t h, std::size_t w, T fill = T{0}) {
    return BasicTensor({c, h, w}, fill);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Image accessors; valid for rank-3 tensors.
  std::size_t channels() const { return shape_.at(0); }
  std::size_t height() const { return shape_.at(1); }
  std::size_t width() const { return shape_.at(2); }
  std::size_t plane_size() const { return shape_.at(1) * shape_.at(2); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  std::span<T> plane(std::size_t c) {
    return std::span<T>(data_).subspan(c * plane_size(), plane_size());
  }
  std::span<const T> plane(std::size_t c) const {
    return std::span<const T>(data_).subspan(c * plane_size(), plane_size());
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  BasicTensor reshaped(Shape shape) const {
    if (element_count(shape) != size()) {
      throw Error("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw Error(std::string(what) + ": expected rank " + std::to_string(rank) +
                ", got shape " + to_string(s));
  }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw Error(std::string(what) + ": shape mismatch " + to_string(a) + " vs " +
                to_string(b));
  }
}

template <class T>
bool all_finite(const BasicTensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](T v) { return std::isfinite(v); });
}

template <class T>
void check_finite(const BasicTensor<T>& t, std::string_view op) {
  if (!all_finite(t)) {
    throw Error("non-finite value produced by '" + std::string(op) + "'");
  }
}

// Elementwise arithmetic. All of these are pure and return new tensors.

template <class T, class F>
BasicTensor<T> map(const BasicTensor<T>& a, F f) {
  BasicTensor<T> out(a.shape());
  std::transform(a.data().begin(), a.data().end(), out.data().begin(), f);
  return out;
}

template <class T, class F>
BasicTensor<T> zip_with(const BasicTensor<T>& a, const BasicTensor<T>& b, F f,
                        const char* what) {
  require_same_shape(a.shape(), b.shape(), what);
  BasicTensor<T> out(a.shape());
  std::transform(a.data().begin(), a.data().end(), b.data().begin(),
                 out.data().begin(), f);
  return out;
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip_with(a, b, std::plus<T>(), "add");
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip_with(a, b, std::minus<T>(), "sub");
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip_with(a, b, std::multiplies<T>(), "mul");
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  return map(a, [s](T v) { return v * s; });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return map(a, [](T v) { return v > T{0} ? v : T{0}; });
}

template <class T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& a, T slope) {
  return map(a, [slope](T v) { return v > T{0} ? v : slope * v; });
}

template <class T>
BasicTensor<T> clamp(const BasicTensor<T>& a, T lo, T hi) {
  return map(a, [lo, hi](T v) { return std::clamp(v, lo, hi); });
}

/// In-place y += alpha * x.
template <class T>
void axpy(T alpha, const BasicTensor<T>& x, BasicTensor<T>& y) {
  require_same_shape(x.shape(), y.shape(), "axpy");
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] += alpha * xs[i];
}

/// In-place y += x, allocating y when it is still empty.
template <class T>
void accumulate_into(BasicTensor<T>& y, const BasicTensor<T>& x) {
  if (y.empty() && y.shape().empty()) {
    y = x;
    return;
  }
  require_same_shape(x.shape(), y.shape(), "accumulate");
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] += xs[i];
}

template <class T>
T sum(const BasicTensor<T>& a) {
  T s{0};
  for (T v : a.data()) s += v;
  return s;
}

template <class T>
double mean_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
  if (a.size() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  }
  return s / static_cast<double>(a.size());
}

template <class T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

}  // namespace recvsr
