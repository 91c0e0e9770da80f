#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace poisonlab {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense n-d array, row-major. Default scalar is double; float is available
// where speed matters more than oracle-grade precision.
template <class S>
struct BasicTensor {
  Shape shape;
  std::vector<S> v;

  BasicTensor() = default;
  BasicTensor(Shape sh, std::vector<S> data) : shape(std::move(sh)), v(std::move(data)) {
    if (numel(shape) != static_cast<int64_t>(v.size()))
      throw ShapeError("tensor data size " + std::to_string(v.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static BasicTensor zeros(Shape sh) {
    std::vector<S> d(static_cast<size_t>(numel(sh)), S(0));
    return BasicTensor(std::move(sh), std::move(d));
  }
  static BasicTensor full(Shape sh, S value) {
    std::vector<S> d(static_cast<size_t>(numel(sh)), value);
    return BasicTensor(std::move(sh), std::move(d));
  }
  static BasicTensor scalar(S value) { return BasicTensor({1}, {value}); }

  int64_t size() const { return static_cast<int64_t>(v.size()); }
  S& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  bool is_scalar() const { return v.size() == 1; }
  S item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str(shape));
    return v[0];
  }

  bool all_finite() const {
    for (S x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

}  // namespace poisonlab
