#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lpcr/errors.hpp"

namespace lpcr {

// Dense row-major tensor. Production code instantiates float; the gradient
// checker instantiates double to keep finite-difference noise far below the
// tolerances it asserts.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw ConfigError("tensor dims must be positive");
      n *= d;
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

using Tensor = TensorT<float>;

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

}  // namespace lpcr
