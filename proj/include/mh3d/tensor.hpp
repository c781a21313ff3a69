#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "mh3d/error.hpp"

namespace mh3d::diff {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

std::string shape_str(const Shape& s);

// Dense row-major array of doubles. Plain value type; all gradient
// machinery lives in Tape/Var.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      fail("Tensor: shape ", shape_str(shape), " does not match data length ", data.size());
  }

  static Tensor zeros(Shape s) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  static Tensor full(Shape s, double v) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool is_scalar() const { return data.size() == 1; }
  double item() const {
    if (!is_scalar()) fail("Tensor::item: tensor of shape ", shape_str(shape), " is not scalar");
    return data[0];
  }

  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
};

}  // namespace mh3d::diff
