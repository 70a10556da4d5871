#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "doa/common.hpp"

namespace doa::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor of doubles. Values entering through the checked
// constructors must be finite; op results created via uninit() skip the scan.
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {
    validate_shape();
  }

  Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    require(data_.size() == shape_size(shape_), errc::shape_mismatch,
            "data length " + std::to_string(data_.size()) + " != product of " + shape_str(shape_));
    for (double v : data_)
      require(std::isfinite(v), errc::non_finite_input, "non-finite value in array literal");
  }

  static Array scalar(double v) {
    require(std::isfinite(v), errc::non_finite_input, "non-finite scalar");
    Array a = uninit({1});
    a.data_[0] = v;
    return a;
  }

  static Array full(Shape shape, double v) {
    require(std::isfinite(v), errc::non_finite_input, "non-finite fill value");
    Array a = uninit(std::move(shape));
    std::fill(a.data_.begin(), a.data_.end(), v);
    return a;
  }

  static Array zeros(Shape shape) { return Array(std::move(shape)); }

  // Unchecked fast path for op outputs.
  static Array uninit(Shape shape) {
    Array a;
    a.shape_ = std::move(shape);
    a.validate_shape();
    a.data_.resize(shape_size(a.shape_));
    return a;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  const std::vector<double>& vec() const { return data_; }

  double item() const {
    require(size() == 1, errc::shape_mismatch, "item() on non-scalar " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Array& o) const { return shape_ == o.shape_; }

 private:
  void validate_shape() const {
    for (auto d : shape_)
      require(d > 0, errc::shape_mismatch, "zero-sized dimension in " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace doa::ad
