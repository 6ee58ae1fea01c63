#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace setinfer::ad {

using Shape = std::vector<std::int64_t>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor of doubles. Rank 0 represents a scalar.
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(check_numel(shape_), fill) {}

  Array(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != numel(shape_)) {
      throw ShapeError("Array: data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

  static Array zeros(Shape shape) { return Array(std::move(shape), 0.0); }

  static Array full(Shape shape, double v) { return Array(std::move(shape), v); }

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double item() const {
    if (size() != 1) {
      throw ShapeError("Array::item: expected a single element, shape " + shape_str(shape_));
    }
    return data_[0];
  }

  bool same_shape(const Array& o) const { return shape_ == o.shape_; }

 private:
  static std::size_t check_numel(const Shape& s) {
    for (auto e : s) {
      if (e < 0) throw ShapeError("Array: negative extent in shape " + shape_str(s));
    }
    return static_cast<std::size_t>(numel(s));
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace setinfer::ad
