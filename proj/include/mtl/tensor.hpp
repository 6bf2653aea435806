#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mtl {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// Dense row-major array of 64-bit floats. Construction validates that the
// extents match the payload and that every entry is finite; since each op
// output passes through a constructor, non-finite values surface at the op
// that produced them (as NonFiniteError) rather than corrupting later math.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data);

  // Zero-filled.
  explicit Tensor(Shape shape);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);

  // Row-major matrix from nested lists; rows must have equal lengths.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> entries);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  // 2-D accessors; throw DimensionError if the tensor is not a matrix.
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool is_scalar() const { return data_.size() == 1; }
  double scalar_value() const;

  // Metadata-only reshape; element count must be preserved.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate() const;

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace mtl
