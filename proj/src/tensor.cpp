#include "mtl/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mtl/errors.hpp"

namespace mtl {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t extent_product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (extent_product(shape_) != data_.size()) {
    throw DimensionError("tensor payload of " + std::to_string(data_.size()) +
                         " entries does not fill shape " + shape_str(shape_));
  }
  validate();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(extent_product(shape_), 0.0);
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  for (double& x : t.data_) x = v;
  t.validate();
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> entries) {
  return Tensor({entries.size()}, std::vector<double>(entries));
}

std::size_t Tensor::rows() const {
  if (ndim() != 2) throw DimensionError("expected a matrix, got shape " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (ndim() != 2) throw DimensionError("expected a matrix, got shape " + shape_str(shape_));
  return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

double Tensor::at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

double Tensor::scalar_value() const {
  if (!is_scalar()) {
    throw DimensionError("expected a scalar, got shape " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (extent_product(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::validate() const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw NonFiniteError("non-finite value at flat index " + std::to_string(i) +
                           " in tensor of shape " + shape_str(shape_));
    }
  }
}

}  // namespace mtl
