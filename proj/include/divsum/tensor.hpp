#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace divsum {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. The gradient buffer is absent until
/// `ensure_grad()` is called; once present it always mirrors `shape()`.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t row, std::size_t col) { return values_[row * cols() + col]; }
  double at(std::size_t row, std::size_t col) const { return values_[row * cols() + col]; }

  bool has_grad() const { return has_grad_; }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  void ensure_grad();
  void zero_grad();
  void drop_grad();

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> values_;
  std::vector<double> grad_;
  bool has_grad_ = false;
};

}  // namespace divsum
