#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"

namespace gradcache {

class Tape;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Position of a recorded value on a tape.
struct NodeRef {
  Tape* tape = nullptr;
  std::size_t index = 0;
};

/// Immutable row-major f64 array of rank 0, 1 or 2.
///
/// Copies share the underlying buffer. A tensor produced by a recorded
/// operation carries a NodeRef into the tape that owns its graph node; the
/// tape must outlive any attached tensor that is used as an operand.
class Tensor {
 public:
  Tensor() : Tensor(Shape{0}, std::vector<double>{}) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (shape_.size() > 2) {
      throw ShapeError("tensor rank " + std::to_string(shape_.size()) +
                       " unsupported (max 2)");
    }
    if (shape_numel(shape_) != values.size()) {
      throw ShapeError("shape " + shape_string(shape_) + " needs " +
                       std::to_string(shape_numel(shape_)) + " values, got " +
                       std::to_string(values.size()));
    }
    buffer_ = std::make_shared<mem::Buffer>(std::move(values));
  }

  Tensor(Shape shape, std::shared_ptr<mem::Buffer> buffer)
      : shape_(std::move(shape)), buffer_(std::move(buffer)) {
    if (!buffer_ || shape_numel(shape_) != buffer_->size()) {
      throw ShapeError("buffer size does not match shape " +
                       shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor from_rows(
      std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged rows in from_rows");
      v.insert(v.end(), row.begin(), row.end());
    }
    return matrix(r, c, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return buffer_->size(); }

  /// Matrix view: rank-1 is a single row, rank-0 is 1x1.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1);
  }

  std::span<const double> data() const { return buffer_->data(); }
  std::span<const double> row(std::size_t r) const {
    return data().subspan(r * cols(), cols());
  }
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }
  double item() const {
    if (size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    }
    return data()[0];
  }

  bool attached() const { return node_.has_value(); }
  const std::optional<NodeRef>& node() const { return node_; }

  /// Same values, no graph attachment. Shares storage.
  Tensor detach() const {
    Tensor t = *this;
    t.node_.reset();
    return t;
  }

  /// Deep copy into a fresh buffer tagged with the current category.
  Tensor clone() const {
    return Tensor(shape_, std::vector<double>(data().begin(), data().end()));
  }

  mem::Category category() const { return buffer_->category(); }
  const std::shared_ptr<mem::Buffer>& buffer() const { return buffer_; }

  std::vector<double> to_vector() const {
    return std::vector<double>(data().begin(), data().end());
  }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<mem::Buffer> buffer_;
  std::optional<NodeRef> node_;
};

}  // namespace gradcache
