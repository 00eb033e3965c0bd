#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ptsn/errors.hpp"

namespace ptsn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {
inline std::atomic<bool>& checked_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace detail

/// Checked mode: every recorded operation verifies its output is finite.
inline void set_checked_mode(bool on) { detail::checked_flag().store(on); }
inline bool checked_mode() { return detail::checked_flag().load(); }

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major array. Rank >= 1, every dimension positive.
///
/// Most operations view a tensor as a matrix whose column count is the last
/// dimension and whose row count is the product of the others.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T(0)) {
    return Tensor(Shape{rows, cols}, fill);
  }

  static Tensor from_rows(const std::vector<std::vector<T>>& rows) {
    if (rows.empty() || rows.front().empty()) throw ShapeError("from_rows: empty input");
    const std::size_t c = rows.front().size();
    std::vector<T> data;
    data.reserve(rows.size() * c);
    for (const auto& r : rows) {
      if (r.size() != c) throw ShapeError("from_rows: ragged rows");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), c}, std::move(data));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return shape_.empty() ? 0 : data_.size() / shape_.back(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  Eigen::Map<RowMatrix<T>> mat() {
    return Eigen::Map<RowMatrix<T>>(data_.data(), static_cast<Eigen::Index>(rows()),
                                    static_cast<Eigen::Index>(cols()));
  }
  Eigen::Map<const RowMatrix<T>> mat() const {
    return Eigen::Map<const RowMatrix<T>>(data_.data(), static_cast<Eigen::Index>(rows()),
                                          static_cast<Eigen::Index>(cols()));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

enum class ParamGroup { encoder, other };

inline const char* group_name(ParamGroup g) { return g == ParamGroup::encoder ? "encoder" : "other"; }

/// Trainable tensor with its gradient accumulator.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  ParamGroup group = ParamGroup::other;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, ParamGroup g = ParamGroup::other)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), group(g) {}

  void zero_grad() { grad.fill(T(0)); }
};

}  // namespace ptsn
