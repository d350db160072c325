#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "evifed/errors.hpp"
#include "evifed/rng.hpp"

namespace evifed {

class Graph;

/// 2-D array of 64-bit reals with an optional gradient buffer. Copies share
/// storage (handle semantics); clone() makes a detached deep copy. A tensor
/// is either a leaf (optionally requires_grad) or the recorded output of a
/// graph operation.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0,
         bool requires_grad = false)
      : d_(std::make_shared<Data>()) {
    d_->rows = rows;
    d_->cols = cols;
    d_->values.assign(rows * cols, fill);
    d_->requires_grad = requires_grad;
  }

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values,
         bool requires_grad = false)
      : d_(std::make_shared<Data>()) {
    if (values.size() != rows * cols) {
      throw shape_error("tensor: " + std::to_string(rows) + "x" +
                        std::to_string(cols) + " needs " +
                        std::to_string(rows * cols) + " values, got " +
                        std::to_string(values.size()));
    }
    d_->rows = rows;
    d_->cols = cols;
    d_->values = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static Tensor row(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor(1, n, std::move(values), requires_grad);
  }

  static Tensor scalar(double v) { return Tensor(1, 1, {v}); }

  static Tensor randn(std::size_t rows, std::size_t cols, Rng& rng,
                      double stddev = 1.0, bool requires_grad = false) {
    Tensor t(rows, cols, 0.0, requires_grad);
    for (auto& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  std::size_t rows() const { return d_->rows; }
  std::size_t cols() const { return d_->cols; }
  std::size_t size() const { return d_->values.size(); }
  std::vector<std::size_t> shape() const { return {d_->rows, d_->cols}; }

  std::string shape_str() const {
    return std::to_string(d_->rows) + "x" + std::to_string(d_->cols);
  }

  double at(std::size_t r, std::size_t c) const {
    return d_->values[r * d_->cols + c];
  }
  double& at(std::size_t r, std::size_t c) {
    return d_->values[r * d_->cols + c];
  }

  const std::vector<double>& values() const { return d_->values; }
  std::vector<double>& values() { return d_->values; }

  /// Scalar extraction; the tensor must be 1x1.
  double value() const {
    if (size() != 1) {
      throw value_error("value(): tensor is " + shape_str() + ", not scalar");
    }
    return d_->values[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return !d_->grad.empty(); }

  /// Gradient buffer, zero-allocated on first use.
  std::vector<double>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
    return d_->grad;
  }
  const std::vector<double>& grad() const {
    if (d_->grad.empty()) {
      const_cast<Data*>(d_.get())->grad.assign(d_->values.size(), 0.0);
    }
    return d_->grad;
  }

  void zero_grad() {
    if (!d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
  }

  /// Deep copy, detached from any graph. Keeps requires_grad.
  Tensor clone() const {
    Tensor t(d_->rows, d_->cols, d_->values, d_->requires_grad);
    return t;
  }

  /// Deep copy that is a plain constant.
  Tensor constant_copy() const {
    return Tensor(d_->rows, d_->cols, d_->values, false);
  }

  bool all_finite() const {
    for (double v : d_->values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Graph bookkeeping (set when an op records this tensor as its output).
  bool tracked() const { return d_->node >= 0; }
  int node_id() const { return d_->node; }
  const Graph* owner() const { return d_->graph; }
  std::uint64_t generation() const { return d_->generation; }
  void mark_tracked(const Graph* g, int node, std::uint64_t generation) {
    d_->graph = g;
    d_->node = node;
    d_->generation = generation;
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  struct Data {
    std::size_t rows = 0, cols = 0;
    std::vector<double> values;
    std::vector<double> grad;  // empty until touched
    bool requires_grad = false;
    const Graph* graph = nullptr;
    int node = -1;
    std::uint64_t generation = 0;
  };

  std::shared_ptr<Data> d_;
};

}  // namespace evifed
