#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace ummx {

/// Dense row-major tensor of doubles. Copies share storage; operations
/// always allocate fresh storage, so a tensor handed out by an op never
/// changes underneath the caller. The only sanctioned in-place mutators
/// are the optimizer (parameter values) and the tape (gradient buffers),
/// both of which own their tensors exclusively.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor from(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar(double v) { return from({1}, {v}); }

  bool empty() const { return !data_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return size_; }

  // Flattened 2-D view: all leading axes collapsed into rows.
  int64_t rows() const { return shape_.empty() ? 0 : size_ / shape_.back(); }
  int cols() const { return shape_.empty() ? 0 : shape_.back(); }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }

  double& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  double& at(int i) { return (*data_)[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return (*data_)[static_cast<size_t>(i) * shape_[1] + j]; }
  double& at(int i, int j, int k) {
    return (*data_)[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double at(int i) const { return (*data_)[static_cast<size_t>(i)]; }
  double at(int i, int j) const { return (*data_)[static_cast<size_t>(i) * shape_[1] + j]; }
  double at(int i, int j, int k) const {
    return (*data_)[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  /// Deep copy with fresh storage.
  Tensor clone() const;

  /// Same storage, new shape (element count must match).
  Tensor reshaped(std::vector<int> shape) const;

  void fill(double v);
  void zero() { fill(0.0); }

  std::string shape_str() const;

 private:
  std::shared_ptr<std::vector<double>> data_;
  std::vector<int> shape_;
  int64_t size_ = 0;
};

/// 2-D matrix product c = a. b (a: [n,k], b: [k,m]).
Tensor matmul(const Tensor& a, const Tensor& b);

/// GEMM on raw pointers, row-major: c (n x m) = alpha * op(a) . op(b) + beta * c.
void gemm(bool trans_a, bool trans_b, int n, int m, int k, double alpha,
          const double* a, const double* b, double beta, double* c);

/// Softmax along `axis` with max-subtraction. Throws NumericError on
/// non-finite input and ShapeError on an invalid axis.
Tensor softmax(const Tensor& logits, int axis);

/// Layer normalization over the last axis: gain * (x - mean) / sqrt(var + eps) + bias.
/// gain/bias must match the last-axis size; a zero-length axis is a ShapeError.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

void check_finite(const Tensor& t, const char* what);

}  // namespace ummx
