#include "ummx/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ummx/error.hpp"

namespace ummx {

namespace {

int64_t shape_size(const std::vector<int>& shape) {
  int64_t n = 1;
  for (const int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + std::to_string(d));
    n *= d;
  }
  return shape.empty() ? 0 : n;
}

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  size_ = shape_size(shape_);
  data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(size_), 0.0);
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.size_ = shape_size(t.shape_);
  if (static_cast<int64_t>(values.size()) != t.size_)
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     t.shape_str());
  t.data_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

bool Tensor::all_finite() const {
  if (!data_) return true;
  for (const double v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.size_ = size_;
  t.data_ = data_ ? std::make_shared<std::vector<double>>(*data_) : nullptr;
  return t;
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  Tensor t;
  t.shape_ = std::move(shape);
  t.size_ = shape_size(t.shape_);
  if (t.size_ != size_)
    throw ShapeError("reshape from " + shape_str() + " to " + t.shape_str() +
                     " changes element count");
  t.data_ = data_;
  return t;
}

void Tensor::fill(double v) {
  if (data_) std::fill(data_->begin(), data_->end(), v);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ']';
  return os.str();
}

void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite value encountered");
}

void gemm(bool trans_a, bool trans_b, int n, int m, int k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  ConstMatMap ma(a, trans_a ? k : n, trans_a ? n : k);
  ConstMatMap mb(b, trans_b ? m : k, trans_b ? k : m);
  MatMap mc(c, n, m);
  if (beta == 0.0)
    mc.setZero();
  else if (beta != 1.0)
    mc *= beta;
  if (!trans_a && !trans_b)
    mc.noalias() += alpha * ma * mb;
  else if (trans_a && !trans_b)
    mc.noalias() += alpha * ma.transpose() * mb;
  else if (!trans_a && trans_b)
    mc.noalias() += alpha * ma * mb.transpose();
  else
    mc.noalias() += alpha * ma.transpose() * mb.transpose();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul shape mismatch: " + a.shape_str() + " x " + b.shape_str());
  Tensor c({a.dim(0), b.dim(1)});
  gemm(false, false, a.dim(0), b.dim(1), a.dim(1), 1.0, a.data(), b.data(), 0.0, c.data());
  return c;
}

Tensor softmax(const Tensor& logits, int axis) {
  if (axis < 0 || axis >= logits.rank())
    throw ShapeError("softmax axis " + std::to_string(axis) + " invalid for " +
                     logits.shape_str());
  check_finite(logits, "softmax input");
  Tensor out = logits.clone();
  const int n = logits.dim(axis);
  int64_t inner = 1;
  for (int i = axis + 1; i < logits.rank(); ++i) inner *= logits.dim(i);
  const int64_t outer = logits.size() / (n * inner);
  double* p = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      double* base = p + o * n * inner + in;
      double mx = base[0];
      for (int i = 1; i < n; ++i) mx = std::max(mx, base[static_cast<int64_t>(i) * inner]);
      double sum = 0.0;
      for (int i = 0; i < n; ++i) {
        double& v = base[static_cast<int64_t>(i) * inner];
        v = std::exp(v - mx);
        sum += v;
      }
      for (int i = 0; i < n; ++i) base[static_cast<int64_t>(i) * inner] /= sum;
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1 || x.cols() == 0) throw ShapeError("layer_norm: zero-length axis");
  const int h = x.cols();
  if (gain.size() != h || bias.size() != h)
    throw ShapeError("layer_norm: gain/bias must match last-axis size " + std::to_string(h));
  check_finite(x, "layer_norm input");
  Tensor out = x.clone();
  const int64_t rows = x.rows();
  for (int64_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * h;
    double mean = 0.0;
    for (int j = 0; j < h; ++j) mean += row[j];
    mean /= h;
    double var = 0.0;
    for (int j = 0; j < h; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= h;
    // var == 0 makes every centered value 0, so inv can be anything finite.
    const double inv = (var + eps) > 0.0 ? 1.0 / std::sqrt(var + eps) : 0.0;
    for (int j = 0; j < h; ++j)
      row[j] = gain.data()[j] * (row[j] - mean) * inv + bias.data()[j];
  }
  return out;
}

}  // namespace ummx
