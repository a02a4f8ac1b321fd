#include "ummx/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "ummx/error.hpp"

namespace ummx {

namespace {
constexpr double kMaskBias = -1e30;
constexpr double kBceClip = 1e-12;
constexpr double kInvSqrt2 = 0.7071067811865475;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

void softmax_row(const double* in, double* out, int n) {
  double mx = in[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - mx);
    sum += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= sum;
}

// dX = P .* (dP - rowdot(dP, P)) for a softmax row.
void softmax_row_backward(const double* p, const double* dp, double* dx, int n) {
  double dot = 0.0;
  for (int i = 0; i < n; ++i) dot += p[i] * dp[i];
  for (int i = 0; i < n; ++i) dx[i] += p[i] * (dp[i] - dot);
}
}  // namespace

const Tensor& Var::val() const { return tape->value(*this); }

int Tape::push(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> back) {
  if (swept_) throw Error("tape reused after backward()");
  Node n;
  n.value = std::move(value);
  n.needs_grad = any_needs_grad(parents);
  n.parents = std::move(parents);
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  grads_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

bool Tape::any_needs_grad(const std::vector<int>& parents) const {
  for (const int p : parents)
    if (nodes_[static_cast<size_t>(p)].needs_grad) return true;
  return false;
}

Tensor& Tape::grad_buf(int id) {
  Tensor& g = grads_[static_cast<size_t>(id)];
  if (g.empty()) g = Tensor::zeros(nodes_[static_cast<size_t>(id)].value.shape());
  return g;
}

const Tensor& Tape::value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }

const Tensor& Tape::grad_of(Var v) const { return grads_[static_cast<size_t>(v.id)]; }

Var Tape::leaf(ParamGroup& p) {
  const int id = push(p.tensor, {}, nullptr);
  Node& n = nodes_[static_cast<size_t>(id)];
  n.param = &p;
  n.needs_grad = p.trainable;
  return {this, id};
}

Var Tape::input(Tensor v) {
  const int id = push(std::move(v), {}, nullptr);
  return {this, id};
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) throw ShapeError("add: " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta.clone();
  for (int64_t i = 0; i < out.size(); ++i) out[i] += tb[i];
  const int ia = a.id, ib = b.id;
  const int id = push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    if (t.nodes_[ia].needs_grad) {
      Tensor& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.nodes_[ib].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return {this, id};
}

Var Tape::sub(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) throw ShapeError("sub: " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta.clone();
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= tb[i];
  const int ia = a.id, ib = b.id;
  const int id = push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    if (t.nodes_[ia].needs_grad) {
      Tensor& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.nodes_[ib].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return {this, id};
}

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) throw ShapeError("mul: " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta.clone();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
  const int ia = a.id, ib = b.id;
  const int id = push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& va = t.nodes_[ia].value;
    const Tensor& vb = t.nodes_[ib].value;
    if (t.nodes_[ia].needs_grad) {
      Tensor& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.nodes_[ib].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
  return {this, id};
}

Var Tape::scale(Var a, double s) {
  Tensor out = value(a).clone();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  const int ia = a.id;
  const int id = push(std::move(out), {ia}, [ia, s](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    Tensor& ga = t.grad_buf(ia);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
  return {this, id};
}

Var Tape::add_bias(Var x, Var b) {
  const Tensor& tx = value(x);
  const Tensor& tb = value(b);
  const int h = tx.cols();
  if (tb.size() != h)
    throw ShapeError("add_bias: bias size " + tb.shape_str() + " vs cols " + std::to_string(h));
  Tensor out = tx.clone();
  const int64_t rows = tx.rows();
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < h; ++j) out[r * h + j] += tb[j];
  const int ix = x.id, ib = b.id;
  const int id = push(std::move(out), {ix, ib}, [ix, ib, h](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const int64_t rows = g.size() / h;
    if (t.nodes_[ix].needs_grad) {
      Tensor& gx = t.grad_buf(ix);
      for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.nodes_[ib].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < h; ++j) gb[j] += g[r * h + j];
    }
  });
  return {this, id};
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
    throw ShapeError("matmul: " + ta.shape_str() + " x " + tb.shape_str());
  const int n = ta.dim(0), k = ta.dim(1), m = tb.dim(1);
  Tensor out({n, m});
  gemm(false, false, n, m, k, 1.0, ta.data(), tb.data(), 0.0, out.data());
  const int ia = a.id, ib = b.id;
  const int id = push(std::move(out), {ia, ib}, [ia, ib, n, k, m](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& va = t.nodes_[ia].value;
    const Tensor& vb = t.nodes_[ib].value;
    if (t.nodes_[ia].needs_grad)
      gemm(false, true, n, k, m, 1.0, g.data(), vb.data(), 1.0, t.grad_buf(ia).data());
    if (t.nodes_[ib].needs_grad)
      gemm(true, false, k, m, n, 1.0, va.data(), g.data(), 1.0, t.grad_buf(ib).data());
  });
  return {this, id};
}

Var Tape::linear(Var x, Var w, Var b) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  if (tw.rank() != 2) throw ShapeError("linear: weight must be 2-D, got " + tw.shape_str());
  const int in = tw.dim(0), out_w = tw.dim(1);
  if (tx.cols() != in)
    throw ShapeError("linear: input cols " + std::to_string(tx.cols()) + " vs weight " +
                     tw.shape_str());
  const int64_t rows = tx.rows();
  std::vector<int> out_shape = tx.shape();
  out_shape.back() = out_w;
  Tensor out({static_cast<int>(rows), out_w});
  gemm(false, false, static_cast<int>(rows), out_w, in, 1.0, tx.data(), tw.data(), 0.0,
       out.data());
  if (b.valid()) {
    const Tensor& tb = value(b);
    if (tb.size() != out_w) throw ShapeError("linear: bias size mismatch");
    for (int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < out_w; ++j) out[r * out_w + j] += tb[j];
  }
  std::vector<int> parents = {x.id, w.id};
  if (b.valid()) parents.push_back(b.id);
  const int ix = x.id, iw = w.id, ib = b.valid() ? b.id : -1;
  const int id = push(std::move(out), std::move(parents),
                      [ix, iw, ib, in, out_w, rows](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& vx = t.nodes_[ix].value;
    const Tensor& vw = t.nodes_[iw].value;
    if (t.nodes_[ix].needs_grad)
      gemm(false, true, static_cast<int>(rows), in, out_w, 1.0, g.data(), vw.data(), 1.0,
           t.grad_buf(ix).data());
    if (t.nodes_[iw].needs_grad)
      gemm(true, false, in, out_w, static_cast<int>(rows), 1.0, vx.data(), g.data(), 1.0,
           t.grad_buf(iw).data());
    if (ib >= 0 && t.nodes_[ib].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < out_w; ++j) gb[j] += g[r * out_w + j];
    }
  });
  // Preserve leading axes: output shape = x.shape[:-1] + [out_w].
  Node& made = nodes_[static_cast<size_t>(id)];
  if (out_shape != made.value.shape()) made.value = made.value.reshaped(out_shape);
  return {this, id};
}

Var Tape::transpose(Var x) {
  const Tensor& tx = value(x);
  if (tx.rank() != 2) throw ShapeError("transpose: expects 2-D, got " + tx.shape_str());
  const int n = tx.dim(0), m = tx.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at(j, i) = tx.at(i, j);
  const int ix = x.id;
  const int id = push(std::move(out), {ix}, [ix, n, m](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    Tensor& gx = t.grad_buf(ix);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) gx.at(i, j) += g.at(j, i);
  });
  return {this, id};
}

Var Tape::reshape(Var x, std::vector<int> shape) {
  Tensor out = value(x).clone().reshaped(std::move(shape));
  const int ix = x.id;
  const int id = push(std::move(out), {ix}, [ix](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    Tensor& gx = t.grad_buf(ix);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return {this, id};
}

Var Tape::concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: empty list");
  const int64_t rows = value(xs[0]).rows();
  int total = 0;
  std::vector<int> widths;
  for (const Var& v : xs) {
    const Tensor& t = value(v);
    if (t.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    widths.push_back(t.cols());
    total += t.cols();
  }
  Tensor out({static_cast<int>(rows), total});
  int off = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const Tensor& t = value(xs[i]);
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(t.data() + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  std::vector<int> ids;
  for (const Var& v : xs) ids.push_back(v.id);
  const int id = push(std::move(out), ids, [ids, widths, total, rows](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    int off = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (t.nodes_[static_cast<size_t>(ids[i])].needs_grad) {
        Tensor& gx = t.grad_buf(ids[i]);
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < widths[i]; ++j) gx[r * widths[i] + j] += g[r * total + off + j];
      }
      off += widths[i];
    }
  });
  return {this, id};
}

Var Tape::concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: empty list");
  const int cols = value(xs[0]).cols();
  int64_t total_rows = 0;
  std::vector<int64_t> row_counts;
  for (const Var& v : xs) {
    const Tensor& t = value(v);
    if (t.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    row_counts.push_back(t.rows());
    total_rows += t.rows();
  }
  Tensor out({static_cast<int>(total_rows), cols});
  int64_t off = 0;
  for (const Var& v : xs) {
    const Tensor& t = value(v);
    std::copy_n(t.data(), t.size(), out.data() + off * cols);
    off += t.rows();
  }
  std::vector<int> ids;
  for (const Var& v : xs) ids.push_back(v.id);
  const int id = push(std::move(out), ids, [ids, row_counts, cols](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    int64_t off = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (t.nodes_[static_cast<size_t>(ids[i])].needs_grad) {
        Tensor& gx = t.grad_buf(ids[i]);
        for (int64_t k = 0; k < row_counts[i] * cols; ++k) gx[k] += g[off * cols + k];
      }
      off += row_counts[i];
    }
  });
  return {this, id};
}

Var Tape::row(Var x, int r) {
  const Tensor& tx = value(x);
  const int cols = tx.cols();
  if (r < 0 || r >= tx.rows()) throw ShapeError("row: index out of range");
  Tensor out({1, cols});
  std::copy_n(tx.data() + static_cast<int64_t>(r) * cols, cols, out.data());
  const int ix = x.id;
  const int id = push(std::move(out), {ix}, [ix, r, cols](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    Tensor& gx = t.grad_buf(ix);
    for (int j = 0; j < cols; ++j) gx[static_cast<int64_t>(r) * cols + j] += g[j];
  });
  return {this, id};
}

Var Tape::take_position(Var x, int pos) {
  const Tensor& tx = value(x);
  if (tx.rank() != 3) throw ShapeError("take_position: expects [B,S,H]");
  const int b = tx.dim(0), s = tx.dim(1), h = tx.dim(2);
  if (pos < 0 || pos >= s) throw ShapeError("take_position: index out of range");
  Tensor out({b, h});
  for (int i = 0; i < b; ++i)
    std::copy_n(tx.data() + (static_cast<int64_t>(i) * s + pos) * h, h, out.data() + i * h);
  const int ix = x.id;
  const int id = push(std::move(out), {ix}, [ix, pos, s, h, b](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    Tensor& gx = t.grad_buf(ix);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < h; ++j)
        gx[(static_cast<int64_t>(i) * s + pos) * h + j] += g[i * h + j];
  });
  return {this, id};
}

Var Tape::gather_rows(Var table, std::vector<int> ids) {
  const Tensor& tt = value(table);
  if (tt.rank() != 2) throw ShapeError("gather_rows: table must be 2-D");
  const int v = tt.dim(0), h = tt.dim(1);
  for (const int i : ids)
    if (i < 0 || i >= v)
      throw VocabError("gather_rows: id " + std::to_string(i) + " out of range [0," +
                       std::to_string(v) + ")");
  Tensor out({static_cast<int>(ids.size()), h});
  for (size_t r = 0; r < ids.size(); ++r)
    std::copy_n(tt.data() + static_cast<int64_t>(ids[r]) * h, h, out.data() + r * h);
  const int it = table.id;
  const int id =
      push(std::move(out), {it}, [it, ids = std::move(ids), h](Tape& t, int self) {
        const Tensor& g = t.grad_buf(self);
        Tensor& gt = t.grad_buf(it);
        for (size_t r = 0; r < ids.size(); ++r)
          for (int j = 0; j < h; ++j)
            gt[static_cast<int64_t>(ids[r]) * h + j] += g[static_cast<int64_t>(r) * h + j];
      });
  return {this, id};
}

Var Tape::mean_rows(Var x, std::vector<int> idxs) {
  const Tensor& tx = value(x);
  if (idxs.empty()) throw ShapeError("mean_rows: empty index set");
  const int cols = tx.cols();
  const double inv = 1.0 / static_cast<double>(idxs.size());
  Tensor out({1, cols});
  for (const int r : idxs) {
    if (r < 0 || r >= tx.rows()) throw ShapeError("mean_rows: index out of range");
    for (int j = 0; j < cols; ++j) out[j] += tx[static_cast<int64_t>(r) * cols + j] * inv;
  }
  const int ix = x.id;
  const int id = push(std::move(out), {ix}, [ix, idxs = std::move(idxs), cols, inv](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    Tensor& gx = t.grad_buf(ix);
    for (const int r : idxs)
      for (int j = 0; j < cols; ++j) gx[static_cast<int64_t>(r) * cols + j] += g[j] * inv;
  });
  return {this, id};
}

Var Tape::outer_sum(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  const int n = static_cast<int>(ta.size()), m = static_cast<int>(tb.size());
  Tensor out({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at(i, j) = ta[i] + tb[j];
  const int ia = a.id, ib = b.id;
  const int id = push(std::move(out), {ia, ib}, [ia, ib, n, m](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    if (t.nodes_[ia].needs_grad) {
      Tensor& ga = t.grad_buf(ia);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) ga[i] += g[static_cast<int64_t>(i) * m + j];
    }
    if (t.nodes_[ib].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) gb[j] += g[static_cast<int64_t>(i) * m + j];
    }
  });
  return {this, id};
}

Var Tape::gelu(Var x) {
  const Tensor& tx = value(x);
  Tensor out = tx.clone();
  for (int64_t i = 0; i < out.size(); ++i) {
    const double v = out[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  const int ix = x.id;
  const int id = push(std::move(out), {ix}, [ix](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& vx = t.nodes_[ix].value;
    Tensor& gx = t.grad_buf(ix);
    for (int64_t i = 0; i < g.size(); ++i) {
      const double v = vx[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
  return {this, id};
}

Var Tape::leaky_relu(Var x, double slope) {
  const Tensor& tx = value(x);
  Tensor out = tx.clone();
  for (int64_t i = 0; i < out.size(); ++i)
    if (out[i] < 0.0) out[i] *= slope;
  const int ix = x.id;
  const int id = push(std::move(out), {ix}, [ix, slope](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& vx = t.nodes_[ix].value;
    Tensor& gx = t.grad_buf(ix);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (vx[i] >= 0.0 ? 1.0 : slope);
  });
  return {this, id};
}

Var Tape::sigmoid(Var x) {
  const Tensor& tx = value(x);
  Tensor out = tx.clone();
  for (int64_t i = 0; i < out.size(); ++i) {
    const double v = out[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  const int ix = x.id;
  const int id = push(std::move(out), {ix}, [ix](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& y = t.nodes_[self].value;
    Tensor& gx = t.grad_buf(ix);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
  return {this, id};
}

Var Tape::dropout(Var x, double rate, Rng& rng, bool train) {
  if (!train || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const Tensor& tx = value(x);
  Tensor mask(tx.shape());
  const double keep = 1.0 - rate;
  for (int64_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  Tensor out = tx.clone();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const int ix = x.id;
  const int id = push(std::move(out), {ix}, [ix, mask](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    Tensor& gx = t.grad_buf(ix);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
  return {this, id};
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& tx = value(x);
  const Tensor& tg = value(gain);
  const Tensor& tb = value(bias);
  const int h = tx.cols();
  if (h == 0) throw ShapeError("layer_norm: zero-length axis");
  if (tg.size() != h || tb.size() != h) throw ShapeError("layer_norm: gain/bias size mismatch");
  const int64_t rows = tx.rows();
  Tensor out(tx.shape());
  Tensor xhat(tx.shape());
  Tensor inv_std({static_cast<int>(rows)});
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = tx.data() + r * h;
    double mean = 0.0;
    for (int j = 0; j < h; ++j) mean += xr[j];
    mean /= h;
    double var = 0.0;
    for (int j = 0; j < h; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= h;
    const double inv = (var + eps) > 0.0 ? 1.0 / std::sqrt(var + eps) : 0.0;
    inv_std[r] = inv;
    for (int j = 0; j < h; ++j) {
      const double xh = (xr[j] - mean) * inv;
      xhat[r * h + j] = xh;
      out[r * h + j] = tg[j] * xh + tb[j];
    }
  }
  const int ix = x.id, ig = gain.id, ib = bias.id;
  const int id = push(std::move(out), {ix, ig, ib},
                      [ix, ig, ib, h, rows, xhat, inv_std](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& tg = t.nodes_[ig].value;
    if (t.nodes_[ig].needs_grad) {
      Tensor& gg = t.grad_buf(ig);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < h; ++j) gg[j] += g[r * h + j] * xhat[r * h + j];
    }
    if (t.nodes_[ib].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < h; ++j) gb[j] += g[r * h + j];
    }
    if (t.nodes_[ix].needs_grad) {
      Tensor& gx = t.grad_buf(ix);
      for (int64_t r = 0; r < rows; ++r) {
        double mean_gy = 0.0, mean_gyx = 0.0;
        for (int j = 0; j < h; ++j) {
          const double gy = g[r * h + j] * tg[j];
          mean_gy += gy;
          mean_gyx += gy * xhat[r * h + j];
        }
        mean_gy /= h;
        mean_gyx /= h;
        for (int j = 0; j < h; ++j) {
          const double gy = g[r * h + j] * tg[j];
          gx[r * h + j] += inv_std[r] * (gy - mean_gy - xhat[r * h + j] * mean_gyx);
        }
      }
    }
  });
  return {this, id};
}

Var Tape::masked_softmax_rows(Var scores, Tensor mask) {
  const Tensor& ts = value(scores);
  if (!ts.same_shape(mask)) throw ShapeError("masked_softmax_rows: mask shape mismatch");
  const int m = ts.cols();
  const int64_t rows = ts.rows();
  Tensor out(ts.shape());
  std::vector<double> tmp(static_cast<size_t>(m));
  for (int64_t r = 0; r < rows; ++r) {
    bool any = false;
    for (int j = 0; j < m; ++j) {
      tmp[static_cast<size_t>(j)] = mask[r * m + j] > 0.0 ? ts[r * m + j] : kMaskBias;
      any = any || mask[r * m + j] > 0.0;
    }
    if (!any) throw StructureError("masked_softmax_rows: row " + std::to_string(r) +
                                   " has no unmasked entries");
    softmax_row(tmp.data(), out.data() + r * m, m);
    for (int j = 0; j < m; ++j)
      if (mask[r * m + j] <= 0.0) out[r * m + j] = 0.0;
  }
  const int is = scores.id;
  const int id = push(std::move(out), {is}, [is, m, rows](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& p = t.nodes_[self].value;
    Tensor& gs = t.grad_buf(is);
    for (int64_t r = 0; r < rows; ++r)
      softmax_row_backward(p.data() + r * m, g.data() + r * m, gs.data() + r * m, m);
  });
  return {this, id};
}

Var Tape::multihead_attention(Var q, Var k, Var v, const Tensor& mask, int heads,
                              Tensor* probs_out) {
  const Tensor& tq = value(q);
  const Tensor& tk = value(k);
  const Tensor& tv = value(v);
  if (tq.rank() != 3 || !tq.same_shape(tk) || !tq.same_shape(tv))
    throw ShapeError("multihead_attention: q/k/v must share shape [B,S,H]");
  const int b = tq.dim(0), s = tq.dim(1), h = tq.dim(2);
  if (heads <= 0 || h % heads != 0)
    throw ConfigError("multihead_attention: head count must divide width");
  if (mask.rank() != 2 || mask.dim(0) != b || mask.dim(1) != s)
    throw ShapeError("multihead_attention: mask must be [B,S]");
  const int dh = h / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out({b, s, h});
  Tensor probs({b, heads, s, s});
  std::vector<double> scores(static_cast<size_t>(s) * s);
  for (int bi = 0; bi < b; ++bi) {
    bool any = false;
    for (int j = 0; j < s; ++j) any = any || mask.at(bi, j) > 0.0;
    if (!any)
      throw StructureError("multihead_attention: row " + std::to_string(bi) + " fully masked");
    for (int hd = 0; hd < heads; ++hd) {
      const int off = hd * dh;
      // scores[i][j] = q_i . k_j * sc over this head's slice
      for (int i = 0; i < s; ++i) {
        const double* qi = tq.data() + (static_cast<int64_t>(bi) * s + i) * h + off;
        for (int j = 0; j < s; ++j) {
          if (mask.at(bi, j) <= 0.0) {
            scores[static_cast<size_t>(i) * s + j] = kMaskBias;
            continue;
          }
          const double* kj = tk.data() + (static_cast<int64_t>(bi) * s + j) * h + off;
          double dot = 0.0;
          for (int d = 0; d < dh; ++d) dot += qi[d] * kj[d];
          scores[static_cast<size_t>(i) * s + j] = dot * sc;
        }
      }
      double* prow = probs.data() + ((static_cast<int64_t>(bi) * heads + hd) * s) * s;
      for (int i = 0; i < s; ++i) {
        softmax_row(scores.data() + static_cast<size_t>(i) * s, prow + static_cast<int64_t>(i) * s, s);
        for (int j = 0; j < s; ++j)
          if (mask.at(bi, j) <= 0.0) prow[static_cast<int64_t>(i) * s + j] = 0.0;
      }
      // out_i = sum_j p_ij v_j
      for (int i = 0; i < s; ++i) {
        double* oi = out.data() + (static_cast<int64_t>(bi) * s + i) * h + off;
        for (int j = 0; j < s; ++j) {
          const double p = prow[static_cast<int64_t>(i) * s + j];
          if (p == 0.0) continue;
          const double* vj = tv.data() + (static_cast<int64_t>(bi) * s + j) * h + off;
          for (int d = 0; d < dh; ++d) oi[d] += p * vj[d];
        }
      }
    }
  }
  if (probs_out) *probs_out = probs.clone();

  const int iq = q.id, ik = k.id, iv = v.id;
  const int id = push(std::move(out), {iq, ik, iv},
                      [iq, ik, iv, probs, b, s, h, heads, dh, sc](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& tq = t.nodes_[iq].value;
    const Tensor& tk = t.nodes_[ik].value;
    const Tensor& tv = t.nodes_[iv].value;
    Tensor& gq = t.grad_buf(iq);
    Tensor& gk = t.grad_buf(ik);
    Tensor& gv = t.grad_buf(iv);
    std::vector<double> dp(static_cast<size_t>(s) * s);
    std::vector<double> ds(static_cast<size_t>(s) * s, 0.0);
    for (int bi = 0; bi < b; ++bi) {
      for (int hd = 0; hd < heads; ++hd) {
        const int off = hd * dh;
        const double* prow = probs.data() + ((static_cast<int64_t>(bi) * heads + hd) * s) * s;
        // dV and dP
        std::fill(dp.begin(), dp.end(), 0.0);
        for (int i = 0; i < s; ++i) {
          const double* gi = g.data() + (static_cast<int64_t>(bi) * s + i) * h + off;
          for (int j = 0; j < s; ++j) {
            const double p = prow[static_cast<int64_t>(i) * s + j];
            const double* vj = tv.data() + (static_cast<int64_t>(bi) * s + j) * h + off;
            double* gvj = gv.data() + (static_cast<int64_t>(bi) * s + j) * h + off;
            double dot = 0.0;
            for (int d = 0; d < dh; ++d) {
              dot += gi[d] * vj[d];
              gvj[d] += p * gi[d];
            }
            dp[static_cast<size_t>(i) * s + j] = dot;
          }
        }
        // dS through softmax rows (masked cols have p = 0 so ds = 0 there)
        std::fill(ds.begin(), ds.end(), 0.0);
        for (int i = 0; i < s; ++i)
          softmax_row_backward(prow + static_cast<int64_t>(i) * s,
                               dp.data() + static_cast<size_t>(i) * s,
                               ds.data() + static_cast<size_t>(i) * s, s);
        // dQ_i += sum_j ds_ij k_j * sc ; dK_j += sum_i ds_ij q_i * sc
        for (int i = 0; i < s; ++i) {
          double* gqi = gq.data() + (static_cast<int64_t>(bi) * s + i) * h + off;
          const double* qi = tq.data() + (static_cast<int64_t>(bi) * s + i) * h + off;
          for (int j = 0; j < s; ++j) {
            const double dsv = ds[static_cast<size_t>(i) * s + j] * sc;
            if (dsv == 0.0) continue;
            const double* kj = tk.data() + (static_cast<int64_t>(bi) * s + j) * h + off;
            double* gkj = gk.data() + (static_cast<int64_t>(bi) * s + j) * h + off;
            for (int d = 0; d < dh; ++d) {
              gqi[d] += dsv * kj[d];
              gkj[d] += dsv * qi[d];
            }
          }
        }
      }
    }
  });
  return {this, id};
}

Var Tape::cross_attention(Var q, Var k, Var v, const Tensor& mask, Tensor* probs_out) {
  const Tensor& tq = value(q);
  const Tensor& tk = value(k);
  const Tensor& tv = value(v);
  if (tq.rank() != 2 || tk.rank() != 3 || !tk.same_shape(tv))
    throw ShapeError("cross_attention: q [B,H], k/v [B,S,H]");
  const int b = tq.dim(0), h = tq.dim(1), s = tk.dim(1);
  if (tk.dim(0) != b || tk.dim(2) != h) throw ShapeError("cross_attention: width mismatch");
  if (mask.rank() != 2 || mask.dim(0) != b || mask.dim(1) != s)
    throw ShapeError("cross_attention: mask must be [B,S]");
  const double sc = 1.0 / std::sqrt(static_cast<double>(h));

  Tensor out({b, h});
  Tensor probs({b, s});
  std::vector<double> scores(static_cast<size_t>(s));
  for (int bi = 0; bi < b; ++bi) {
    bool any = false;
    const double* qb = tq.data() + static_cast<int64_t>(bi) * h;
    for (int j = 0; j < s; ++j) {
      if (mask.at(bi, j) <= 0.0) {
        scores[static_cast<size_t>(j)] = kMaskBias;
        continue;
      }
      any = true;
      const double* kj = tk.data() + (static_cast<int64_t>(bi) * s + j) * h;
      double dot = 0.0;
      for (int d = 0; d < h; ++d) dot += qb[d] * kj[d];
      scores[static_cast<size_t>(j)] = dot * sc;
    }
    if (!any)
      throw StructureError("cross_attention: empty context for row " + std::to_string(bi));
    softmax_row(scores.data(), probs.data() + static_cast<int64_t>(bi) * s, s);
    double* pb = probs.data() + static_cast<int64_t>(bi) * s;
    double* ob = out.data() + static_cast<int64_t>(bi) * h;
    for (int j = 0; j < s; ++j) {
      if (mask.at(bi, j) <= 0.0) {
        pb[j] = 0.0;
        continue;
      }
      const double* vj = tv.data() + (static_cast<int64_t>(bi) * s + j) * h;
      for (int d = 0; d < h; ++d) ob[d] += pb[j] * vj[d];
    }
  }
  if (probs_out) *probs_out = probs.clone();

  const int iq = q.id, ik = k.id, iv = v.id;
  const int id = push(std::move(out), {iq, ik, iv},
                      [iq, ik, iv, probs, b, s, h, sc](Tape& t, int self) {
    const Tensor& g = t.grad_buf(self);
    const Tensor& tq = t.nodes_[iq].value;
    const Tensor& tk = t.nodes_[ik].value;
    const Tensor& tv = t.nodes_[iv].value;
    Tensor& gq = t.grad_buf(iq);
    Tensor& gk = t.grad_buf(ik);
    Tensor& gv = t.grad_buf(iv);
    std::vector<double> dp(static_cast<size_t>(s));
    std::vector<double> ds(static_cast<size_t>(s), 0.0);
    for (int bi = 0; bi < b; ++bi) {
      const double* gb = g.data() + static_cast<int64_t>(bi) * h;
      const double* pb = probs.data() + static_cast<int64_t>(bi) * s;
      for (int j = 0; j < s; ++j) {
        const double* vj = tv.data() + (static_cast<int64_t>(bi) * s + j) * h;
        double* gvj = gv.data() + (static_cast<int64_t>(bi) * s + j) * h;
        double dot = 0.0;
        for (int d = 0; d < h; ++d) {
          dot += gb[d] * vj[d];
          gvj[d] += pb[j] * gb[d];
        }
        dp[static_cast<size_t>(j)] = dot;
      }
      std::fill(ds.begin(), ds.end(), 0.0);
      softmax_row_backward(pb, dp.data(), ds.data(), s);
      const double* qb = tq.data() + static_cast<int64_t>(bi) * h;
      double* gqb = gq.data() + static_cast<int64_t>(bi) * h;
      for (int j = 0; j < s; ++j) {
        const double dsv = ds[static_cast<size_t>(j)] * sc;
        if (dsv == 0.0) continue;
        const double* kj = tk.data() + (static_cast<int64_t>(bi) * s + j) * h;
        double* gkj = gk.data() + (static_cast<int64_t>(bi) * s + j) * h;
        for (int d = 0; d < h; ++d) {
          gqb[d] += dsv * kj[d];
          gkj[d] += dsv * qb[d];
        }
      }
    }
  });
  return {this, id};
}

Var Tape::neighborhood_attention(Var h, Var a, const std::vector<int>& targets,
                                 const std::vector<std::vector<int>>& neighborhoods, int heads,
                                 double slope, Tensor* probs_out) {
  const Tensor& th = value(h);
  const Tensor& ta = value(a);
  if (th.rank() != 2) throw ShapeError("neighborhood_attention: features must be [n,width]");
  const int n = th.dim(0), w = th.dim(1);
  if (heads < 1 || w % heads != 0)
    throw ConfigError("neighborhood_attention: heads must divide feature width");
  const int d = w / heads;
  if (ta.rank() != 2 || ta.dim(0) != heads || ta.dim(1) != 2 * d)
    throw ShapeError("neighborhood_attention: scoring vectors must be [heads, 2*width/heads]");
  if (targets.empty() || targets.size() != neighborhoods.size())
    throw ShapeError("neighborhood_attention: one neighborhood per target required");
  const int m = static_cast<int>(targets.size());
  for (int i = 0; i < m; ++i) {
    if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= n)
      throw ShapeError("neighborhood_attention: target index out of range");
    const auto& nb = neighborhoods[static_cast<size_t>(i)];
    bool self = false;
    for (const int j : nb) {
      if (j < 0 || j >= n)
        throw ShapeError("neighborhood_attention: neighbor index out of range");
      self = self || j == targets[static_cast<size_t>(i)];
    }
    if (!self)
      throw StructureError("neighborhood_attention: neighborhood " + std::to_string(i) +
                           " lacks its self loop");
  }

  // u[i,hh] scores the source role, v[i,hh] the neighbor role.
  auto role_scores = [&](const Tensor& feats, const Tensor& vecs, int offset) {
    Tensor s({n, heads});
    for (int i = 0; i < n; ++i)
      for (int hh = 0; hh < heads; ++hh) {
        double acc = 0.0;
        const double* fi = feats.data() + static_cast<int64_t>(i) * w + hh * d;
        const double* av = vecs.data() + static_cast<int64_t>(hh) * 2 * d + offset;
        for (int k = 0; k < d; ++k) acc += fi[k] * av[k];
        s.at(i, hh) = acc;
      }
    return s;
  };
  const Tensor u = role_scores(th, ta, 0);
  const Tensor v = role_scores(th, ta, d);

  Tensor out({m, w});
  std::vector<std::vector<double>> probs(static_cast<size_t>(m));
  size_t maxn = 0;
  for (int i = 0; i < m; ++i) {
    const auto& nb = neighborhoods[static_cast<size_t>(i)];
    const int t = targets[static_cast<size_t>(i)];
    const int c = static_cast<int>(nb.size());
    maxn = std::max(maxn, nb.size());
    auto& pr = probs[static_cast<size_t>(i)];
    pr.resize(static_cast<size_t>(c) * heads);
    std::vector<double> sc(static_cast<size_t>(c));
    for (int hh = 0; hh < heads; ++hh) {
      for (int j = 0; j < c; ++j) {
        const double z = u.at(t, hh) + v.at(nb[static_cast<size_t>(j)], hh);
        sc[static_cast<size_t>(j)] = z > 0.0 ? z : slope * z;
      }
      std::vector<double> p(static_cast<size_t>(c));
      softmax_row(sc.data(), p.data(), c);
      for (int j = 0; j < c; ++j) {
        pr[static_cast<size_t>(j) * heads + hh] = p[static_cast<size_t>(j)];
        const double* fj = th.data() + static_cast<int64_t>(nb[static_cast<size_t>(j)]) * w + hh * d;
        double* oi = out.data() + static_cast<int64_t>(i) * w + hh * d;
        for (int k = 0; k < d; ++k) oi[k] += p[static_cast<size_t>(j)] * fj[k];
      }
    }
  }
  if (probs_out) {
    Tensor exported({m, static_cast<int>(maxn), heads});
    for (int i = 0; i < m; ++i) {
      const int c = static_cast<int>(neighborhoods[static_cast<size_t>(i)].size());
      for (int j = 0; j < c; ++j)
        for (int hh = 0; hh < heads; ++hh)
          exported.at(i, j, hh) = probs[static_cast<size_t>(i)][static_cast<size_t>(j) * heads + hh];
    }
    *probs_out = exported;
  }

  const int ih = h.id, ia = a.id;
  const auto tg = targets;
  const auto nbs = neighborhoods;
  const int id =
      push(std::move(out), {ih, ia}, [ih, ia, tg, nbs, probs, heads, d, w, slope](Tape& t, int self) {
        const Tensor& g = t.grad_buf(self);
        const Tensor& th = t.nodes_[static_cast<size_t>(ih)].value;
        const Tensor& ta = t.nodes_[static_cast<size_t>(ia)].value;
        Tensor& gh = t.grad_buf(ih);
        Tensor& ga = t.grad_buf(ia);
        const int m = static_cast<int>(tg.size());
        for (int i = 0; i < m; ++i) {
          const auto& nb = nbs[static_cast<size_t>(i)];
          const int tgt = tg[static_cast<size_t>(i)];
          const int c = static_cast<int>(nb.size());
          const auto& pr = probs[static_cast<size_t>(i)];
          std::vector<double> dp(static_cast<size_t>(c));
          std::vector<double> de(static_cast<size_t>(c));
          for (int hh = 0; hh < heads; ++hh) {
            const double* gi = g.data() + static_cast<int64_t>(i) * w + hh * d;
            double ut = 0.0;
            {
              const double* ft = th.data() + static_cast<int64_t>(tgt) * w + hh * d;
              const double* av = ta.data() + static_cast<int64_t>(hh) * 2 * d;
              for (int k = 0; k < d; ++k) ut += ft[k] * av[k];
            }
            std::vector<double> p(static_cast<size_t>(c));
            for (int j = 0; j < c; ++j) p[static_cast<size_t>(j)] = pr[static_cast<size_t>(j) * heads + hh];
            for (int j = 0; j < c; ++j) {
              const double* fj = th.data() + static_cast<int64_t>(nb[static_cast<size_t>(j)]) * w + hh * d;
              double* ghj = gh.data() + static_cast<int64_t>(nb[static_cast<size_t>(j)]) * w + hh * d;
              double dot = 0.0;
              for (int k = 0; k < d; ++k) {
                dot += gi[k] * fj[k];
                ghj[k] += p[static_cast<size_t>(j)] * gi[k];
              }
              dp[static_cast<size_t>(j)] = dot;
            }
            std::fill(de.begin(), de.end(), 0.0);
            softmax_row_backward(p.data(), dp.data(), de.data(), c);
            double du = 0.0;
            for (int j = 0; j < c; ++j) {
              const int rj = nb[static_cast<size_t>(j)];
              double vj = 0.0;
              const double* fj = th.data() + static_cast<int64_t>(rj) * w + hh * d;
              const double* av = ta.data() + static_cast<int64_t>(hh) * 2 * d + d;
              for (int k = 0; k < d; ++k) vj += fj[k] * av[k];
              const double z = ut + vj;
              const double dz = de[static_cast<size_t>(j)] * (z > 0.0 ? 1.0 : slope);
              du += dz;
              double* ghj = gh.data() + static_cast<int64_t>(rj) * w + hh * d;
              double* gav = ga.data() + static_cast<int64_t>(hh) * 2 * d + d;
              for (int k = 0; k < d; ++k) {
                ghj[k] += dz * av[k];
                gav[k] += dz * fj[k];
              }
            }
            const double* ft = th.data() + static_cast<int64_t>(tgt) * w + hh * d;
            double* ght = gh.data() + static_cast<int64_t>(tgt) * w + hh * d;
            const double* asrc = ta.data() + static_cast<int64_t>(hh) * 2 * d;
            double* gasrc = ga.data() + static_cast<int64_t>(hh) * 2 * d;
            for (int k = 0; k < d; ++k) {
              ght[k] += du * asrc[k];
              gasrc[k] += du * ft[k];
            }
          }
        }
      });
  return {this, id};
}

Var Tape::sum_all(Var x) {
  const Tensor& tx = value(x);
  double s = 0.0;
  for (int64_t i = 0; i < tx.size(); ++i) s += tx[i];
  const int ix = x.id;
  const int id = push(Tensor::scalar(s), {ix}, [ix](Tape& t, int self) {
    const double g = t.grad_buf(self)[0];
    Tensor& gx = t.grad_buf(ix);
    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
  return {this, id};
}

Var Tape::mean_all(Var x) {
  const Tensor& tx = value(x);
  const double inv = 1.0 / static_cast<double>(tx.size());
  double s = 0.0;
  for (int64_t i = 0; i < tx.size(); ++i) s += tx[i];
  const int ix = x.id;
  const int id = push(Tensor::scalar(s * inv), {ix}, [ix, inv](Tape& t, int self) {
    const double g = t.grad_buf(self)[0] * inv;
    Tensor& gx = t.grad_buf(ix);
    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
  return {this, id};
}

Var Tape::cross_entropy_indexed(Var logits, std::vector<std::pair<int, int>> items) {
  const Tensor& tl = value(logits);
  if (tl.rank() != 2) throw ShapeError("cross_entropy_indexed: logits must be 2-D");
  if (items.empty()) throw ShapeError("cross_entropy_indexed: no items (undefined loss)");
  const int n = tl.dim(0), vsz = tl.dim(1);
  Tensor probs({n, vsz});
  for (int r = 0; r < n; ++r)
    softmax_row(tl.data() + static_cast<int64_t>(r) * vsz,
                probs.data() + static_cast<int64_t>(r) * vsz, vsz);
  double loss = 0.0;
  for (const auto& [r, label] : items) {
    if (r < 0 || r >= n || label < 0 || label >= vsz)
      throw ShapeError("cross_entropy_indexed: item out of range");
    // log p computed from the stable softmax row
    loss -= std::log(std::max(probs.at(r, label), 1e-300));
  }
  loss /= static_cast<double>(items.size());
  const int il = logits.id;
  const double invk = 1.0 / static_cast<double>(items.size());
  const int id = push(Tensor::scalar(loss), {il},
                      [il, items = std::move(items), probs, n, vsz, invk](Tape& t, int self) {
    const double g = t.grad_buf(self)[0];
    Tensor& gl = t.grad_buf(il);
    std::vector<int> row_count(static_cast<size_t>(n), 0);
    for (const auto& [r, label] : items) {
      row_count[static_cast<size_t>(r)] += 1;
      gl[static_cast<int64_t>(r) * vsz + label] -= g * invk;
    }
    for (int r = 0; r < n; ++r) {
      if (row_count[static_cast<size_t>(r)] == 0) continue;
      const double w = g * invk * row_count[static_cast<size_t>(r)];
      for (int j = 0; j < vsz; ++j)
        gl[static_cast<int64_t>(r) * vsz + j] += w * probs.at(r, j);
    }
  });
  return {this, id};
}

Var Tape::soft_cross_entropy_rows(Var logits, Tensor targets) {
  const Tensor& tl = value(logits);
  if (!tl.same_shape(targets)) throw ShapeError("soft_cross_entropy_rows: shape mismatch");
  const int n = tl.dim(0), m = tl.dim(1);
  Tensor probs({n, m});
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    softmax_row(tl.data() + static_cast<int64_t>(r) * m,
                probs.data() + static_cast<int64_t>(r) * m, m);
    for (int j = 0; j < m; ++j) {
      const double tj = targets.at(r, j);
      if (tj != 0.0) loss -= tj * std::log(std::max(probs.at(r, j), 1e-300));
    }
  }
  loss /= static_cast<double>(n);
  const int il = logits.id;
  const int id = push(Tensor::scalar(loss), {il},
                      [il, targets, probs, n, m](Tape& t, int self) {
    const double g = t.grad_buf(self)[0] / static_cast<double>(n);
    Tensor& gl = t.grad_buf(il);
    for (int r = 0; r < n; ++r) {
      double tsum = 0.0;
      for (int j = 0; j < m; ++j) tsum += targets.at(r, j);
      for (int j = 0; j < m; ++j)
        gl[static_cast<int64_t>(r) * m + j] += g * (tsum * probs.at(r, j) - targets.at(r, j));
    }
  });
  return {this, id};
}

Var Tape::bce(Var probs, Tensor targets, bool mean_reduce) {
  const Tensor& tp = value(probs);
  if (!tp.same_shape(targets)) throw ShapeError("bce: prediction/target shape mismatch");
  const int64_t n = tp.size();
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double p = std::clamp(tp[i], kBceClip, 1.0 - kBceClip);
    const double y = targets[i];
    loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  const double red = mean_reduce ? 1.0 / static_cast<double>(n) : 1.0;
  loss *= red;
  const int ip = probs.id;
  const int id = push(Tensor::scalar(loss), {ip}, [ip, targets, red](Tape& t, int self) {
    const double g = t.grad_buf(self)[0] * red;
    const Tensor& tp = t.nodes_[ip].value;
    Tensor& gp = t.grad_buf(ip);
    for (int64_t i = 0; i < tp.size(); ++i) {
      if (tp[i] <= kBceClip || tp[i] >= 1.0 - kBceClip) continue;  // clipped region
      gp[i] += g * (-targets[i] / tp[i] + (1.0 - targets[i]) / (1.0 - tp[i]));
    }
  });
  return {this, id};
}

Var Tape::weighted_sum(const std::vector<Var>& xs, const std::vector<double>& ws) {
  if (xs.empty() || xs.size() != ws.size()) throw ShapeError("weighted_sum: arity mismatch");
  double s = 0.0;
  std::vector<int> ids;
  for (size_t i = 0; i < xs.size(); ++i) {
    const Tensor& t = value(xs[i]);
    if (t.size() != 1) throw ShapeError("weighted_sum: inputs must be scalars");
    s += ws[i] * t[0];
    ids.push_back(xs[i].id);
  }
  const int id = push(Tensor::scalar(s), ids, [ids, ws](Tape& t, int self) {
    const double g = t.grad_buf(self)[0];
    for (size_t i = 0; i < ids.size(); ++i)
      if (t.nodes_[static_cast<size_t>(ids[i])].needs_grad) t.grad_buf(ids[i])[0] += g * ws[i];
  });
  return {this, id};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw Error("backward: var belongs to another tape");
  const Tensor& lv = value(loss);
  if (lv.size() != 1) throw ShapeError("backward: loss must be a scalar");
  if (!std::isfinite(lv[0])) throw NumericError("backward: loss is not finite");
  if (swept_) throw Error("backward: tape already swept");
  swept_ = true;
  grad_buf(loss.id)[0] = 1.0;
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad || !has_grad(i)) continue;
    if (n.back) n.back(*this, i);
    if (n.param && n.param->trainable) {
      const Tensor& g = grads_[static_cast<size_t>(i)];
      double* pg = n.param->grad.data();
      for (int64_t k = 0; k < g.size(); ++k) pg[k] += g[k];
    }
  }
}

}  // namespace ummx
