#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "ummx/optim.hpp"
#include "ummx/rng.hpp"
#include "ummx/tensor.hpp"

namespace ummx {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
};

/// Reverse-mode differentiation tape. Operations append nodes whose
/// backward closures push adjoints to their parents; backward() sweeps
/// nodes in reverse creation order (creation order is topological) and
/// accumulates leaf adjoints into the trainable ParamGroups.
///
/// Values are immutable once produced. One tape per forward pass; a tape
/// is not reusable after backward().
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // -- graph sources ------------------------------------------------------
  Var leaf(ParamGroup& p);
  Var input(Tensor v);

  // -- elementwise / structural -------------------------------------------
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_bias(Var x, Var b);  // b broadcast over rows of x's 2-D view
  Var matmul(Var a, Var b);    // [n,k] x [k,m]
  Var linear(Var x, Var w, Var b);  // rows(x) x w + b; pass invalid b to skip
  Var transpose(Var x);             // 2-D
  Var reshape(Var x, std::vector<int> shape);
  Var concat_cols(const std::vector<Var>& xs);
  Var concat_rows(const std::vector<Var>& xs);
  Var row(Var x, int r);                  // [1, c] slice of 2-D view
  Var take_position(Var x, int pos);      // [B,S,H] -> [B,H]
  Var gather_rows(Var table, std::vector<int> ids);
  Var mean_rows(Var x, std::vector<int> idxs);  // [1, c]
  Var outer_sum(Var a, Var b);  // s_ij = a_i + b_j; a,b flat vectors

  // -- activations ---------------------------------------------------------
  Var gelu(Var x);
  Var leaky_relu(Var x, double slope);
  Var sigmoid(Var x);
  Var dropout(Var x, double rate, Rng& rng, bool train);

  // -- normalization / attention -------------------------------------------
  Var layer_norm(Var x, Var gain, Var bias, double eps);

  /// Row-wise softmax over the last axis of a 2-D view with a 0/1 keep
  /// mask of the same shape. Fully masked rows raise StructureError.
  Var masked_softmax_rows(Var scores, Tensor mask);

  /// Batched multi-head self-attention. q,k,v: [B,S,H] (already projected),
  /// mask: [B,S] with 1 = attendable. Scale 1/sqrt(H/heads). If probs_out
  /// is non-null it receives the [B,heads,S,S] attention probabilities.
  Var multihead_attention(Var q, Var k, Var v, const Tensor& mask, int heads,
                          Tensor* probs_out = nullptr);

  /// Single-query cross attention: q [B,Hq], k/v [B,S,Hq], mask [B,S].
  /// Scale 1/sqrt(Hq). Returns the attended context [B,Hq]; probs_out
  /// receives [B,S] weights if requested. A row whose mask is all zero
  /// raises StructureError.
  Var cross_attention(Var q, Var k, Var v, const Tensor& mask, Tensor* probs_out = nullptr);

  /// Additive-scored set attention over explicit index neighborhoods.
  /// h: [n, width] projected features, a: [heads, 2*(width/heads)] scoring
  /// vectors. Output row i attends over h rows neighborhoods[i] with scores
  /// leaky_relu(a_src . h[targets[i]] + a_dst . h[j]); heads concatenated.
  /// Every neighborhood must contain its target (self-loop), else
  /// StructureError.
  Var neighborhood_attention(Var h, Var a, const std::vector<int>& targets,
                             const std::vector<std::vector<int>>& neighborhoods, int heads,
                             double slope, Tensor* probs_out = nullptr);

  // -- reductions / losses ---------------------------------------------------
  Var sum_all(Var x);
  Var mean_all(Var x);
  /// Mean cross-entropy of `items` = (row, label) pairs against logits [n,V].
  Var cross_entropy_indexed(Var logits, std::vector<std::pair<int, int>> items);
  /// Mean over rows of -sum_j targets[r,j] * log_softmax(logits)[r,j].
  Var soft_cross_entropy_rows(Var logits, Tensor targets);
  /// Binary cross-entropy on probabilities, clipped to [1e-12, 1-1e-12].
  Var bce(Var probs, Tensor targets, bool mean_reduce);
  /// Weighted sum of scalar vars.
  Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& ws);

  // -- execution -------------------------------------------------------------
  const Tensor& value(Var v) const;
  /// Gradient buffer of a node (valid after backward; may be empty if the
  /// node was unreachable from the loss).
  const Tensor& grad_of(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and runs the reverse sweep. loss must be a
  /// scalar. Accumulates into trainable ParamGroup grads.
  void backward(Var loss);

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<int> parents;
    std::function<void(Tape&, int)> back;  // (tape, own id)
    ParamGroup* param = nullptr;
    bool needs_grad = false;
  };

  int push(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> back);
  bool any_needs_grad(const std::vector<int>& parents) const;
  Tensor& grad_buf(int id);
  bool has_grad(int id) const { return !grads_[static_cast<size_t>(id)].empty(); }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool swept_ = false;
};

}  // namespace ummx
