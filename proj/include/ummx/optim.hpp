#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ummx/tensor.hpp"

namespace ummx {

/// One named learnable tensor with its gradient accumulator.
/// grad always matches tensor's shape and stays identically zero while
/// trainable == false.
struct ParamGroup {
  std::string name;
  Tensor tensor;
  Tensor grad;
  bool trainable = true;

  ParamGroup(std::string n, Tensor t, bool train = true)
      : name(std::move(n)), tensor(std::move(t)), grad(Tensor::zeros(tensor.shape())),
        trainable(train) {}

  void zero_grad() { grad.zero(); }
};

/// Insertion-ordered parameter registry. Order is the canonical iteration
/// order for initialization, optimizer sweeps, checkpoints and the
/// parameter census, so it must be deterministic.
class ParamStore {
 public:
  ParamGroup& add(const std::string& name, Tensor init, bool trainable = true);
  ParamGroup& get(const std::string& name);
  const ParamGroup& get(const std::string& name) const;
  ParamGroup* find(const std::string& name);
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<std::unique_ptr<ParamGroup>>& groups() { return groups_; }
  const std::vector<std::unique_ptr<ParamGroup>>& groups() const { return groups_; }
  size_t size() const { return groups_.size(); }

  int64_t total_parameters() const;
  void zero_grads();

  /// Deep copy (values only; grads zeroed, trainable flags preserved).
  ParamStore clone() const;

  /// FNV digest over names, shapes and values.
  uint64_t value_digest() const;

  void for_each(const std::function<void(ParamGroup&)>& fn);

 private:
  std::vector<std::unique_ptr<ParamGroup>> groups_;
  std::unordered_map<std::string, size_t> index_;
};

/// Adam optimizer state. m/v are kept per parameter group, keyed by the
/// group's position in the store.
struct AdamState {
  int64_t step = 0;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

AdamState make_adam(const ParamStore& params, double lr, double beta1 = 0.9,
                    double beta2 = 0.999, double eps = 1e-8);

/// One Adam update with bias correction. Skips non-trainable groups and
/// zeroes all trainable gradients afterwards.
void adam_step(ParamStore& params, AdamState& state);

}  // namespace ummx
