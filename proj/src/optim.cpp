#include "ummx/optim.hpp"

#include <cmath>
#include <cstring>

#include "ummx/error.hpp"
#include "ummx/rng.hpp"

namespace ummx {

ParamGroup& ParamStore::add(const std::string& name, Tensor init, bool trainable) {
  if (index_.count(name)) throw ConfigError("duplicate parameter group: " + name);
  index_[name] = groups_.size();
  groups_.push_back(std::make_unique<ParamGroup>(name, std::move(init), trainable));
  return *groups_.back();
}

ParamGroup& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter group: " + name);
  return *groups_[it->second];
}

const ParamGroup& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter group: " + name);
  return *groups_[it->second];
}

ParamGroup* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : groups_[it->second].get();
}

int64_t ParamStore::total_parameters() const {
  int64_t n = 0;
  for (const auto& g : groups_) n += g->tensor.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& g : groups_) g->zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& g : groups_) out.add(g->name, g->tensor.clone(), g->trainable);
  return out;
}

uint64_t ParamStore::value_digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& g : groups_) {
    h = fnv1a(g->name, h);
    for (const int d : g->tensor.shape())
      h = fnv1a_bytes(&d, sizeof(d), h);
    h = fnv1a_bytes(g->tensor.data(), static_cast<size_t>(g->tensor.size()) * sizeof(double), h);
  }
  return h;
}

void ParamStore::for_each(const std::function<void(ParamGroup&)>& fn) {
  for (auto& g : groups_) fn(*g);
}

AdamState make_adam(const ParamStore& params, double lr, double beta1, double beta2, double eps) {
  if (lr <= 0.0) throw ConfigError("adam: learning rate must be positive");
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
    throw ConfigError("adam: betas must lie in (0,1)");
  AdamState st;
  st.lr = lr;
  st.beta1 = beta1;
  st.beta2 = beta2;
  st.eps = eps;
  for (const auto& g : params.groups()) {
    st.m.push_back(Tensor::zeros(g->tensor.shape()));
    st.v.push_back(Tensor::zeros(g->tensor.shape()));
  }
  return st;
}

void adam_step(ParamStore& params, AdamState& state) {
  if (state.lr <= 0.0) throw ConfigError("adam_step: learning rate must be positive");
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state does not match parameter store");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    ParamGroup& g = *params.groups()[i];
    if (!g.trainable) continue;
    double* p = g.tensor.data();
    double* gr = g.grad.data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const int64_t n = g.tensor.size();
    for (int64_t k = 0; k < n; ++k) {
      if (!std::isfinite(gr[k]))
        throw NumericError("adam_step: non-finite gradient in " + g.name);
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gr[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gr[k] * gr[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
      gr[k] = 0.0;
    }
  }
}

}  // namespace ummx
