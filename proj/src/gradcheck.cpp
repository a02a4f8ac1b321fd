#include "ummx/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ummx/error.hpp"
#include "ummx/rng.hpp"

namespace ummx {

GradCheckReport grad_check(ParamStore& params, const std::function<double()>& loss,
                           const std::function<double()>& backward_loss, double h_base,
                           double tol, int max_per_group, uint64_t sample_seed,
                           double floor) {
  const double l1 = loss();
  const double l2 = loss();
  if (l1 != l2)
    throw DeterminismError("grad_check: loss not deterministic (" + std::to_string(l1) +
                           " vs " + std::to_string(l2) + ")");

  params.zero_grads();
  backward_loss();

  // Snapshot analytic gradients; FD evaluations must not see stale grads.
  std::vector<Tensor> analytic;
  for (const auto& g : params.groups()) analytic.push_back(g->grad.clone());

  GradCheckReport report;
  Rng rng(sample_seed);
  for (size_t gi = 0; gi < params.groups().size(); ++gi) {
    ParamGroup& g = *params.groups()[gi];
    const Tensor& a = analytic[gi];
    if (!g.trainable) {
      for (int64_t i = 0; i < a.size(); ++i)
        if (a[i] != 0.0)
          throw NumericError("grad_check: frozen group '" + g.name +
                             "' accumulated a nonzero gradient");
      continue;
    }
    std::vector<int64_t> idxs;
    if (max_per_group < 0 || a.size() <= static_cast<int64_t>(max_per_group)) {
      idxs.resize(static_cast<size_t>(a.size()));
      for (int64_t i = 0; i < a.size(); ++i) idxs[static_cast<size_t>(i)] = i;
    } else {
      // Sample without replacement.
      std::vector<int64_t> all(static_cast<size_t>(a.size()));
      for (int64_t i = 0; i < a.size(); ++i) all[static_cast<size_t>(i)] = i;
      rng.shuffle(all);
      idxs.assign(all.begin(), all.begin() + max_per_group);
    }
    for (const int64_t i : idxs) {
      double& x = g.tensor[i];
      const double saved = x;
      const double h = h_base * (1.0 + std::abs(saved));
      x = saved + h;
      const double lp = loss();
      x = saved - h;
      const double lm = loss();
      x = saved;
      const double numeric = (lp - lm) / (2.0 * h);
      const double an = a[i];
      // both magnitudes under the floor: zero gradient meeting difference noise
      const double rel =
          std::abs(an) < floor && std::abs(numeric) < floor
              ? 0.0
              : std::abs(an - numeric) / std::max({std::abs(an), std::abs(numeric), floor});
      GradCheckEntry e{g.name, i, an, numeric, rel};
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = e;
      }
      if (rel >= tol) report.failures.push_back(e);
    }
  }
  params.zero_grads();
  return report;
}

}  // namespace ummx
