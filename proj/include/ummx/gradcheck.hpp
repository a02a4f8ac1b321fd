#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ummx/optim.hpp"

namespace ummx {

struct GradCheckEntry {
  std::string group;
  int64_t index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  GradCheckEntry worst;
  int64_t checked = 0;
  std::vector<GradCheckEntry> failures;  // entries above the tolerance
  bool passed(double tol) const { return max_rel_err < tol; }
};

/// Checks analytic gradients against central finite differences.
///
/// `loss` must rebuild the graph from the current parameter values and
/// return the scalar loss; it is evaluated twice up front and must agree
/// bit for bit (DeterminismError otherwise). `backward_loss` runs one
/// forward+backward pass and leaves gradients in the store.
///
/// For each sampled coordinate of each trainable group the step is
/// h = h_base * (1 + |x|); rel err = |a - n| / max(|a|, |n|, floor).
/// Non-trainable groups are asserted to hold exactly zero gradient.
/// `max_per_group` < 0 checks every coordinate.
GradCheckReport grad_check(ParamStore& params, const std::function<double()>& loss,
                           const std::function<double()>& backward_loss,
                           double h_base = 1e-5, double tol = 1e-4,
                           int max_per_group = -1, uint64_t sample_seed = 17,
                           double floor = 1e-12);

}  // namespace ummx
