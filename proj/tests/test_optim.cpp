#include <doctest.h>

#include <cmath>

#include "ummx/error.hpp"
#include "ummx/optim.hpp"
#include "ummx/rng.hpp"

using namespace ummx;

namespace {
// Scalar reference Adam, kept deliberately separate from the production code.
struct RefAdam {
  double m = 0.0, v = 0.0;
  int step = 0;
  double update(double grad, double lr, double b1, double b2, double eps) {
    ++step;
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    const double mhat = m / (1 - std::pow(b1, step));
    const double vhat = v / (1 - std::pow(b2, step));
    return lr * mhat / (std::sqrt(vhat) + eps);
  }
};
}  // namespace

TEST_SUITE_BEGIN("optim");

TEST_CASE("param store bookkeeping") {
  ParamStore ps;
  ParamGroup& a = ps.add("a", Tensor::zeros({2, 3}));
  ps.add("b", Tensor::zeros({4}), false);
  CHECK(ps.size() == 2);
  CHECK(ps.total_parameters() == 10);
  CHECK(ps.has("a"));
  CHECK_FALSE(ps.has("c"));
  CHECK(ps.find("c") == nullptr);
  CHECK(&ps.get("a") == &a);
  CHECK_THROWS_AS(ps.add("a", Tensor::zeros({1})), ConfigError);
  CHECK_THROWS_AS(ps.get("zzz"), ConfigError);
}

TEST_CASE("clone copies values and flags but not storage") {
  ParamStore ps;
  ParamGroup& a = ps.add("a", Tensor::full({2}, 3.0));
  ps.add("frozen", Tensor::full({1}, 1.0), false);
  a.grad[0] = 5.0;
  ParamStore copy = ps.clone();
  CHECK(copy.get("a").tensor[0] == 3.0);
  CHECK(copy.get("a").grad[0] == 0.0);
  CHECK_FALSE(copy.get("frozen").trainable);
  copy.get("a").tensor[0] = -1.0;
  CHECK(a.tensor[0] == 3.0);
}

TEST_CASE("value digest tracks content") {
  ParamStore ps;
  ps.add("a", Tensor::full({3}, 1.0));
  const uint64_t d0 = ps.value_digest();
  CHECK(d0 == ps.value_digest());
  ps.get("a").tensor[1] = 1.0000001;
  CHECK(d0 != ps.value_digest());
}

TEST_CASE("first adam step moves by about the learning rate") {
  ParamStore ps;
  ParamGroup& p = ps.add("p", Tensor::full({1}, 1.0));
  AdamState st = make_adam(ps, 0.01);
  p.grad[0] = 0.3;
  adam_step(ps, st);
  CHECK(p.tensor[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(p.grad[0] == 0.0);
  CHECK(st.step == 1);
}

TEST_CASE("several steps match a scalar reference") {
  ParamStore ps;
  ParamGroup& p = ps.add("p", Tensor::full({2}, 0.5));
  AdamState st = make_adam(ps, 0.05, 0.9, 0.999, 1e-8);
  RefAdam ref0, ref1;
  double want0 = 0.5, want1 = 0.5;
  Rng rng(3);
  for (int i = 0; i < 7; ++i) {
    const double g0 = rng.normal(), g1 = rng.normal();
    p.grad[0] = g0;
    p.grad[1] = g1;
    want0 -= ref0.update(g0, 0.05, 0.9, 0.999, 1e-8);
    want1 -= ref1.update(g1, 0.05, 0.9, 0.999, 1e-8);
    adam_step(ps, st);
    CHECK(p.tensor[0] == doctest::Approx(want0).epsilon(1e-12));
    CHECK(p.tensor[1] == doctest::Approx(want1).epsilon(1e-12));
  }
}

TEST_CASE("frozen groups are not updated") {
  ParamStore ps;
  ps.add("live", Tensor::full({1}, 1.0));
  ParamGroup& f = ps.add("ice", Tensor::full({1}, 2.0), false);
  AdamState st = make_adam(ps, 0.1);
  ps.get("live").grad[0] = 1.0;
  f.grad[0] = 123.0;  // even a bogus gradient must be ignored
  adam_step(ps, st);
  CHECK(f.tensor[0] == 2.0);
  CHECK(ps.get("live").tensor[0] != 1.0);
}

TEST_CASE("configuration and gradient validation") {
  ParamStore ps;
  ParamGroup& p = ps.add("p", Tensor::full({1}, 1.0));
  CHECK_THROWS_AS(make_adam(ps, 0.0), ConfigError);
  CHECK_THROWS_AS(make_adam(ps, -1.0), ConfigError);
  CHECK_THROWS_AS(make_adam(ps, 0.1, 1.0), ConfigError);
  CHECK_THROWS_AS(make_adam(ps, 0.1, 0.9, 0.0), ConfigError);
  AdamState st = make_adam(ps, 0.1);
  p.grad[0] = std::nan("");
  CHECK_THROWS_AS(adam_step(ps, st), NumericError);

  ParamStore other;
  other.add("a", Tensor::zeros({1}));
  other.add("b", Tensor::zeros({1}));
  other.get("a").grad[0] = 0.1;
  AdamState mismatched = make_adam(ps, 0.1);
  CHECK_THROWS_AS(adam_step(other, mismatched), ShapeError);
}

TEST_SUITE_END();
