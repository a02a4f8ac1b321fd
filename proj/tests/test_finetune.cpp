#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ummx/error.hpp"
#include "ummx/finetune.hpp"
#include "ummx/gradcheck.hpp"
#include "ummx/model.hpp"
#include "ummx/rng.hpp"

using namespace ummx;

namespace {

TokenVocab four_tokens() {
  TokenVocab t;
  for (const char* s : {"alpha", "beta", "gamma", "delta"}) t.add(s);
  return t;
}

CodeVocab eight_codes() {
  CodeVocab c;
  for (const char* s : {"A00", "A01", "A02", "A03"}) c.vocab.add(s);
  for (const char* s : {"N00", "N01", "N02", "N03"}) c.vocab.add(s);
  c.n_diag = 4;
  c.n_med = 4;
  return c;
}

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.d_ont = 2;
  cfg.ont_heads = 2;
  cfg.text = {1, 4, 2, 8, 0.0, 8, 0, false, 1e-12};
  cfg.code = {1, 4, 2, 8, 0.0, 8, 0, false, 1e-12};
  cfg.d_contrast = 2;
  return cfg;
}

std::vector<VisitRecord> sample_visits(int n) {
  const std::vector<std::string> toks = {"alpha", "beta", "gamma", "delta"};
  const std::vector<std::string> diags = {"A00", "A01", "A02", "A03"};
  const std::vector<std::string> meds = {"N00", "N01", "N02", "N03"};
  std::vector<VisitRecord> out;
  for (int i = 0; i < n; ++i) {
    VisitRecord v;
    v.patient_id = "p";
    v.text_tokens = {toks[static_cast<size_t>(i % 4)], toks[static_cast<size_t>((i + 1) % 4)]};
    v.diag_codes = {diags[static_cast<size_t>(i % 4)],
                    diags[static_cast<size_t>((i * 3 + 1) % 4)]};
    v.med_codes = {meds[static_cast<size_t>((i * 2) % 4)]};
    out.push_back(v);
  }
  return out;
}

std::vector<const VisitRecord*> ptrs_of(const std::vector<VisitRecord>& vs, size_t lo,
                                        size_t hi) {
  std::vector<const VisitRecord*> out;
  for (size_t i = lo; i < hi; ++i) out.push_back(&vs[i]);
  return out;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
  return t;
}

double sigmoid_ref(double v) { return 1.0 / (1.0 + std::exp(-v)); }

double bce_term(double p, double t) {
  const double q = std::min(1.0 - 1e-12, std::max(1e-12, p));
  return -(t * std::log(q) + (1.0 - t) * std::log(1.0 - q));
}

/// Hand oracle for the drug feature row: history means of the four rep
/// blocks plus the current visit's diagnosis-paired code row.
std::vector<double> drug_feature_ref(const Tensor& atd, const Tensor& atm, const Tensor& acd,
                                     const Tensor& acm, int current) {
  std::vector<double> feat;
  for (const Tensor* t : {&atd, &atm, &acd, &acm})
    for (int j = 0; j < t->dim(1); ++j) {
      double s = 0.0;
      for (int r = 0; r < current; ++r) s += t->at(r, j);
      feat.push_back(s / current);
    }
  for (int j = 0; j < acd.dim(1); ++j) feat.push_back(acd.at(current, j));
  return feat;
}

std::vector<double> linear_sigmoid_ref(const std::vector<double>& x, const Tensor& w,
                                       const Tensor& b) {
  std::vector<double> out;
  for (int j = 0; j < w.dim(1); ++j) {
    double s = b[j];
    for (int k = 0; k < w.dim(0); ++k) s += x[static_cast<size_t>(k)] * w.at(k, j);
    out.push_back(sigmoid_ref(s));
  }
  return out;
}

/// O(n^2) pairwise AUC: ties count one half.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0;
  int64_t np = 0, nn = 0;
  for (const int v : y) (v ? np : nn) += 1;
  for (size_t p = 0; p < s.size(); ++p) {
    if (!y[p]) continue;
    for (size_t q = 0; q < s.size(); ++q) {
      if (y[q]) continue;
      if (s[p] > s[q])
        num += 1.0;
      else if (s[p] == s[q])
        num += 0.5;
    }
  }
  return num / (static_cast<double>(np) * static_cast<double>(nn));
}

GeneratorConfig tiny_gen() {
  GeneratorConfig g;
  g.n_patients = 16;
  g.n_conditions = 8;
  g.n_meds = 5;
  g.max_visits = 4;
  return g;
}

ModelState cohort_model(const Cohort& c, uint64_t seed) {
  return build_model(small_cfg(), c.token_vocab, c.code_vocab, seed);
}

}  // namespace

TEST_SUITE_BEGIN("finetune");

TEST_CASE("drug features concatenate history means with the current code row") {
  Rng rng(3);
  const int t_visits = 3, d_w = 3, d_c = 2, n_med = 2;
  const Tensor atd = random_tensor({t_visits, d_w}, rng);
  const Tensor atm = random_tensor({t_visits, d_w}, rng);
  const Tensor acd = random_tensor({t_visits, d_c}, rng);
  const Tensor acm = random_tensor({t_visits, d_c}, rng);
  const Tensor w = random_tensor({2 * d_w + 3 * d_c, n_med}, rng);
  const Tensor b = random_tensor({n_med}, rng);

  Tape tape;
  PatientReps reps{tape.input(atd), tape.input(atm), tape.input(acd), tape.input(acm),
                   t_visits};
  const Var vw = tape.input(w);
  const Var vb = tape.input(b);
  for (const int current : {1, 2}) {
    const Var probs = drug_rec_predict(tape, reps, current, vw, vb);
    const Tensor got = tape.value(probs).clone();
    const std::vector<double> want =
        linear_sigmoid_ref(drug_feature_ref(atd, atm, acd, acm, current), w, b);
    REQUIRE(got.size() == n_med);
    for (int j = 0; j < n_med; ++j)
      CHECK(std::abs(got.at(0, j) - want[static_cast<size_t>(j)]) < 1e-10);
  }
}

TEST_CASE("drug head width follows the published tower sizes") {
  const ModelConfig pc = ModelConfig::paper();
  CHECK(3 * pc.code.hidden + 2 * pc.text.hidden == 2436);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 5);
  const int d_w = model.cfg.text.hidden, d_c = model.cfg.code.hidden;
  CHECK(model.params.get("task.drug.w").tensor.dim(0) == 3 * d_c + 2 * d_w);
  CHECK(model.params.get("task.drug.w").tensor.dim(1) == model.codes.n_med);
}

TEST_CASE("zero drug head gives even odds and ln 2 loss") {
  Rng rng(7);
  const int t_visits = 3, n_med = 4;
  Tape tape;
  PatientReps reps{tape.input(random_tensor({t_visits, 3}, rng)),
                   tape.input(random_tensor({t_visits, 3}, rng)),
                   tape.input(random_tensor({t_visits, 2}, rng)),
                   tape.input(random_tensor({t_visits, 2}, rng)), t_visits};
  const Var w = tape.input(Tensor::zeros({12, n_med}));
  const Var b = tape.input(Tensor::zeros({n_med}));

  const Var probs = drug_rec_predict(tape, reps, 1, w, b);
  const Tensor pv = tape.value(probs).clone();
  for (int64_t i = 0; i < pv.size(); ++i) CHECK(pv[i] == 0.5);

  Tensor targets = Tensor::zeros({t_visits - 1, n_med});
  targets.at(0, 1) = 1.0;
  targets.at(1, 3) = 1.0;
  const Var loss = drug_rec_patient_loss(tape, reps, targets, w, b);
  CHECK(std::abs(tape.value(loss)[0] - std::log(2.0)) < 1e-12);
}

TEST_CASE("drug prediction without history is rejected") {
  Rng rng(9);
  Tape tape;
  PatientReps reps{tape.input(random_tensor({2, 3}, rng)),
                   tape.input(random_tensor({2, 3}, rng)),
                   tape.input(random_tensor({2, 2}, rng)),
                   tape.input(random_tensor({2, 2}, rng)), 2};
  const Var w = tape.input(Tensor::zeros({12, 4}));
  const Var b = tape.input(Tensor::zeros({4}));
  CHECK_THROWS_AS(drug_rec_predict(tape, reps, 0, w, b), StructureError);
  CHECK_THROWS_AS(drug_rec_predict(tape, reps, 2, w, b), StructureError);

  PatientHistory lone;
  lone.visits = sample_visits(1);
  CHECK_THROWS_AS(drug_targets(lone, eight_codes()), StructureError);

  PatientReps single{reps.a_text_diag, reps.a_text_med, reps.a_code_diag, reps.a_code_med, 1};
  CHECK_THROWS_AS(drug_rec_patient_loss(tape, single, Tensor::zeros({1, 4}), w, b),
                  StructureError);
  CHECK_THROWS_AS(drug_rec_patient_loss(tape, reps, Tensor::zeros({3, 4}), w, b), ShapeError);
}

TEST_CASE("drug patient loss matches an elementwise reference") {
  Rng rng(11);
  const int t_visits = 3, d_w = 2, d_c = 2, n_med = 2;
  const Tensor atd = random_tensor({t_visits, d_w}, rng);
  const Tensor atm = random_tensor({t_visits, d_w}, rng);
  const Tensor acd = random_tensor({t_visits, d_c}, rng);
  const Tensor acm = random_tensor({t_visits, d_c}, rng);
  const Tensor w = random_tensor({2 * d_w + 3 * d_c, n_med}, rng);
  const Tensor b = random_tensor({n_med}, rng);
  Tensor targets = Tensor::zeros({t_visits - 1, n_med});
  targets.at(0, 0) = 1.0;
  targets.at(1, 1) = 1.0;

  Tape tape;
  PatientReps reps{tape.input(atd), tape.input(atm), tape.input(acd), tape.input(acm),
                   t_visits};
  const Var loss =
      drug_rec_patient_loss(tape, reps, targets, tape.input(w), tape.input(b));

  double want = 0.0;
  for (int cur = 1; cur < t_visits; ++cur) {
    const std::vector<double> probs =
        linear_sigmoid_ref(drug_feature_ref(atd, atm, acd, acm, cur), w, b);
    for (int j = 0; j < n_med; ++j)
      want += bce_term(probs[static_cast<size_t>(j)], targets.at(cur - 1, j));
  }
  want /= (t_visits - 1) * n_med;
  CHECK(std::abs(tape.value(loss)[0] - want) < 1e-10);
}

TEST_CASE("drug prediction ignores history order") {
  Rng rng(13);
  const int t_visits = 3, d_w = 3, d_c = 2;
  const Tensor atd = random_tensor({t_visits, d_w}, rng);
  const Tensor atm = random_tensor({t_visits, d_w}, rng);
  const Tensor acd = random_tensor({t_visits, d_c}, rng);
  const Tensor acm = random_tensor({t_visits, d_c}, rng);
  const Tensor w = random_tensor({2 * d_w + 3 * d_c, 2}, rng);
  const Tensor b = random_tensor({2}, rng);

  auto swap01 = [](const Tensor& t) {
    Tensor out = t.clone();
    for (int j = 0; j < t.dim(1); ++j) {
      out.at(0, j) = t.at(1, j);
      out.at(1, j) = t.at(0, j);
    }
    return out;
  };
  Tape tape;
  PatientReps a{tape.input(atd), tape.input(atm), tape.input(acd), tape.input(acm), t_visits};
  PatientReps p{tape.input(swap01(atd)), tape.input(swap01(atm)), tape.input(swap01(acd)),
                tape.input(swap01(acm)), t_visits};
  const Var vw = tape.input(w);
  const Var vb = tape.input(b);
  const Tensor got_a = tape.value(drug_rec_predict(tape, a, 2, vw, vb)).clone();
  const Tensor got_p = tape.value(drug_rec_predict(tape, p, 2, vw, vb)).clone();
  for (int64_t i = 0; i < got_a.size(); ++i) CHECK(std::abs(got_a[i] - got_p[i]) < 1e-12);

  // end to end: visits are encoded independently, so reordering the history
  // must not move the next-visit prediction
  const std::vector<VisitRecord> visits = sample_visits(3);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 15);
  const std::vector<const VisitRecord*> fwd_order = {&visits[0], &visits[1], &visits[2]};
  const std::vector<const VisitRecord*> rev_order = {&visits[1], &visits[0], &visits[2]};
  Tensor out[2];
  int k = 0;
  for (const auto& order : {fwd_order, rev_order}) {
    Tape t;
    const PatientReps reps = encode_patient(t, model, order, FusionMode::cross);
    const Var probs = drug_rec_predict(t, reps, 2, t.leaf(model.params.get("task.drug.w")),
                                       t.leaf(model.params.get("task.drug.b")));
    out[k++] = t.value(probs).clone();
  }
  REQUIRE(out[0].size() == out[1].size());
  for (int64_t i = 0; i < out[0].size(); ++i) CHECK(std::abs(out[0][i] - out[1][i]) < 1e-6);
}

TEST_CASE("diagnosis coding head follows its reference") {
  Rng rng(17);
  const int batch = 2, d_w = 2, d_c = 2, width = 3;

  // zero head: every label at even odds, per-visit label-summed loss
  {
    Tape tape;
    const Var at = tape.input(random_tensor({batch, d_w}, rng));
    const Var ac = tape.input(random_tensor({batch, d_c}, rng));
    Tensor targets = Tensor::zeros({batch, width});
    targets.at(0, 2) = 1.0;
    const TaskOutput out =
        icd_predict_and_loss(tape, at, ac, tape.input(Tensor::zeros({d_w + d_c, width})),
                             tape.input(Tensor::zeros({width})), targets);
    const Tensor pv = tape.value(out.probs).clone();
    for (int64_t i = 0; i < pv.size(); ++i) CHECK(pv[i] == 0.5);
    CHECK(std::abs(tape.value(out.loss)[0] - width * std::log(2.0)) < 1e-9);
  }

  // random head, single visit, single label
  {
    const Tensor at = random_tensor({1, d_w}, rng);
    const Tensor ac = random_tensor({1, d_c}, rng);
    const Tensor w = random_tensor({d_w + d_c, width}, rng);
    const Tensor b = random_tensor({width}, rng);
    Tensor targets = Tensor::zeros({1, width});
    targets.at(0, 1) = 1.0;

    Tape tape;
    const TaskOutput out = icd_predict_and_loss(tape, tape.input(at), tape.input(ac),
                                                tape.input(w), tape.input(b), targets);
    std::vector<double> x;
    for (int j = 0; j < d_w; ++j) x.push_back(at.at(0, j));
    for (int j = 0; j < d_c; ++j) x.push_back(ac.at(0, j));
    const std::vector<double> probs = linear_sigmoid_ref(x, w, b);
    double want = 0.0;
    for (int j = 0; j < width; ++j)
      want += bce_term(probs[static_cast<size_t>(j)], targets.at(0, j));
    CHECK(std::abs(tape.value(out.loss)[0] - want) < 1e-10);
  }

  // target width must match the head
  {
    Tape tape;
    const Var at = tape.input(random_tensor({1, d_w}, rng));
    const Var ac = tape.input(random_tensor({1, d_c}, rng));
    CHECK_THROWS_AS(
        icd_predict_and_loss(tape, at, ac, tape.input(Tensor::zeros({d_w + d_c, width})),
                             tape.input(Tensor::zeros({width})), Tensor::zeros({1, width + 1})),
        ShapeError);
  }
}

TEST_CASE("readmission head sums per-example cross entropies") {
  Rng rng(19);
  const int d_w = 2, d_c = 2;

  {
    Tape tape;
    const TaskOutput out = readmission_predict_and_loss(
        tape, tape.input(random_tensor({1, d_w}, rng)),
        tape.input(random_tensor({1, d_c}, rng)), tape.input(Tensor::zeros({d_w + d_c, 1})),
        tape.input(Tensor::zeros({1})), Tensor::full({1, 1}, 1.0));
    CHECK(tape.value(out.probs)[0] == 0.5);
    CHECK(std::abs(tape.value(out.loss)[0] - std::log(2.0)) < 1e-12);
  }

  const Tensor at = random_tensor({3, d_w}, rng);
  const Tensor ac = random_tensor({3, d_c}, rng);
  const Tensor w = random_tensor({d_w + d_c, 1}, rng);
  const Tensor b = random_tensor({1}, rng);
  Tensor labels = Tensor::zeros({3, 1});
  labels.at(0, 0) = 1.0;
  labels.at(2, 0) = 1.0;

  Tape tape;
  const TaskOutput out =
      readmission_predict_and_loss(tape, tape.input(at), tape.input(ac), tape.input(w),
                                   tape.input(b), labels);
  const Tensor pv = tape.value(out.probs).clone();
  CHECK(std::abs(tape.value(out.loss)[0] - (-std::log(pv[0]) + bce_term(pv[1], 0.0) -
                                            std::log(pv[2]))) < 1e-10);
}

TEST_CASE("binary metrics handle perfect, tied and degenerate inputs") {
  {
    const MetricReport m = compute_metrics(Tensor::from({2}, {0.9, 0.1}),
                                           Tensor::from({2}, {1.0, 0.0}), MetricTask::binary);
    CHECK(m.auc == 1.0);
    CHECK(m.accuracy == 1.0);
    CHECK(m.f1 == 1.0);
  }
  {
    const MetricReport m = compute_metrics(Tensor::from({2}, {0.5, 0.5}),
                                           Tensor::from({2}, {1.0, 0.0}), MetricTask::binary);
    CHECK(m.auc == 0.5);
    // a score of exactly 0.5 predicts the negative class
    CHECK(m.accuracy == 0.5);
    CHECK(m.f1 == 0.0);
  }
  {
    const MetricReport m = compute_metrics(Tensor::from({2}, {0.5, 0.4}),
                                           Tensor::from({2}, {1.0, 0.0}), MetricTask::binary);
    CHECK(m.auc == 1.0);
    CHECK(m.accuracy == 0.5);
    CHECK(m.f1 == 0.0);
  }
  CHECK_THROWS_AS(compute_metrics(Tensor::from({2}, {0.9, 0.1}),
                                  Tensor::from({2}, {1.0, 1.0}), MetricTask::binary),
                  StructureError);
  CHECK_THROWS_AS(compute_metrics(Tensor::from({2}, {0.9, 0.1}), Tensor::from({3}, {1, 0, 1}),
                                  MetricTask::binary),
                  ShapeError);
}

TEST_CASE("multilabel metrics follow the set formulas") {
  // row 0 predicts {0,1} against truth {1,2}: F1 1/2, Jaccard 1/3
  const Tensor scores = Tensor::from({2, 3}, {0.9, 0.9, 0.1, 0.1, 0.2, 0.8});
  const Tensor labels = Tensor::from({2, 3}, {0.0, 1.0, 1.0, 1.0, 0.0, 0.0});
  const MetricReport m = compute_metrics(scores, labels, MetricTask::multilabel);
  CHECK(std::abs(m.f1 - 0.25) < 1e-12);             // (1/2 + 0) / 2
  CHECK(std::abs(m.accuracy - 1.0 / 6.0) < 1e-12);  // (1/3 + 0) / 2
  CHECK(std::abs(m.auc - 1.0 / 3.0) < 1e-12);       // columns score 0, 1, 0
  CHECK(m.subset_accuracy == 0.0);

  // empty prediction against empty truth counts as a perfect example
  const Tensor s2 = Tensor::from({2, 2}, {0.9, 0.1, 0.1, 0.1});
  const Tensor l2 = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 0.0});
  const MetricReport m2 = compute_metrics(s2, l2, MetricTask::multilabel);
  CHECK(m2.f1 == 1.0);
  CHECK(m2.accuracy == 1.0);
  CHECK(m2.auc == 1.0);
  CHECK(m2.subset_accuracy == 1.0);

  // no label with both classes leaves the AUC undefined
  CHECK_THROWS_AS(compute_metrics(Tensor::from({2, 1}, {0.9, 0.8}),
                                  Tensor::from({2, 1}, {1.0, 1.0}), MetricTask::multilabel),
                  StructureError);
}

TEST_CASE("ranked metrics agree exactly with the quadratic oracle") {
  Rng rng(23);
  const std::vector<double> grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};

  for (int trial = 0; trial < 500; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(39));
    std::vector<double> s(static_cast<size_t>(n));
    std::vector<int> y(static_cast<size_t>(n));
    bool ok = false;
    while (!ok) {
      int pos = 0;
      for (int i = 0; i < n; ++i) {
        s[static_cast<size_t>(i)] = grid[rng.below(grid.size())];
        y[static_cast<size_t>(i)] = rng.bernoulli(0.5) ? 1 : 0;
        pos += y[static_cast<size_t>(i)];
      }
      ok = pos > 0 && pos < n;
    }
    Tensor st({n}), lt({n});
    for (int i = 0; i < n; ++i) {
      st[i] = s[static_cast<size_t>(i)];
      lt[i] = y[static_cast<size_t>(i)];
    }
    const MetricReport m = compute_metrics(st, lt, MetricTask::binary);
    CHECK(m.auc == pairwise_auc(s, y));
  }

  for (int trial = 0; trial < 500; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(19));
    const int width = 1 + static_cast<int>(rng.below(5));
    Tensor scores({n, width}), labels({n, width});
    bool ok = false;
    while (!ok) {
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < width; ++j) {
          scores.at(r, j) = grid[rng.below(grid.size())];
          labels.at(r, j) = rng.bernoulli(0.4) ? 1.0 : 0.0;
        }
      for (int j = 0; j < width && !ok; ++j) {
        int pos = 0;
        for (int r = 0; r < n; ++r) pos += labels.at(r, j) != 0.0;
        ok = pos > 0 && pos < n;
      }
    }
    const MetricReport m = compute_metrics(scores, labels, MetricTask::multilabel);

    double auc_sum = 0.0;
    int usable = 0;
    std::vector<double> col(static_cast<size_t>(n));
    std::vector<int> coly(static_cast<size_t>(n));
    for (int j = 0; j < width; ++j) {
      int pos = 0;
      for (int r = 0; r < n; ++r) {
        col[static_cast<size_t>(r)] = scores.at(r, j);
        coly[static_cast<size_t>(r)] = labels.at(r, j) != 0.0 ? 1 : 0;
        pos += coly[static_cast<size_t>(r)];
      }
      if (pos == 0 || pos == n) continue;
      auc_sum += pairwise_auc(col, coly);
      ++usable;
    }
    CHECK(m.auc == auc_sum / usable);

    double f1_sum = 0.0, jac_sum = 0.0;
    int exact = 0;
    for (int r = 0; r < n; ++r) {
      std::vector<int> pred, truth;
      for (int j = 0; j < width; ++j) {
        if (scores.at(r, j) > 0.5) pred.push_back(j);
        if (labels.at(r, j) != 0.0) truth.push_back(j);
      }
      std::vector<int> both;
      std::set_intersection(pred.begin(), pred.end(), truth.begin(), truth.end(),
                            std::back_inserter(both));
      const size_t inter = both.size(), ps = pred.size(), ts = truth.size();
      f1_sum += ps + ts == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / (ps + ts);
      jac_sum += ps + ts - inter == 0
                     ? 1.0
                     : static_cast<double>(inter) / static_cast<double>(ps + ts - inter);
      if (pred == truth) ++exact;
    }
    CHECK(m.f1 == f1_sum / n);
    CHECK(m.accuracy == jac_sum / n);
    CHECK(m.subset_accuracy == static_cast<double>(exact) / n);
  }
}

TEST_CASE("AUC is invariant under strictly increasing score transforms") {
  Rng rng(29);
  const std::vector<double> grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(20));
    Tensor s({n}), y({n}), s2({n});
    bool ok = false;
    while (!ok) {
      int pos = 0;
      for (int i = 0; i < n; ++i) {
        s[i] = grid[rng.below(grid.size())];
        y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        pos += y[i] != 0.0;
      }
      ok = pos > 0 && pos < n;
    }
    for (int i = 0; i < n; ++i) s2[i] = s[i] * s[i] * s[i] + 2.0 * s[i];
    const MetricReport a = compute_metrics(s, y, MetricTask::binary);
    const MetricReport b = compute_metrics(s2, y, MetricTask::binary);
    CHECK(a.auc == b.auc);
  }
}

TEST_CASE("eligible units are selected per task") {
  Cohort c;
  c.token_vocab = four_tokens();
  c.code_vocab = eight_codes();

  PatientHistory multi;
  multi.patient_id = "m";
  multi.visits = sample_visits(3);
  multi.visits[0].readmit_label = true;
  multi.visits[1].icd_labels = std::vector<std::string>{};  // empty: not usable
  multi.visits[2].icd_labels = std::vector<std::string>{"A00"};
  multi.visits[2].readmit_label = false;

  PatientHistory lone;
  lone.patient_id = "l";
  lone.visits = sample_visits(1);
  lone.visits[0].icd_labels = std::vector<std::string>{"A01"};
  lone.visits[0].readmit_label = true;

  c.patients = {multi, lone};

  const TaskUnits drug = task_units(c, TaskKind::drug_rec);
  REQUIRE(drug.patients.size() == 1);
  CHECK(drug.patients[0]->patient_id == "m");
  CHECK(drug.size(TaskKind::drug_rec) == 1);

  const TaskUnits icd = task_units(c, TaskKind::icd_coding);
  REQUIRE(icd.visits.size() == 2);
  CHECK(icd.visits[0] == &c.patients[0].visits[2]);
  CHECK(icd.visits[1] == &c.patients[1].visits[0]);

  const TaskUnits readmit = task_units(c, TaskKind::readmission);
  CHECK(readmit.visits.size() == 3);

  CHECK(parse_task("drug_rec") == TaskKind::drug_rec);
  CHECK(parse_task("icd") == TaskKind::icd_coding);
  CHECK(parse_task("readmission") == TaskKind::readmission);
  CHECK_THROWS_AS(parse_task("triage"), ConfigError);
  CHECK(std::string(task_name(TaskKind::icd_coding)) == "icd");
}

TEST_CASE("finite differences confirm the task gradients") {
  std::vector<VisitRecord> visits = sample_visits(4);
  for (auto& v : visits) {
    v.icd_labels = v.diag_codes;
    v.readmit_label = v.med_codes[0] == "N00";
  }
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 61);
  ParamStore& ps = model.params;

  PatientHistory patient;
  patient.visits = {visits[0], visits[1], visits[2]};
  const Tensor targets = drug_targets(patient, model.codes);

  std::vector<VisitRecord> meds_only = {visits[0], visits[1]};
  for (auto& v : meds_only) v.diag_codes.clear();
  Tensor icd_targets = Tensor::zeros({2, model.codes.n_diag});
  for (int i = 0; i < 2; ++i)
    for (const auto& code : visits[static_cast<size_t>(i)].diag_codes)
      icd_targets.at(i, model.codes.vocab.lookup(code) - model.codes.diag_begin()) = 1.0;
  Tensor readmit_labels = Tensor::zeros({2, 1});
  for (int i = 0; i < 2; ++i)
    readmit_labels.at(i, 0) = *visits[static_cast<size_t>(i)].readmit_label ? 1.0 : 0.0;

  for (const TaskKind task :
       {TaskKind::drug_rec, TaskKind::icd_coding, TaskKind::readmission}) {
    auto build = [&](Tape& t) -> Var {
      if (task == TaskKind::drug_rec) {
        const PatientReps reps =
            encode_patient(t, model, ptrs_of(patient.visits, 0, 3), FusionMode::cross);
        return drug_rec_patient_loss(t, reps, targets, t.leaf(ps.get("task.drug.w")),
                                     t.leaf(ps.get("task.drug.b")));
      }
      if (task == TaskKind::icd_coding) {
        const VisitBatch vb =
            make_visit_batch(ptrs_of(meds_only, 0, 2), model.tokens, model.codes, model.cfg);
        const ModelForward fwd = forward_visit(t, model, vb, FusionMode::cross);
        return icd_predict_and_loss(t, fwd.reps.med.a_text, fwd.reps.med.a_code,
                                    t.leaf(ps.get("task.icd.w")), t.leaf(ps.get("task.icd.b")),
                                    icd_targets)
            .loss;
      }
      const VisitBatch vb =
          make_visit_batch(ptrs_of(visits, 0, 2), model.tokens, model.codes, model.cfg);
      const ModelForward fwd = forward_visit(t, model, vb, FusionMode::cross);
      return readmission_predict_and_loss(t, fwd.reps.diag.a_text, fwd.reps.diag.a_code,
                                          t.leaf(ps.get("task.readmit.w")),
                                          t.leaf(ps.get("task.readmit.b")), readmit_labels)
          .loss;
    };
    auto loss = [&] {
      Tape t;
      return build(t).val()[0];
    };
    auto back = [&] {
      Tape t;
      const Var l = build(t);
      t.backward(l);
      return l.val()[0];
    };
    const GradCheckReport rep = grad_check(ps, loss, back, 1e-5, 1e-4, 3, 17, 1e-6);
    CHECK_MESSAGE(rep.passed(1e-4), task_name(task)
                                        << " worst " << rep.worst.group << "["
                                        << rep.worst.index << "] rel " << rep.max_rel_err);
  }
}

TEST_CASE("fine-tuning improves, stops early and keeps the best epoch") {
  const Cohort cohort = generate_synthetic_cohort(tiny_gen(), 401);
  SplitSpec spec;
  spec.unit = "patient";
  spec.ratios = {0.6, 0.2, 0.2};
  const auto splits = split_cohort(cohort, spec);

  FinetuneConfig cfg;
  cfg.task = TaskKind::readmission;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 9;
  CHECK(cfg.effective_lr() == 2e-5);
  cfg.lr = 1e-3;

  const TaskUnits train = task_units(splits[0], TaskKind::readmission);
  const TaskUnits eval = task_units(splits[1], TaskKind::readmission);
  const TaskUnits test = task_units(splits[2], TaskKind::readmission);
  REQUIRE(train.visits.size() >= 8);
  REQUIRE(eval.visits.size() >= 2);

  ModelState pretrained = cohort_model(cohort, 71);
  ModelState model = clone_model(pretrained);
  const FinetuneResult res = finetune_units(model, train, eval, cfg);

  REQUIRE(!res.eval_loss.empty());
  CHECK(res.train_loss.size() == res.eval_loss.size());
  CHECK(res.best_eval == *std::min_element(res.eval_loss.begin(), res.eval_loss.end()));
  CHECK(res.best_epoch >= 0);
  CHECK(res.eval_loss[static_cast<size_t>(res.best_epoch)] == res.best_eval);

  // the returned parameters are exactly the best epoch's parameters
  CHECK(finetune_eval_loss(model, eval, cfg) == res.best_eval);
  ModelState replay = clone_model(pretrained);
  FinetuneConfig upto = cfg;
  upto.epochs = res.best_epoch + 1;
  finetune_units(replay, train, eval, upto);
  CHECK(replay.params.value_digest() == model.params.value_digest());

  // identical runs are identical
  ModelState again = clone_model(pretrained);
  const FinetuneResult res2 = finetune_units(again, train, eval, cfg);
  CHECK(res2.train_loss == res.train_loss);
  CHECK(res2.eval_loss == res.eval_loss);
  CHECK(again.params.value_digest() == model.params.value_digest());

  const MetricReport m = evaluate_units(model, test, TaskKind::readmission, cfg.mode);
  for (const double v : {m.f1, m.accuracy, m.auc, m.subset_accuracy}) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  CHECK_THROWS_AS(finetune_units(model, TaskUnits{}, eval, cfg), ConfigError);
  CHECK_THROWS_AS(finetune_units(model, train, TaskUnits{}, cfg), ConfigError);
  FinetuneConfig bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(finetune_units(model, train, eval, bad), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(finetune_units(model, train, eval, bad), ConfigError);
  bad = cfg;
  bad.patience = -1;
  CHECK_THROWS_AS(finetune_units(model, train, eval, bad), ConfigError);
  bad = cfg;
  bad.lr = -1.0;
  CHECK_THROWS_AS(finetune_units(model, train, eval, bad), ConfigError);
}

TEST_CASE("drug and diagnosis tasks train end to end from a cohort") {
  const Cohort cohort = generate_synthetic_cohort(tiny_gen(), 403);
  SplitSpec spec;
  spec.unit = "patient";
  spec.ratios = {0.6, 0.2, 0.2};
  const auto splits = split_cohort(cohort, spec);

  for (const TaskKind task : {TaskKind::drug_rec, TaskKind::icd_coding}) {
    ModelState model = cohort_model(cohort, 79);
    FinetuneConfig cfg;
    cfg.task = task;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    const FinetuneResult res = finetune_task(model, splits[0], splits[1], cfg);
    REQUIRE(!res.eval_loss.empty());
    CHECK(res.best_eval == *std::min_element(res.eval_loss.begin(), res.eval_loss.end()));
    const MetricReport m = evaluate_task(model, splits[2], task, cfg.mode);
    for (const double v : {m.f1, m.accuracy, m.auc, m.subset_accuracy}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("subsampling nests and the full-ratio sweep equals a plain run") {
  const std::vector<size_t> half = subsample_indices(10, 0.5, 7);
  const std::vector<size_t> most = subsample_indices(10, 0.8, 7);
  const std::vector<size_t> all = subsample_indices(10, 1.0, 7);
  CHECK(half.size() == 5);
  CHECK(most.size() == 8);
  CHECK(std::is_sorted(half.begin(), half.end()));
  CHECK(std::includes(most.begin(), most.end(), half.begin(), half.end()));
  std::vector<size_t> identity(10);
  for (size_t i = 0; i < 10; ++i) identity[i] = i;
  CHECK(all == identity);
  CHECK(subsample_indices(10, 0.5, 8) != half);  // another seed, another subset

  CHECK_THROWS_AS(subsample_indices(10, 0.0, 7), ConfigError);
  CHECK_THROWS_AS(subsample_indices(10, 1.5, 7), ConfigError);
  CHECK_THROWS_AS(subsample_indices(10, 0.05, 7), ConfigError);
  CHECK_THROWS_AS(subsample_indices(0, 1.0, 7), ConfigError);

  const Cohort cohort = generate_synthetic_cohort(tiny_gen(), 405);
  SplitSpec spec;
  spec.unit = "patient";
  spec.ratios = {0.6, 0.2, 0.2};
  const auto splits = split_cohort(cohort, spec);
  const ModelState pretrained = cohort_model(cohort, 73);

  FinetuneConfig base;
  base.task = TaskKind::readmission;
  base.epochs = 2;
  base.batch_size = 4;
  base.lr = 1e-3;

  const std::vector<SweepPoint> points =
      ratio_sweep(pretrained, splits[0], splits[1], splits[2], TaskKind::readmission,
                  {0.5, 1.0}, {5, 6}, base);
  REQUIRE(points.size() == 4);

  FinetuneConfig plain = base;
  plain.seed = 5;
  ModelState model = clone_model(pretrained);
  finetune_units(model, task_units(splits[0], base.task), task_units(splits[1], base.task),
                 plain);
  const MetricReport direct =
      evaluate_units(model, task_units(splits[2], base.task), base.task, base.mode);
  const SweepPoint& full = points[1];  // seed 5, ratio 1.0
  CHECK(full.ratio == 1.0);
  CHECK(full.seed == 5);
  CHECK(full.metrics.auc == direct.auc);
  CHECK(full.metrics.f1 == direct.f1);
  CHECK(full.metrics.accuracy == direct.accuracy);

  const std::string csv = sweep_csv(points);
  CHECK(csv.rfind("task,ratio,seed,auc,f1,accuracy\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(csv.find("readmission,0.5,5,") != std::string::npos);
  CHECK(csv.find("readmission,1,6,") != std::string::npos);

  CHECK_THROWS_AS(ratio_sweep(pretrained, splits[0], splits[1], splits[2],
                              TaskKind::readmission, {}, {5}, base),
                  ConfigError);
}

TEST_CASE("run summaries and reports serialize as expected") {
  MetricReport a, b;
  a.f1 = 0.4;
  a.accuracy = 0.8;
  a.auc = 0.9;
  b.f1 = 0.6;
  b.accuracy = 0.6;
  b.auc = 0.7;
  const MetricSummary s = summarize({a, b});
  CHECK(s.runs == 2);
  CHECK(std::abs(s.mean.f1 - 0.5) < 1e-12);
  CHECK(std::abs(s.stddev.f1 - 0.1) < 1e-12);
  CHECK(std::abs(s.mean.auc - 0.8) < 1e-12);
  CHECK(std::abs(s.stddev.accuracy - 0.1) < 1e-12);
  CHECK(summarize({a}).stddev.f1 == 0.0);
  CHECK_THROWS_AS(summarize({}), ConfigError);

  CHECK(mean_std(0.9123, 0.0045) == "0.9123 (0.0045)");
  CHECK(mean_std(0.91237, 0.0) == "0.9124 (0.0000)");

  const std::string js = metrics_json("readmission", 42, a);
  const nlohmann::json j = nlohmann::json::parse(js);
  CHECK(j.at("task").get<std::string>() == "readmission");
  CHECK(j.at("seed").get<uint64_t>() == 42);
  CHECK(j.at("f1").get<double>() == a.f1);
  CHECK(j.at("accuracy").get<double>() == a.accuracy);
  CHECK(j.at("auc").get<double>() == a.auc);

  SweepPoint p;
  p.task = TaskKind::drug_rec;
  p.ratio = 0.5;
  p.seed = 7;
  p.metrics.auc = 0.912345;
  p.metrics.f1 = 0.5;
  p.metrics.accuracy = 1.0 / 3.0;
  CHECK(sweep_csv({p}) ==
        "task,ratio,seed,auc,f1,accuracy\ndrug_rec,0.5,7,0.912345,0.500000,0.333333\n");
}

TEST_SUITE_END();
