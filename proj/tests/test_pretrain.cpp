#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ummx/error.hpp"
#include "ummx/gradcheck.hpp"
#include "ummx/model.hpp"
#include "ummx/pretrain.hpp"
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
    v.patient_id = "p" + std::to_string(i);
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

SequenceBatch seq_of(const std::vector<std::vector<int>>& rows, int len,
                     const char* modality) {
  SequenceBatch s;
  s.batch = static_cast<int>(rows.size());
  s.len = len;
  s.modality = modality;
  s.ids.assign(static_cast<size_t>(s.batch) * len, Vocab::kPad);
  s.segments.assign(static_cast<size_t>(s.batch) * len, 0);
  s.mask = Tensor::zeros({s.batch, len});
  for (size_t b = 0; b < rows.size(); ++b)
    for (size_t j = 0; j < rows[b].size(); ++j) {
      s.ids[b * static_cast<size_t>(len) + j] = rows[b][j];
      s.mask.at(static_cast<int>(b), static_cast<int>(j)) = 1.0;
    }
  return s;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
  return t;
}

double gelu_ref(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

std::vector<double> linear_row(const Tensor& x, int r, const Tensor& w, const Tensor& b) {
  std::vector<double> out(static_cast<size_t>(w.dim(1)));
  for (int j = 0; j < w.dim(1); ++j) {
    double s = b[j];
    for (int k = 0; k < w.dim(0); ++k) s += x.at(r, k) * w.at(k, j);
    out[static_cast<size_t>(j)] = s;
  }
  return out;
}

double ce_ref(const std::vector<double>& logits, int label) {
  double mx = logits[0];
  for (const double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (const double v : logits) z += std::exp(v - mx);
  return std::log(z) - (logits[static_cast<size_t>(label)] - mx);
}

Tensor mlp_ref(const ParamStore& ps, const std::string& stem, const Tensor& x) {
  const Tensor& w1 = ps.get(stem + ".1.w").tensor;
  const Tensor& b1 = ps.get(stem + ".1.b").tensor;
  const Tensor& w2 = ps.get(stem + ".2.w").tensor;
  const Tensor& b2 = ps.get(stem + ".2.b").tensor;
  Tensor h({static_cast<int>(x.rows()), w1.dim(1)});
  for (int r = 0; r < x.rows(); ++r) {
    const std::vector<double> row = linear_row(x, r, w1, b1);
    for (int j = 0; j < w1.dim(1); ++j) h.at(r, j) = gelu_ref(row[static_cast<size_t>(j)]);
  }
  Tensor out({static_cast<int>(x.rows()), w2.dim(1)});
  for (int r = 0; r < h.rows(); ++r) {
    const std::vector<double> row = linear_row(h, r, w2, b2);
    for (int j = 0; j < w2.dim(1); ++j) out.at(r, j) = row[static_cast<size_t>(j)];
  }
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("pretrain");

TEST_CASE("masking corrupts only real code tokens and records every change") {
  const CodeVocab cv = eight_codes();
  VisitBatch vb;
  vb.text = seq_of({{1}, {1}, {1}}, 1, "text");
  vb.diag = seq_of({{1, 4, 5, 6}, {1}, {1, 7}}, 4, "diag");
  vb.med = seq_of({{1, 8}, {1}, {1, 9, 10, 11}}, 4, "med");

  Rng r0(1);
  CHECK_THROWS_AS(apply_mask(vb, 0.0, r0, cv), ConfigError);
  CHECK_THROWS_AS(apply_mask(vb, 1.0, r0, cv), ConfigError);
  CHECK_THROWS_AS(apply_mask(vb, -0.2, r0, cv), ConfigError);

  int saw_masked = 0, saw_kept = 0, saw_random = 0;
  for (int seed = 0; seed < 200; ++seed) {
    Rng rng(100 + seed);
    const MaskedCodeBatch mb = apply_mask(vb, 0.5, rng, cv);
    REQUIRE(mb.rows == 3);
    CHECK(mb.skipped_rows == 1);

    std::vector<int> expect_diag = vb.diag.ids;
    std::vector<int> expect_med = vb.med.ids;
    bool row_hit[3] = {false, false, false};
    for (const MaskedPosition& p : mb.positions) {
      row_hit[p.row] = true;
      const bool dg = p.stream == CodeStream::diag;
      const std::vector<int>& src = dg ? vb.diag.ids : vb.med.ids;
      std::vector<int>& exp = dg ? expect_diag : expect_med;
      const std::vector<int>& got = dg ? mb.diag_ids : mb.med_ids;
      const size_t at = static_cast<size_t>(p.row) * 4 + static_cast<size_t>(p.col);
      CHECK(src[at] >= Vocab::kNumSpecials);
      CHECK(p.label == src[at]);
      if (p.action == MaskAction::masked) {
        CHECK(got[at] == Vocab::kMask);
        ++saw_masked;
      } else if (p.action == MaskAction::kept) {
        CHECK(got[at] == p.label);
        ++saw_kept;
      } else {
        CHECK(got[at] >= Vocab::kNumSpecials);
        CHECK(got[at] < cv.size());
        ++saw_random;
      }
      exp[at] = got[at];
    }
    CHECK(mb.diag_ids == expect_diag);
    CHECK(mb.med_ids == expect_med);
    CHECK(row_hit[0]);
    CHECK_FALSE(row_hit[1]);
    CHECK(row_hit[2]);
  }
  CHECK(saw_masked > 0);
  CHECK(saw_kept > 0);
  CHECK(saw_random > 0);

  Rng rng(7);
  const MaskedCodeBatch mb = apply_mask(vb, 0.5, rng, cv);
  const VisitBatch swapped = masked_visit_batch(vb, mb);
  CHECK(swapped.text.ids == vb.text.ids);
  CHECK(swapped.diag.ids == mb.diag_ids);
  CHECK(swapped.med.ids == mb.med_ids);
  CHECK(swapped.diag.mask.at(0, 1) == vb.diag.mask.at(0, 1));
}

TEST_CASE("selection and action frequencies match the corruption distribution") {
  CodeVocab cv;
  for (int i = 0; i < 120; ++i) cv.vocab.add("D" + std::to_string(i));
  cv.vocab.add("M0");
  cv.n_diag = 120;
  cv.n_med = 1;

  const int rows = 10000, k = 100;
  std::vector<std::vector<int>> diag_rows(static_cast<size_t>(rows));
  std::vector<std::vector<int>> other(static_cast<size_t>(rows), {Vocab::kCls});
  for (int b = 0; b < rows; ++b) {
    auto& row = diag_rows[static_cast<size_t>(b)];
    row.push_back(Vocab::kCls);
    for (int j = 0; j < k; ++j) row.push_back(Vocab::kNumSpecials + (b + j) % 120);
  }
  VisitBatch vb;
  vb.text = seq_of(other, 1, "text");
  vb.med = seq_of(other, 1, "med");
  vb.diag = seq_of(diag_rows, k + 1, "diag");

  const double n_elig = static_cast<double>(rows) * k;
  int variant = 0;
  for (const double rate : {0.05, 0.15, 0.5}) {
    Rng rng(900 + variant++);
    const MaskedCodeBatch mb = apply_mask(vb, rate, rng, cv);
    CHECK(mb.skipped_rows == 0);

    const double n_sel = static_cast<double>(mb.positions.size());
    const double forced = rows * std::pow(1.0 - rate, k);
    const double sel = n_sel / n_elig;
    const double sel_tol = 4.0 * std::sqrt(rate * (1.0 - rate) / n_elig);
    CHECK(std::abs(sel - (rate + forced / n_elig)) < sel_tol);

    double masked = 0.0, kept = 0.0, random = 0.0;
    for (const MaskedPosition& p : mb.positions) {
      if (p.action == MaskAction::masked) ++masked;
      else if (p.action == MaskAction::kept) ++kept;
      else ++random;
    }
    const std::pair<double, double> shares[] = {
        {masked / n_sel, 0.8}, {kept / n_sel, 0.1}, {random / n_sel, 0.1}};
    for (const auto& [got, want] : shares) {
      const double tol = 4.0 * std::sqrt(want * (1.0 - want) / n_sel) + forced / n_sel;
      CHECK(std::abs(got - want) < tol);
    }
    if (rate == 0.15) {
      CHECK(std::abs(sel - 0.15) < 0.005);
      CHECK(std::abs(masked / n_sel - 0.8) < 0.01);
      CHECK(std::abs(kept / n_sel - 0.1) < 0.01);
      CHECK(std::abs(random / n_sel - 0.1) < 0.01);
    }
  }
}

TEST_CASE("a zero head prices every prediction at the log vocabulary size") {
  Tape t;
  Rng rng(31);
  const int vocab = 12;
  const Var a = t.input(random_tensor({3, 5}, rng));
  const Var a2 = t.input(random_tensor({3, 5}, rng));
  const Var w = t.input(Tensor::zeros({5, vocab}));
  const Var b = t.input(Tensor::zeros({vocab}));
  MaskedCodeBatch mb;
  mb.rows = 3;
  mb.positions = {{0, 1, CodeStream::diag, 4, MaskAction::masked},
                  {2, 2, CodeStream::med, 9, MaskAction::masked},
                  {1, 1, CodeStream::diag, 6, MaskAction::kept}};
  CHECK(std::abs(t2c_loss(t, a, mb, w, b).val()[0] - std::log(12.0)) < 1e-12);
  CHECK(std::abs(c2c_loss(t, a, a2, mb, w, b).val()[0] - std::log(12.0)) < 1e-12);
}

TEST_CASE("a hand softmax oracle prices text to code predictions") {
  Tape t;
  const Tensor ta = Tensor::from({2, 3}, {0.3, -1.2, 0.7, 1.1, 0.4, -0.5});
  Rng rng(32);
  const Tensor tw = random_tensor({3, 7}, rng, 0.8);
  const Tensor tb = random_tensor({7}, rng, 0.3);
  MaskedCodeBatch mb;
  mb.rows = 2;
  mb.positions = {{0, 1, CodeStream::diag, 4, MaskAction::masked},
                  {1, 2, CodeStream::diag, 6, MaskAction::masked},
                  {0, 3, CodeStream::med, 5, MaskAction::masked}};

  const Var loss = t2c_loss(t, t.input(ta), mb, t.input(tw), t.input(tb));
  double want = 0.0;
  for (const MaskedPosition& p : mb.positions)
    want += ce_ref(linear_row(ta, p.row, tw, tb), p.label);
  want /= 3.0;
  CHECK(std::abs(loss.val()[0] - want) < 1e-10);
}

TEST_CASE("an empty corruption cannot be priced") {
  Tape t;
  Rng rng(33);
  const Var a = t.input(random_tensor({2, 3}, rng));
  const Var w = t.input(random_tensor({3, 9}, rng));
  const Var b = t.input(random_tensor({9}, rng));
  MaskedCodeBatch empty;
  empty.rows = 2;
  CHECK_THROWS_AS(t2c_loss(t, a, empty, w, b), StructureError);
  CHECK_THROWS_AS(c2c_loss(t, a, a, empty, w, b), StructureError);
}

TEST_CASE("the code loss conditions each stream on its own representation") {
  Tape t;
  Rng rng(34);
  const Tensor ad = random_tensor({3, 4}, rng);
  const Tensor am = random_tensor({3, 4}, rng);
  const Tensor tw = random_tensor({4, 9}, rng, 0.6);
  const Tensor tb = random_tensor({9}, rng, 0.2);
  MaskedCodeBatch mb;
  mb.rows = 3;
  mb.positions = {{0, 1, CodeStream::diag, 4, MaskAction::masked},
                  {1, 1, CodeStream::diag, 5, MaskAction::masked},
                  {2, 1, CodeStream::med, 8, MaskAction::masked},
                  {0, 2, CodeStream::med, 6, MaskAction::random},
                  {1, 3, CodeStream::med, 7, MaskAction::masked}};

  const Var loss =
      c2c_loss(t, t.input(ad), t.input(am), mb, t.input(tw), t.input(tb));
  double want = 0.0;
  for (const MaskedPosition& p : mb.positions) {
    const Tensor& rep = p.stream == CodeStream::diag ? ad : am;
    want += ce_ref(linear_row(rep, p.row, tw, tb), p.label);
  }
  want /= 5.0;
  CHECK(std::abs(loss.val()[0] - want) < 1e-10);

  MaskedCodeBatch med_only;
  med_only.rows = 3;
  med_only.positions = {{2, 1, CodeStream::med, 8, MaskAction::masked},
                        {0, 2, CodeStream::med, 6, MaskAction::masked}};
  const Var one_sided =
      c2c_loss(t, t.input(ad), t.input(am), med_only, t.input(tw), t.input(tb));
  double want_med = 0.0;
  for (const MaskedPosition& p : med_only.positions)
    want_med += ce_ref(linear_row(am, p.row, tw, tb), p.label);
  want_med /= 2.0;
  CHECK(std::abs(one_sided.val()[0] - want_med) < 1e-10);
}

TEST_CASE("fifty optimizer steps drive both masked code losses strictly down") {
  const std::vector<VisitRecord> visits = sample_visits(8);
  for (const bool text_side : {true, false}) {
    ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 7);
    const VisitBatch vb =
        make_visit_batch(ptrs_of(visits, 0, 8), model.tokens, model.codes, model.cfg);
    Rng mrng(41);
    const MaskedCodeBatch mb = apply_mask(vb, 0.15, mrng, model.codes);
    REQUIRE(mb.positions.size() >= 8);
    const VisitBatch corrupted = masked_visit_batch(vb, mb);

    AdamState opt = make_adam(model.params, 1e-3);
    std::vector<double> losses;
    for (int step = 0; step <= 50; ++step) {
      Tape t;
      const ModelForward fwd = forward_visit(t, model, corrupted, FusionMode::cross);
      const Var w = t.leaf(model.params.get(text_side ? "head.t2c.w" : "head.c2c.w"));
      const Var b = t.leaf(model.params.get(text_side ? "head.t2c.b" : "head.c2c.b"));
      const Var loss = text_side
          ? t2c_loss(t, fwd.reps.diag.a_text, mb, w, b)
          : c2c_loss(t, fwd.reps.diag.a_code, fwd.reps.med.a_code, mb, w, b);
      losses.push_back(loss.val()[0]);
      if (step == 50) break;
      t.backward(loss);
      adam_step(model.params, opt);
    }
    for (size_t i = 0; i + 1 < losses.size(); ++i) CHECK(losses[i + 1] < losses[i]);
  }
}

TEST_CASE("the step loss is exactly the sum of its weighted terms") {
  const std::vector<VisitRecord> visits = sample_visits(4);
  const TokenVocab tok = four_tokens();
  const CodeVocab cod = eight_codes();

  ModelState model = build_model(small_cfg(), tok, cod, 11);
  const VisitBatch vb = make_visit_batch(ptrs_of(visits, 0, 4), tok, cod, model.cfg);
  PretrainConfig cfg;
  AdamState opt = make_adam(model.params, cfg.lr);
  Rng mr(3), dr(4);
  const StepLosses s = pretrain_step(model, vb, opt, cfg, mr, dr);
  CHECK(s.total == s.t2c + s.c2c);
  CHECK(s.contrastive == 0.0);
  CHECK(opt.step == 1);

  ModelState m2 = build_model(small_cfg(), tok, cod, 11);
  PretrainConfig ccfg;
  ccfg.contrastive = true;
  ccfg.cl_weight = 1.0;
  ContrastiveState cl = make_contrastive(m2, ccfg.cl);
  const uint64_t momentum0 = cl.model.params.value_digest();
  AdamState opt2 = make_adam(m2.params, ccfg.lr);
  Rng mr2(3), dr2(4);
  const StepLosses s2 = pretrain_step(m2, vb, opt2, ccfg, mr2, dr2, &cl);
  CHECK(s2.total == s2.t2c + s2.c2c + s2.contrastive);
  CHECK(s2.contrastive > 0.0);
  CHECK(cl.model.params.value_digest() != momentum0);

  ModelState m3 = build_model(small_cfg(), tok, cod, 11);
  PretrainConfig wcfg;
  wcfg.t2c_weight = 0.5;
  wcfg.c2c_weight = 2.0;
  AdamState opt3 = make_adam(m3.params, wcfg.lr);
  Rng mr3(3), dr3(4);
  const StepLosses s3 = pretrain_step(m3, vb, opt3, wcfg, mr3, dr3);
  CHECK(s3.total == 0.5 * s3.t2c + 2.0 * s3.c2c);
}

TEST_CASE("a non finite loss aborts the step without touching any state") {
  const std::vector<VisitRecord> visits = sample_visits(3);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 13);
  const VisitBatch vb =
      make_visit_batch(ptrs_of(visits, 0, 3), model.tokens, model.codes, model.cfg);
  model.params.get("head.t2c.w").tensor.fill(std::numeric_limits<double>::infinity());
  const uint64_t before = model.params.value_digest();

  AdamState opt = make_adam(model.params, 1e-3);
  PretrainConfig cfg;
  Rng mr(9), dr(10);
  CHECK_THROWS_AS(pretrain_step(model, vb, opt, cfg, mr, dr), NumericError);
  CHECK(model.params.value_digest() == before);
  CHECK(opt.step == 0);
  bool grads_clean = true;
  model.params.for_each([&grads_clean](ParamGroup& g) {
    for (int64_t i = 0; i < g.grad.size(); ++i)
      if (g.grad[i] != 0.0) grads_clean = false;
  });
  CHECK(grads_clean);
}

TEST_CASE("identically seeded training runs are bitwise identical") {
  const std::vector<VisitRecord> visits = sample_visits(12);
  for (const bool with_cl : {false, true}) {
    auto run = [&](std::vector<EpochStats>& hist) -> uint64_t {
      ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 21);
      PretrainConfig cfg;
      cfg.epochs = 3;
      cfg.batch_size = 4;
      cfg.lr = 1e-3;
      cfg.patience = 5;
      cfg.seed = 77;
      cfg.contrastive = with_cl;
      PretrainResult r;
      if (with_cl) {
        ContrastiveState cl = make_contrastive(model, cfg.cl);
        r = pretrain_loop(model, ptrs_of(visits, 0, 9), ptrs_of(visits, 9, 12), cfg, &cl);
      } else {
        r = pretrain_loop(model, ptrs_of(visits, 0, 9), ptrs_of(visits, 9, 12), cfg);
      }
      hist = r.history;
      return model.params.value_digest();
    };
    std::vector<EpochStats> ha, hb;
    const uint64_t da = run(ha);
    const uint64_t db = run(hb);
    CHECK(da == db);
    REQUIRE(ha.size() == hb.size());
    for (size_t i = 0; i < ha.size(); ++i) {
      CHECK(ha[i].train_loss == hb[i].train_loss);
      CHECK(ha[i].eval_loss == hb[i].eval_loss);
      CHECK(ha[i].t2c == hb[i].t2c);
      CHECK(ha[i].c2c == hb[i].c2c);
      CHECK(ha[i].contrastive == hb[i].contrastive);
    }
  }
}

TEST_CASE("hard targets reduce the contrastive loss to diagonal cross entropy") {
  const std::vector<VisitRecord> visits = sample_visits(3);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 31);
  const VisitBatch vb =
      make_visit_batch(ptrs_of(visits, 0, 3), model.tokens, model.codes, model.cfg);
  ContrastiveConfig cc;
  cc.alpha = 0.0;
  ContrastiveState st = make_contrastive(model, cc);

  Tape t;
  Rng rng(32);
  const Tensor at = random_tensor({3, 4}, rng);
  const Tensor ac = random_tensor({3, 4}, rng);
  const Var loss = contrastive_loss(t, model, st, vb, t.input(at), t.input(ac));

  const Tensor zt = mlp_ref(model.params, "cl.t", at);
  const Tensor zc = mlp_ref(model.params, "cl.c", ac);
  double ce_tc = 0.0, ce_ct = 0.0;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> row_tc(3), row_ct(3);
    for (int j = 0; j < 3; ++j) {
      double s = 0.0, st2 = 0.0;
      for (int d = 0; d < 2; ++d) {
        s += zt.at(i, d) * zc.at(j, d);
        st2 += zt.at(j, d) * zc.at(i, d);
      }
      row_tc[static_cast<size_t>(j)] = s / cc.tau;
      row_ct[static_cast<size_t>(j)] = st2 / cc.tau;
    }
    ce_tc += ce_ref(row_tc, i);
    ce_ct += ce_ref(row_ct, i);
  }
  const double want = 0.5 * (ce_tc / 3.0 + ce_ct / 3.0);
  CHECK(std::abs(loss.val()[0] - want) < 1e-10);
}

TEST_CASE("a unit momentum coefficient freezes the momentum tower") {
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 33);
  ContrastiveConfig cc;
  cc.momentum = 1.0;
  ContrastiveState st = make_contrastive(model, cc);
  const uint64_t frozen = st.model.params.value_digest();
  for (int i = 0; i < 100; ++i) {
    model.params.for_each([](ParamGroup& g) {
      for (int64_t j = 0; j < g.tensor.size(); ++j) g.tensor[j] += 0.01;
    });
    update_momentum(st, model);
  }
  CHECK(st.model.params.value_digest() == frozen);
}

TEST_CASE("extreme temperature flattens the contrastive loss to ln M") {
  const std::vector<VisitRecord> visits = sample_visits(3);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 35);
  const VisitBatch vb =
      make_visit_batch(ptrs_of(visits, 0, 3), model.tokens, model.codes, model.cfg);
  ContrastiveConfig cc;
  cc.tau = 1e6;
  ContrastiveState st = make_contrastive(model, cc);

  Tape t;
  const ModelForward fwd = forward_visit(t, model, vb, FusionMode::cross);
  const Var loss =
      contrastive_loss(t, model, st, vb, fwd.reps.diag.a_text, fwd.reps.diag.a_code);
  CHECK(std::abs(loss.val()[0] - std::log(3.0)) < 1e-3);
}

TEST_CASE("contrastive hyperparameters are validated") {
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 36);
  ContrastiveConfig cc;
  cc.tau = 0.0;
  CHECK_THROWS_AS(make_contrastive(model, cc), ConfigError);
  cc.tau = -0.5;
  CHECK_THROWS_AS(make_contrastive(model, cc), ConfigError);
  cc = {};
  cc.alpha = -0.1;
  CHECK_THROWS_AS(make_contrastive(model, cc), ConfigError);
  cc.alpha = 1.1;
  CHECK_THROWS_AS(make_contrastive(model, cc), ConfigError);
  cc = {};
  cc.momentum = 0.0;
  CHECK_THROWS_AS(make_contrastive(model, cc), ConfigError);
  cc.momentum = 1.5;
  CHECK_THROWS_AS(make_contrastive(model, cc), ConfigError);
  cc.momentum = 1.0;
  CHECK_NOTHROW(make_contrastive(model, cc));
}

TEST_CASE("a single visit cannot form contrastive candidates") {
  const std::vector<VisitRecord> visits = sample_visits(1);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 37);
  const VisitBatch vb =
      make_visit_batch(ptrs_of(visits, 0, 1), model.tokens, model.codes, model.cfg);
  ContrastiveState st = make_contrastive(model, ContrastiveConfig{});
  Tape t;
  const ModelForward fwd = forward_visit(t, model, vb, FusionMode::cross);
  CHECK_THROWS_AS(
      contrastive_loss(t, model, st, vb, fwd.reps.diag.a_text, fwd.reps.diag.a_code),
      StructureError);
}

TEST_CASE("the momentum update interpolates parameters elementwise") {
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 38);
  ContrastiveConfig cc;
  cc.momentum = 0.9;
  ContrastiveState st = make_contrastive(model, cc);
  const Tensor m0 = st.model.params.get("cl.t.1.w").tensor.clone();
  model.params.get("cl.t.1.w").tensor.fill(0.5);
  update_momentum(st, model);
  const Tensor& mt = st.model.params.get("cl.t.1.w").tensor;
  for (int64_t i = 0; i < mt.size(); ++i) CHECK(mt[i] == 0.9 * m0[i] + (1.0 - 0.9) * 0.5);
}

TEST_CASE("training keeps the parameters of the best evaluation epoch") {
  const std::vector<VisitRecord> visits = sample_visits(12);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 41);
  PretrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  cfg.patience = 1;
  cfg.seed = 99;
  AdamState opt;
  const PretrainResult r = pretrain_loop(model, ptrs_of(visits, 0, 9),
                                         ptrs_of(visits, 9, 12), cfg, nullptr, &opt);
  REQUIRE(!r.history.empty());
  double lowest = std::numeric_limits<double>::infinity();
  for (const EpochStats& st : r.history) lowest = std::min(lowest, st.eval_loss);
  CHECK(r.best_eval == lowest);
  CHECK(r.history[static_cast<size_t>(r.best_epoch)].eval_loss == r.best_eval);
  CHECK(opt.step > 0);

  const double recomputed =
      pretrain_eval_loss(model, ptrs_of(visits, 9, 12), cfg);
  CHECK(recomputed == r.best_eval);
}

TEST_CASE("zero patience stops at the first epoch that fails to improve") {
  const std::vector<VisitRecord> visits = sample_visits(12);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 43);
  PretrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 4;
  cfg.lr = 0.7;  // deliberately unstable
  cfg.patience = 0;
  cfg.seed = 5;
  const PretrainResult r =
      pretrain_loop(model, ptrs_of(visits, 0, 9), ptrs_of(visits, 9, 12), cfg);
  CHECK(r.history.size() < 12);
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i + 1 < r.history.size(); ++i) {
    CHECK(r.history[i].eval_loss < best);
    best = std::min(best, r.history[i].eval_loss);
  }
  CHECK(r.history.back().eval_loss >= best);
}

TEST_CASE("training rejects unusable inputs") {
  const std::vector<VisitRecord> visits = sample_visits(4);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 45);
  PretrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(pretrain_loop(model, {}, ptrs_of(visits, 0, 4), cfg), ConfigError);
  CHECK_THROWS_AS(pretrain_loop(model, ptrs_of(visits, 0, 4), {}, cfg), ConfigError);

  VisitRecord text_only;
  text_only.patient_id = "t";
  text_only.text_tokens = {"alpha"};
  const std::vector<const VisitRecord*> codeless = {&text_only};
  CHECK_THROWS_AS(pretrain_loop(model, codeless, ptrs_of(visits, 0, 4), cfg), ConfigError);

  PretrainConfig bad = cfg;
  bad.mask_rate = 0.0;
  CHECK_THROWS_AS(pretrain_loop(model, ptrs_of(visits, 0, 4), ptrs_of(visits, 0, 4), bad),
                  ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(pretrain_loop(model, ptrs_of(visits, 0, 4), ptrs_of(visits, 0, 4), bad),
                  ConfigError);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(pretrain_loop(model, ptrs_of(visits, 0, 4), ptrs_of(visits, 0, 4), bad),
                  ConfigError);
  bad = cfg;
  bad.patience = -1;
  CHECK_THROWS_AS(pretrain_loop(model, ptrs_of(visits, 0, 4), ptrs_of(visits, 0, 4), bad),
                  ConfigError);
}

TEST_CASE("finite differences confirm the pretraining gradients") {
  const std::vector<VisitRecord> visits = sample_visits(3);
  ModelState model = build_model(small_cfg(), four_tokens(), eight_codes(), 51);
  const VisitBatch vb =
      make_visit_batch(ptrs_of(visits, 0, 3), model.tokens, model.codes, model.cfg);
  Rng mr(52);
  const MaskedCodeBatch mb = apply_mask(vb, 0.25, mr, model.codes);
  REQUIRE(!mb.positions.empty());
  const VisitBatch corrupted = masked_visit_batch(vb, mb);
  ContrastiveState cl = make_contrastive(model, ContrastiveConfig{});

  for (const bool with_cl : {false, true}) {
    auto build = [&](Tape& t) -> Var {
      const ModelForward fwd = forward_visit(t, model, corrupted, FusionMode::cross);
      const Var tw = t.leaf(model.params.get("head.t2c.w"));
      const Var tb = t.leaf(model.params.get("head.t2c.b"));
      const Var cw = t.leaf(model.params.get("head.c2c.w"));
      const Var cb = t.leaf(model.params.get("head.c2c.b"));
      const Var lt = t2c_loss(t, fwd.reps.diag.a_text, mb, tw, tb);
      const Var lc = c2c_loss(t, fwd.reps.diag.a_code, fwd.reps.med.a_code, mb, cw, cb);
      if (!with_cl) return t.weighted_sum({lt, lc}, {1.0, 1.0});
      const Var lcl = contrastive_loss(t, model, cl, corrupted, fwd.reps.diag.a_text,
                                       fwd.reps.diag.a_code);
      return t.weighted_sum({lt, lc, lcl}, {1.0, 1.0, 1.0});
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
    const GradCheckReport rep = grad_check(model.params, loss, back, 1e-5, 1e-4, 3, 17, 1e-6);
    CHECK_MESSAGE(rep.passed(1e-4), "cl=" << with_cl << " worst " << rep.worst.group << "["
                                          << rep.worst.index << "] rel " << rep.max_rel_err);
  }
}

TEST_SUITE_END();
