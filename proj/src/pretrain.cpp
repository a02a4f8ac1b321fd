#include "ummx/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

#include "ummx/error.hpp"

namespace ummx {

namespace {

double scalar_of(Tape& tape, Var v) { return tape.value(v)[0]; }

struct Slot {
  int col = 0;
  CodeStream stream = CodeStream::diag;
};

void corrupt_slot(MaskedCodeBatch& out, const VisitBatch& batch, int row, const Slot& s,
                  MaskAction action, int replacement) {
  std::vector<int>& ids = s.stream == CodeStream::diag ? out.diag_ids : out.med_ids;
  const int len = s.stream == CodeStream::diag ? batch.diag.len : batch.med.len;
  const size_t idx = static_cast<size_t>(row) * len + s.col;
  out.positions.push_back({row, s.col, s.stream, ids[idx], action});
  switch (action) {
    case MaskAction::masked: ids[idx] = Vocab::kMask; break;
    case MaskAction::kept: break;
    case MaskAction::random: ids[idx] = replacement; break;
  }
}

std::vector<const VisitRecord*> with_codes(const std::vector<const VisitRecord*>& visits) {
  std::vector<const VisitRecord*> out;
  for (const VisitRecord* v : visits)
    if (v != nullptr && (!v->diag_codes.empty() || !v->med_codes.empty())) out.push_back(v);
  return out;
}

/// Half-open [lo, hi) visit ranges. A trailing single-visit batch is folded
/// into its predecessor when requested (the contrastive loss needs at least
/// two visits per batch).
std::vector<std::pair<size_t, size_t>> batch_bounds(size_t n, int batch_size,
                                                    bool fold_singleton) {
  std::vector<std::pair<size_t, size_t>> out;
  const size_t step = static_cast<size_t>(batch_size);
  for (size_t lo = 0; lo < n; lo += step) out.emplace_back(lo, std::min(n, lo + step));
  if (fold_singleton && out.size() >= 2 && out.back().second - out.back().first == 1) {
    out[out.size() - 2].second = out.back().second;
    out.pop_back();
  }
  return out;
}

struct MaskHeads {
  Var t2c_w, t2c_b, c2c_w, c2c_b;
};

MaskHeads bind_mask_heads(Tape& tape, ModelState& model) {
  MaskHeads h;
  if (model.cfg.share_mask_heads) {
    h.t2c_w = tape.leaf(model.params.get("head.mask.w"));
    h.t2c_b = tape.leaf(model.params.get("head.mask.b"));
    h.c2c_w = h.t2c_w;
    h.c2c_b = h.t2c_b;
  } else {
    h.t2c_w = tape.leaf(model.params.get("head.t2c.w"));
    h.t2c_b = tape.leaf(model.params.get("head.t2c.b"));
    h.c2c_w = tape.leaf(model.params.get("head.c2c.w"));
    h.c2c_b = tape.leaf(model.params.get("head.c2c.b"));
  }
  return h;
}

Var contrast_mlp(Tape& tape, ParamStore& ps, const std::string& stem, Var x) {
  Var h = tape.linear(x, tape.leaf(ps.get(stem + ".1.w")), tape.leaf(ps.get(stem + ".1.b")));
  h = tape.gelu(h);
  return tape.linear(h, tape.leaf(ps.get(stem + ".2.w")), tape.leaf(ps.get(stem + ".2.b")));
}

void copy_values(ParamStore& dst, const ParamStore& src) {
  auto& dg = dst.groups();
  const auto& sg = src.groups();
  if (dg.size() != sg.size()) throw StructureError("parameter stores differ in group count");
  for (size_t i = 0; i < dg.size(); ++i) {
    Tensor& d = dg[i]->tensor;
    const Tensor& s = sg[i]->tensor;
    if (!d.same_shape(s)) throw StructureError("parameter stores differ in shape");
    std::copy(s.data(), s.data() + s.size(), d.data());
  }
}

}  // namespace

MaskedCodeBatch apply_mask(const VisitBatch& batch, double rate, Rng& rng,
                           const CodeVocab& codes) {
  if (!(rate > 0.0 && rate < 1.0))
    throw ConfigError("mask rate " + std::to_string(rate) + " must lie in (0, 1)");
  const int n_real = codes.size() - Vocab::kNumSpecials;

  MaskedCodeBatch out;
  out.diag_ids = batch.diag.ids;
  out.med_ids = batch.med.ids;
  out.rows = batch.diag.batch;

  std::vector<Slot> eligible;
  for (int b = 0; b < out.rows; ++b) {
    eligible.clear();
    for (int j = 0; j < batch.diag.len; ++j)
      if (batch.diag.mask.at(b, j) != 0.0 && batch.diag.id(b, j) >= Vocab::kNumSpecials)
        eligible.push_back({j, CodeStream::diag});
    for (int j = 0; j < batch.med.len; ++j)
      if (batch.med.mask.at(b, j) != 0.0 && batch.med.id(b, j) >= Vocab::kNumSpecials)
        eligible.push_back({j, CodeStream::med});
    if (eligible.empty()) {
      ++out.skipped_rows;
      continue;
    }
    const size_t before = out.positions.size();
    for (const Slot& s : eligible) {
      if (!rng.bernoulli(rate)) continue;
      const double u = rng.uniform();
      if (u < 0.8) {
        corrupt_slot(out, batch, b, s, MaskAction::masked, 0);
      } else if (u < 0.9) {
        corrupt_slot(out, batch, b, s, MaskAction::kept, 0);
      } else {
        corrupt_slot(out, batch, b, s, MaskAction::random,
                     Vocab::kNumSpecials + rng.below_int(n_real));
      }
    }
    if (out.positions.size() == before) {
      // Every row with a real code contributes at least one prediction.
      const Slot& s = eligible[static_cast<size_t>(rng.below(
          static_cast<int64_t>(eligible.size())))];
      corrupt_slot(out, batch, b, s, MaskAction::masked, 0);
    }
  }
  return out;
}

VisitBatch masked_visit_batch(const VisitBatch& batch, const MaskedCodeBatch& masked) {
  if (masked.diag_ids.size() != batch.diag.ids.size() ||
      masked.med_ids.size() != batch.med.ids.size())
    throw ShapeError("masked ids do not match the batch layout");
  VisitBatch out = batch;
  out.diag.ids = masked.diag_ids;
  out.med.ids = masked.med_ids;
  return out;
}

Var t2c_loss(Tape& tape, Var a_text, const MaskedCodeBatch& masked, Var head_w, Var head_b) {
  if (masked.positions.empty())
    throw StructureError("text-to-code loss needs at least one masked position");
  Var logits = tape.linear(a_text, head_w, head_b);
  std::vector<std::pair<int, int>> items;
  items.reserve(masked.positions.size());
  for (const MaskedPosition& p : masked.positions) items.emplace_back(p.row, p.label);
  return tape.cross_entropy_indexed(logits, std::move(items));
}

Var c2c_loss(Tape& tape, Var a_code_diag, Var a_code_med, const MaskedCodeBatch& masked,
             Var head_w, Var head_b) {
  if (masked.positions.empty())
    throw StructureError("code-to-code loss needs at least one masked position");
  std::vector<std::pair<int, int>> diag_items, med_items;
  for (const MaskedPosition& p : masked.positions)
    (p.stream == CodeStream::diag ? diag_items : med_items).emplace_back(p.row, p.label);
  const double nd = static_cast<double>(diag_items.size());
  const double nm = static_cast<double>(med_items.size());
  std::vector<Var> parts;
  std::vector<double> ws;
  if (!diag_items.empty()) {
    parts.push_back(tape.cross_entropy_indexed(tape.linear(a_code_diag, head_w, head_b),
                                               std::move(diag_items)));
    ws.push_back(nd / (nd + nm));
  }
  if (!med_items.empty()) {
    parts.push_back(tape.cross_entropy_indexed(tape.linear(a_code_med, head_w, head_b),
                                               std::move(med_items)));
    ws.push_back(nm / (nd + nm));
  }
  return tape.weighted_sum(parts, ws);
}

void ContrastiveConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("contrastive temperature must be positive");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("target mixing alpha must lie in [0, 1]");
  if (!(momentum > 0.0) || momentum > 1.0)
    throw ConfigError("momentum coefficient must lie in (0, 1]");
}

ContrastiveState make_contrastive(const ModelState& model, const ContrastiveConfig& cfg) {
  cfg.validate();
  ContrastiveState st;
  st.cfg = cfg;
  st.model = clone_model(model);
  return st;
}

void update_momentum(ContrastiveState& state, const ModelState& model) {
  auto& mg = state.model.params.groups();
  const auto& lg = model.params.groups();
  if (mg.size() != lg.size()) throw StructureError("momentum model does not match the live model");
  const double m = state.cfg.momentum;
  for (size_t i = 0; i < mg.size(); ++i) {
    Tensor& t = mg[i]->tensor;
    const Tensor& s = lg[i]->tensor;
    if (!t.same_shape(s)) throw StructureError("momentum model does not match the live model");
    double* d = t.data();
    const double* l = s.data();
    for (int64_t k = 0; k < t.size(); ++k) d[k] = m * d[k] + (1.0 - m) * l[k];
  }
}

Var contrastive_loss(Tape& tape, ModelState& model, ContrastiveState& state,
                     const VisitBatch& batch, Var a_text, Var a_code, FusionMode mode) {
  state.cfg.validate();
  const int m_rows = static_cast<int>(tape.value(a_text).rows());
  if (m_rows < 2) throw StructureError("contrastive loss needs at least two visits");

  Var zt = contrast_mlp(tape, model.params, "cl.t", a_text);
  Var zc = contrast_mlp(tape, model.params, "cl.c", a_code);
  Var sim = tape.matmul(zt, tape.transpose(zc));  // [M, M], text rows x code cols
  const double inv_tau = 1.0 / state.cfg.tau;
  Var logits_tc = tape.scale(sim, inv_tau);
  Var logits_ct = tape.scale(tape.transpose(sim), inv_tau);

  const double alpha = state.cfg.alpha;
  Tensor target_tc({m_rows, m_rows});
  Tensor target_ct({m_rows, m_rows});
  if (alpha > 0.0) {
    // Soft targets from the momentum towers; forward pass only.
    Tape mt;
    ModelForward mf = forward_visit(mt, state.model, batch, mode);
    Var mzt = contrast_mlp(mt, state.model.params, "cl.t", mf.reps.diag.a_text);
    Var mzc = contrast_mlp(mt, state.model.params, "cl.c", mf.reps.diag.a_code);
    Var msim = mt.matmul(mzt, mt.transpose(mzc));
    const Tensor sm = mt.value(msim);
    Tensor scaled_tc({m_rows, m_rows});
    Tensor scaled_ct({m_rows, m_rows});
    for (int i = 0; i < m_rows; ++i)
      for (int j = 0; j < m_rows; ++j) {
        scaled_tc.at(i, j) = sm.at(i, j) * inv_tau;
        scaled_ct.at(i, j) = sm.at(j, i) * inv_tau;
      }
    const Tensor ytc = softmax(scaled_tc, 1);
    const Tensor yct = softmax(scaled_ct, 1);
    for (int i = 0; i < m_rows; ++i)
      for (int j = 0; j < m_rows; ++j) {
        target_tc.at(i, j) = alpha * ytc.at(i, j);
        target_ct.at(i, j) = alpha * yct.at(i, j);
      }
  }
  for (int i = 0; i < m_rows; ++i) {
    target_tc.at(i, i) += 1.0 - alpha;
    target_ct.at(i, i) += 1.0 - alpha;
  }

  Var ce_tc = tape.soft_cross_entropy_rows(logits_tc, std::move(target_tc));
  Var ce_ct = tape.soft_cross_entropy_rows(logits_ct, std::move(target_ct));
  return tape.weighted_sum({ce_tc, ce_ct}, {0.5, 0.5});
}

void PretrainConfig::validate() const {
  if (!(mask_rate > 0.0 && mask_rate < 1.0))
    throw ConfigError("mask rate " + std::to_string(mask_rate) + " must lie in (0, 1)");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (patience < 0) throw ConfigError("patience must be non-negative");
  if (t2c_weight < 0.0 || c2c_weight < 0.0 || cl_weight < 0.0)
    throw ConfigError("loss weights must be non-negative");
  if (contrastive) cl.validate();
}

StepLosses pretrain_step(ModelState& model, const VisitBatch& batch, AdamState& opt,
                         const PretrainConfig& cfg, Rng& mask_rng, Rng& dropout_rng,
                         ContrastiveState* cl) {
  cfg.validate();
  MaskedCodeBatch masked = apply_mask(batch, cfg.mask_rate, mask_rng, model.codes);
  if (masked.positions.empty())
    throw StructureError("batch has no maskable code tokens");
  VisitBatch corrupted = masked_visit_batch(batch, masked);

  Tape tape;
  ModelForward fwd = forward_visit(tape, model, corrupted, cfg.mode, &dropout_rng, true);
  MaskHeads heads = bind_mask_heads(tape, model);

  Var lt = t2c_loss(tape, fwd.reps.diag.a_text, masked, heads.t2c_w, heads.t2c_b);
  Var lc;
  if (cfg.independent_corruption) {
    MaskedCodeBatch masked2 = apply_mask(batch, cfg.mask_rate, mask_rng, model.codes);
    if (masked2.positions.empty())
      throw StructureError("batch has no maskable code tokens");
    VisitBatch corrupted2 = masked_visit_batch(batch, masked2);
    ModelForward fwd2 = forward_visit(tape, model, corrupted2, cfg.mode, &dropout_rng, true);
    lc = c2c_loss(tape, fwd2.reps.diag.a_code, fwd2.reps.med.a_code, masked2, heads.c2c_w,
                  heads.c2c_b);
  } else {
    lc = c2c_loss(tape, fwd.reps.diag.a_code, fwd.reps.med.a_code, masked, heads.c2c_w,
                  heads.c2c_b);
  }

  std::vector<Var> parts{lt, lc};
  std::vector<double> ws{cfg.t2c_weight, cfg.c2c_weight};
  Var lcl;
  if (cl != nullptr) {
    lcl = contrastive_loss(tape, model, *cl, corrupted, fwd.reps.diag.a_text,
                           fwd.reps.diag.a_code, cfg.mode);
    parts.push_back(lcl);
    ws.push_back(cfg.cl_weight);
  }
  Var total = tape.weighted_sum(parts, ws);

  StepLosses out;
  out.t2c = scalar_of(tape, lt);
  out.c2c = scalar_of(tape, lc);
  if (cl != nullptr) out.contrastive = scalar_of(tape, lcl);
  out.total = scalar_of(tape, total);
  if (!std::isfinite(out.total))
    throw NumericError("pre-training loss is not finite; step aborted");

  tape.backward(total);
  bool bad_grad = false;
  model.params.for_each([&bad_grad](ParamGroup& g) {
    if (g.trainable && !g.grad.all_finite()) bad_grad = true;
  });
  if (bad_grad) {
    model.params.zero_grads();
    throw NumericError("non-finite gradient; step aborted");
  }

  adam_step(model.params, opt);
  if (cl != nullptr) update_momentum(*cl, model);
  return out;
}

double pretrain_eval_loss(ModelState& model, const std::vector<const VisitRecord*>& visits,
                          const PretrainConfig& cfg) {
  cfg.validate();
  const std::vector<const VisitRecord*> usable = with_codes(visits);
  if (usable.empty()) throw ConfigError("eval set has no visits with codes");
  Rng mask_rng(derive_seed(cfg.seed, "eval-mask"));

  double weighted = 0.0;
  double count = 0.0;
  for (const auto& [lo, hi] : batch_bounds(usable.size(), cfg.batch_size, false)) {
    const std::vector<const VisitRecord*> chunk(usable.begin() + static_cast<long>(lo),
                                                usable.begin() + static_cast<long>(hi));
    const VisitBatch vb = make_visit_batch(chunk, model.tokens, model.codes, model.cfg);
    const MaskedCodeBatch masked = apply_mask(vb, cfg.mask_rate, mask_rng, model.codes);
    const VisitBatch corrupted = masked_visit_batch(vb, masked);

    Tape tape;
    ModelForward fwd = forward_visit(tape, model, corrupted, cfg.mode);
    MaskHeads heads = bind_mask_heads(tape, model);
    Var lt = t2c_loss(tape, fwd.reps.diag.a_text, masked, heads.t2c_w, heads.t2c_b);
    Var lc = c2c_loss(tape, fwd.reps.diag.a_code, fwd.reps.med.a_code, masked, heads.c2c_w,
                      heads.c2c_b);
    Var total = tape.weighted_sum({lt, lc}, {cfg.t2c_weight, cfg.c2c_weight});
    weighted += scalar_of(tape, total) * static_cast<double>(hi - lo);
    count += static_cast<double>(hi - lo);
  }
  return weighted / count;
}

PretrainEvalParts pretrain_eval_parts(ModelState& model,
                                      const std::vector<const VisitRecord*>& visits,
                                      const PretrainConfig& cfg) {
  cfg.validate();
  const std::vector<const VisitRecord*> usable = with_codes(visits);
  if (usable.empty()) throw ConfigError("eval set has no visits with codes");
  Rng mask_rng(derive_seed(cfg.seed, "eval-mask"));

  PretrainEvalParts parts;
  double count = 0.0;
  for (const auto& [lo, hi] : batch_bounds(usable.size(), cfg.batch_size, false)) {
    const std::vector<const VisitRecord*> chunk(usable.begin() + static_cast<long>(lo),
                                                usable.begin() + static_cast<long>(hi));
    const VisitBatch vb = make_visit_batch(chunk, model.tokens, model.codes, model.cfg);
    const MaskedCodeBatch masked = apply_mask(vb, cfg.mask_rate, mask_rng, model.codes);
    const VisitBatch corrupted = masked_visit_batch(vb, masked);

    Tape tape;
    ModelForward fwd = forward_visit(tape, model, corrupted, cfg.mode);
    MaskHeads heads = bind_mask_heads(tape, model);
    Var lt = t2c_loss(tape, fwd.reps.diag.a_text, masked, heads.t2c_w, heads.t2c_b);
    const double vt = scalar_of(tape, lt);
    Var lc = c2c_loss(tape, fwd.reps.diag.a_code, fwd.reps.med.a_code, masked, heads.c2c_w,
                      heads.c2c_b);
    const double vc = scalar_of(tape, lc);
    const double w = static_cast<double>(hi - lo);
    parts.t2c += vt * w;
    parts.c2c += vc * w;
    count += w;
  }
  parts.t2c /= count;
  parts.c2c /= count;
  return parts;
}

PretrainResult pretrain_loop(ModelState& model, const std::vector<const VisitRecord*>& train,
                             const std::vector<const VisitRecord*>& eval_set,
                             const PretrainConfig& cfg, ContrastiveState* cl,
                             AdamState* opt_out) {
  cfg.validate();
  const std::vector<const VisitRecord*> tr = with_codes(train);
  const std::vector<const VisitRecord*> ev = with_codes(eval_set);
  if (tr.empty()) throw ConfigError("training set has no visits with codes");
  if (ev.empty()) throw ConfigError("eval set has no visits with codes");

  Rng mask_rng(derive_seed(cfg.seed, "mask"));
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));

  AdamState opt = make_adam(model.params, cfg.lr);
  PretrainResult res;
  res.best_eval = std::numeric_limits<double>::infinity();
  ParamStore best;
  int bad_epochs = 0;

  std::vector<size_t> order(tr.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double sum_total = 0.0, sum_t2c = 0.0, sum_c2c = 0.0, sum_cl = 0.0, seen = 0.0;
    for (const auto& [lo, hi] : batch_bounds(tr.size(), cfg.batch_size, cl != nullptr)) {
      std::vector<const VisitRecord*> chunk;
      chunk.reserve(hi - lo);
      for (size_t i = lo; i < hi; ++i) chunk.push_back(tr[order[i]]);
      const VisitBatch vb = make_visit_batch(chunk, model.tokens, model.codes, model.cfg);
      const StepLosses losses = pretrain_step(model, vb, opt, cfg, mask_rng, dropout_rng, cl);
      const double w = static_cast<double>(hi - lo);
      sum_total += losses.total * w;
      sum_t2c += losses.t2c * w;
      sum_c2c += losses.c2c * w;
      sum_cl += losses.contrastive * w;
      seen += w;
    }

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = sum_total / seen;
    st.t2c = sum_t2c / seen;
    st.c2c = sum_c2c / seen;
    st.contrastive = sum_cl / seen;
    st.eval_loss = pretrain_eval_loss(model, ev, cfg);
    res.history.push_back(st);

    if (st.eval_loss < res.best_eval) {
      res.best_eval = st.eval_loss;
      res.best_epoch = epoch;
      best = model.params.clone();
      bad_epochs = 0;
    } else {
      ++bad_epochs;
      if (bad_epochs > cfg.patience) break;
    }
  }

  if (best.size() > 0) copy_values(model.params, best);
  if (opt_out != nullptr) *opt_out = std::move(opt);
  return res;
}

}  // namespace ummx
