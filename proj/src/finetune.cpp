#include "ummx/finetune.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include "ummx/error.hpp"

namespace ummx {

namespace {

double scalar_of(Tape& tape, Var v) { return tape.value(v)[0]; }

std::vector<std::pair<size_t, size_t>> batch_bounds(size_t n, int batch_size) {
  std::vector<std::pair<size_t, size_t>> out;
  const size_t step = static_cast<size_t>(batch_size);
  for (size_t lo = 0; lo < n; lo += step) out.emplace_back(lo, std::min(n, lo + step));
  return out;
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

void check_grads_finite(ParamStore& params) {
  bool bad = false;
  params.for_each([&bad](ParamGroup& g) {
    if (g.trainable && !g.grad.all_finite()) bad = true;
  });
  if (bad) {
    params.zero_grads();
    throw NumericError("non-finite gradient; step aborted");
  }
}

/// Midrank ROC-AUC; ties contribute one half.
double rank_auc(const std::vector<double>& s, const std::vector<int>& y) {
  const size_t n = s.size();
  int64_t np = 0, nn = 0;
  for (const int v : y) (v ? np : nn) += 1;
  if (np == 0 || nn == 0)
    throw StructureError("AUC is undefined when only one class is present");
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&s](size_t a, size_t b) { return s[a] < s[b]; });
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && s[idx[j]] == s[idx[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k)
      if (y[idx[k]]) pos_rank_sum += mid;
    i = j;
  }
  const double numer = pos_rank_sum - 0.5 * static_cast<double>(np) * static_cast<double>(np + 1);
  return numer / (static_cast<double>(np) * static_cast<double>(nn));
}

Tensor icd_target_rows(const std::vector<const VisitRecord*>& chunk, const CodeVocab& codes) {
  Tensor t = Tensor::zeros({static_cast<int>(chunk.size()), codes.n_diag});
  for (size_t i = 0; i < chunk.size(); ++i) {
    if (!chunk[i]->icd_labels) continue;
    for (const std::string& s : *chunk[i]->icd_labels) {
      const int id = codes.vocab.lookup(s);
      if (codes.is_diag(id)) t.at(static_cast<int>(i), id - codes.diag_begin()) = 1.0;
    }
  }
  return t;
}

Tensor readmit_label_rows(const std::vector<const VisitRecord*>& chunk) {
  Tensor t({static_cast<int>(chunk.size()), 1});
  for (size_t i = 0; i < chunk.size(); ++i) {
    if (!chunk[i]->readmit_label)
      throw StructureError("readmission example lacks a label");
    t.at(static_cast<int>(i), 0) = *chunk[i]->readmit_label ? 1.0 : 0.0;
  }
  return t;
}

/// Diagnosis codes are the ICD task's targets, so its inputs carry only the
/// medication stream.
VisitBatch icd_input_batch(const std::vector<const VisitRecord*>& chunk,
                           const ModelState& model) {
  std::vector<VisitRecord> meds_only(chunk.size());
  std::vector<const VisitRecord*> ptrs(chunk.size());
  for (size_t i = 0; i < chunk.size(); ++i) {
    meds_only[i] = *chunk[i];
    meds_only[i].diag_codes.clear();
    ptrs[i] = &meds_only[i];
  }
  return make_visit_batch(ptrs, model.tokens, model.codes, model.cfg);
}

std::vector<const VisitRecord*> visit_ptrs(const PatientHistory& p) {
  std::vector<const VisitRecord*> out;
  for (const VisitRecord& v : p.visits) out.push_back(&v);
  return out;
}

Var task_batch_loss(Tape& tape, ModelState& model, const TaskUnits& units,
                    const std::vector<size_t>& order, size_t lo, size_t hi,
                    const FinetuneConfig& cfg, Rng* dropout_rng, bool train) {
  ParamStore& ps = model.params;
  if (cfg.task == TaskKind::drug_rec) {
    const Var w = tape.leaf(ps.get("task.drug.w"));
    const Var b = tape.leaf(ps.get("task.drug.b"));
    std::vector<Var> losses;
    for (size_t i = lo; i < hi; ++i) {
      const PatientHistory& p = *units.patients[order[i]];
      const PatientReps reps =
          encode_patient(tape, model, visit_ptrs(p), cfg.mode, dropout_rng, train);
      losses.push_back(
          drug_rec_patient_loss(tape, reps, drug_targets(p, model.codes), w, b));
    }
    return tape.weighted_sum(losses,
                             std::vector<double>(losses.size(), 1.0 / losses.size()));
  }
  std::vector<const VisitRecord*> chunk;
  for (size_t i = lo; i < hi; ++i) chunk.push_back(units.visits[order[i]]);
  if (cfg.task == TaskKind::icd_coding) {
    const VisitBatch vb = icd_input_batch(chunk, model);
    const ModelForward fwd = forward_visit(tape, model, vb, cfg.mode, dropout_rng, train);
    return icd_predict_and_loss(tape, fwd.reps.med.a_text, fwd.reps.med.a_code,
                                tape.leaf(ps.get("task.icd.w")), tape.leaf(ps.get("task.icd.b")),
                                icd_target_rows(chunk, model.codes))
        .loss;
  }
  const VisitBatch vb = make_visit_batch(chunk, model.tokens, model.codes, model.cfg);
  const ModelForward fwd = forward_visit(tape, model, vb, cfg.mode, dropout_rng, train);
  return readmission_predict_and_loss(tape, fwd.reps.diag.a_text, fwd.reps.diag.a_code,
                                      tape.leaf(ps.get("task.readmit.w")),
                                      tape.leaf(ps.get("task.readmit.b")),
                                      readmit_label_rows(chunk))
      .loss;
}

/// Per-unit mean loss over the whole set, evaluation mode.
double units_loss(ModelState& model, const TaskUnits& units, const FinetuneConfig& cfg) {
  const size_t n = units.size(cfg.task);
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  double sum = 0.0;
  for (const auto& [lo, hi] : batch_bounds(n, cfg.batch_size)) {
    Tape tape;
    const Var loss =
        task_batch_loss(tape, model, units, order, lo, hi, cfg, nullptr, false);
    const double v = scalar_of(tape, loss);
    // drug/icd batch losses are per-unit means, readmission's is a sum
    sum += cfg.task == TaskKind::readmission ? v : v * static_cast<double>(hi - lo);
  }
  return sum / static_cast<double>(n);
}

}  // namespace

TaskKind parse_task(const std::string& name) {
  if (name == "drug_rec") return TaskKind::drug_rec;
  if (name == "icd") return TaskKind::icd_coding;
  if (name == "readmission") return TaskKind::readmission;
  throw ConfigError("unknown task '" + name + "' (expected drug_rec, icd or readmission)");
}

const char* task_name(TaskKind task) {
  switch (task) {
    case TaskKind::drug_rec: return "drug_rec";
    case TaskKind::icd_coding: return "icd";
    case TaskKind::readmission: return "readmission";
  }
  throw ConfigError("unknown task");
}

PatientReps encode_patient(Tape& tape, ModelState& model,
                           const std::vector<const VisitRecord*>& visits, FusionMode mode,
                           Rng* dropout_rng, bool train) {
  const VisitBatch vb = make_visit_batch(visits, model.tokens, model.codes, model.cfg);
  const ModelForward fwd = forward_visit(tape, model, vb, mode, dropout_rng, train);
  PatientReps r;
  r.a_text_diag = fwd.reps.diag.a_text;
  r.a_text_med = fwd.reps.med.a_text;
  r.a_code_diag = fwd.reps.diag.a_code;
  r.a_code_med = fwd.reps.med.a_code;
  r.visits = static_cast<int>(visits.size());
  return r;
}

Tensor drug_targets(const PatientHistory& patient, const CodeVocab& codes) {
  const int t = static_cast<int>(patient.visits.size());
  if (t < 2) throw StructureError("drug recommendation needs at least two visits");
  Tensor out = Tensor::zeros({t - 1, codes.n_med});
  for (int v = 1; v < t; ++v)
    for (const std::string& code : patient.visits[static_cast<size_t>(v)].med_codes) {
      const int id = codes.vocab.lookup(code);
      if (codes.is_med(id)) out.at(v - 1, id - codes.med_begin()) = 1.0;
    }
  return out;
}

Var drug_rec_predict(Tape& tape, const PatientReps& reps, int current, Var w, Var b) {
  if (current < 1 || current >= reps.visits)
    throw StructureError("drug recommendation needs history before the predicted visit");
  std::vector<int> hist(static_cast<size_t>(current));
  std::iota(hist.begin(), hist.end(), 0);
  const Var feat = tape.concat_cols({tape.mean_rows(reps.a_text_diag, hist),
                                     tape.mean_rows(reps.a_text_med, hist),
                                     tape.mean_rows(reps.a_code_diag, hist),
                                     tape.mean_rows(reps.a_code_med, hist),
                                     tape.row(reps.a_code_diag, current)});
  return tape.sigmoid(tape.linear(feat, w, b));
}

Var drug_rec_patient_loss(Tape& tape, const PatientReps& reps, const Tensor& targets, Var w,
                          Var b) {
  if (reps.visits < 2)
    throw StructureError("drug recommendation needs at least two visits");
  if (targets.rank() != 2 || targets.dim(0) != reps.visits - 1)
    throw ShapeError("drug targets must cover exactly the visits after the first");
  std::vector<Var> rows;
  for (int cur = 1; cur < reps.visits; ++cur)
    rows.push_back(drug_rec_predict(tape, reps, cur, w, b));
  const Var probs = rows.size() == 1 ? rows[0] : tape.concat_rows(rows);
  return tape.bce(probs, targets, true);
}

TaskOutput icd_predict_and_loss(Tape& tape, Var a_text_med, Var a_code_med, Var w, Var b,
                                const Tensor& targets) {
  const Var probs =
      tape.sigmoid(tape.linear(tape.concat_cols({a_text_med, a_code_med}), w, b));
  const int batch = static_cast<int>(tape.value(probs).rows());
  const Var summed = tape.bce(probs, targets, false);
  return {probs, tape.scale(summed, 1.0 / batch)};
}

TaskOutput readmission_predict_and_loss(Tape& tape, Var a_text_diag, Var a_code_diag, Var w,
                                        Var b, const Tensor& labels) {
  const Var probs =
      tape.sigmoid(tape.linear(tape.concat_cols({a_text_diag, a_code_diag}), w, b));
  return {probs, tape.bce(probs, labels, false)};
}

MetricReport compute_metrics(const Tensor& scores, const Tensor& labels, MetricTask kind) {
  if (scores.empty() || labels.empty()) throw ShapeError("metrics need at least one example");
  MetricReport m;
  if (kind == MetricTask::binary) {
    if (scores.size() != labels.size())
      throw ShapeError("metrics: score/label count mismatch");
    const int64_t n = scores.size();
    std::vector<double> s(static_cast<size_t>(n));
    std::vector<int> y(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      s[static_cast<size_t>(i)] = scores[i];
      y[static_cast<size_t>(i)] = labels[i] != 0.0 ? 1 : 0;
    }
    m.auc = rank_auc(s, y);
    int64_t tp = 0, fp = 0, fn = 0, correct = 0;
    for (int64_t i = 0; i < n; ++i) {
      const int pred = scores[i] > 0.5 ? 1 : 0;
      const int truth = y[static_cast<size_t>(i)];
      if (pred == truth) ++correct;
      if (pred == 1 && truth == 1) ++tp;
      if (pred == 1 && truth == 0) ++fp;
      if (pred == 0 && truth == 1) ++fn;
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    const int64_t denom = 2 * tp + fp + fn;
    m.f1 = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    m.subset_accuracy = m.accuracy;
    return m;
  }

  if (scores.rank() != 2 || !scores.same_shape(labels))
    throw ShapeError("metrics: multilabel scores/labels must share a 2-D shape");
  const int n = scores.dim(0), width = scores.dim(1);
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
    auc_sum += rank_auc(col, coly);
    ++usable;
  }
  if (usable == 0)
    throw StructureError("AUC is undefined: no label has both classes present");
  m.auc = auc_sum / static_cast<double>(usable);

  double f1_sum = 0.0, jac_sum = 0.0;
  int exact = 0;
  for (int r = 0; r < n; ++r) {
    int inter = 0, predicted = 0, truth = 0;
    bool same = true;
    for (int j = 0; j < width; ++j) {
      const int p = scores.at(r, j) > 0.5 ? 1 : 0;
      const int t = labels.at(r, j) != 0.0 ? 1 : 0;
      inter += p & t;
      predicted += p;
      truth += t;
      if (p != t) same = false;
    }
    f1_sum += predicted + truth == 0
                  ? 1.0
                  : 2.0 * static_cast<double>(inter) / static_cast<double>(predicted + truth);
    const int uni = predicted + truth - inter;
    jac_sum += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    if (same) ++exact;
  }
  m.f1 = f1_sum / static_cast<double>(n);
  m.accuracy = jac_sum / static_cast<double>(n);
  m.subset_accuracy = static_cast<double>(exact) / static_cast<double>(n);
  return m;
}

MetricSummary summarize(const std::vector<MetricReport>& runs) {
  if (runs.empty()) throw ConfigError("no runs to summarize");
  MetricSummary s;
  s.runs = static_cast<int>(runs.size());
  const double n = static_cast<double>(runs.size());
  for (const MetricReport& r : runs) {
    s.mean.f1 += r.f1 / n;
    s.mean.accuracy += r.accuracy / n;
    s.mean.auc += r.auc / n;
    s.mean.subset_accuracy += r.subset_accuracy / n;
  }
  for (const MetricReport& r : runs) {
    s.stddev.f1 += (r.f1 - s.mean.f1) * (r.f1 - s.mean.f1) / n;
    s.stddev.accuracy += (r.accuracy - s.mean.accuracy) * (r.accuracy - s.mean.accuracy) / n;
    s.stddev.auc += (r.auc - s.mean.auc) * (r.auc - s.mean.auc) / n;
    s.stddev.subset_accuracy +=
        (r.subset_accuracy - s.mean.subset_accuracy) * (r.subset_accuracy - s.mean.subset_accuracy) / n;
  }
  s.stddev.f1 = std::sqrt(s.stddev.f1);
  s.stddev.accuracy = std::sqrt(s.stddev.accuracy);
  s.stddev.auc = std::sqrt(s.stddev.auc);
  s.stddev.subset_accuracy = std::sqrt(s.stddev.subset_accuracy);
  return s;
}

std::string metrics_json(const std::string& task, uint64_t seed, const MetricReport& m) {
  nlohmann::json j;
  j["task"] = task;
  j["seed"] = seed;
  j["f1"] = m.f1;
  j["accuracy"] = m.accuracy;
  j["auc"] = m.auc;
  return j.dump();
}

std::string mean_std(double mean, double sd) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f (%.4f)", mean, sd);
  return buf;
}

void FinetuneConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (patience < 0) throw ConfigError("patience must be non-negative");
  if (lr < 0.0 || !std::isfinite(lr)) throw ConfigError("learning rate must be non-negative");
}

double FinetuneConfig::effective_lr() const {
  if (lr > 0.0) return lr;
  switch (task) {
    case TaskKind::drug_rec: return 5e-5;
    case TaskKind::icd_coding: return 1e-5;
    case TaskKind::readmission: return 2e-5;
  }
  return 5e-5;
}

size_t TaskUnits::size(TaskKind task) const {
  return task == TaskKind::drug_rec ? patients.size() : visits.size();
}

TaskUnits task_units(const Cohort& cohort, TaskKind task) {
  TaskUnits u;
  for (const PatientHistory& p : cohort.patients) {
    if (task == TaskKind::drug_rec) {
      if (p.visits.size() >= 2) u.patients.push_back(&p);
      continue;
    }
    for (const VisitRecord& v : p.visits) {
      if (task == TaskKind::icd_coding && v.icd_labels && !v.icd_labels->empty())
        u.visits.push_back(&v);
      if (task == TaskKind::readmission && v.readmit_label) u.visits.push_back(&v);
    }
  }
  return u;
}

double finetune_eval_loss(ModelState& model, const TaskUnits& units,
                          const FinetuneConfig& cfg) {
  cfg.validate();
  if (units.size(cfg.task) == 0)
    throw ConfigError(std::string("no eligible examples for ") + task_name(cfg.task));
  return units_loss(model, units, cfg);
}

FinetuneResult finetune_units(ModelState& model, const TaskUnits& train, const TaskUnits& eval,
                              const FinetuneConfig& cfg) {
  cfg.validate();
  const size_t n_train = train.size(cfg.task);
  if (n_train == 0)
    throw ConfigError(std::string("no eligible training examples for ") + task_name(cfg.task));
  if (eval.size(cfg.task) == 0)
    throw ConfigError(std::string("no eligible eval examples for ") + task_name(cfg.task));

  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  AdamState opt = make_adam(model.params, cfg.effective_lr());

  FinetuneResult res;
  res.best_eval = std::numeric_limits<double>::infinity();
  ParamStore best;
  int bad_epochs = 0;

  std::vector<size_t> order(n_train);
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double sum = 0.0;
    for (const auto& [lo, hi] : batch_bounds(n_train, cfg.batch_size)) {
      Tape tape;
      const Var loss =
          task_batch_loss(tape, model, train, order, lo, hi, cfg, &dropout_rng, true);
      const double v = scalar_of(tape, loss);
      if (!std::isfinite(v)) throw NumericError("fine-tune loss is not finite; step aborted");
      tape.backward(loss);
      check_grads_finite(model.params);
      adam_step(model.params, opt);
      sum += cfg.task == TaskKind::readmission ? v : v * static_cast<double>(hi - lo);
    }
    res.train_loss.push_back(sum / static_cast<double>(n_train));
    const double ev = units_loss(model, eval, cfg);
    res.eval_loss.push_back(ev);

    if (ev < res.best_eval) {
      res.best_eval = ev;
      res.best_epoch = epoch;
      best = model.params.clone();
      bad_epochs = 0;
    } else {
      ++bad_epochs;
      if (bad_epochs > cfg.patience) break;
    }
  }

  if (best.size() > 0) copy_values(model.params, best);
  return res;
}

FinetuneResult finetune_task(ModelState& model, const Cohort& train, const Cohort& eval,
                             const FinetuneConfig& cfg) {
  return finetune_units(model, task_units(train, cfg.task), task_units(eval, cfg.task), cfg);
}

MetricReport evaluate_units(ModelState& model, const TaskUnits& units, TaskKind task,
                            FusionMode mode) {
  const int chunk_size = 16;
  if (task == TaskKind::drug_rec) {
    if (units.patients.empty())
      throw ConfigError("no eligible examples for drug_rec");
    std::vector<Tensor> prob_rows, target_rows;
    for (const PatientHistory* p : units.patients) {
      Tape tape;
      const PatientReps reps = encode_patient(tape, model, visit_ptrs(*p), mode);
      const Var w = tape.leaf(model.params.get("task.drug.w"));
      const Var b = tape.leaf(model.params.get("task.drug.b"));
      const Tensor targets = drug_targets(*p, model.codes);
      for (int cur = 1; cur < reps.visits; ++cur) {
        const Var probs = drug_rec_predict(tape, reps, cur, w, b);
        prob_rows.push_back(tape.value(probs).clone());
        Tensor row({1, targets.dim(1)});
        for (int j = 0; j < targets.dim(1); ++j) row.at(0, j) = targets.at(cur - 1, j);
        target_rows.push_back(row);
      }
    }
    const int n = static_cast<int>(prob_rows.size());
    const int width = prob_rows[0].cols();
    Tensor scores({n, width}), labels({n, width});
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < width; ++j) {
        scores.at(r, j) = prob_rows[static_cast<size_t>(r)].at(0, j);
        labels.at(r, j) = target_rows[static_cast<size_t>(r)].at(0, j);
      }
    return compute_metrics(scores, labels, MetricTask::multilabel);
  }

  if (units.visits.empty())
    throw ConfigError(std::string("no eligible examples for ") + task_name(task));
  std::vector<double> flat_scores, flat_labels;
  const size_t n = units.visits.size();
  int width = 0;
  for (const auto& [lo, hi] : batch_bounds(n, chunk_size)) {
    const std::vector<const VisitRecord*> chunk(units.visits.begin() + static_cast<long>(lo),
                                                units.visits.begin() + static_cast<long>(hi));
    Tape tape;
    if (task == TaskKind::icd_coding) {
      const VisitBatch vb = icd_input_batch(chunk, model);
      const ModelForward fwd = forward_visit(tape, model, vb, mode);
      const Tensor targets = icd_target_rows(chunk, model.codes);
      const TaskOutput out = icd_predict_and_loss(
          tape, fwd.reps.med.a_text, fwd.reps.med.a_code,
          tape.leaf(model.params.get("task.icd.w")), tape.leaf(model.params.get("task.icd.b")),
          targets);
      const Tensor& probs = tape.value(out.probs);
      width = probs.cols();
      for (int64_t i = 0; i < probs.size(); ++i) {
        flat_scores.push_back(probs[i]);
        flat_labels.push_back(targets[i]);
      }
    } else {
      const VisitBatch vb = make_visit_batch(chunk, model.tokens, model.codes, model.cfg);
      const ModelForward fwd = forward_visit(tape, model, vb, mode);
      const Tensor labels = readmit_label_rows(chunk);
      const TaskOutput out = readmission_predict_and_loss(
          tape, fwd.reps.diag.a_text, fwd.reps.diag.a_code,
          tape.leaf(model.params.get("task.readmit.w")),
          tape.leaf(model.params.get("task.readmit.b")), labels);
      const Tensor& probs = tape.value(out.probs);
      width = 1;
      for (int64_t i = 0; i < probs.size(); ++i) {
        flat_scores.push_back(probs[i]);
        flat_labels.push_back(labels[i]);
      }
    }
  }
  const int rows = static_cast<int>(flat_scores.size()) / std::max(width, 1);
  const Tensor scores = Tensor::from({rows, width}, std::move(flat_scores));
  const Tensor labels = Tensor::from({rows, width}, std::move(flat_labels));
  return compute_metrics(scores, labels,
                         task == TaskKind::icd_coding ? MetricTask::multilabel
                                                      : MetricTask::binary);
}

MetricReport evaluate_task(ModelState& model, const Cohort& cohort, TaskKind task,
                           FusionMode mode) {
  return evaluate_units(model, task_units(cohort, task), task, mode);
}

std::vector<size_t> subsample_indices(size_t n, double ratio, uint64_t seed) {
  if (!(ratio > 0.0) || ratio > 1.0)
    throw ConfigError("training ratio must lie in (0, 1]");
  if (n == 0) throw ConfigError("no examples to subsample");
  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), size_t{0});
  Rng rng(derive_seed(seed, "subsample"));
  rng.shuffle(perm);
  size_t keep = static_cast<size_t>(std::llround(ratio * static_cast<double>(n)));
  keep = std::min(keep, n);
  if (keep < 2) throw ConfigError("training ratio keeps fewer than two examples");
  perm.resize(keep);
  std::sort(perm.begin(), perm.end());
  return perm;
}

std::vector<SweepPoint> ratio_sweep(const ModelState& pretrained, const Cohort& train,
                                    const Cohort& eval, const Cohort& test, TaskKind task,
                                    const std::vector<double>& ratios,
                                    const std::vector<uint64_t>& seeds,
                                    const FinetuneConfig& base) {
  if (ratios.empty() || seeds.empty())
    throw ConfigError("ratio sweep needs at least one ratio and one seed");
  const TaskUnits train_units = task_units(train, task);
  const TaskUnits eval_units = task_units(eval, task);
  const TaskUnits test_units = task_units(test, task);

  std::vector<SweepPoint> out;
  for (const uint64_t seed : seeds)
    for (const double ratio : ratios) {
      const std::vector<size_t> keep =
          subsample_indices(train_units.size(task), ratio, seed);
      TaskUnits sub;
      for (const size_t i : keep) {
        if (task == TaskKind::drug_rec)
          sub.patients.push_back(train_units.patients[i]);
        else
          sub.visits.push_back(train_units.visits[i]);
      }
      ModelState model = clone_model(pretrained);
      FinetuneConfig cfg = base;
      cfg.task = task;
      cfg.seed = seed;
      finetune_units(model, sub, eval_units, cfg);
      out.push_back({task, ratio, seed, evaluate_units(model, test_units, task, cfg.mode)});
    }
  return out;
}

std::string sweep_csv(const std::vector<SweepPoint>& points) {
  std::ostringstream os;
  os << "task,ratio,seed,auc,f1,accuracy\n";
  char buf[160];
  for (const SweepPoint& p : points) {
    std::snprintf(buf, sizeof(buf), "%s,%g,%llu,%.6f,%.6f,%.6f\n", task_name(p.task), p.ratio,
                  static_cast<unsigned long long>(p.seed), p.metrics.auc, p.metrics.f1,
                  p.metrics.accuracy);
    os << buf;
  }
  return os.str();
}

}  // namespace ummx
