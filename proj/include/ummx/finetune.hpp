#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ummx/autograd.hpp"
#include "ummx/data.hpp"
#include "ummx/model.hpp"

namespace ummx {

enum class TaskKind { drug_rec, icd_coding, readmission };
TaskKind parse_task(const std::string& name);
const char* task_name(TaskKind task);

/// Fused per-visit rows for one patient, in visit order.
struct PatientReps {
  Var a_text_diag;  // [T, d_w]
  Var a_text_med;   // [T, d_w]
  Var a_code_diag;  // [T, d_c]
  Var a_code_med;   // [T, d_c]
  int visits = 0;
};

PatientReps encode_patient(Tape& tape, ModelState& model,
                           const std::vector<const VisitRecord*>& visits, FusionMode mode,
                           Rng* dropout_rng = nullptr, bool train = false);

/// Multi-hot medication targets for visits 2..T, [T-1, n_med]. Codes absent
/// from the vocabulary are skipped.
Tensor drug_targets(const PatientHistory& patient, const CodeVocab& codes);

/// Next-visit medication probabilities, [1, n_med]. Features: historical
/// means of both text pairings and both code streams plus the current
/// visit's diagnosis rep. `current` is the 0-based visit index; an index
/// without history raises StructureError.
Var drug_rec_predict(Tape& tape, const PatientReps& reps, int current, Var w, Var b);

/// Mean over prediction steps of the element-mean BCE; needs >= 2 visits.
Var drug_rec_patient_loss(Tape& tape, const PatientReps& reps, const Tensor& targets, Var w,
                          Var b);

struct TaskOutput {
  Var probs;
  Var loss;
};

/// Diagnosis-code probabilities from the medication-paired reps; loss is
/// the per-visit label-summed BCE, averaged over the batch.
TaskOutput icd_predict_and_loss(Tape& tape, Var a_text_med, Var a_code_med, Var w, Var b,
                                const Tensor& targets);

/// Readmission probability from the diagnosis-paired reps; loss is the BCE
/// summed over the batch examples.
TaskOutput readmission_predict_and_loss(Tape& tape, Var a_text_diag, Var a_code_diag, Var w,
                                        Var b, const Tensor& labels);

enum class MetricTask { binary, multilabel };

struct MetricReport {
  double f1 = 0.0;
  double accuracy = 0.0;  // example Jaccard for multilabel, plain accuracy for binary
  double auc = 0.0;
  double subset_accuracy = 0.0;  // multilabel exact-match share
};

/// Binary: ROC-AUC with midrank ties, accuracy and positive-class F1 at
/// threshold 0.5. Multilabel: macro-AUC over labels with both classes,
/// example-based F1 and Jaccard. A label set without both classes for any
/// usable AUC raises StructureError.
MetricReport compute_metrics(const Tensor& scores, const Tensor& labels, MetricTask kind);

struct MetricSummary {
  MetricReport mean;
  MetricReport stddev;
  int runs = 0;
};

MetricSummary summarize(const std::vector<MetricReport>& runs);
std::string metrics_json(const std::string& task, uint64_t seed, const MetricReport& m);
/// "0.9123 (0.0045)"
std::string mean_std(double mean, double sd);

struct FinetuneConfig {
  TaskKind task = TaskKind::drug_rec;
  int epochs = 20;
  int batch_size = 8;  // patients for drug recommendation, visits otherwise
  double lr = 0.0;     // 0 selects the per-task default
  int patience = 3;
  uint64_t seed = 0;
  FusionMode mode = FusionMode::cross;

  void validate() const;
  double effective_lr() const;
};

/// Units a task trains on: whole patients for drug recommendation, labeled
/// visits otherwise.
struct TaskUnits {
  std::vector<const PatientHistory*> patients;
  std::vector<const VisitRecord*> visits;
  size_t size(TaskKind task) const;
};

TaskUnits task_units(const Cohort& cohort, TaskKind task);

struct FinetuneResult {
  std::vector<double> train_loss;
  std::vector<double> eval_loss;
  double best_eval = 0.0;
  int best_epoch = -1;
};

/// Per-unit mean task loss over the whole set, evaluation mode.
double finetune_eval_loss(ModelState& model, const TaskUnits& units, const FinetuneConfig& cfg);

/// Mini-batch fine-tuning of the whole model under one task head, early
/// stopping on the eval loss; the model keeps the best-epoch parameters.
FinetuneResult finetune_units(ModelState& model, const TaskUnits& train, const TaskUnits& eval,
                              const FinetuneConfig& cfg);
FinetuneResult finetune_task(ModelState& model, const Cohort& train, const Cohort& eval,
                             const FinetuneConfig& cfg);

MetricReport evaluate_units(ModelState& model, const TaskUnits& units, TaskKind task,
                            FusionMode mode);
MetricReport evaluate_task(ModelState& model, const Cohort& cohort, TaskKind task,
                           FusionMode mode);

/// Deterministic nested subsample: ascending indices, the lower-ratio set
/// always a subset of the higher-ratio set for the same seed. Fewer than
/// two selected examples raises ConfigError.
std::vector<size_t> subsample_indices(size_t n, double ratio, uint64_t seed);

struct SweepPoint {
  TaskKind task = TaskKind::drug_rec;
  double ratio = 1.0;
  uint64_t seed = 0;
  MetricReport metrics;
};

/// Fine-tunes a fresh copy of the pre-trained model per (ratio, seed) on a
/// nested subsample of the training units and scores it on the test split.
std::vector<SweepPoint> ratio_sweep(const ModelState& pretrained, const Cohort& train,
                                    const Cohort& eval, const Cohort& test, TaskKind task,
                                    const std::vector<double>& ratios,
                                    const std::vector<uint64_t>& seeds,
                                    const FinetuneConfig& base);
std::string sweep_csv(const std::vector<SweepPoint>& points);

}  // namespace ummx
