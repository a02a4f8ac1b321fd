#pragma once

#include <cstdint>
#include <vector>

#include "ummx/autograd.hpp"
#include "ummx/model.hpp"

namespace ummx {

enum class MaskAction { masked, kept, random };

struct MaskedPosition {
  int row = 0;
  int col = 0;
  CodeStream stream = CodeStream::diag;
  int label = 0;  // the original id at this position
  MaskAction action = MaskAction::masked;
};

/// One corruption of a visit batch's code sequences. Both streams are
/// masked in a single pass over each row's code tokens; [CLS]/[PAD] and the
/// other specials are never candidates, and every row holding at least one
/// real code receives at least one mask (forced when the draw picks none).
struct MaskedCodeBatch {
  std::vector<int> diag_ids;  // post-mask ids, layout of the source batch
  std::vector<int> med_ids;
  std::vector<MaskedPosition> positions;
  int rows = 0;
  int skipped_rows = 0;  // rows with no maskable code token
};

MaskedCodeBatch apply_mask(const VisitBatch& batch, double rate, Rng& rng,
                           const CodeVocab& codes);

/// Copy of the batch with the corrupted code ids swapped in (text untouched).
VisitBatch masked_visit_batch(const VisitBatch& batch, const MaskedCodeBatch& masked);

/// Mean cross-entropy over all masked positions; logits come from the fused
/// text representation through the head. Zero positions -> StructureError.
Var t2c_loss(Tape& tape, Var a_text, const MaskedCodeBatch& masked, Var head_w, Var head_b);

/// As t2c_loss, each masked position conditioned on its own stream's fused
/// code representation.
Var c2c_loss(Tape& tape, Var a_code_diag, Var a_code_med, const MaskedCodeBatch& masked,
             Var head_w, Var head_b);

struct ContrastiveConfig {
  double tau = 0.07;
  double alpha = 0.4;
  double momentum = 0.995;

  void validate() const;
};

/// Momentum copy of the full model plus the mixing hyperparameters.
struct ContrastiveState {
  ContrastiveConfig cfg;
  ModelState model;
};

ContrastiveState make_contrastive(const ModelState& model, const ContrastiveConfig& cfg);

/// theta_m = momentum * theta_m + (1 - momentum) * theta, every group.
void update_momentum(ContrastiveState& state, const ModelState& model);

/// In-batch similarity loss: predictions are temperature softmaxes over
/// MLP1(a_text) . MLP2(a_code) in both directions, targets mix the hard
/// diagonal pairing with the momentum model's soft similarities by alpha.
/// Fewer than two visits -> StructureError.
Var contrastive_loss(Tape& tape, ModelState& model, ContrastiveState& state,
                     const VisitBatch& batch, Var a_text, Var a_code,
                     FusionMode mode = FusionMode::cross);

struct PretrainConfig {
  double mask_rate = 0.15;
  int epochs = 30;
  int batch_size = 8;
  double lr = 5e-4;
  int patience = 3;
  double t2c_weight = 1.0;
  double c2c_weight = 1.0;
  bool contrastive = false;
  ContrastiveConfig cl;
  double cl_weight = 1.0;
  bool independent_corruption = false;  // separate mask draws for the two objectives
  FusionMode mode = FusionMode::cross;
  uint64_t seed = 0;

  void validate() const;
};

struct StepLosses {
  double total = 0.0;
  double t2c = 0.0;
  double c2c = 0.0;
  double contrastive = 0.0;
};

/// One optimizer step on one batch: corrupt, forward, the two masked-code
/// losses (plus the weighted contrastive term when enabled), backward,
/// Adam, momentum update. A non-finite loss or gradient raises NumericError
/// with parameters and optimizer untouched.
StepLosses pretrain_step(ModelState& model, const VisitBatch& batch, AdamState& opt,
                         const PretrainConfig& cfg, Rng& mask_rng, Rng& dropout_rng,
                         ContrastiveState* cl = nullptr);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double t2c = 0.0;
  double c2c = 0.0;
  double contrastive = 0.0;
};

struct PretrainResult {
  std::vector<EpochStats> history;
  double best_eval = 0.0;
  int best_epoch = -1;
};

/// Masked-code loss over a visit list without touching any state: fixed
/// eval-mask stream, dropout off, contrastive term excluded.
double pretrain_eval_loss(ModelState& model, const std::vector<const VisitRecord*>& visits,
                          const PretrainConfig& cfg);

struct PretrainEvalParts {
  double t2c = 0.0;
  double c2c = 0.0;
};

/// The two masked-code eval losses separately (unweighted, visit-weighted
/// means), same masking stream as pretrain_eval_loss.
PretrainEvalParts pretrain_eval_parts(ModelState& model,
                                      const std::vector<const VisitRecord*>& visits,
                                      const PretrainConfig& cfg);

/// Epoch-shuffled mini-batch training, early stopping once the eval loss
/// fails to improve for more than `patience` consecutive epochs. The model
/// is left holding the best-eval parameters. Per-purpose rng streams
/// (masking, shuffling, dropout) derive from cfg.seed.
PretrainResult pretrain_loop(ModelState& model, const std::vector<const VisitRecord*>& train,
                             const std::vector<const VisitRecord*>& eval_set,
                             const PretrainConfig& cfg, ContrastiveState* cl = nullptr,
                             AdamState* opt_out = nullptr);

}  // namespace ummx
