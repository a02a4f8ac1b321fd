#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ummx/data.hpp"
#include "ummx/encoders.hpp"
#include "ummx/fusion.hpp"
#include "ummx/ontology.hpp"
#include "ummx/optim.hpp"
#include "ummx/vocab.hpp"

namespace ummx {

/// Widths and structural switches for the whole model. The code-encoder
/// width is always ont_heads * d_ont: the ontology stages emit exactly the
/// code encoder's hidden size.
struct ModelConfig {
  int d_ont = 16;
  int ont_heads = 2;
  double gat_slope = 0.2;
  EncoderConfig text;  // hidden = d_w
  EncoderConfig code;  // hidden = d_c, applied to both code streams
  int n_segments = 2;
  std::string ontology_scheme = "prefix-grouping";
  int ontology_branching = 4;
  bool per_stream_code_encoder = false;
  bool share_mask_heads = false;  // requires equal tower widths
  int d_contrast = 32;

  void validate() const;
  /// Digest of every field; stored in checkpoints.
  uint64_t digest() const;

  static ModelConfig desk();
  static ModelConfig paper();
};

/// Every learnable tensor of the model, plus the immutable structures
/// (vocabularies, ontology trees) the forward pass needs. The two code
/// streams share one encoder unless configured per-stream; everything else
/// is registered exactly once.
struct ModelState {
  ModelConfig cfg;
  TokenVocab tokens;
  CodeVocab codes;
  OntologyTree diag_tree;
  OntologyTree med_tree;
  ParamStore params;
  uint64_t seed = 0;
};

ModelState build_model(const ModelConfig& cfg, const TokenVocab& tokens, const CodeVocab& codes,
                       const OntologyTree& diag_tree, const OntologyTree& med_tree,
                       uint64_t seed);
/// Convenience overload: builds both ontology trees from the code vocab.
ModelState build_model(const ModelConfig& cfg, const TokenVocab& tokens, const CodeVocab& codes,
                       uint64_t seed);

/// Deep copy; parameter values duplicated, gradients zeroed.
ModelState clone_model(const ModelState& model);

/// Rectangular id batches for one list of visits, all three sequences
/// [CLS]-prefixed, padded to the longest row and capped at the configured
/// lengths. Unknown strings map to [UNK].
struct VisitBatch {
  SequenceBatch text;
  SequenceBatch diag;
  SequenceBatch med;
};

VisitBatch make_visit_batch(const std::vector<const VisitRecord*>& visits,
                            const TokenVocab& tokens, const CodeVocab& codes,
                            const ModelConfig& cfg);

struct ModelForward {
  EncodedVisit text;
  EncodedVisit diag;
  EncodedVisit med;
  AugmentedReps reps;
};

/// Full pipeline: ontology table, per-modality embedding and encoding,
/// then cross-modal fusion. Deterministic in (params, batch, mode) when
/// train is false.
ModelForward forward_visit(Tape& tape, ModelState& model, const VisitBatch& batch,
                           FusionMode mode, Rng* dropout_rng = nullptr, bool train = false,
                           bool capture_attn = false);

struct CheckpointExtras {
  bool has_optimizer = false;
  bool has_momentum = false;
};

/// Versioned binary container: header (format version, config digest, vocab
/// digests), named parameter tensors, optional Adam state and momentum
/// parameter copy, and a trailing content digest.
void save_checkpoint(const ModelState& model, const std::string& path,
                     const AdamState* opt = nullptr, const ParamStore* momentum = nullptr);

/// Loads values into an already-built model. Digest mismatch raises
/// CorruptionError (content) or ConfigError (wrong config or vocabularies);
/// an unknown format version raises VersionError.
CheckpointExtras load_checkpoint(ModelState& model, const std::string& path,
                                 AdamState* opt = nullptr, ParamStore* momentum = nullptr);

}  // namespace ummx
