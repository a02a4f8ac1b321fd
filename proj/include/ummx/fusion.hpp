#pragma once

#include <string>
#include <vector>

#include "ummx/autograd.hpp"
#include "ummx/encoders.hpp"
#include "ummx/tensor.hpp"

namespace ummx {

enum class FusionMode { cross, ablation };
FusionMode parse_fusion_mode(const std::string& mode);

/// Key/value maps bridging the other modality's width into the query width.
struct CrossProjVars {
  Var wk, wv;
};

/// Projections for both query directions; code streams share them.
struct FusionVars {
  CrossProjVars text_query;  // text [CLS] over code tokens
  CrossProjVars code_query;  // code [CLS] over text tokens
};

struct CrossAttendResult {
  Var out;         // context + query, [B, H_q]
  Var context;     // attended values, [B, H_q]
  Tensor weights;  // [B, S] softmax weights, zero at masked positions
};

/// Scaled dot-product attention of a [CLS] query over the other modality's
/// tokens, projected into the query width when proj is given, plus the
/// residual query. A fully masked row raises StructureError.
CrossAttendResult cross_modal_attend(Tape& tape, Var query_cls, Var other_tokens,
                                     const Tensor& other_mask, const CrossProjVars* proj);

struct StreamFusion {
  Var a_text;           // text [CLS] augmented by this code stream
  Var a_code;           // this code stream's [CLS] augmented by text
  Tensor text_weights;  // text-over-code attention, [B, S_code]
  Tensor code_weights;  // code-over-text attention, [B, S_text]
};

struct AugmentedReps {
  StreamFusion diag;
  StreamFusion med;
  bool has_med = false;
};

/// Cross mode augments each present code stream against the text tower and
/// keeps the streams distinct; ablation mode passes the raw [CLS] rows
/// through untouched.
AugmentedReps fuse_visit(Tape& tape, const EncodedVisit& text, const Tensor& text_mask,
                         const EncodedVisit& diag, const Tensor& diag_mask,
                         const EncodedVisit* med, const Tensor* med_mask,
                         const FusionVars& vars, FusionMode mode);

/// Heat-map export of one visit's attention row over the source tokens.
std::string attention_export_json(const std::string& visit_id, const std::string& direction,
                                  const std::vector<std::string>& source_tokens,
                                  const std::vector<double>& weights);

}  // namespace ummx
