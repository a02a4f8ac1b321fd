#pragma once

#include <string>
#include <vector>

#include "ummx/autograd.hpp"
#include "ummx/optim.hpp"
#include "ummx/rng.hpp"
#include "ummx/tensor.hpp"
#include "ummx/vocab.hpp"

namespace ummx {

struct EncoderConfig {
  int n_layers = 2;
  int hidden = 32;
  int heads = 2;
  int ffn = 64;
  double dropout = 0.0;
  int max_len = 32;
  int freeze_prefix = 0;  // layers 1..p frozen; embeddings frozen iff p > 0
  bool pre_norm = false;
  double ln_eps = 1e-12;

  void validate() const;
};

/// Rectangular batch of id sequences. Position 0 must hold [CLS] with an
/// active mask bit; builders enforce this via check().
struct SequenceBatch {
  int batch = 0;
  int len = 0;
  std::vector<int> ids;       // batch * len
  std::vector<int> segments;  // batch * len, all zero unless multi-segment text
  Tensor mask;                // [batch, len], 1 = real token
  std::string modality;

  int id(int b, int j) const { return ids[static_cast<size_t>(b) * len + j]; }
  int segment(int b, int j) const { return segments[static_cast<size_t>(b) * len + j]; }
  void check(int cls_id) const;
};

struct EncoderLayerVars {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ln1_g, ln1_b;
  Var fw1, fb1, fw2, fb2;
  Var ln2_g, ln2_b;
};

struct EncoderVars {
  std::vector<EncoderLayerVars> layers;
};

struct EncodedVisit {
  Var z;    // [B, S, H]
  Var cls;  // [B, H], row 0 of every sequence
  std::vector<Tensor> attn;  // per layer [B, heads, S, S] when captured
};

/// Register transformer block parameters under `prefix.l<i>.*`. Layers below
/// freeze_prefix are registered non-trainable.
void register_encoder(ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg,
                      Rng& rng);
EncoderVars bind_encoder(Tape& tape, ParamStore& ps, const std::string& prefix,
                         const EncoderConfig& cfg);

/// Register token/segment/position tables under `prefix.emb.*`, frozen when
/// the config freezes the embedding layer.
void register_text_embeddings(ParamStore& ps, const std::string& prefix, int vocab_size,
                              int n_segments, const EncoderConfig& cfg, Rng& rng);

/// Token + segment + position sum, [B, S, H].
Var embed_text(Tape& tape, const SequenceBatch& batch, Var tok_table, Var seg_table,
               Var pos_table, int max_len);

/// Pure table lookup, no positions: specials resolve to the leading table
/// rows, codes to ontology-derived rows. [B, S, H].
Var embed_codes(Tape& tape, const SequenceBatch& batch, Var code_table);

/// Multilayer transformer over an embedded batch. Post-norm blocks by
/// default, pre-norm when configured; n_layers = 0 passes the input through.
EncodedVisit encode(Tape& tape, Var x, const Tensor& mask, const EncoderConfig& cfg,
                    const EncoderVars& vars, Rng* rng = nullptr, bool train = false,
                    bool capture_attn = false);

}  // namespace ummx
