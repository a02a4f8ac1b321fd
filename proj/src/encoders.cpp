#include "ummx/encoders.hpp"

#include <cmath>

#include "ummx/error.hpp"

namespace ummx {

namespace {

Tensor xavier(int rows, int cols, Rng& rng) {
  Tensor t({rows, cols});
  const double a = std::sqrt(6.0 / (rows + cols));
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-a, a);
  return t;
}

Tensor table_init(int rows, int cols, Rng& rng) {
  Tensor t({rows, cols});
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal() * 0.02;
  return t;
}

Var bound_leaf(Tape& tape, ParamStore& ps, const std::string& name) {
  ParamGroup* g = ps.find(name);
  if (!g) throw ConfigError("encoder: missing parameter group " + name);
  return tape.leaf(*g);
}

}  // namespace

void EncoderConfig::validate() const {
  if (n_layers < 0) throw ConfigError("encoder: n_layers must be >= 0");
  if (hidden < 1 || heads < 1 || ffn < 1) throw ConfigError("encoder: widths must be positive");
  if (hidden % heads != 0) throw ConfigError("encoder: heads must divide hidden width");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must be in [0,1)");
  if (max_len < 1) throw ConfigError("encoder: max_len must be positive");
  if (freeze_prefix < 0 || freeze_prefix > n_layers)
    throw ConfigError("encoder: freeze_prefix must lie in [0, n_layers]");
}

void SequenceBatch::check(int cls_id) const {
  if (batch < 1 || len < 1) throw ShapeError("sequence batch: empty");
  if (static_cast<int64_t>(ids.size()) != static_cast<int64_t>(batch) * len ||
      ids.size() != segments.size())
    throw ShapeError("sequence batch: ids/segments must be batch*len");
  if (mask.rank() != 2 || mask.dim(0) != batch || mask.dim(1) != len)
    throw ShapeError("sequence batch: mask must be [batch, len]");
  for (int b = 0; b < batch; ++b) {
    if (id(b, 0) != cls_id) throw StructureError("sequence batch: position 0 must be [CLS]");
    if (mask.at(b, 0) <= 0.0) throw StructureError("sequence batch: [CLS] must be unmasked");
  }
}

void register_encoder(ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg,
                      Rng& rng) {
  cfg.validate();
  const int h = cfg.hidden;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const bool trainable = l >= cfg.freeze_prefix;
    const std::string p = prefix + ".l" + std::to_string(l) + ".";
    auto mat = [&](const std::string& n, int r, int c) { ps.add(p + n, xavier(r, c, rng), trainable); };
    auto vec = [&](const std::string& n, int c, double v) {
      ps.add(p + n, Tensor::full({c}, v), trainable);
    };
    mat("wq", h, h);
    vec("bq", h, 0.0);
    mat("wk", h, h);
    vec("bk", h, 0.0);
    mat("wv", h, h);
    vec("bv", h, 0.0);
    mat("wo", h, h);
    vec("bo", h, 0.0);
    vec("ln1.g", h, 1.0);
    vec("ln1.b", h, 0.0);
    mat("ffn.w1", h, cfg.ffn);
    vec("ffn.b1", cfg.ffn, 0.0);
    mat("ffn.w2", cfg.ffn, h);
    vec("ffn.b2", h, 0.0);
    vec("ln2.g", h, 1.0);
    vec("ln2.b", h, 0.0);
  }
}

EncoderVars bind_encoder(Tape& tape, ParamStore& ps, const std::string& prefix,
                         const EncoderConfig& cfg) {
  EncoderVars v;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = prefix + ".l" + std::to_string(l) + ".";
    EncoderLayerVars lv;
    lv.wq = bound_leaf(tape, ps, p + "wq");
    lv.bq = bound_leaf(tape, ps, p + "bq");
    lv.wk = bound_leaf(tape, ps, p + "wk");
    lv.bk = bound_leaf(tape, ps, p + "bk");
    lv.wv = bound_leaf(tape, ps, p + "wv");
    lv.bv = bound_leaf(tape, ps, p + "bv");
    lv.wo = bound_leaf(tape, ps, p + "wo");
    lv.bo = bound_leaf(tape, ps, p + "bo");
    lv.ln1_g = bound_leaf(tape, ps, p + "ln1.g");
    lv.ln1_b = bound_leaf(tape, ps, p + "ln1.b");
    lv.fw1 = bound_leaf(tape, ps, p + "ffn.w1");
    lv.fb1 = bound_leaf(tape, ps, p + "ffn.b1");
    lv.fw2 = bound_leaf(tape, ps, p + "ffn.w2");
    lv.fb2 = bound_leaf(tape, ps, p + "ffn.b2");
    lv.ln2_g = bound_leaf(tape, ps, p + "ln2.g");
    lv.ln2_b = bound_leaf(tape, ps, p + "ln2.b");
    v.layers.push_back(lv);
  }
  return v;
}

void register_text_embeddings(ParamStore& ps, const std::string& prefix, int vocab_size,
                              int n_segments, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  if (vocab_size < 1 || n_segments < 1)
    throw ConfigError("encoder: embedding table sizes must be positive");
  const bool trainable = cfg.freeze_prefix == 0;
  ps.add(prefix + ".emb.tok", table_init(vocab_size, cfg.hidden, rng), trainable);
  ps.add(prefix + ".emb.seg", table_init(n_segments, cfg.hidden, rng), trainable);
  ps.add(prefix + ".emb.pos", table_init(cfg.max_len, cfg.hidden, rng), trainable);
}

Var embed_text(Tape& tape, const SequenceBatch& batch, Var tok_table, Var seg_table,
               Var pos_table, int max_len) {
  if (batch.len > max_len) throw ConfigError("embed_text: sequence exceeds max_len");
  const Tensor& tt = tape.value(tok_table);
  const int h = tt.cols();
  std::vector<int> positions(batch.ids.size());
  for (int b = 0; b < batch.batch; ++b)
    for (int j = 0; j < batch.len; ++j) positions[static_cast<size_t>(b) * batch.len + j] = j;
  const Var tok = tape.gather_rows(tok_table, batch.ids);
  const Var seg = tape.gather_rows(seg_table, batch.segments);
  const Var pos = tape.gather_rows(pos_table, positions);
  const Var sum = tape.add(tape.add(tok, seg), pos);
  return tape.reshape(sum, {batch.batch, batch.len, h});
}

Var embed_codes(Tape& tape, const SequenceBatch& batch, Var code_table) {
  const int h = tape.value(code_table).cols();
  const Var rows = tape.gather_rows(code_table, batch.ids);
  return tape.reshape(rows, {batch.batch, batch.len, h});
}

EncodedVisit encode(Tape& tape, Var x, const Tensor& mask, const EncoderConfig& cfg,
                    const EncoderVars& vars, Rng* rng, bool train, bool capture_attn) {
  cfg.validate();
  const Tensor& tx = tape.value(x);
  if (tx.rank() != 3 || tx.dim(2) != cfg.hidden)
    throw ShapeError("encode: input must be [B,S," + std::to_string(cfg.hidden) + "]");
  if (mask.rank() != 2 || mask.dim(0) != tx.dim(0) || mask.dim(1) != tx.dim(1))
    throw ShapeError("encode: mask must be [B,S]");
  for (int b = 0; b < mask.dim(0); ++b) {
    bool any = false;
    for (int j = 0; j < mask.dim(1); ++j) any = any || mask.at(b, j) > 0.0;
    if (!any) throw StructureError("encode: row " + std::to_string(b) + " is fully masked");
  }
  if (static_cast<int>(vars.layers.size()) != cfg.n_layers)
    throw ConfigError("encode: bound layers do not match config");
  if (train && cfg.dropout > 0.0 && !rng)
    throw ConfigError("encode: training with dropout needs an rng");

  EncodedVisit out;
  auto drop = [&](Var v) {
    if (!train || cfg.dropout <= 0.0) return v;
    return tape.dropout(v, cfg.dropout, *rng, true);
  };
  for (int l = 0; l < cfg.n_layers; ++l) {
    const EncoderLayerVars& lv = vars.layers[static_cast<size_t>(l)];
    const Var attn_in =
        cfg.pre_norm ? tape.layer_norm(x, lv.ln1_g, lv.ln1_b, cfg.ln_eps) : x;
    const Var q = tape.linear(attn_in, lv.wq, lv.bq);
    const Var k = tape.linear(attn_in, lv.wk, lv.bk);
    const Var v = tape.linear(attn_in, lv.wv, lv.bv);
    Tensor probs;
    const Var att = tape.multihead_attention(q, k, v, mask, cfg.heads,
                                             capture_attn ? &probs : nullptr);
    if (capture_attn) out.attn.push_back(probs);
    const Var att_o = drop(tape.linear(att, lv.wo, lv.bo));
    Var res = tape.add(x, att_o);
    if (!cfg.pre_norm) res = tape.layer_norm(res, lv.ln1_g, lv.ln1_b, cfg.ln_eps);

    const Var ffn_in =
        cfg.pre_norm ? tape.layer_norm(res, lv.ln2_g, lv.ln2_b, cfg.ln_eps) : res;
    const Var ffn =
        drop(tape.linear(tape.gelu(tape.linear(ffn_in, lv.fw1, lv.fb1)), lv.fw2, lv.fb2));
    x = tape.add(res, ffn);
    if (!cfg.pre_norm) x = tape.layer_norm(x, lv.ln2_g, lv.ln2_b, cfg.ln_eps);
  }
  out.z = x;
  out.cls = tape.take_position(x, 0);
  return out;
}

}  // namespace ummx
