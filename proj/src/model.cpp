#include "ummx/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ummx/error.hpp"

namespace ummx {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

Tensor uniform_init(Rng& rng, int rows, int cols) {
  Tensor t({rows, cols});
  const double bound = std::sqrt(6.0 / (rows + cols));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

Tensor table_init(Rng& rng, int rows, int cols) {
  Tensor t({rows, cols});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.02;
  return t;
}

void add_linear(ParamStore& ps, Rng& rng, const std::string& name, int in, int out) {
  ps.add(name + ".w", uniform_init(rng, in, out));
  ps.add(name + ".b", Tensor::zeros({out}));
}

void register_ontology_stream(ParamStore& ps, Rng& rng, const std::string& prefix,
                              const OntologyTree& tree, const ModelConfig& cfg) {
  const int hc = cfg.code.hidden;
  ps.add(prefix + ".wa", table_init(rng, tree.n_nodes(), cfg.d_ont));
  ps.add(prefix + ".s1.w", uniform_init(rng, cfg.d_ont, hc));
  ps.add(prefix + ".s1.a", uniform_init(rng, cfg.ont_heads, 2 * cfg.d_ont));
  ps.add(prefix + ".s2.w", uniform_init(rng, hc, hc));
  ps.add(prefix + ".s2.a", uniform_init(rng, cfg.ont_heads, 2 * cfg.d_ont));
}

OntologyEmbedVars bind_ontology_stream(Tape& tape, ParamStore& ps, const std::string& prefix,
                                       const ModelConfig& cfg) {
  OntologyEmbedVars v;
  v.wa = tape.leaf(ps.get(prefix + ".wa"));
  v.stage1 = {tape.leaf(ps.get(prefix + ".s1.w")), tape.leaf(ps.get(prefix + ".s1.a")),
              cfg.ont_heads, cfg.gat_slope};
  v.stage2 = {tape.leaf(ps.get(prefix + ".s2.w")), tape.leaf(ps.get(prefix + ".s2.a")),
              cfg.ont_heads, cfg.gat_slope};
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  text.validate();
  code.validate();
  if (d_ont < 1) throw ConfigError("d_ont must be positive");
  if (ont_heads < 1) throw ConfigError("ont_heads must be positive");
  if (code.hidden != ont_heads * d_ont) {
    throw ConfigError("code.hidden = " + std::to_string(code.hidden) +
                      " does not equal ont_heads * d_ont = " +
                      std::to_string(ont_heads * d_ont));
  }
  if (n_segments < 1) throw ConfigError("n_segments must be positive");
  if (ontology_branching < 1) throw ConfigError("ontology_branching must be positive");
  if (d_contrast < 1) throw ConfigError("d_contrast must be positive");
  if (share_mask_heads && text.hidden != code.hidden) {
    throw ConfigError("share_mask_heads needs text.hidden == code.hidden, got " +
                      std::to_string(text.hidden) + " vs " + std::to_string(code.hidden));
  }
}

uint64_t ModelConfig::digest() const {
  std::ostringstream s;
  const auto enc = [&s](const EncoderConfig& e) {
    s << e.n_layers << ',' << e.hidden << ',' << e.heads << ',' << e.ffn << ',' << e.dropout
      << ',' << e.max_len << ',' << e.freeze_prefix << ',' << e.pre_norm << ',' << e.ln_eps;
  };
  s << d_ont << '|' << ont_heads << '|' << gat_slope << '|';
  enc(text);
  s << '|';
  enc(code);
  s << '|' << n_segments << '|' << ontology_scheme << '|' << ontology_branching << '|'
    << per_stream_code_encoder << '|' << share_mask_heads << '|' << d_contrast;
  return fnv1a(s.str());
}

ModelConfig ModelConfig::desk() {
  ModelConfig cfg;
  cfg.code.n_layers = 1;
  cfg.code.max_len = 24;
  cfg.d_contrast = 16;
  return cfg;
}

ModelConfig ModelConfig::paper() {
  ModelConfig cfg;
  cfg.d_ont = 75;
  cfg.ont_heads = 4;
  cfg.text = {12, 768, 12, 3072, 0.1, 512, 10, false, 1e-12};
  cfg.code = {2, 300, 2, 600, 0.1, 61, 0, false, 1e-12};
  cfg.d_contrast = 128;
  return cfg;
}

ModelState build_model(const ModelConfig& cfg, const TokenVocab& tokens, const CodeVocab& codes,
                       const OntologyTree& diag_tree, const OntologyTree& med_tree,
                       uint64_t seed) {
  cfg.validate();
  if (static_cast<int>(diag_tree.leaf_order.size()) != codes.n_diag) {
    throw ConfigError("diagnosis ontology has " + std::to_string(diag_tree.leaf_order.size()) +
                      " leaves for " + std::to_string(codes.n_diag) + " codes");
  }
  if (static_cast<int>(med_tree.leaf_order.size()) != codes.n_med) {
    throw ConfigError("medication ontology has " + std::to_string(med_tree.leaf_order.size()) +
                      " leaves for " + std::to_string(codes.n_med) + " codes");
  }

  ModelState m;
  m.cfg = cfg;
  m.tokens = tokens;
  m.codes = codes;
  m.diag_tree = diag_tree;
  m.med_tree = med_tree;
  m.seed = seed;

  Rng rng(derive_seed(seed, "init"));
  ParamStore& ps = m.params;
  const int hw = cfg.text.hidden;
  const int hc = cfg.code.hidden;
  const int vc = codes.size();

  ps.add("ont.spec", table_init(rng, Vocab::kNumSpecials, hc));
  register_ontology_stream(ps, rng, "ont.diag", diag_tree, cfg);
  register_ontology_stream(ps, rng, "ont.med", med_tree, cfg);

  register_text_embeddings(ps, "text", tokens.size(), cfg.n_segments, cfg.text, rng);
  register_encoder(ps, "text", cfg.text, rng);
  if (cfg.per_stream_code_encoder) {
    register_encoder(ps, "code.diag", cfg.code, rng);
    register_encoder(ps, "code.med", cfg.code, rng);
  } else {
    register_encoder(ps, "code", cfg.code, rng);
  }

  ps.add("fuse.text.wk", uniform_init(rng, hc, hw));
  ps.add("fuse.text.wv", uniform_init(rng, hc, hw));
  ps.add("fuse.code.wk", uniform_init(rng, hw, hc));
  ps.add("fuse.code.wv", uniform_init(rng, hw, hc));

  if (cfg.share_mask_heads) {
    add_linear(ps, rng, "head.mask", hc, vc);
  } else {
    add_linear(ps, rng, "head.t2c", hw, vc);
    add_linear(ps, rng, "head.c2c", hc, vc);
  }

  add_linear(ps, rng, "task.drug", 3 * hc + 2 * hw, codes.n_med);
  add_linear(ps, rng, "task.icd", hw + hc, codes.n_diag);
  add_linear(ps, rng, "task.readmit", hw + hc, 1);

  add_linear(ps, rng, "cl.t.1", hw, cfg.d_contrast);
  add_linear(ps, rng, "cl.t.2", cfg.d_contrast, cfg.d_contrast);
  add_linear(ps, rng, "cl.c.1", hc, cfg.d_contrast);
  add_linear(ps, rng, "cl.c.2", cfg.d_contrast, cfg.d_contrast);
  return m;
}

ModelState build_model(const ModelConfig& cfg, const TokenVocab& tokens, const CodeVocab& codes,
                       uint64_t seed) {
  const OntologyTree diag =
      build_ontology(codes, cfg.ontology_scheme, CodeStream::diag, cfg.ontology_branching);
  const OntologyTree med =
      build_ontology(codes, cfg.ontology_scheme, CodeStream::med, cfg.ontology_branching);
  return build_model(cfg, tokens, codes, diag, med, seed);
}

ModelState clone_model(const ModelState& model) {
  ModelState out;
  out.cfg = model.cfg;
  out.tokens = model.tokens;
  out.codes = model.codes;
  out.diag_tree = model.diag_tree;
  out.med_tree = model.med_tree;
  out.params = model.params.clone();
  out.seed = model.seed;
  return out;
}

namespace {

SequenceBatch make_text_sequence(const std::vector<const VisitRecord*>& visits,
                                 const TokenVocab& tokens, int max_len) {
  SequenceBatch b;
  b.batch = static_cast<int>(visits.size());
  b.modality = "text";
  int len = 1;
  for (const VisitRecord* v : visits) {
    len = std::max(len, 1 + static_cast<int>(v->text_tokens.size()));
  }
  b.len = std::min(len, max_len);
  b.ids.assign(static_cast<size_t>(b.batch) * b.len, Vocab::kPad);
  b.segments.assign(b.ids.size(), 0);
  b.mask = Tensor::zeros({b.batch, b.len});
  for (int i = 0; i < b.batch; ++i) {
    const VisitRecord& v = *visits[static_cast<size_t>(i)];
    b.ids[static_cast<size_t>(i) * b.len] = Vocab::kCls;
    b.mask.at(i, 0) = 1.0;
    for (int j = 0; j + 1 < b.len && j < static_cast<int>(v.text_tokens.size()); ++j) {
      b.ids[static_cast<size_t>(i) * b.len + j + 1] =
          tokens.lookup(v.text_tokens[static_cast<size_t>(j)]);
      b.mask.at(i, j + 1) = 1.0;
    }
  }
  return b;
}

SequenceBatch make_code_sequence(const std::vector<const VisitRecord*>& visits,
                                 const CodeVocab& codes, CodeStream stream, int max_len) {
  SequenceBatch b;
  b.batch = static_cast<int>(visits.size());
  b.modality = stream == CodeStream::diag ? "diag" : "med";
  int len = 1;
  for (const VisitRecord* v : visits) {
    const auto& cs = stream == CodeStream::diag ? v->diag_codes : v->med_codes;
    len = std::max(len, 1 + static_cast<int>(cs.size()));
  }
  b.len = std::min(len, max_len);
  b.ids.assign(static_cast<size_t>(b.batch) * b.len, Vocab::kPad);
  b.segments.assign(b.ids.size(), 0);
  b.mask = Tensor::zeros({b.batch, b.len});
  for (int i = 0; i < b.batch; ++i) {
    const auto& cs = stream == CodeStream::diag ? visits[static_cast<size_t>(i)]->diag_codes
                                                : visits[static_cast<size_t>(i)]->med_codes;
    b.ids[static_cast<size_t>(i) * b.len] = Vocab::kCls;
    b.mask.at(i, 0) = 1.0;
    for (int j = 0; j + 1 < b.len && j < static_cast<int>(cs.size()); ++j) {
      b.ids[static_cast<size_t>(i) * b.len + j + 1] =
          codes.vocab.lookup(cs[static_cast<size_t>(j)]);
      b.mask.at(i, j + 1) = 1.0;
    }
  }
  return b;
}

}  // namespace

VisitBatch make_visit_batch(const std::vector<const VisitRecord*>& visits,
                            const TokenVocab& tokens, const CodeVocab& codes,
                            const ModelConfig& cfg) {
  if (visits.empty()) throw ConfigError("visit batch must not be empty");
  for (const VisitRecord* v : visits) {
    if (v == nullptr) throw ConfigError("visit batch holds a null record");
  }
  VisitBatch b;
  b.text = make_text_sequence(visits, tokens, cfg.text.max_len);
  b.diag = make_code_sequence(visits, codes, CodeStream::diag, cfg.code.max_len);
  b.med = make_code_sequence(visits, codes, CodeStream::med, cfg.code.max_len);
  b.text.check(Vocab::kCls);
  b.diag.check(Vocab::kCls);
  b.med.check(Vocab::kCls);
  return b;
}

ModelForward forward_visit(Tape& tape, ModelState& model, const VisitBatch& batch,
                           FusionMode mode, Rng* dropout_rng, bool train, bool capture_attn) {
  const ModelConfig& cfg = model.cfg;
  ParamStore& ps = model.params;

  const OntologyEmbedVars diag_vars = bind_ontology_stream(tape, ps, "ont.diag", cfg);
  const OntologyEmbedVars med_vars = bind_ontology_stream(tape, ps, "ont.med", cfg);
  const Var code_table =
      code_embedding_table(tape, model.codes, tape.leaf(ps.get("ont.spec")), model.diag_tree,
                           diag_vars, model.med_tree, med_vars);

  ModelForward out;
  const Var xt = embed_text(tape, batch.text, tape.leaf(ps.get("text.emb.tok")),
                            tape.leaf(ps.get("text.emb.seg")), tape.leaf(ps.get("text.emb.pos")),
                            cfg.text.max_len);
  const EncoderVars text_vars = bind_encoder(tape, ps, "text", cfg.text);
  out.text = encode(tape, xt, batch.text.mask, cfg.text, text_vars, dropout_rng, train,
                    capture_attn);

  const EncoderVars diag_enc =
      bind_encoder(tape, ps, cfg.per_stream_code_encoder ? "code.diag" : "code", cfg.code);
  out.diag = encode(tape, embed_codes(tape, batch.diag, code_table), batch.diag.mask, cfg.code,
                    diag_enc, dropout_rng, train, capture_attn);
  const EncoderVars med_enc = cfg.per_stream_code_encoder
                                  ? bind_encoder(tape, ps, "code.med", cfg.code)
                                  : diag_enc;
  out.med = encode(tape, embed_codes(tape, batch.med, code_table), batch.med.mask, cfg.code,
                   med_enc, dropout_rng, train, capture_attn);

  FusionVars fv;
  fv.text_query = {tape.leaf(ps.get("fuse.text.wk")), tape.leaf(ps.get("fuse.text.wv"))};
  fv.code_query = {tape.leaf(ps.get("fuse.code.wk")), tape.leaf(ps.get("fuse.code.wv"))};
  out.reps = fuse_visit(tape, out.text, batch.text.mask, out.diag, batch.diag.mask, &out.med,
                        &batch.med.mask, fv, mode);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container. Layout, all little-endian:
//   magic "UMMXCKPT" | u32 version | u64 cfg digest | u64 token vocab digest |
//   u64 code vocab digest | u8 flags | parameter block | [adam block] |
//   [momentum block] | u64 fnv digest of everything above
// Parameter block: u32 count, then per group u16 name length, name bytes,
// u8 trainable, u32 rank, u32 dims, f64 values.

namespace {

constexpr char kMagic[8] = {'U', 'M', 'M', 'X', 'C', 'K', 'P', 'T'};
constexpr uint32_t kFormatVersion = 1;
constexpr uint8_t kFlagOptimizer = 1;
constexpr uint8_t kFlagMomentum = 2;

void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}
void put_u8(std::string& out, uint8_t v) { put_bytes(out, &v, 1); }
void put_u16(std::string& out, uint16_t v) { put_bytes(out, &v, 2); }
void put_u32(std::string& out, uint32_t v) { put_bytes(out, &v, 4); }
void put_u64(std::string& out, uint64_t v) { put_bytes(out, &v, 8); }
void put_f64(std::string& out, double v) { put_bytes(out, &v, 8); }

void put_tensor_values(std::string& out, const Tensor& t) {
  put_bytes(out, t.data(), static_cast<size_t>(t.size()) * sizeof(double));
}

void put_param_block(std::string& out, const ParamStore& ps) {
  put_u32(out, static_cast<uint32_t>(ps.size()));
  for (const auto& g : ps.groups()) {
    put_u16(out, static_cast<uint16_t>(g->name.size()));
    put_bytes(out, g->name.data(), g->name.size());
    put_u8(out, g->trainable ? 1 : 0);
    put_u32(out, static_cast<uint32_t>(g->tensor.rank()));
    for (int d = 0; d < g->tensor.rank(); ++d) {
      put_u32(out, static_cast<uint32_t>(g->tensor.dim(d)));
    }
    put_tensor_values(out, g->tensor);
  }
}

/// Bounds-checked reader over the in-memory checkpoint image.
struct ByteReader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw CorruptionError("checkpoint truncated");
  }
  void raw(void* out, size_t n) {
    need(n);
    std::memcpy(out, buf.data() + pos, n);
    pos += n;
  }
  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint16_t u16() {
    uint16_t v;
    raw(&v, 2);
    return v;
  }
  uint32_t u32() {
    uint32_t v;
    raw(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(buf, pos, n);
    pos += n;
    return s;
  }
};

void read_tensor_values(ByteReader& r, Tensor& t) {
  r.raw(t.data(), static_cast<size_t>(t.size()) * sizeof(double));
}

void read_param_block(ByteReader& r, ParamStore& ps) {
  const uint32_t count = r.u32();
  if (count != ps.size()) {
    throw CorruptionError("checkpoint lists " + std::to_string(count) + " tensors, model has " +
                          std::to_string(ps.size()));
  }
  for (const auto& g : ps.groups()) {
    const std::string name = r.str(r.u16());
    if (name != g->name) {
      throw CorruptionError("checkpoint tensor '" + name + "' does not match model tensor '" +
                            g->name + "'");
    }
    r.u8();  // trainable flag travels for inspection; the config decides it
    const uint32_t rank = r.u32();
    if (static_cast<int>(rank) != g->tensor.rank()) {
      throw CorruptionError("rank mismatch for tensor '" + name + "'");
    }
    for (int d = 0; d < g->tensor.rank(); ++d) {
      if (r.u32() != static_cast<uint32_t>(g->tensor.dim(d))) {
        throw CorruptionError("shape mismatch for tensor '" + name + "'");
      }
    }
    read_tensor_values(r, g->tensor);
  }
}

}  // namespace

void save_checkpoint(const ModelState& model, const std::string& path, const AdamState* opt,
                     const ParamStore* momentum) {
  std::string buf;
  put_bytes(buf, kMagic, sizeof(kMagic));
  put_u32(buf, kFormatVersion);
  put_u64(buf, model.cfg.digest());
  put_u64(buf, model.tokens.digest());
  put_u64(buf, model.codes.vocab.digest());
  uint8_t flags = 0;
  if (opt != nullptr) flags |= kFlagOptimizer;
  if (momentum != nullptr) flags |= kFlagMomentum;
  put_u8(buf, flags);

  put_param_block(buf, model.params);

  if (opt != nullptr) {
    if (opt->m.size() != model.params.size() || opt->v.size() != model.params.size()) {
      throw ShapeError("optimizer state does not cover every parameter group");
    }
    put_u64(buf, static_cast<uint64_t>(opt->step));
    put_f64(buf, opt->lr);
    put_f64(buf, opt->beta1);
    put_f64(buf, opt->beta2);
    put_f64(buf, opt->eps);
    for (size_t i = 0; i < opt->m.size(); ++i) {
      put_tensor_values(buf, opt->m[i]);
      put_tensor_values(buf, opt->v[i]);
    }
  }
  if (momentum != nullptr) put_param_block(buf, *momentum);

  put_u64(buf, fnv1a_bytes(buf.data(), buf.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("checkpoint write failed: " + path);
}

CheckpointExtras load_checkpoint(ModelState& model, const std::string& path, AdamState* opt,
                                 ParamStore* momentum) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();

  if (buf.size() < sizeof(kMagic) + 4 + 8) throw CorruptionError("checkpoint truncated");
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptionError("not a checkpoint file: " + path);
  }
  uint32_t version;
  std::memcpy(&version, buf.data() + sizeof(kMagic), 4);
  if (version != kFormatVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) +
                       ", expected " + std::to_string(kFormatVersion));
  }
  uint64_t stored_digest;
  std::memcpy(&stored_digest, buf.data() + buf.size() - 8, 8);
  if (stored_digest != fnv1a_bytes(buf.data(), buf.size() - 8)) {
    throw CorruptionError("checkpoint content digest mismatch: " + path);
  }

  ByteReader r{buf, sizeof(kMagic) + 4};
  if (r.u64() != model.cfg.digest()) {
    throw ConfigError("checkpoint was written under a different model config");
  }
  if (r.u64() != model.tokens.digest()) {
    throw ConfigError("checkpoint was written under a different token vocabulary");
  }
  if (r.u64() != model.codes.vocab.digest()) {
    throw ConfigError("checkpoint was written under a different code vocabulary");
  }
  const uint8_t flags = r.u8();

  read_param_block(r, model.params);

  CheckpointExtras extras;
  if (flags & kFlagOptimizer) {
    extras.has_optimizer = true;
    const auto step = static_cast<int64_t>(r.u64());
    const double lr = r.f64();
    const double b1 = r.f64();
    const double b2 = r.f64();
    const double eps = r.f64();
    if (opt != nullptr) {
      *opt = make_adam(model.params, lr, b1, b2, eps);
      opt->step = step;
      for (size_t i = 0; i < opt->m.size(); ++i) {
        read_tensor_values(r, opt->m[i]);
        read_tensor_values(r, opt->v[i]);
      }
    } else {
      for (const auto& g : model.params.groups()) {
        r.need(2 * static_cast<size_t>(g->tensor.size()) * sizeof(double));
        r.pos += 2 * static_cast<size_t>(g->tensor.size()) * sizeof(double);
      }
    }
  }
  if (flags & kFlagMomentum) {
    extras.has_momentum = true;
    if (momentum != nullptr) {
      if (momentum->size() == 0) *momentum = model.params.clone();
      read_param_block(r, *momentum);
    }
  }
  return extras;
}

}  // namespace ummx
