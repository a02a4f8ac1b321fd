#include "ummx/cli.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <utility>

#include "ummx/error.hpp"
#include "ummx/fusion.hpp"
#include "ummx/gradcheck.hpp"

namespace fs = std::filesystem;

namespace ummx {

namespace {

enum class FieldKind { int_v, double_v, bool_v, string_v, seeds_v, ratios_v };

struct Field {
  FieldKind kind;
  void* ptr;
};

std::map<std::string, Field> registry(RunConfig& c) {
  return {
      {"data.source", {FieldKind::string_v, &c.data_source}},
      {"data.path", {FieldKind::string_v, &c.data_path}},
      {"data.patients", {FieldKind::int_v, &c.gen.n_patients}},
      {"data.multi_visit_fraction", {FieldKind::double_v, &c.gen.multi_visit_fraction}},
      {"data.min_visits", {FieldKind::int_v, &c.gen.min_visits}},
      {"data.max_visits", {FieldKind::int_v, &c.gen.max_visits}},
      {"data.conditions", {FieldKind::int_v, &c.gen.n_conditions}},
      {"data.meds", {FieldKind::int_v, &c.gen.n_meds}},
      {"data.min_conditions", {FieldKind::int_v, &c.gen.min_conditions}},
      {"data.max_conditions", {FieldKind::int_v, &c.gen.max_conditions}},
      {"data.p_cue", {FieldKind::double_v, &c.gen.p_cue}},
      {"data.p_code", {FieldKind::double_v, &c.gen.p_code}},
      {"data.noise_max", {FieldKind::int_v, &c.gen.noise_max}},
      {"data.noise_vocab", {FieldKind::int_v, &c.gen.n_noise_vocab}},
      {"data.label_rule", {FieldKind::string_v, &c.gen.label_rule}},
      {"data.readmit_threshold", {FieldKind::int_v, &c.gen.readmit_threshold}},
      {"data.label_noise", {FieldKind::double_v, &c.gen.label_noise}},
      {"data.max_text_len", {FieldKind::int_v, &c.gen.max_text_len}},
      {"data.max_code_len", {FieldKind::int_v, &c.gen.max_code_len}},
      {"split.train", {FieldKind::double_v, &c.split_train}},
      {"split.valid", {FieldKind::double_v, &c.split_valid}},
      {"split.test", {FieldKind::double_v, &c.split_test}},
      {"split.unit", {FieldKind::string_v, &c.split_unit}},
      {"model.preset", {FieldKind::string_v, &c.model_preset}},
      {"fusion.mode", {FieldKind::string_v, &c.fusion}},
      {"seed", {FieldKind::seeds_v, nullptr}},  // handled specially in set/echo
      {"out.dir", {FieldKind::string_v, &c.out_dir}},
      {"pretrain.mask_rate", {FieldKind::double_v, &c.mask_rate}},
      {"pretrain.epochs", {FieldKind::int_v, &c.pre_epochs}},
      {"pretrain.batch_size", {FieldKind::int_v, &c.pre_batch}},
      {"pretrain.lr", {FieldKind::double_v, &c.pre_lr}},
      {"pretrain.patience", {FieldKind::int_v, &c.pre_patience}},
      {"pretrain.t2c_weight", {FieldKind::double_v, &c.t2c_weight}},
      {"pretrain.c2c_weight", {FieldKind::double_v, &c.c2c_weight}},
      {"pretrain.independent_corruption", {FieldKind::bool_v, &c.independent_corruption}},
      {"contrastive.enabled", {FieldKind::bool_v, &c.cl_enabled}},
      {"contrastive.tau", {FieldKind::double_v, &c.cl_tau}},
      {"contrastive.alpha", {FieldKind::double_v, &c.cl_alpha}},
      {"contrastive.momentum", {FieldKind::double_v, &c.cl_momentum}},
      {"contrastive.weight", {FieldKind::double_v, &c.cl_weight}},
      {"task.name", {FieldKind::string_v, &c.task}},
      {"task.epochs", {FieldKind::int_v, &c.task_epochs}},
      {"task.batch_size", {FieldKind::int_v, &c.task_batch}},
      {"task.lr", {FieldKind::double_v, &c.task_lr}},
      {"task.patience", {FieldKind::int_v, &c.task_patience}},
      {"task.seeds", {FieldKind::seeds_v, &c.task_seeds}},
      {"task.ratios", {FieldKind::ratios_v, &c.task_ratios}},
  };
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  if (v.empty() || v[0] == '-')
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v +
                      "'");
  uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': cannot parse integer '" + v + "'");
  return out;
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': cannot parse integer '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse number '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << content;
  if (!out) throw IoError("write failed for " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "seed") {
    seed = parse_u64(key, value);
    return;
  }
  auto reg = registry(*this);
  const auto it = reg.find(key);
  if (it == reg.end()) throw ConfigError("unknown config key '" + key + "'");
  switch (it->second.kind) {
    case FieldKind::int_v:
      *static_cast<int*>(it->second.ptr) = parse_int(key, value);
      break;
    case FieldKind::double_v:
      *static_cast<double*>(it->second.ptr) = parse_double(key, value);
      break;
    case FieldKind::bool_v:
      *static_cast<bool*>(it->second.ptr) = parse_bool(key, value);
      break;
    case FieldKind::string_v:
      *static_cast<std::string*>(it->second.ptr) = value;
      break;
    case FieldKind::seeds_v: {
      auto& seeds = *static_cast<std::vector<uint64_t>*>(it->second.ptr);
      seeds.clear();
      for (const std::string& item : split_list(value)) seeds.push_back(parse_u64(key, item));
      break;
    }
    case FieldKind::ratios_v: {
      auto& ratios = *static_cast<std::vector<double>*>(it->second.ptr);
      ratios.clear();
      for (const std::string& item : split_list(value))
        ratios.push_back(parse_double(key, item));
      break;
    }
  }
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    cfg.set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  return from_text(read_file(path));
}

std::string RunConfig::echo() const {
  RunConfig& self = const_cast<RunConfig&>(*this);
  auto reg = registry(self);
  std::ostringstream os;
  for (const auto& [key, field] : reg) {  // std::map iterates sorted
    os << key << " = ";
    if (key == "seed") {
      os << seed;
    } else {
      switch (field.kind) {
        case FieldKind::int_v: os << *static_cast<const int*>(field.ptr); break;
        case FieldKind::double_v:
          os << fmt_double(*static_cast<const double*>(field.ptr));
          break;
        case FieldKind::bool_v:
          os << (*static_cast<const bool*>(field.ptr) ? "true" : "false");
          break;
        case FieldKind::string_v: os << *static_cast<const std::string*>(field.ptr); break;
        case FieldKind::seeds_v: {
          const auto& seeds = *static_cast<const std::vector<uint64_t>*>(field.ptr);
          for (size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
          break;
        }
        case FieldKind::ratios_v: {
          const auto& ratios = *static_cast<const std::vector<double>*>(field.ptr);
          for (size_t i = 0; i < ratios.size(); ++i)
            os << (i ? "," : "") << fmt_double(ratios[i]);
          break;
        }
      }
    }
    os << '\n';
  }
  return os.str();
}

void RunConfig::apply_env_seed(const char* value) {
  if (value == nullptr) return;
  seed = parse_u64("UMMX_SEED", value);
}

void RunConfig::validate() const {
  if (data_source != "synthetic" && data_source != "ingest")
    throw ConfigError("data.source must be 'synthetic' or 'ingest'");
  if (data_source == "ingest" && data_path.empty())
    throw ConfigError("data.path is required when data.source = ingest");
  if (model_preset != "desk" && model_preset != "paper")
    throw ConfigError("model.preset must be 'desk' or 'paper'");
  if (fusion != "cross" && fusion != "ablation")
    throw ConfigError("fusion.mode must be 'cross' or 'ablation'");
  if (split_unit != "patient" && split_unit != "visit")
    throw ConfigError("split.unit must be 'patient' or 'visit'");
  parse_task(task);
}

FusionMode RunConfig::fusion_mode() const {
  if (fusion == "cross") return FusionMode::cross;
  if (fusion == "ablation") return FusionMode::ablation;
  throw ConfigError("fusion.mode must be 'cross' or 'ablation'");
}

ModelConfig RunConfig::model_config() const {
  if (model_preset == "desk") return ModelConfig::desk();
  if (model_preset == "paper") return ModelConfig::paper();
  throw ConfigError("model.preset must be 'desk' or 'paper'");
}

SplitSpec RunConfig::split_spec() const {
  SplitSpec spec;
  spec.ratios = {split_train, split_valid, split_test};
  spec.seed = seed;
  spec.unit = split_unit;
  return spec;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig pc;
  pc.mask_rate = mask_rate;
  pc.epochs = pre_epochs;
  pc.batch_size = pre_batch;
  pc.lr = pre_lr;
  pc.patience = pre_patience;
  pc.t2c_weight = t2c_weight;
  pc.c2c_weight = c2c_weight;
  pc.contrastive = cl_enabled;
  pc.cl = contrastive_config();
  pc.cl_weight = cl_weight;
  pc.independent_corruption = independent_corruption;
  pc.mode = fusion_mode();
  pc.seed = seed;
  return pc;
}

ContrastiveConfig RunConfig::contrastive_config() const {
  ContrastiveConfig cc;
  cc.tau = cl_tau;
  cc.alpha = cl_alpha;
  cc.momentum = cl_momentum;
  return cc;
}

FinetuneConfig RunConfig::finetune_config(uint64_t run_seed) const {
  FinetuneConfig fc;
  fc.task = parse_task(task);
  fc.epochs = task_epochs;
  fc.batch_size = task_batch;
  fc.lr = task_lr;
  fc.patience = task_patience;
  fc.seed = run_seed;
  fc.mode = fusion_mode();
  return fc;
}

Cohort RunConfig::load_cohort() const {
  validate();
  if (data_source == "synthetic") return generate_synthetic_cohort(gen, seed);
  return ingest_mimic_like(data_path, gen.max_text_len, gen.max_code_len);
}

GenerateResult cmd_generate(const RunConfig& cfg, const std::string& out_dir) {
  const Cohort cohort = cfg.load_cohort();
  ensure_dir(out_dir);
  save_cohort(cohort, out_dir);
  write_file(out_dir + "/config.resolved", cfg.echo());
  return {static_cast<int64_t>(cohort.patients.size()), cohort.total_visits()};
}

PretrainCmdResult cmd_pretrain(const RunConfig& cfg, const std::string& out_dir) {
  const Cohort cohort = cfg.load_cohort();
  const auto splits = split_cohort(cohort, cfg.split_spec());
  ModelState model = build_model(cfg.model_config(), cohort.token_vocab, cohort.code_vocab,
                                 derive_seed(cfg.seed, "model-init"));
  const PretrainConfig pc = cfg.pretrain_config();
  const std::vector<const VisitRecord*> train = collect_visits(splits[0]);
  const std::vector<const VisitRecord*> valid = collect_visits(splits[1]);

  PretrainCmdResult out;
  out.untrained = pretrain_eval_parts(model, valid, pc);
  out.uniform_bound = std::log(static_cast<double>(model.codes.size()));
  const auto near = [&out](double v) {
    return std::abs(v - out.uniform_bound) <= 0.05 * out.uniform_bound;
  };
  out.untrained_within_bound = near(out.untrained.t2c) && near(out.untrained.c2c);

  ContrastiveState cl_state;
  if (cfg.cl_enabled) cl_state = make_contrastive(model, cfg.contrastive_config());
  AdamState opt;
  out.history = pretrain_loop(model, train, valid, pc, cfg.cl_enabled ? &cl_state : nullptr,
                              &opt);

  ensure_dir(out_dir);
  out.checkpoint_path = out_dir + "/checkpoint.bin";
  save_checkpoint(model, out.checkpoint_path, &opt,
                  cfg.cl_enabled ? &cl_state.model.params : nullptr);

  std::ostringstream csv;
  csv << (cfg.cl_enabled ? "epoch,loss,t2c,c2c,cl,eval\n" : "epoch,loss,t2c,c2c,eval\n");
  const double untrained_total =
      pc.t2c_weight * out.untrained.t2c + pc.c2c_weight * out.untrained.c2c;
  csv << "0," << fmt_double(untrained_total) << ',' << fmt_double(out.untrained.t2c) << ','
      << fmt_double(out.untrained.c2c) << (cfg.cl_enabled ? ",0," : ",")
      << fmt_double(untrained_total) << '\n';
  for (const EpochStats& st : out.history.history) {
    csv << st.epoch + 1 << ',' << fmt_double(st.train_loss) << ',' << fmt_double(st.t2c) << ','
        << fmt_double(st.c2c) << ',';
    if (cfg.cl_enabled) csv << fmt_double(st.contrastive) << ',';
    csv << fmt_double(st.eval_loss) << '\n';
  }
  out.history_path = out_dir + "/history.csv";
  write_file(out.history_path, csv.str());
  write_file(out_dir + "/config.resolved", cfg.echo());
  return out;
}

FinetuneCmdResult cmd_finetune(const RunConfig& cfg, const std::string& checkpoint,
                               const std::string& out_dir) {
  cfg.validate();
  if (cfg.task_seeds.empty()) throw ConfigError("task.seeds must list at least one seed");
  const Cohort cohort = cfg.load_cohort();
  const auto splits = split_cohort(cohort, cfg.split_spec());
  ModelState base = build_model(cfg.model_config(), cohort.token_vocab, cohort.code_vocab,
                                derive_seed(cfg.seed, "model-init"));
  load_checkpoint(base, checkpoint);
  const TaskKind task = parse_task(cfg.task);

  FinetuneCmdResult out;
  std::string lines;
  for (const uint64_t s : cfg.task_seeds) {
    ModelState model = clone_model(base);
    const FinetuneConfig fc = cfg.finetune_config(s);
    finetune_task(model, splits[0], splits[1], fc);
    const MetricReport r = evaluate_task(model, splits[2], task, fc.mode);
    out.runs.push_back(r);
    lines += metrics_json(task_name(task), s, r);
    lines += '\n';
  }
  out.summary = summarize(out.runs);

  ensure_dir(out_dir);
  write_file(out_dir + "/metrics.jsonl", lines);
  std::ostringstream sum;
  sum << "task " << task_name(task) << " over " << out.runs.size() << " seed(s)\n"
      << "auc " << mean_std(out.summary.mean.auc, out.summary.stddev.auc) << '\n'
      << "f1 " << mean_std(out.summary.mean.f1, out.summary.stddev.f1) << '\n'
      << "accuracy " << mean_std(out.summary.mean.accuracy, out.summary.stddev.accuracy)
      << '\n';
  write_file(out_dir + "/summary.txt", sum.str());

  if (!cfg.task_ratios.empty()) {
    out.sweep = ratio_sweep(base, splits[0], splits[1], splits[2], task, cfg.task_ratios,
                            cfg.task_seeds, cfg.finetune_config(cfg.seed));
    write_file(out_dir + "/sweep.csv", sweep_csv(out.sweep));
  }
  write_file(out_dir + "/config.resolved", cfg.echo());
  return out;
}

MetricReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
                      const std::string& out_dir) {
  const Cohort cohort = cfg.load_cohort();
  const auto splits = split_cohort(cohort, cfg.split_spec());
  ModelState model = build_model(cfg.model_config(), cohort.token_vocab, cohort.code_vocab,
                                 derive_seed(cfg.seed, "model-init"));
  load_checkpoint(model, checkpoint);
  const TaskKind task = parse_task(cfg.task);
  const MetricReport r = evaluate_task(model, splits[2], task, cfg.fusion_mode());
  ensure_dir(out_dir);
  write_file(out_dir + "/metrics.json", metrics_json(task_name(task), cfg.seed, r) + "\n");
  write_file(out_dir + "/config.resolved", cfg.echo());
  return r;
}

namespace {

std::vector<std::string> batch_sources(const std::vector<std::string>& items, int len) {
  std::vector<std::string> tokens = {"[CLS]"};
  for (const std::string& s : items) {
    if (static_cast<int>(tokens.size()) >= len) break;
    tokens.push_back(s);
  }
  return tokens;
}

std::vector<double> weight_row(const Tensor& w, int len) {
  std::vector<double> out(static_cast<size_t>(len));
  for (int j = 0; j < len; ++j) out[static_cast<size_t>(j)] = w.at(0, j);
  return out;
}

}  // namespace

AttnDumpResult cmd_attn_dump(const RunConfig& cfg, const std::string& checkpoint,
                             const std::string& visits_path, const std::string& out_dir) {
  cfg.validate();
  if (cfg.fusion_mode() != FusionMode::cross)
    throw ConfigError("attention dump requires fusion.mode = cross");
  const Cohort cohort = cfg.load_cohort();
  ModelState model = build_model(cfg.model_config(), cohort.token_vocab, cohort.code_vocab,
                                 derive_seed(cfg.seed, "model-init"));
  load_checkpoint(model, checkpoint);

  const Cohort dump = ingest_mimic_like(visits_path, cfg.gen.max_text_len, cfg.gen.max_code_len);
  AttnDumpResult out;
  std::ostringstream os;
  for (const PatientHistory& p : dump.patients) {
    for (const VisitRecord& v : p.visits) {
      const std::string id = v.patient_id + "#" + std::to_string(v.visit_index);
      if (v.text_tokens.empty() || v.diag_codes.empty()) {
        out.skipped.push_back(id);
        continue;
      }
      Tape tape;
      const VisitBatch vb = make_visit_batch({&v}, model.tokens, model.codes, model.cfg);
      const ModelForward fwd = forward_visit(tape, model, vb, FusionMode::cross);
      const std::vector<std::string> text_src = batch_sources(v.text_tokens, vb.text.len);

      const auto emit = [&os, &id](const std::string& stream, const char* direction,
                                   const std::vector<std::string>& src,
                                   const std::vector<double>& w) {
        os << attention_export_json(id + ":" + stream, direction, src, w) << '\n';
      };
      emit("diag", "text_over_code", batch_sources(v.diag_codes, vb.diag.len),
           weight_row(fwd.reps.diag.text_weights, vb.diag.len));
      emit("diag", "code_over_text", text_src,
           weight_row(fwd.reps.diag.code_weights, vb.text.len));
      if (v.med_codes.empty()) {
        out.skipped.push_back(id + ":med");
      } else {
        emit("med", "text_over_code", batch_sources(v.med_codes, vb.med.len),
             weight_row(fwd.reps.med.text_weights, vb.med.len));
        emit("med", "code_over_text", text_src,
             weight_row(fwd.reps.med.code_weights, vb.text.len));
      }
      ++out.visits_dumped;
    }
  }
  ensure_dir(out_dir);
  out.path = out_dir + "/attention.jsonl";
  write_file(out.path, os.str());
  write_file(out_dir + "/config.resolved", cfg.echo());
  return out;
}

// ---------------------------------------------------------------------------
// Verification suite.

namespace {

TokenVocab verify_tokens() {
  TokenVocab t;
  for (const char* s : {"alpha", "beta", "gamma", "delta"}) t.add(s);
  return t;
}

CodeVocab verify_codes() {
  CodeVocab c;
  for (const char* s : {"A00", "A01", "A02", "A03"}) c.vocab.add(s);
  for (const char* s : {"N00", "N01", "N02", "N03"}) c.vocab.add(s);
  c.n_diag = 4;
  c.n_med = 4;
  return c;
}

ModelConfig verify_model_cfg() {
  ModelConfig cfg;
  cfg.d_ont = 2;
  cfg.ont_heads = 2;
  cfg.text = {1, 4, 2, 8, 0.0, 8, 0, false, 1e-12};
  cfg.code = {1, 4, 2, 8, 0.0, 8, 0, false, 1e-12};
  cfg.d_contrast = 2;
  return cfg;
}

std::vector<VisitRecord> verify_visits(int n) {
  const std::vector<std::string> toks = {"alpha", "beta", "gamma", "delta"};
  const std::vector<std::string> diags = {"A00", "A01", "A02", "A03"};
  const std::vector<std::string> meds = {"N00", "N01", "N02", "N03"};
  std::vector<VisitRecord> out;
  for (int i = 0; i < n; ++i) {
    VisitRecord v;
    v.patient_id = "v";
    v.text_tokens = {toks[static_cast<size_t>(i % 4)], toks[static_cast<size_t>((i + 1) % 4)]};
    v.diag_codes = {diags[static_cast<size_t>(i % 4)],
                    diags[static_cast<size_t>((i * 3 + 1) % 4)]};
    v.med_codes = {meds[static_cast<size_t>((i * 2) % 4)]};
    out.push_back(v);
  }
  return out;
}

std::vector<const VisitRecord*> verify_ptrs(const std::vector<VisitRecord>& vs) {
  std::vector<const VisitRecord*> out;
  for (const auto& v : vs) out.push_back(&v);
  return out;
}

using CheckFn = std::function<std::pair<bool, std::string>()>;

void add_check(std::vector<VerifyCheck>& out, const std::string& name, const CheckFn& fn) {
  VerifyCheck c;
  c.name = name;
  try {
    const auto [ok, detail] = fn();
    c.passed = ok;
    c.detail = detail;
  } catch (const std::exception& e) {
    c.passed = false;
    c.detail = std::string("unexpected error: ") + e.what();
  }
  out.push_back(c);
}

std::pair<bool, std::string> check_gradcheck_pretrain() {
  const std::vector<VisitRecord> visits = verify_visits(3);
  ModelState model = build_model(verify_model_cfg(), verify_tokens(), verify_codes(), 51);
  const VisitBatch vb =
      make_visit_batch(verify_ptrs(visits), model.tokens, model.codes, model.cfg);
  Rng mr(52);
  const MaskedCodeBatch mb = apply_mask(vb, 0.25, mr, model.codes);
  const VisitBatch corrupted = masked_visit_batch(vb, mb);
  ContrastiveState cl = make_contrastive(model, ContrastiveConfig{});

  auto build = [&](Tape& t) -> Var {
    const ModelForward fwd = forward_visit(t, model, corrupted, FusionMode::cross);
    const Var lt = t2c_loss(t, fwd.reps.diag.a_text, mb, t.leaf(model.params.get("head.t2c.w")),
                            t.leaf(model.params.get("head.t2c.b")));
    const Var lc =
        c2c_loss(t, fwd.reps.diag.a_code, fwd.reps.med.a_code, mb,
                 t.leaf(model.params.get("head.c2c.w")), t.leaf(model.params.get("head.c2c.b")));
    const Var lcl =
        contrastive_loss(t, model, cl, corrupted, fwd.reps.diag.a_text, fwd.reps.diag.a_code);
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
  const GradCheckReport rep = grad_check(model.params, loss, back, 1e-5, 1e-4, 2, 17, 1e-6);
  return {rep.passed(1e-4), "max rel err " + fmt_double(rep.max_rel_err)};
}

std::pair<bool, std::string> check_gradcheck_task() {
  std::vector<VisitRecord> visits = verify_visits(2);
  ModelState model = build_model(verify_model_cfg(), verify_tokens(), verify_codes(), 53);
  const VisitBatch vb =
      make_visit_batch(verify_ptrs(visits), model.tokens, model.codes, model.cfg);
  Tensor labels = Tensor::zeros({2, 1});
  labels.at(0, 0) = 1.0;

  auto build = [&](Tape& t) -> Var {
    const ModelForward fwd = forward_visit(t, model, vb, FusionMode::cross);
    return readmission_predict_and_loss(t, fwd.reps.diag.a_text, fwd.reps.diag.a_code,
                                        t.leaf(model.params.get("task.readmit.w")),
                                        t.leaf(model.params.get("task.readmit.b")), labels)
        .loss;
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
  const GradCheckReport rep = grad_check(model.params, loss, back, 1e-5, 1e-4, 2, 17, 1e-6);
  return {rep.passed(1e-4), "max rel err " + fmt_double(rep.max_rel_err)};
}

/// A deliberately sign-flipped softmax cross-entropy backward must fail the
/// gradient check; this proves the harness detects real backward bugs.
std::pair<bool, std::string> check_mutation_caught() {
  ParamStore ps;
  Rng rng(5);
  Tensor logits({1, 5});
  for (int64_t i = 0; i < logits.size(); ++i) logits[i] = rng.normal();
  ps.add("logits", std::move(logits));
  const int label = 3;

  auto probs_of = [&ps] {
    const Tensor& x = ps.get("logits").tensor;
    double mx = x[0];
    for (int64_t i = 1; i < x.size(); ++i) mx = std::max(mx, x[i]);
    std::vector<double> p(static_cast<size_t>(x.size()));
    double z = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) z += p[static_cast<size_t>(i)] = std::exp(x[i] - mx);
    for (double& v : p) v /= z;
    return p;
  };
  auto loss = [&] { return -std::log(probs_of()[label]); };
  auto bad_back = [&] {
    const std::vector<double> p = probs_of();
    ParamGroup& g = ps.get("logits");
    for (int64_t i = 0; i < g.grad.size(); ++i) {
      const double y = i == label ? 1.0 : 0.0;
      g.grad[i] = y - p[static_cast<size_t>(i)];  // sign flipped on purpose
    }
    return -std::log(p[label]);
  };
  const GradCheckReport rep = grad_check(ps, loss, bad_back, 1e-5, 1e-4, -1, 17, 1e-9);
  return {!rep.passed(1e-4),
          "flipped sign produced max rel err " + fmt_double(rep.max_rel_err)};
}

std::pair<bool, std::string> check_mask_statistics() {
  CodeVocab codes;
  for (int i = 0; i < 100; ++i) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "C%03d", i);
    codes.vocab.add(buf);
  }
  codes.vocab.add("M000");
  codes.n_diag = 100;
  codes.n_med = 1;
  TokenVocab tokens;
  tokens.add("tok");

  ModelConfig mc = verify_model_cfg();
  mc.code.max_len = 48;

  std::vector<VisitRecord> rows(2000);
  for (auto& v : rows) {
    v.patient_id = "s";
    v.text_tokens = {"tok"};
    for (int j = 0; j < 40; ++j) {
      char buf[8];
      std::snprintf(buf, sizeof(buf), "C%03d", j);
      v.diag_codes.push_back(buf);
    }
  }
  const VisitBatch vb = make_visit_batch(verify_ptrs(rows), tokens, codes, mc);

  const double rate = 0.15;
  Rng rng(909);
  int64_t eligible = 0, selected = 0, masked = 0, kept = 0, randomized = 0;
  for (int rep = 0; rep < 10; ++rep) {
    const MaskedCodeBatch mb = apply_mask(vb, rate, rng, codes);
    eligible += static_cast<int64_t>(rows.size()) * 40;
    selected += static_cast<int64_t>(mb.positions.size());
    for (const MaskedPosition& p : mb.positions) {
      if (p.action == MaskAction::masked) ++masked;
      if (p.action == MaskAction::kept) ++kept;
      if (p.action == MaskAction::random) ++randomized;
    }
  }
  const double sel = static_cast<double>(selected) / static_cast<double>(eligible);
  const double sig_sel =
      std::sqrt(rate * (1.0 - rate) / static_cast<double>(eligible));
  bool ok = std::abs(sel - rate) <= 4.0 * sig_sel + 1e-3;  // + forced-coverage slack
  std::ostringstream detail;
  detail << "selection " << sel;
  const double n_sel = static_cast<double>(selected);
  const std::pair<double, int64_t> shares[] = {{0.8, masked}, {0.1, kept}, {0.1, randomized}};
  for (const auto& [want, got] : shares) {
    const double share = static_cast<double>(got) / n_sel;
    const double sig = std::sqrt(want * (1.0 - want) / n_sel);
    ok = ok && std::abs(share - want) <= 4.0 * sig;
    detail << ' ' << share;
  }
  return {ok, detail.str()};
}

std::pair<bool, std::string> check_attention_rows() {
  const std::vector<VisitRecord> visits = verify_visits(4);
  ModelState model = build_model(verify_model_cfg(), verify_tokens(), verify_codes(), 57);
  const VisitBatch vb =
      make_visit_batch(verify_ptrs(visits), model.tokens, model.codes, model.cfg);
  Tape tape;
  const ModelForward fwd = forward_visit(tape, model, vb, FusionMode::cross, nullptr, false,
                                         true);
  double worst = 0.0;
  const auto scan_fusion = [&worst](const Tensor& w) {
    for (int b = 0; b < w.dim(0); ++b) {
      double s = 0.0;
      for (int j = 0; j < w.dim(1); ++j) s += w.at(b, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
  };
  scan_fusion(fwd.reps.diag.text_weights);
  scan_fusion(fwd.reps.diag.code_weights);
  scan_fusion(fwd.reps.med.text_weights);
  scan_fusion(fwd.reps.med.code_weights);
  for (const EncodedVisit* ev : {&fwd.text, &fwd.diag, &fwd.med}) {
    const SequenceBatch& sb = ev == &fwd.text ? vb.text : (ev == &fwd.diag ? vb.diag : vb.med);
    for (const Tensor& a : ev->attn) {
      const int heads = a.dim(1), len = a.dim(2);
      for (int b = 0; b < a.dim(0); ++b)
        for (int h = 0; h < heads; ++h)
          for (int q = 0; q < len; ++q) {
            if (sb.mask.at(b, q) == 0.0) continue;
            double s = 0.0;
            for (int k = 0; k < len; ++k)
              s += a[((static_cast<int64_t>(b) * heads + h) * len + q) * len + k];
            worst = std::max(worst, std::abs(s - 1.0));
          }
    }
  }
  return {worst <= 1e-8, "worst row-sum deviation " + fmt_double(worst)};
}

std::pair<bool, std::string> check_untrained_bound() {
  GeneratorConfig g;
  g.n_patients = 40;
  g.n_conditions = 60;
  g.n_meds = 20;
  const Cohort cohort = generate_synthetic_cohort(g, 815);
  ModelState model = build_model(verify_model_cfg(), cohort.token_vocab, cohort.code_vocab,
                                 derive_seed(815, "model-init"));
  PretrainConfig pc;
  const std::vector<const VisitRecord*> visits = collect_visits(cohort);
  const std::vector<const VisitRecord*> head(visits.begin(),
                                             visits.begin() + std::min<size_t>(64, visits.size()));
  const PretrainEvalParts parts = pretrain_eval_parts(model, head, pc);
  const double bound = std::log(static_cast<double>(model.codes.size()));
  const bool ok = std::abs(parts.t2c - bound) <= 0.05 * bound &&
                  std::abs(parts.c2c - bound) <= 0.05 * bound;
  return {ok, "t2c " + fmt_double(parts.t2c) + " c2c " + fmt_double(parts.c2c) + " ln|V| " +
                  fmt_double(bound)};
}

std::pair<bool, std::string> check_metric_oracles() {
  Rng rng(23);
  const std::vector<double> grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(19));
    std::vector<double> s(static_cast<size_t>(n));
    std::vector<int> y(static_cast<size_t>(n));
    bool usable = false;
    while (!usable) {
      int pos = 0;
      for (int i = 0; i < n; ++i) {
        s[static_cast<size_t>(i)] = grid[rng.below(grid.size())];
        y[static_cast<size_t>(i)] = rng.bernoulli(0.5) ? 1 : 0;
        pos += y[static_cast<size_t>(i)];
      }
      usable = pos > 0 && pos < n;
    }
    Tensor st({n}), lt({n});
    for (int i = 0; i < n; ++i) {
      st[i] = s[static_cast<size_t>(i)];
      lt[i] = y[static_cast<size_t>(i)];
    }
    const MetricReport m = compute_metrics(st, lt, MetricTask::binary);
    double num = 0.0;
    int64_t np = 0, nn = 0;
    for (const int v : y) (v ? np : nn) += 1;
    for (int p = 0; p < n; ++p) {
      if (!y[static_cast<size_t>(p)]) continue;
      for (int q = 0; q < n; ++q) {
        if (y[static_cast<size_t>(q)]) continue;
        if (s[static_cast<size_t>(p)] > s[static_cast<size_t>(q)])
          num += 1.0;
        else if (s[static_cast<size_t>(p)] == s[static_cast<size_t>(q)])
          num += 0.5;
      }
    }
    const double want = num / (static_cast<double>(np) * static_cast<double>(nn));
    if (m.auc != want)
      return {false, "trial " + std::to_string(trial) + ": " + fmt_double(m.auc) + " vs " +
                         fmt_double(want)};
  }
  return {true, "200 instances bit-identical to the pairwise oracle"};
}

std::pair<bool, std::string> check_monotone_invariance() {
  Rng rng(29);
  const std::vector<double> grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(16));
    Tensor s({n}), y({n}), s2({n});
    bool usable = false;
    while (!usable) {
      int pos = 0;
      for (int i = 0; i < n; ++i) {
        s[i] = grid[rng.below(grid.size())];
        y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        pos += y[i] != 0.0;
      }
      usable = pos > 0 && pos < n;
    }
    for (int i = 0; i < n; ++i) s2[i] = s[i] * s[i] * s[i] + 2.0 * s[i];
    if (compute_metrics(s, y, MetricTask::binary).auc !=
        compute_metrics(s2, y, MetricTask::binary).auc)
      return {false, "trial " + std::to_string(trial) + " diverged"};
  }
  return {true, "50 strictly increasing transforms left the AUC unchanged"};
}

std::pair<bool, std::string> check_checkpoint_roundtrip() {
  ModelState model = build_model(verify_model_cfg(), verify_tokens(), verify_codes(), 59);
  const fs::path path = fs::temp_directory_path() / "ummx_verify_ckpt.bin";
  save_checkpoint(model, path.string());
  ModelState twin = build_model(verify_model_cfg(), verify_tokens(), verify_codes(), 60);
  load_checkpoint(twin, path.string());
  if (twin.params.value_digest() != model.params.value_digest()) {
    fs::remove(path);
    return {false, "reloaded parameters differ"};
  }
  std::string bytes = read_file(path.string());
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
  write_file(path.string(), bytes);
  bool caught = false;
  try {
    load_checkpoint(twin, path.string());
  } catch (const CorruptionError&) {
    caught = true;
  }
  fs::remove(path);
  return {caught, caught ? "round-trip exact, corruption detected"
                         : "corrupted checkpoint loaded without error"};
}

std::pair<bool, std::string> check_determinism() {
  const std::vector<VisitRecord> visits = verify_visits(4);
  uint64_t digests[2];
  double losses[2];
  for (int run = 0; run < 2; ++run) {
    ModelState model = build_model(verify_model_cfg(), verify_tokens(), verify_codes(), 61);
    const VisitBatch vb =
        make_visit_batch(verify_ptrs(visits), model.tokens, model.codes, model.cfg);
    AdamState opt = make_adam(model.params, 1e-3);
    PretrainConfig pc;
    pc.seed = 7;
    Rng mask_rng(11), dropout_rng(12);
    const StepLosses sl = pretrain_step(model, vb, opt, pc, mask_rng, dropout_rng);
    digests[run] = model.params.value_digest();
    losses[run] = sl.total;
  }
  const bool ok = digests[0] == digests[1] && losses[0] == losses[1];
  return {ok, ok ? "repeated optimizer step bit-identical" : "runs diverged"};
}

std::pair<bool, std::string> check_masked_row_guard() {
  Tape tape;
  Rng rng(3);
  Tensor q({1, 4}), k({1, 2, 4}), v({1, 2, 4});
  for (Tensor* t : {&q, &k, &v})
    for (int64_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal();
  const Tensor mask = Tensor::zeros({1, 2});
  try {
    tape.cross_attention(tape.input(q), tape.input(k), tape.input(v), mask);
  } catch (const StructureError&) {
    return {true, "fully masked row rejected"};
  }
  return {false, "fully masked attention row went unnoticed"};
}

std::pair<bool, std::string> check_generator_determinism() {
  GeneratorConfig g;
  g.n_patients = 12;
  const Cohort a = generate_synthetic_cohort(g, 99);
  const Cohort b = generate_synthetic_cohort(g, 99);
  const bool ok = cohort_jsonl(a) == cohort_jsonl(b) && a.manifest_json == b.manifest_json;
  return {ok, ok ? "regenerated cohort byte-identical" : "serialization diverged"};
}

}  // namespace

std::vector<VerifyCheck> run_verification() {
  std::vector<VerifyCheck> checks;
  add_check(checks, "gradcheck.pretrain-loss", check_gradcheck_pretrain);
  add_check(checks, "gradcheck.task-heads", check_gradcheck_task);
  add_check(checks, "gradcheck.mutation-softmax-sign", check_mutation_caught);
  add_check(checks, "masking.statistics", check_mask_statistics);
  add_check(checks, "attention.row-sums", check_attention_rows);
  add_check(checks, "pretrain.untrained-loss-bound", check_untrained_bound);
  add_check(checks, "metrics.oracle-equivalence", check_metric_oracles);
  add_check(checks, "metrics.monotone-invariance", check_monotone_invariance);
  add_check(checks, "checkpoint.round-trip", check_checkpoint_roundtrip);
  add_check(checks, "determinism.repeat-run", check_determinism);
  add_check(checks, "guards.masked-modality", check_masked_row_guard);
  add_check(checks, "data.generator-determinism", check_generator_determinism);
  return checks;
}

std::string verification_report_json(const std::vector<VerifyCheck>& checks) {
  nlohmann::json j;
  int failed = 0;
  j["checks"] = nlohmann::json::array();
  for (const VerifyCheck& c : checks) {
    j["checks"].push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    if (!c.passed) ++failed;
  }
  j["passed"] = static_cast<int>(checks.size()) - failed;
  j["failed"] = failed;
  return j.dump(2);
}

int cmd_verify(const std::string& out_dir) {
  const std::vector<VerifyCheck> checks = run_verification();
  ensure_dir(out_dir);
  write_file(out_dir + "/verify_report.json", verification_report_json(checks) + "\n");
  int failed = 0;
  for (const VerifyCheck& c : checks) failed += c.passed ? 0 : 1;
  return failed;
}

}  // namespace ummx
