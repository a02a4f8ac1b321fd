#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ummx/data.hpp"
#include "ummx/finetune.hpp"
#include "ummx/model.hpp"
#include "ummx/pretrain.hpp"

namespace ummx {

/// Flat dotted-key run configuration ("key = value" lines, # comments).
/// Every knob has a default, unknown keys are rejected, and the resolved
/// document is echoed into each run directory.
struct RunConfig {
  std::string data_source = "synthetic";  // "synthetic" | "ingest"
  std::string data_path;                  // JSONL file or directory when ingesting
  GeneratorConfig gen;

  double split_train = 0.8;
  double split_valid = 0.1;
  double split_test = 0.1;
  std::string split_unit = "visit";

  std::string model_preset = "desk";  // "desk" | "paper"
  std::string fusion = "cross";       // "cross" | "ablation"
  uint64_t seed = 0;
  std::string out_dir = "run";

  double mask_rate = 0.15;
  int pre_epochs = 30;
  int pre_batch = 8;
  double pre_lr = 5e-4;
  int pre_patience = 3;
  double t2c_weight = 1.0;
  double c2c_weight = 1.0;
  bool independent_corruption = false;

  bool cl_enabled = false;
  double cl_tau = 0.07;
  double cl_alpha = 0.4;
  double cl_momentum = 0.995;
  double cl_weight = 1.0;

  std::string task = "drug_rec";
  int task_epochs = 20;
  int task_batch = 8;
  double task_lr = 0.0;  // 0 selects the per-task default
  int task_patience = 3;
  std::vector<uint64_t> task_seeds = {11, 12, 13, 14, 15};
  std::vector<double> task_ratios;  // non-empty enables the training-ratio sweep

  /// Typed assignment by dotted key; unknown key or malformed value raises
  /// ConfigError.
  void set(const std::string& key, const std::string& value);
  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::string& path);
  /// Full resolved document, keys sorted; parsing it back reproduces *this.
  std::string echo() const;
  /// UMMX_SEED override; pass getenv's result (nullptr keeps the config).
  void apply_env_seed(const char* value);

  void validate() const;
  FusionMode fusion_mode() const;
  ModelConfig model_config() const;
  SplitSpec split_spec() const;
  PretrainConfig pretrain_config() const;
  ContrastiveConfig contrastive_config() const;
  FinetuneConfig finetune_config(uint64_t run_seed) const;
  /// Generates (synthetic) or ingests (data.path) the configured cohort.
  Cohort load_cohort() const;
};

struct GenerateResult {
  int64_t patients = 0;
  int64_t visits = 0;
};

/// Writes visits.jsonl + manifest.json + config.resolved under out_dir.
GenerateResult cmd_generate(const RunConfig& cfg, const std::string& out_dir);

struct PretrainCmdResult {
  PretrainEvalParts untrained;  // eval components before any training
  double uniform_bound = 0.0;   // ln(code vocabulary size)
  bool untrained_within_bound = false;
  PretrainResult history;
  std::string checkpoint_path;
  std::string history_path;
};

/// Pre-trains on the train split, early-stopped on the valid split; writes
/// checkpoint.bin, history.csv (epoch 0 = untrained eval row) and the
/// resolved config under out_dir.
PretrainCmdResult cmd_pretrain(const RunConfig& cfg, const std::string& out_dir);

struct FinetuneCmdResult {
  std::vector<MetricReport> runs;  // one per configured seed
  MetricSummary summary;
  std::vector<SweepPoint> sweep;  // filled when task.ratios is non-empty
};

/// Fine-tunes the checkpointed model once per configured seed and scores
/// the test split; writes metrics.jsonl, summary.txt, optionally sweep.csv,
/// and the resolved config under out_dir.
FinetuneCmdResult cmd_finetune(const RunConfig& cfg, const std::string& checkpoint,
                               const std::string& out_dir);

/// Scores the checkpointed model on the test split without training;
/// writes metrics.json and the resolved config under out_dir.
MetricReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
                      const std::string& out_dir);

struct AttnDumpResult {
  int visits_dumped = 0;
  std::vector<std::string> skipped;  // visit ids with an empty modality
  std::string path;
};

/// Exports both cross-modal attention directions per visit and code stream
/// as JSONL under out_dir. Visits without text or diagnosis content are
/// skipped; visits without medications omit the med-stream records.
AttnDumpResult cmd_attn_dump(const RunConfig& cfg, const std::string& checkpoint,
                             const std::string& visits_path, const std::string& out_dir);

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Fast release-gate suite: gradient checks (including a deliberately
/// sign-flipped softmax backward that must be caught), masking statistics,
/// attention normalization, untrained-loss bound, metric oracles,
/// checkpoint round-trip, determinism and guard rails.
std::vector<VerifyCheck> run_verification();
std::string verification_report_json(const std::vector<VerifyCheck>& checks);

/// Writes verify_report.json under out_dir; returns the failure count.
int cmd_verify(const std::string& out_dir);

}  // namespace ummx
