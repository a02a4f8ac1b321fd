#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ummx/vocab.hpp"

namespace ummx {

/// One hospital admission: paired free text and coded fields.
struct VisitRecord {
  std::string patient_id;
  int visit_index = 0;
  std::vector<std::string> text_tokens;
  std::vector<std::string> diag_codes;
  std::vector<std::string> med_codes;
  std::optional<bool> readmit_label;
  std::optional<std::vector<std::string>> icd_labels;
};

struct PatientHistory {
  std::string patient_id;
  std::vector<VisitRecord> visits;  // visit_index strictly increasing
};

/// Synthetic cohort knobs. Each latent condition k emits one diagnosis
/// code, one correlated medication code m(k) = k mod n_meds, and one text
/// cue token. A patient's conditions advance by a fixed permutation
/// between visits, so the next visit's medications are a deterministic
/// function of the current diagnoses.
struct GeneratorConfig {
  int n_patients = 500;
  double multi_visit_fraction = 0.85;
  int min_visits = 2;  // multi-visit patients only; single-visit patients have 1
  int max_visits = 7;
  int n_conditions = 120;
  int n_meds = 40;
  int min_conditions = 1;  // latent conditions per visit
  int max_conditions = 4;
  double p_cue = 1.0;   // probability a condition emits its text cue
  double p_code = 1.0;  // probability a condition emits its diagnosis code
  int noise_max = 0;    // noise tokens per visit, uniform in [0, noise_max]
  int n_noise_vocab = 300;
  std::string label_rule = "count";  // "count" | "bimodal"
  int readmit_threshold = 3;         // conditions (count) / co-observed conditions (bimodal)
  double label_noise = 0.0;          // probability of flipping the readmission label
  int max_text_len = 32;             // positions including [CLS]
  int max_code_len = 24;
};

struct IngestStats {
  int64_t kept = 0;
  int64_t dropped_missing_modality = 0;
  int64_t truncated_text = 0;
  int64_t truncated_codes = 0;
};

struct Cohort {
  std::vector<PatientHistory> patients;
  TokenVocab token_vocab;
  CodeVocab code_vocab;
  std::string ontology_scheme = "prefix-grouping";
  std::string manifest_json;  // empty for ingested data
  IngestStats ingest_stats;   // zeros for generated data

  int64_t total_visits() const;
  const VisitRecord* find_visit(const std::string& patient_id, int visit_index) const;
};

struct SplitSpec {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  uint64_t seed = 0;
  std::string unit = "visit";  // "patient" | "visit"
};

/// Deterministic in (cfg, seed): two calls serialize byte-identically.
Cohort generate_synthetic_cohort(const GeneratorConfig& cfg, uint64_t seed);

/// Reads visit JSONL (a file, or a directory of *.jsonl). Records lacking
/// either modality are dropped and counted; text/codes are truncated to the
/// given position budgets (each including [CLS]). Vocabularies are built
/// from the surviving records.
Cohort ingest_mimic_like(const std::string& path, int max_text_len = 512,
                         int max_code_len = 61);

/// Partition into train/valid/test at spec.unit. Visit-unit splitting
/// re-wraps each visit as a single-visit history.
std::array<Cohort, 3> split_cohort(const Cohort& cohort, const SplitSpec& spec);

/// Frequency-then-lexicographic ordering after the fixed specials; code
/// vocabulary lists all diagnosis codes before all medication codes.
std::pair<TokenVocab, CodeVocab> build_vocabs(const std::vector<PatientHistory>& patients);

/// Flat visit pointers in (patient, visit_index) order.
std::vector<const VisitRecord*> collect_visits(const Cohort& cohort);

/// One visit per line, keys alphabetical: byte-stable for equal cohorts.
std::string cohort_jsonl(const Cohort& cohort);

/// Writes visits.jsonl (and manifest.json when present) under dir.
void save_cohort(const Cohort& cohort, const std::string& dir);

}  // namespace ummx
