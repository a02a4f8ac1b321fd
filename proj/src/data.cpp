#include "ummx/data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "ummx/error.hpp"
#include "ummx/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ummx {

namespace {

std::string code_str(char base, int k) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%c%02d", static_cast<char>(base + k / 10), k % 10);
  return buf;
}

std::string diag_code_str(int k) { return code_str('A', k); }
std::string med_code_str(int m) { return code_str('N', m); }

std::string cue_token(int k) {
  std::string c = diag_code_str(k);
  c[0] = static_cast<char>(c[0] - 'A' + 'a');
  return "sym_" + c;
}

std::string noise_token(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "note_%03d", i);
  return buf;
}

void validate(const GeneratorConfig& cfg) {
  auto fail = [](const std::string& msg) { throw ConfigError("generator: " + msg); };
  if (cfg.n_patients <= 0) fail("n_patients must be positive");
  if (cfg.n_conditions <= 0 || cfg.n_conditions > 130)
    fail("n_conditions must lie in [1,130] (code universe is 13 letters x 10)");
  if (cfg.n_meds <= 0 || cfg.n_meds > 130) fail("n_meds must lie in [1,130]");
  if (cfg.min_conditions < 1 || cfg.max_conditions < cfg.min_conditions)
    fail("condition range invalid");
  if (cfg.max_conditions > cfg.n_conditions)
    fail("max_conditions exceeds the condition vocabulary");
  if (cfg.min_visits < 2 || cfg.max_visits < cfg.min_visits)
    fail("multi-visit range invalid (min_visits >= 2)");
  if (cfg.multi_visit_fraction < 0.0 || cfg.multi_visit_fraction > 1.0)
    fail("multi_visit_fraction outside [0,1]");
  if (cfg.p_cue <= 0.0 || cfg.p_cue > 1.0) fail("p_cue must lie in (0,1]");
  if (cfg.p_code <= 0.0 || cfg.p_code > 1.0) fail("p_code must lie in (0,1]");
  if (cfg.noise_max < 0 || cfg.n_noise_vocab < 1) fail("noise configuration invalid");
  if (cfg.label_rule != "count" && cfg.label_rule != "bimodal")
    fail("label_rule must be 'count' or 'bimodal'");
  if (cfg.readmit_threshold < 1) fail("readmit_threshold must be positive");
  if (cfg.label_noise < 0.0 || cfg.label_noise >= 1.0) fail("label_noise outside [0,1)");
  if (cfg.max_text_len < 2 || cfg.max_code_len < 2) fail("position budgets too small");
  if (cfg.max_conditions + cfg.noise_max > cfg.max_text_len - 1)
    fail("text budget cannot hold max_conditions cues plus noise_max tokens");
  if (2 * cfg.max_conditions > cfg.max_code_len - 1)
    fail("code budget cannot hold max_conditions diagnosis plus medication codes");
}

json config_json(const GeneratorConfig& c) {
  return json{{"n_patients", c.n_patients},
              {"multi_visit_fraction", c.multi_visit_fraction},
              {"min_visits", c.min_visits},
              {"max_visits", c.max_visits},
              {"n_conditions", c.n_conditions},
              {"n_meds", c.n_meds},
              {"min_conditions", c.min_conditions},
              {"max_conditions", c.max_conditions},
              {"p_cue", c.p_cue},
              {"p_code", c.p_code},
              {"noise_max", c.noise_max},
              {"n_noise_vocab", c.n_noise_vocab},
              {"label_rule", c.label_rule},
              {"readmit_threshold", c.readmit_threshold},
              {"label_noise", c.label_noise},
              {"max_text_len", c.max_text_len},
              {"max_code_len", c.max_code_len}};
}

std::vector<int> sample_distinct(int count, int universe, Rng& rng) {
  std::vector<int> pool(static_cast<size_t>(universe));
  for (int i = 0; i < universe; ++i) pool[static_cast<size_t>(i)] = i;
  // partial Fisher-Yates: first `count` entries after the sweep
  for (int i = 0; i < count; ++i) {
    const int j = i + rng.below_int(universe - i);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(count));
  return pool;
}

json visit_json(const VisitRecord& v) {
  json j;
  j["patient_id"] = v.patient_id;
  j["visit_index"] = v.visit_index;
  j["text_tokens"] = v.text_tokens;
  j["diag_codes"] = v.diag_codes;
  j["med_codes"] = v.med_codes;
  if (v.readmit_label)
    j["readmit_label"] = *v.readmit_label;
  else
    j["readmit_label"] = nullptr;
  if (v.icd_labels)
    j["icd_labels"] = *v.icd_labels;
  else
    j["icd_labels"] = nullptr;
  return j;
}

std::vector<std::string> string_array(const json& j, const char* key, const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_array())
    throw ParseError(where + ": missing or non-array field '" + key + "'");
  std::vector<std::string> out;
  for (const auto& e : *it) {
    if (!e.is_string()) throw ParseError(where + ": non-string entry in '" + key + "'");
    out.push_back(e.get<std::string>());
  }
  return out;
}

void dedupe_in_place(std::vector<std::string>& v) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  for (auto& s : v)
    if (seen.insert(s).second) out.push_back(std::move(s));
  v = std::move(out);
}

}  // namespace

int64_t Cohort::total_visits() const {
  int64_t n = 0;
  for (const auto& p : patients) n += static_cast<int64_t>(p.visits.size());
  return n;
}

std::vector<const VisitRecord*> collect_visits(const Cohort& cohort) {
  std::vector<const VisitRecord*> out;
  for (const auto& p : cohort.patients)
    for (const auto& v : p.visits) out.push_back(&v);
  return out;
}

const VisitRecord* Cohort::find_visit(const std::string& patient_id, int visit_index) const {
  for (const auto& p : patients) {
    if (p.patient_id != patient_id) continue;
    for (const auto& v : p.visits)
      if (v.visit_index == visit_index) return &v;
  }
  return nullptr;
}

Cohort generate_synthetic_cohort(const GeneratorConfig& cfg, uint64_t seed) {
  validate(cfg);
  Cohort cohort;
  for (int k = 0; k < cfg.n_conditions; ++k) cohort.token_vocab.add(cue_token(k));
  for (int i = 0; i < cfg.n_noise_vocab; ++i) cohort.token_vocab.add(noise_token(i));
  for (int k = 0; k < cfg.n_conditions; ++k) cohort.code_vocab.vocab.add(diag_code_str(k));
  cohort.code_vocab.n_diag = cfg.n_conditions;
  for (int m = 0; m < cfg.n_meds; ++m) cohort.code_vocab.vocab.add(med_code_str(m));
  cohort.code_vocab.n_med = cfg.n_meds;

  std::vector<int> sigma(static_cast<size_t>(cfg.n_conditions));
  for (int k = 0; k < cfg.n_conditions; ++k) sigma[static_cast<size_t>(k)] = k;
  {
    Rng perm(derive_seed(seed, "condition-progression"));
    perm.shuffle(sigma);
  }

  Rng rng(derive_seed(seed, "cohort"));
  for (int p = 0; p < cfg.n_patients; ++p) {
    char pid[16];
    std::snprintf(pid, sizeof(pid), "p%05d", p);
    PatientHistory hist;
    hist.patient_id = pid;
    const bool multi = rng.bernoulli(cfg.multi_visit_fraction);
    const int visits =
        multi ? cfg.min_visits + rng.below_int(cfg.max_visits - cfg.min_visits + 1) : 1;
    const int n_cond =
        cfg.min_conditions + rng.below_int(cfg.max_conditions - cfg.min_conditions + 1);
    std::vector<int> conditions = sample_distinct(n_cond, cfg.n_conditions, rng);
    std::sort(conditions.begin(), conditions.end());

    for (int t = 1; t <= visits; ++t) {
      if (t > 1) {
        for (int& k : conditions) k = sigma[static_cast<size_t>(k)];
        std::sort(conditions.begin(), conditions.end());
      }
      VisitRecord v;
      v.patient_id = hist.patient_id;
      v.visit_index = t;
      int co_observed = 0;
      for (const int k : conditions) {
        const bool coded = rng.bernoulli(cfg.p_code);
        const bool cued = rng.bernoulli(cfg.p_cue);
        if (coded) v.diag_codes.push_back(diag_code_str(k));
        if (cued) v.text_tokens.push_back(cue_token(k));
        if (coded && cued) ++co_observed;
      }
      {
        std::set<std::string> meds;
        for (const int k : conditions) meds.insert(med_code_str(k % cfg.n_meds));
        v.med_codes.assign(meds.begin(), meds.end());
      }
      if (cfg.noise_max > 0) {
        const int n_noise = rng.below_int(cfg.noise_max + 1);
        for (int i = 0; i < n_noise; ++i)
          v.text_tokens.push_back(noise_token(rng.below_int(cfg.n_noise_vocab)));
      }
      rng.shuffle(v.text_tokens);
      const int basis =
          cfg.label_rule == "count" ? static_cast<int>(conditions.size()) : co_observed;
      bool label = basis >= cfg.readmit_threshold;
      if (cfg.label_noise > 0.0 && rng.bernoulli(cfg.label_noise)) label = !label;
      v.readmit_label = label;
      v.icd_labels = v.diag_codes;
      hist.visits.push_back(std::move(v));
    }
    cohort.patients.push_back(std::move(hist));
  }

  json manifest;
  manifest["generator"] = "synthetic-ehr-v1";
  manifest["seed"] = seed;
  manifest["config"] = config_json(cfg);
  manifest["patients"] = cohort.patients.size();
  manifest["visits"] = cohort.total_visits();
  cohort.manifest_json = manifest.dump(2);
  return cohort;
}

std::pair<TokenVocab, CodeVocab> build_vocabs(const std::vector<PatientHistory>& patients) {
  if (patients.empty()) throw EmptyCohortError("build_vocabs: no patients");
  std::map<std::string, int64_t> token_freq, diag_freq, med_freq;
  for (const auto& p : patients)
    for (const auto& v : p.visits) {
      for (const auto& t : v.text_tokens) token_freq[t] += 1;
      for (const auto& c : v.diag_codes) diag_freq[c] += 1;
      for (const auto& c : v.med_codes) med_freq[c] += 1;
    }
  for (const auto& [code, n] : med_freq)
    if (diag_freq.count(code))
      throw VocabError("build_vocabs: code '" + code +
                       "' appears as both diagnosis and medication");

  auto ordered = [](const std::map<std::string, int64_t>& freq) {
    std::vector<std::pair<std::string, int64_t>> v(freq.begin(), freq.end());
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    return v;
  };

  TokenVocab tv;
  for (const auto& [s, n] : ordered(token_freq)) tv.add(s);
  CodeVocab cv;
  for (const auto& [s, n] : ordered(diag_freq)) cv.vocab.add(s);
  cv.n_diag = cv.vocab.size() - Vocab::kNumSpecials;
  for (const auto& [s, n] : ordered(med_freq)) cv.vocab.add(s);
  cv.n_med = cv.vocab.size() - Vocab::kNumSpecials - cv.n_diag;
  return {std::move(tv), std::move(cv)};
}

Cohort ingest_mimic_like(const std::string& path, int max_text_len, int max_code_len) {
  if (max_text_len < 2 || max_code_len < 2)
    throw ConfigError("ingest: position budgets must be at least 2");
  std::vector<fs::path> files;
  fs::path root(path);
  if (fs::is_directory(root)) {
    for (const auto& e : fs::directory_iterator(root))
      if (e.path().extension() == ".jsonl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else if (fs::exists(root)) {
    files.push_back(root);
  } else {
    throw IoError("ingest: no such path: " + path);
  }

  IngestStats stats;
  std::map<std::string, PatientHistory> by_patient;
  for (const auto& file : files) {
    std::ifstream in(file);
    if (!in) throw IoError("ingest: cannot open " + file.string());
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const std::string where = file.filename().string() + ":" + std::to_string(lineno);
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw ParseError(where + ": " + e.what());
      }
      if (!j.is_object()) throw ParseError(where + ": line is not a JSON object");
      if (!j.contains("patient_id") || !j["patient_id"].is_string())
        throw ParseError(where + ": missing or non-string 'patient_id'");
      if (!j.contains("visit_index") || !j["visit_index"].is_number_integer())
        throw ParseError(where + ": missing or non-integer 'visit_index'");
      VisitRecord v;
      v.patient_id = j["patient_id"].get<std::string>();
      v.visit_index = j["visit_index"].get<int>();
      if (v.visit_index < 0) throw ParseError(where + ": negative visit_index");
      v.text_tokens = string_array(j, "text_tokens", where);
      v.diag_codes = string_array(j, "diag_codes", where);
      v.med_codes = string_array(j, "med_codes", where);
      if (j.contains("readmit_label") && !j["readmit_label"].is_null()) {
        if (!j["readmit_label"].is_boolean())
          throw ParseError(where + ": 'readmit_label' must be boolean or null");
        v.readmit_label = j["readmit_label"].get<bool>();
      }
      if (j.contains("icd_labels") && !j["icd_labels"].is_null())
        v.icd_labels = string_array(j, "icd_labels", where);

      if (v.text_tokens.empty() || (v.diag_codes.empty() && v.med_codes.empty())) {
        stats.dropped_missing_modality += 1;
        continue;
      }
      dedupe_in_place(v.diag_codes);
      dedupe_in_place(v.med_codes);
      if (static_cast<int>(v.text_tokens.size()) > max_text_len - 1) {
        v.text_tokens.resize(static_cast<size_t>(max_text_len - 1));
        stats.truncated_text += 1;
      }
      const int code_budget = max_code_len - 1;
      if (static_cast<int>(v.diag_codes.size() + v.med_codes.size()) > code_budget) {
        stats.truncated_codes += 1;
        while (static_cast<int>(v.diag_codes.size() + v.med_codes.size()) > code_budget) {
          if (!v.med_codes.empty())
            v.med_codes.pop_back();
          else
            v.diag_codes.pop_back();
        }
      }
      stats.kept += 1;
      by_patient[v.patient_id].visits.push_back(std::move(v));
    }
  }
  if (by_patient.empty())
    throw EmptyCohortError("ingest: no usable visits in " + path);

  Cohort cohort;
  for (auto& [pid, hist] : by_patient) {
    hist.patient_id = pid;
    std::sort(hist.visits.begin(), hist.visits.end(),
              [](const VisitRecord& a, const VisitRecord& b) {
                return a.visit_index < b.visit_index;
              });
    for (size_t i = 1; i < hist.visits.size(); ++i)
      if (hist.visits[i].visit_index == hist.visits[i - 1].visit_index)
        throw StructureError("ingest: duplicate visit_index " +
                             std::to_string(hist.visits[i].visit_index) + " for patient " +
                             pid);
    cohort.patients.push_back(std::move(hist));
  }
  auto [tv, cv] = build_vocabs(cohort.patients);
  cohort.token_vocab = std::move(tv);
  cohort.code_vocab = std::move(cv);
  cohort.ingest_stats = stats;
  return cohort;
}

std::array<Cohort, 3> split_cohort(const Cohort& cohort, const SplitSpec& spec) {
  const double sum = spec.ratios[0] + spec.ratios[1] + spec.ratios[2];
  if (spec.ratios[0] < 0 || spec.ratios[1] < 0 || spec.ratios[2] < 0 ||
      std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split: ratios must be non-negative and sum to 1");
  if (spec.unit != "patient" && spec.unit != "visit")
    throw ConfigError("split: unit must be 'patient' or 'visit'");

  std::vector<PatientHistory> units;
  if (spec.unit == "patient") {
    units = cohort.patients;
  } else {
    for (const auto& p : cohort.patients)
      for (const auto& v : p.visits) {
        PatientHistory single;
        single.patient_id = p.patient_id;
        single.visits.push_back(v);
        units.push_back(std::move(single));
      }
  }
  Rng rng(derive_seed(spec.seed, "split"));
  rng.shuffle(units);
  const auto n = static_cast<int64_t>(units.size());
  const int64_t b1 = std::llround(spec.ratios[0] * static_cast<double>(n));
  const int64_t b2 = std::llround((spec.ratios[0] + spec.ratios[1]) * static_cast<double>(n));

  std::array<Cohort, 3> out;
  for (int s = 0; s < 3; ++s) {
    out[static_cast<size_t>(s)].token_vocab = cohort.token_vocab;
    out[static_cast<size_t>(s)].code_vocab = cohort.code_vocab;
    out[static_cast<size_t>(s)].ontology_scheme = cohort.ontology_scheme;
  }
  for (int64_t i = 0; i < n; ++i) {
    const int s = i < b1 ? 0 : (i < b2 ? 1 : 2);
    out[static_cast<size_t>(s)].patients.push_back(std::move(units[static_cast<size_t>(i)]));
  }
  return out;
}

std::string cohort_jsonl(const Cohort& cohort) {
  std::ostringstream os;
  for (const auto& p : cohort.patients)
    for (const auto& v : p.visits) os << visit_json(v).dump() << '\n';
  return os.str();
}

void save_cohort(const Cohort& cohort, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("save_cohort: cannot create " + dir + ": " + ec.message());
  {
    std::ofstream out(fs::path(dir) / "visits.jsonl", std::ios::binary);
    if (!out) throw IoError("save_cohort: cannot write visits.jsonl under " + dir);
    out << cohort_jsonl(cohort);
  }
  if (!cohort.manifest_json.empty()) {
    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!out) throw IoError("save_cohort: cannot write manifest.json under " + dir);
    out << cohort.manifest_json << '\n';
  }
}

}  // namespace ummx
