#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace ummx {

/// id <-> string bijection with four reserved ids at the front.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kMask = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  Vocab();

  /// Registers the string if new; returns its id either way.
  int add(const std::string& s);
  /// kUnk when absent.
  int lookup(const std::string& s) const;
  /// VocabError when absent.
  int require(const std::string& s) const;
  const std::string& str(int id) const;
  bool contains(const std::string& s) const { return ids_.count(s) > 0; }
  int size() const { return static_cast<int>(strings_.size()); }
  uint64_t digest() const;

  static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

 private:
  std::vector<std::string> strings_;
  std::unordered_map<std::string, int> ids_;
};

/// Code vocabulary layout: [specials][diagnosis codes][medication codes].
struct CodeVocab {
  Vocab vocab;
  int n_diag = 0;
  int n_med = 0;

  int diag_begin() const { return Vocab::kNumSpecials; }
  int diag_end() const { return Vocab::kNumSpecials + n_diag; }
  int med_begin() const { return diag_end(); }
  int med_end() const { return diag_end() + n_med; }
  bool is_diag(int id) const { return id >= diag_begin() && id < diag_end(); }
  bool is_med(int id) const { return id >= med_begin() && id < med_end(); }
  int size() const { return vocab.size(); }
};

using TokenVocab = Vocab;

}  // namespace ummx
