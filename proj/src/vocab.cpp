#include "ummx/vocab.hpp"

#include "ummx/error.hpp"
#include "ummx/rng.hpp"

namespace ummx {

Vocab::Vocab() {
  for (const char* s : {"[PAD]", "[CLS]", "[MASK]", "[UNK]"}) add(s);
}

int Vocab::add(const std::string& s) {
  if (s.empty()) throw ParseError("vocab: empty string is not a valid entry");
  auto it = ids_.find(s);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(strings_.size());
  strings_.push_back(s);
  ids_.emplace(s, id);
  return id;
}

int Vocab::lookup(const std::string& s) const {
  auto it = ids_.find(s);
  return it == ids_.end() ? kUnk : it->second;
}

int Vocab::require(const std::string& s) const {
  auto it = ids_.find(s);
  if (it == ids_.end()) throw VocabError("vocab: unknown entry '" + s + "'");
  return it->second;
}

const std::string& Vocab::str(int id) const {
  if (id < 0 || id >= size())
    throw VocabError("vocab: id " + std::to_string(id) + " out of range [0," +
                     std::to_string(size()) + ")");
  return strings_[static_cast<size_t>(id)];
}

uint64_t Vocab::digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const std::string& s : strings_) {
    h = fnv1a(s, h);
    h = fnv1a("\x1f", h);  // separator so ["ab","c"] != ["a","bc"]
  }
  return h;
}

}  // namespace ummx
