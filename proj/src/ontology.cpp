#include "ummx/ontology.hpp"

#include <json.hpp>

#include <algorithm>
#include <set>

#include "ummx/error.hpp"

namespace ummx {

namespace {

int add_node(OntologyTree& tree, const std::string& code, int parent) {
  const int id = tree.n_nodes();
  tree.nodes.push_back({id, code, parent < 0 ? 0 : tree.nodes[static_cast<size_t>(parent)].depth + 1});
  tree.parent.push_back(parent);
  tree.children.emplace_back();
  if (parent >= 0) tree.children[static_cast<size_t>(parent)].push_back(id);
  return id;
}

OntologyTree build_prefix(const std::vector<std::string>& codes) {
  OntologyTree tree;
  tree.root = add_node(tree, "*", -1);
  std::map<std::string, int> level1, level2;
  for (const auto& code : codes) {
    const std::string p1 = code.substr(0, 1);
    auto it1 = level1.find(p1);
    if (it1 == level1.end()) it1 = level1.emplace(p1, add_node(tree, p1, tree.root)).first;
    const std::string p3 = code.substr(0, 3);
    int leaf;
    if (p3 == code) {
      leaf = add_node(tree, code, it1->second);
    } else {
      auto it2 = level2.find(p3);
      if (it2 == level2.end()) it2 = level2.emplace(p3, add_node(tree, p3, it1->second)).first;
      leaf = add_node(tree, code, it2->second);
    }
    tree.leaves.emplace(code, leaf);
    tree.leaf_order.push_back(leaf);
  }
  return tree;
}

OntologyTree build_synthetic(const std::vector<std::string>& codes, int branching) {
  OntologyTree tree;
  tree.root = add_node(tree, "*", -1);
  const int n = static_cast<int>(codes.size());
  const int groups = std::min(branching, n);
  std::vector<int> mids;
  for (int g = 0; g < groups; ++g)
    mids.push_back(add_node(tree, "g" + std::to_string(g), tree.root));
  for (int i = 0; i < n; ++i) {
    // contiguous near-even chunks
    const int g = static_cast<int>((static_cast<int64_t>(i) * groups) / n);
    const int leaf = add_node(tree, codes[static_cast<size_t>(i)], mids[static_cast<size_t>(g)]);
    tree.leaves.emplace(codes[static_cast<size_t>(i)], leaf);
    tree.leaf_order.push_back(leaf);
  }
  return tree;
}

void check_gat_shapes(const Tensor& feats, const GatParams& p) {
  if (feats.rank() != 2 || p.w.rank() != 2 || feats.dim(1) != p.w.dim(0))
    throw ShapeError("gat_aggregate: features [n,d_in] and map [d_in,d_out] required");
}

}  // namespace

std::vector<int> OntologyTree::ancestor_chain(int id) const {
  std::vector<int> chain;
  for (int p = parent[static_cast<size_t>(id)]; p >= 0; p = parent[static_cast<size_t>(p)])
    chain.push_back(p);
  return chain;
}

std::string OntologyTree::to_json() const {
  nlohmann::json j;
  j["roots"] = {root};
  auto& edges = j["edges"] = nlohmann::json::array();
  for (int id = 0; id < n_nodes(); ++id)
    if (parent[static_cast<size_t>(id)] >= 0)
      edges.push_back({parent[static_cast<size_t>(id)], id});
  auto& lv = j["leaves"] = nlohmann::json::object();
  for (const auto& [code, id] : leaves) lv[code] = id;
  return j.dump(2);
}

OntologyTree build_ontology_from_codes(const std::vector<std::string>& codes,
                                       const std::string& scheme, int branching) {
  if (codes.empty()) throw ConfigError("build_ontology: no codes in stream");
  std::set<std::string> seen;
  for (const auto& c : codes) {
    if (c.empty()) throw ParseError("build_ontology: empty code string");
    if (!seen.insert(c).second) throw ParseError("build_ontology: duplicate code " + c);
  }
  if (scheme == "prefix-grouping") return build_prefix(codes);
  if (scheme == "synthetic-3-level") {
    if (branching < 1) throw ConfigError("build_ontology: branching must be positive");
    return build_synthetic(codes, branching);
  }
  throw ConfigError("build_ontology: unknown scheme " + scheme);
}

OntologyTree build_ontology(const CodeVocab& vocab, const std::string& scheme, CodeStream stream,
                            int branching) {
  std::vector<std::string> codes;
  const int begin = stream == CodeStream::diag ? vocab.diag_begin() : vocab.med_begin();
  const int end = stream == CodeStream::diag ? vocab.diag_end() : vocab.med_end();
  for (int id = begin; id < end; ++id) codes.push_back(vocab.vocab.str(id));
  return build_ontology_from_codes(codes, scheme, branching);
}

Tensor gat_aggregate(const Tensor& feats, const std::vector<std::vector<int>>& neighborhoods,
                     const GatParams& params) {
  check_gat_shapes(feats, params);
  if (static_cast<int>(neighborhoods.size()) != feats.dim(0))
    throw ShapeError("gat_aggregate: one neighborhood per feature row required");
  std::vector<int> targets(neighborhoods.size());
  for (size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<int>(i);
  Tape tape;
  const Var x = tape.input(feats);
  const Var w = tape.input(params.w);
  const Var a = tape.input(params.a);
  const Var h = tape.matmul(x, w);
  const Var out =
      tape.neighborhood_attention(h, a, targets, neighborhoods, params.heads, params.slope);
  return tape.value(out).clone();
}

Var ontology_embed(Tape& tape, const OntologyTree& tree, const OntologyEmbedVars& vars) {
  const int n = tree.n_nodes();
  if (n == 0) throw StructureError("ontology_embed: empty tree");
  if (tape.value(vars.wa).rank() != 2 || tape.value(vars.wa).dim(0) != n)
    throw ShapeError("ontology_embed: init embeddings must have one row per node");

  std::vector<int> all(static_cast<size_t>(n));
  std::vector<std::vector<int>> hoods(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    all[static_cast<size_t>(i)] = i;
    auto& nb = hoods[static_cast<size_t>(i)];
    nb.push_back(i);
    for (const int c : tree.children[static_cast<size_t>(i)]) nb.push_back(c);
  }
  const Var h1 = tape.matmul(vars.wa, vars.stage1.w);
  const Var ea = tape.neighborhood_attention(h1, vars.stage1.a, all, hoods, vars.stage1.heads,
                                             vars.stage1.slope);

  std::vector<std::vector<int>> chains;
  for (const int leaf : tree.leaf_order) {
    std::vector<int> nb{leaf};
    const auto up = tree.ancestor_chain(leaf);
    nb.insert(nb.end(), up.begin(), up.end());
    chains.push_back(std::move(nb));
  }
  const Var h2 = tape.matmul(ea, vars.stage2.w);
  return tape.neighborhood_attention(h2, vars.stage2.a, tree.leaf_order, chains,
                                     vars.stage2.heads, vars.stage2.slope);
}

Var code_embedding_table(Tape& tape, const CodeVocab& vocab, Var specials,
                         const OntologyTree& diag_tree, const OntologyEmbedVars& diag_vars,
                         const OntologyTree& med_tree, const OntologyEmbedVars& med_vars) {
  if (static_cast<int>(diag_tree.leaf_order.size()) != vocab.n_diag ||
      static_cast<int>(med_tree.leaf_order.size()) != vocab.n_med)
    throw VocabError("code_embedding_table: tree leaves do not cover the vocab");
  if (tape.value(specials).dim(0) != Vocab::kNumSpecials)
    throw ShapeError("code_embedding_table: one special row per special token");
  const Var diag_ec = ontology_embed(tape, diag_tree, diag_vars);
  const Var med_ec = ontology_embed(tape, med_tree, med_vars);
  return tape.concat_rows({specials, diag_ec, med_ec});
}

}  // namespace ummx
