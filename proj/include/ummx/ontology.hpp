#pragma once

#include <map>
#include <string>
#include <vector>

#include "ummx/autograd.hpp"
#include "ummx/tensor.hpp"
#include "ummx/vocab.hpp"

namespace ummx {

enum class CodeStream { diag, med };

struct OntologyNode {
  int id = 0;
  std::string code;
  int depth = 0;
};

/// Single-rooted code hierarchy. Leaves map one-to-one onto the codes of one
/// stream of a CodeVocab; leaf_order lists leaf node ids in vocab id order.
struct OntologyTree {
  std::vector<OntologyNode> nodes;
  std::vector<int> parent;                 // -1 at the root
  std::vector<std::vector<int>> children;  // indexed by node id
  std::vector<int> leaf_order;
  std::map<std::string, int> leaves;
  int root = 0;

  int n_nodes() const { return static_cast<int>(nodes.size()); }
  bool is_leaf(int id) const { return children[static_cast<size_t>(id)].empty(); }
  /// Ancestors from direct parent up to the root.
  std::vector<int> ancestor_chain(int id) const;
  std::string to_json() const;
};

/// Neighborhood attention parameters for one aggregation stage.
struct GatParams {
  Tensor w;  // [d_in, heads * d_head]
  Tensor a;  // [heads, 2 * d_head]
  int heads = 1;
  double slope = 0.2;
};

struct GatVars {
  Var w;
  Var a;
  int heads = 1;
  double slope = 0.2;
};

struct OntologyEmbedVars {
  Var wa;  // [n_nodes, d_ont] initial node embeddings
  GatVars stage1;
  GatVars stage2;
};

/// Build one stream's tree from the vocab. Schemes: "prefix-grouping" buckets
/// codes under their 1-char then 3-char prefixes; "synthetic-3-level" spreads
/// codes evenly under `branching` interior nodes.
OntologyTree build_ontology(const CodeVocab& vocab, const std::string& scheme, CodeStream stream,
                            int branching = 4);
OntologyTree build_ontology_from_codes(const std::vector<std::string>& codes,
                                       const std::string& scheme, int branching = 4);

/// One attention hop per target row over its listed neighborhood.
Tensor gat_aggregate(const Tensor& feats, const std::vector<std::vector<int>>& neighborhoods,
                     const GatParams& params);

/// Two-stage differentiable leaf embedding: every node aggregates {self plus
/// direct children}, then every leaf aggregates {self plus ancestor chain}.
/// Rows follow tree.leaf_order. Recomputed from current parameters per call.
Var ontology_embed(Tape& tape, const OntologyTree& tree, const OntologyEmbedVars& vars);

/// Full code embedding table [|CodeVocab|, d]: free-standing special rows,
/// then diagnosis leaves, then medication leaves.
Var code_embedding_table(Tape& tape, const CodeVocab& vocab, Var specials,
                         const OntologyTree& diag_tree, const OntologyEmbedVars& diag_vars,
                         const OntologyTree& med_tree, const OntologyEmbedVars& med_vars);

}  // namespace ummx
