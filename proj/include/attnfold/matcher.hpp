// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "attnfold/graph.hpp"
#include "attnfold/tiler.hpp"

namespace attnfold {

enum class AttnVariant { MHA, GQA, MQA };

inline const char* to_string(AttnVariant v) {
  switch (v) {
    case AttnVariant::MHA: return "MHA";
    case AttnVariant::GQA: return "GQA";
    case AttnVariant::MQA: return "MQA";
  }
  return "MHA";
}

/// MHA when every query head has its own KV head, MQA when one KV head is
/// shared by all (more than one) query heads, GQA in between.
inline AttnVariant classify_variant(std::int64_t num_q_heads, std::int64_t num_kv_heads) {
  if (num_kv_heads < 1 || num_q_heads < 1)
    throw ValidationError("classify_variant: head counts must be >= 1");
  if (num_q_heads % num_kv_heads != 0)
    throw ValidationError("classify_variant: " + std::to_string(num_q_heads) +
                          " query heads do not group over " + std::to_string(num_kv_heads) +
                          " kv heads");
  if (num_kv_heads == num_q_heads) return AttnVariant::MHA;
  if (num_kv_heads == 1) return AttnVariant::MQA;
  return AttnVariant::GQA;
}

/// Operand/result tensor ids of one matched chain. Batched matches carry one
/// entry per merged chain; chains may share k/v (GQA/MQA) or bias/mask.
struct HeadChainRef {
  std::string q, k, v;
  std::optional<std::string> bias, mask;
  std::string sm;  ///< SoftMax output tensor (folded node output at level 2)
  std::string z;   ///< final output tensor (folded node output at level 3)
};

/// One recognized attention chain: QK^T MatMul, optional bias/mask Adds,
/// SoftMax, SM*V MatMul. After batch_heads a match may cover several
/// structurally identical per-head chains.
struct AttentionMatch {
  // Representative (first head) operand tensors.
  std::string q, k, v;
  std::optional<std::string> bias, mask;

  /// Matched chain node ids in topological order (union over batched heads).
  std::vector<std::string> chain;
  /// Explicit Transpose nodes feeding K that folding absorbs.
  std::vector<std::string> k_transpose_nodes;

  /// Operand tuples, one per merged chain (singleton before batching).
  std::vector<HeadChainRef> head_chains;
  /// Retained SM*V MatMul node ids (stay in the graph at level 2).
  std::vector<std::string> sv_nodes;

  std::int64_t num_q_heads = 1;
  std::int64_t num_kv_heads = 1;
  AttnVariant variant = AttnVariant::MHA;
  bool k_needs_transpose = false;

  /// Per-head logical problem shape.
  AttnShape shape;

  std::vector<std::string> q_ids() const { return unique_of(&HeadChainRef::q); }
  std::vector<std::string> k_ids() const { return unique_of(&HeadChainRef::k); }
  std::vector<std::string> v_ids() const { return unique_of(&HeadChainRef::v); }
  std::vector<std::string> bias_ids() const { return unique_opt(&HeadChainRef::bias); }
  std::vector<std::string> mask_ids() const { return unique_opt(&HeadChainRef::mask); }
  std::vector<std::string> sm_ids() const { return unique_of(&HeadChainRef::sm); }
  std::vector<std::string> z_ids() const { return unique_of(&HeadChainRef::z); }

 private:
  std::vector<std::string> unique_of(std::string HeadChainRef::* field) const {
    std::vector<std::string> out;
    for (const auto& hc : head_chains)
      if (std::find(out.begin(), out.end(), hc.*field) == out.end()) out.push_back(hc.*field);
    return out;
  }
  std::vector<std::string> unique_opt(std::optional<std::string> HeadChainRef::* field) const {
    std::vector<std::string> out;
    for (const auto& hc : head_chains)
      if (hc.*field && std::find(out.begin(), out.end(), *(hc.*field)) == out.end())
        out.push_back(*(hc.*field));
    return out;
  }
};

namespace detail {

inline bool leading_all_ones(const TensorDesc& t) {
  for (std::size_t i = 0; i + 2 < t.dims.size(); ++i)
    if (t.dims[i] != 1) return false;
  return true;
}

// True when the Transpose node swaps exactly the trailing two dims.
inline bool swaps_trailing_two(const Graph& g, const Node& n) {
  const TensorDesc& in = g.tensor(n.inputs[0]);
  const std::int64_t rank = in.rank();
  if (rank < 2) return false;
  std::vector<std::int64_t> perm;
  if (n.attrs.is_object() && n.attrs.contains("perm"))
    perm = n.attrs.at("perm").get<std::vector<std::int64_t>>();
  else {
    for (std::int64_t i = 0; i < rank; ++i) perm.push_back(i);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  }
  for (std::int64_t i = 0; i + 2 < rank; ++i)
    if (perm[static_cast<std::size_t>(i)] != i) return false;
  return perm[perm.size() - 2] == rank - 1 && perm[perm.size() - 1] == rank - 2;
}

struct QkHead {
  std::string q, k;
  std::optional<std::string> k_transpose_node;
  bool k_needs_transpose = false;
  std::int64_t lq = 0, lk = 0, d = 0;
  std::int64_t q_heads = 1, kv_heads = 1;
};

// Resolves how the first MatMul of a candidate chain realizes Q*K^T.
inline std::optional<QkHead> resolve_qk(const Graph& g, const Node& n,
                                        const std::unordered_set<std::string>& used) {
  if (n.inputs.size() != 2) return std::nullopt;
  if (n.attr_bool("transpose_a")) return std::nullopt;
  QkHead h;
  h.q = n.inputs[0];
  const TensorDesc& qd = g.tensor(h.q);
  if (qd.rank() < 2) return std::nullopt;
  h.lq = qd.rows();
  h.d = qd.cols();
  h.q_heads = qd.leading();

  const std::string& rhs = n.inputs[1];
  const TensorDesc& rd = g.tensor(rhs);
  if (rd.rank() < 2) return std::nullopt;

  const bool tb = n.kind == NodeKind::TransposedMatMul || n.attr_bool("transpose_b");
  if (tb) {
    // K consumed in natural (Lk, d) storage; the kernel transposes.
    h.k = rhs;
    h.k_needs_transpose = true;
    h.lk = rd.rows();
    h.kv_heads = rd.leading();
    return h;
  }

  // Plain MatMul: rhs is (d, Lk). Absorb an explicit upstream Transpose when
  // this MatMul is its only consumer; otherwise K arrives pre-transposed.
  const Node* prod = g.producer_of(rhs);
  if (prod != nullptr && prod->kind == NodeKind::Transpose && !used.count(prod->id) &&
      swaps_trailing_two(g, *prod) && g.consumers_of(rhs).size() == 1) {
    h.k = prod->inputs[0];
    h.k_transpose_node = prod->id;
    h.k_needs_transpose = true;
    const TensorDesc& kd = g.tensor(h.k);
    h.lk = kd.rows();
    h.kv_heads = kd.leading();
  } else {
    h.k = rhs;
    h.k_needs_transpose = false;
    h.lk = rd.cols();  // stored (d, Lk)
    h.kv_heads = rd.leading();
  }
  return h;
}

// Bias/mask binding for the matched Adds, in chain order. Explicit tensor
// roles win; a rank>=3 operand broadcast over all leading axes is a bias;
// a score-shaped operand is a mask. If both Adds resolve to mask, the first
// becomes the bias (the chain is A + B + M).
inline void bind_bias_mask(const Graph& g, const std::vector<std::string>& add_operands,
                           std::optional<std::string>& bias, std::optional<std::string>& mask) {
  std::vector<int> kind(add_operands.size(), -1);  // 0 = bias, 1 = mask
  for (std::size_t i = 0; i < add_operands.size(); ++i) {
    const TensorDesc& t = g.tensor(add_operands[i]);
    if (t.role == TensorRole::Bias) kind[i] = 0;
    else if (t.role == TensorRole::Mask) kind[i] = 1;
    else if (t.rank() >= 3 && leading_all_ones(t)) kind[i] = 0;
    else kind[i] = 1;
  }
  if (add_operands.size() == 2 && kind[0] == kind[1]) {
    kind[0] = 0;
    kind[1] = 1;
  }
  for (std::size_t i = 0; i < add_operands.size(); ++i) {
    if (kind[i] == 0 && !bias) bias = add_operands[i];
    else if (!mask) mask = add_operands[i];
    else if (!bias) bias = add_operands[i];
  }
}

}  // namespace detail

/// Finds every maximal operator chain realizing softmax(Q*K^T [+B][+M])*V.
/// Matches are greedy in topological order and never overlap; chains missing
/// the final MatMul are not matched. An unmatched graph yields an empty list.
inline std::vector<AttentionMatch> match_attention(const Graph& g) {
  std::vector<AttentionMatch> out;
  std::unordered_set<std::string> used;

  for (const Node& n : g.nodes()) {
    if (n.kind != NodeKind::MatMul && n.kind != NodeKind::TransposedMatMul) continue;
    if (used.count(n.id)) continue;
    auto qk = detail::resolve_qk(g, n, used);
    if (!qk) continue;

    // Walk forward through at most two Adds to the SoftMax, then to SM*V.
    std::vector<std::string> chain{n.id};
    std::vector<std::string> add_operands;
    std::string cur = n.outputs[0];
    const Node* sm_node = nullptr;
    bool broken = false;
    while (true) {
      const auto consumers = g.consumers_of(cur);
      if (consumers.size() != 1 || used.count(consumers[0]->id)) {
        broken = true;
        break;
      }
      const Node* c = consumers[0];
      if (c->kind == NodeKind::Add && add_operands.size() < 2) {
        const std::string& other = c->inputs[0] == cur ? c->inputs[1] : c->inputs[0];
        const TensorDesc& od = g.tensor(other);
        if (od.rank() < 2 || od.rows() != qk->lq || od.cols() != qk->lk) {
          broken = true;
          break;
        }
        add_operands.push_back(other);
        chain.push_back(c->id);
        cur = c->outputs[0];
        continue;
      }
      if (c->kind == NodeKind::SoftMax) {
        std::int64_t axis = c->attr_int("axis", -1);
        const std::int64_t rank = g.tensor(cur).rank();
        if (axis < 0) axis += rank;
        if (axis != rank - 1) broken = true;
        sm_node = c;
        chain.push_back(c->id);
      }
      break;
    }
    if (broken || sm_node == nullptr) continue;

    const std::string sm_out = sm_node->outputs[0];
    const auto sm_consumers = g.consumers_of(sm_out);
    if (sm_consumers.size() != 1) continue;
    const Node* sv = sm_consumers[0];
    if (sv->kind != NodeKind::MatMul || used.count(sv->id)) continue;
    if (sv->inputs.size() != 2 || sv->inputs[0] != sm_out) continue;
    if (sv->attr_bool("transpose_a") || sv->attr_bool("transpose_b")) continue;
    const TensorDesc& vd = g.tensor(sv->inputs[1]);
    if (vd.rank() < 2 || vd.rows() != qk->lk) continue;
    if (vd.leading() != qk->kv_heads) continue;
    chain.push_back(sv->id);

    AttentionMatch m;
    m.q = qk->q;
    m.k = qk->k;
    m.v = sv->inputs[1];
    detail::bind_bias_mask(g, add_operands, m.bias, m.mask);
    m.chain = chain;
    if (qk->k_transpose_node) m.k_transpose_nodes.push_back(*qk->k_transpose_node);
    m.head_chains = {HeadChainRef{m.q, m.k, m.v, m.bias, m.mask, sm_out, sv->outputs[0]}};
    m.sv_nodes = {sv->id};
    m.num_q_heads = qk->q_heads;
    m.num_kv_heads = qk->kv_heads;
    if (m.num_kv_heads < 1 || m.num_q_heads % m.num_kv_heads != 0) continue;
    m.variant = classify_variant(m.num_q_heads, m.num_kv_heads);
    m.k_needs_transpose = qk->k_needs_transpose;
    m.shape.heads = m.num_q_heads;
    m.shape.kv_heads = m.num_kv_heads;
    m.shape.lq = qk->lq;
    m.shape.lk = qk->lk;
    m.shape.d = qk->d;
    m.shape.d_v = vd.cols();
    m.shape.has_bias = m.bias.has_value();
    m.shape.has_mask = m.mask.has_value();

    for (const auto& id : m.chain) used.insert(id);
    for (const auto& id : m.k_transpose_nodes) used.insert(id);
    out.push_back(std::move(m));
  }
  return out;
}

namespace detail {

inline void append_unique(std::vector<std::string>& dst, const std::vector<std::string>& src) {
  for (const auto& s : src)
    if (std::find(dst.begin(), dst.end(), s) == dst.end()) dst.push_back(s);
}

}  // namespace detail

/// Merges matches with identical per-head shapes and optional-operand
/// structure into batched matches. Chains sharing K/V tensors collapse into
/// grouped KV heads; the merged chain records the union of all per-head node
/// ids so every individual head's nodes can be removed in one rewrite.
inline std::vector<AttentionMatch> batch_heads(const Graph& g,
                                               const std::vector<AttentionMatch>& matches) {
  using Key = std::tuple<std::int64_t, std::int64_t, std::int64_t, std::int64_t, bool, bool, bool,
                         std::int64_t, std::int64_t>;
  std::map<Key, std::size_t> groups;
  std::vector<std::vector<const AttentionMatch*>> grouped;

  for (const AttentionMatch& m : matches) {
    const Key key{m.shape.lq, m.shape.lk, m.shape.d, m.shape.d_v,
                  m.bias.has_value(), m.mask.has_value(), m.k_needs_transpose,
                  m.num_q_heads, m.num_kv_heads};
    auto it = groups.find(key);
    if (it == groups.end()) {
      groups.emplace(key, grouped.size());
      grouped.push_back({&m});
    } else {
      grouped[it->second].push_back(&m);
    }
  }

  std::vector<AttentionMatch> out;
  for (const auto& group : grouped) {
    AttentionMatch b = *group.front();
    for (std::size_t i = 1; i < group.size(); ++i) {
      const AttentionMatch& m = *group[i];
      b.num_q_heads += m.num_q_heads;
      b.head_chains.insert(b.head_chains.end(), m.head_chains.begin(), m.head_chains.end());
      detail::append_unique(b.sv_nodes, m.sv_nodes);
      detail::append_unique(b.chain, m.chain);
      detail::append_unique(b.k_transpose_nodes, m.k_transpose_nodes);
    }

    // Chains sharing a K tensor form one KV-head group. The executors map
    // query head h to KV head h / group_size, so the merged chains must be
    // grouped by K and every K must serve the same number of chains.
    std::vector<std::string> k_order;
    std::map<std::string, std::int64_t> share;
    for (const HeadChainRef& hc : b.head_chains) {
      if (std::find(k_order.begin(), k_order.end(), hc.k) == k_order.end())
        k_order.push_back(hc.k);
      ++share[hc.k];
    }
    bool uniform = true;
    for (const auto& [kid, cnt] : share)
      if (cnt != share.at(k_order.front())) uniform = false;

    const std::int64_t per_match_kv = group.front()->num_kv_heads;
    const std::int64_t kv = static_cast<std::int64_t>(k_order.size()) * per_match_kv;
    if (uniform && kv >= 1 && b.num_q_heads % kv == 0) {
      std::stable_sort(b.head_chains.begin(), b.head_chains.end(),
                       [&](const HeadChainRef& x, const HeadChainRef& y) {
                         return std::find(k_order.begin(), k_order.end(), x.k) <
                                std::find(k_order.begin(), k_order.end(), y.k);
                       });
      b.num_kv_heads = kv;
      b.variant = classify_variant(b.num_q_heads, b.num_kv_heads);
      b.shape.heads = b.num_q_heads;
      b.shape.kv_heads = b.num_kv_heads;
      std::sort(b.chain.begin(), b.chain.end(), [&](const std::string& a, const std::string& c) {
        return g.topo_index(a) < g.topo_index(c);
      });
      out.push_back(std::move(b));
    } else {
      // Merging would break the head-grouping invariant; keep the group's
      // matches unbatched (batch_heads must not fail).
      for (const AttentionMatch* m : group) out.push_back(*m);
    }
  }
  return out;
}

/// Rewrites the graph, replacing a matched chain with one FoldedAttention
/// node. At level 3 the node consumes {Q, K, V, B?, M?} and produces Z; at
/// level 2 the final SM*V MatMul stays behind and the folded node produces
/// the softmax output feeding it. Explicit K-Transpose nodes are absorbed.
inline Graph fold_attention(const Graph& g, const AttentionMatch& m, const FoldingPlan& plan) {
  if (plan.folding_level < 2)
    throw ValidationError("fold_attention: plan folding_level must be >= 2");
  const AttnShape& ps = plan.logical_shape;
  if (ps.lq != m.shape.lq || ps.lk != m.shape.lk || ps.d != m.shape.d ||
      ps.d_v != m.shape.d_v || ps.has_bias != m.shape.has_bias ||
      ps.has_mask != m.shape.has_mask || ps.heads != m.shape.heads)
    throw ValidationError("fold_attention: plan is inconsistent with the match's shapes");

  std::unordered_set<std::string> removed_nodes(m.chain.begin(), m.chain.end());
  for (const auto& id : m.k_transpose_nodes) removed_nodes.insert(id);
  if (plan.folding_level == 2)
    for (const auto& id : m.sv_nodes) removed_nodes.erase(id);

  for (const auto& id : removed_nodes) g.node(id);  // must exist in this graph

  // Tensors that live entirely inside the removed region disappear.
  std::unordered_set<std::string> folded_outputs;
  const auto out_ids = plan.folding_level == 3 ? m.z_ids() : m.sm_ids();
  for (const auto& id : out_ids) folded_outputs.insert(id);

  std::unordered_set<std::string> dead_tensors;
  for (const auto& nid : removed_nodes) {
    for (const auto& tid : g.node(nid).outputs) {
      if (folded_outputs.count(tid)) continue;
      bool external = false;
      for (const Node* c : g.consumers_of(tid))
        if (!removed_nodes.count(c->id)) external = true;
      if (!external) dead_tensors.insert(tid);
    }
  }

  Node folded;
  folded.kind = NodeKind::FoldedAttention;
  folded.id = "folded_" + m.chain.front();
  for (const auto& id : m.q_ids()) folded.inputs.push_back(id);
  for (const auto& id : m.k_ids()) folded.inputs.push_back(id);
  if (plan.folding_level == 3)
    for (const auto& id : m.v_ids()) folded.inputs.push_back(id);
  for (const auto& id : m.bias_ids()) folded.inputs.push_back(id);
  for (const auto& id : m.mask_ids()) folded.inputs.push_back(id);
  folded.outputs = out_ids;
  folded.attrs["folding_level"] = plan.folding_level;
  folded.attrs["num_q_heads"] = m.num_q_heads;
  folded.attrs["num_kv_heads"] = m.num_kv_heads;
  folded.attrs["variant"] = to_string(m.variant);
  folded.attrs["k_needs_transpose"] = m.k_needs_transpose;
  folded.attrs["head_chains"] = nlohmann::json::array();
  for (const HeadChainRef& hc : m.head_chains) {
    nlohmann::json jc{{"q", hc.q}, {"k", hc.k}, {"v", hc.v},
                      {"out", plan.folding_level == 3 ? hc.z : hc.sm}};
    if (hc.bias) jc["bias"] = *hc.bias;
    if (hc.mask) jc["mask"] = *hc.mask;
    folded.attrs["head_chains"].push_back(std::move(jc));
  }

  Graph rewritten;
  for (const TensorDesc& t : g.tensors())
    if (!dead_tensors.count(t.id)) rewritten.add_tensor(t);
  bool inserted = false;
  for (const Node& n : g.nodes()) {
    if (removed_nodes.count(n.id)) {
      if (!inserted) {
        rewritten.add_node(folded);
        inserted = true;
      }
      continue;
    }
    rewritten.add_node(n);
  }
  if (!inserted) rewritten.add_node(folded);
  rewritten.validate();
  return rewritten;
}

}  // namespace attnfold
