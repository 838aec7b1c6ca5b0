// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "attnfold/errors.hpp"

namespace attnfold {

enum class TensorRole { Q, K, V, Bias, Mask, Intermediate, Output, Other };
enum class NodeKind {
  MatMul,
  TransposedMatMul,
  Add,
  SoftMax,
  Transpose,
  Pad,
  FoldedAttention,
  Opaque
};

inline const char* to_string(TensorRole r) {
  switch (r) {
    case TensorRole::Q: return "Q";
    case TensorRole::K: return "K";
    case TensorRole::V: return "V";
    case TensorRole::Bias: return "Bias";
    case TensorRole::Mask: return "Mask";
    case TensorRole::Intermediate: return "Intermediate";
    case TensorRole::Output: return "Output";
    case TensorRole::Other: return "Other";
  }
  return "Other";
}

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::MatMul: return "MatMul";
    case NodeKind::TransposedMatMul: return "TransposedMatMul";
    case NodeKind::Add: return "Add";
    case NodeKind::SoftMax: return "SoftMax";
    case NodeKind::Transpose: return "Transpose";
    case NodeKind::Pad: return "Pad";
    case NodeKind::FoldedAttention: return "FoldedAttention";
    case NodeKind::Opaque: return "Opaque";
  }
  return "Opaque";
}

inline TensorRole tensor_role_from_string(const std::string& s) {
  if (s == "Q") return TensorRole::Q;
  if (s == "K") return TensorRole::K;
  if (s == "V") return TensorRole::V;
  if (s == "Bias") return TensorRole::Bias;
  if (s == "Mask") return TensorRole::Mask;
  if (s == "Intermediate") return TensorRole::Intermediate;
  if (s == "Output") return TensorRole::Output;
  if (s == "Other") return TensorRole::Other;
  throw ValidationError("unknown tensor role '" + s + "'");
}

inline NodeKind node_kind_from_string(const std::string& s) {
  if (s == "MatMul") return NodeKind::MatMul;
  if (s == "TransposedMatMul") return NodeKind::TransposedMatMul;
  if (s == "Add") return NodeKind::Add;
  if (s == "SoftMax") return NodeKind::SoftMax;
  if (s == "Transpose") return NodeKind::Transpose;
  if (s == "Pad") return NodeKind::Pad;
  if (s == "FoldedAttention") return NodeKind::FoldedAttention;
  if (s == "Opaque") return NodeKind::Opaque;
  throw ValidationError("unknown node kind '" + s + "'");
}

struct TensorDesc {
  std::string id;
  std::vector<std::int64_t> dims;
  TensorRole role = TensorRole::Other;

  std::int64_t rank() const { return static_cast<std::int64_t>(dims.size()); }
  std::int64_t dim(std::int64_t i) const { return dims[static_cast<std::size_t>(i)]; }
  /// Second-to-last extent.
  std::int64_t rows() const { return dims[dims.size() - 2]; }
  /// Last extent.
  std::int64_t cols() const { return dims.back(); }
  /// Product of all extents before the trailing two.
  std::int64_t leading() const {
    std::int64_t p = 1;
    for (std::size_t i = 0; i + 2 < dims.size(); ++i) p *= dims[i];
    return p;
  }
};

struct Node {
  std::string id;
  NodeKind kind = NodeKind::Opaque;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  nlohmann::json attrs = nlohmann::json::object();

  bool attr_bool(const std::string& key, bool def = false) const {
    return attrs.is_object() ? attrs.value(key, def) : def;
  }
  std::int64_t attr_int(const std::string& key, std::int64_t def) const {
    return attrs.is_object() ? attrs.value(key, def) : def;
  }
};

namespace detail {

// numpy-style broadcast of leading (batch) dimensions, aligned right.
inline std::vector<std::int64_t> broadcast_leading(const std::vector<std::int64_t>& a,
                                                   const std::vector<std::int64_t>& b,
                                                   const std::string& where) {
  std::vector<std::int64_t> out(std::max(a.size(), b.size()), 1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::int64_t av = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::int64_t bv = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (av != bv && av != 1 && bv != 1)
      throw ValidationError(where + ": leading dimensions " + std::to_string(av) + " and " +
                            std::to_string(bv) + " do not broadcast");
    out[out.size() - 1 - i] = std::max(av, bv);
  }
  return out;
}

inline std::vector<std::int64_t> leading_of(const std::vector<std::int64_t>& dims) {
  return {dims.begin(), dims.end() - 2};
}

}  // namespace detail

/// Operator graph over named tensors. Immutable value after parse; rewrites
/// produce new graphs. Nodes are kept in topological order (validate()
/// establishes it).
class Graph {
 public:
  void add_tensor(TensorDesc t) {
    if (tensor_index_.count(t.id))
      throw ValidationError("tensor '" + t.id + "' declared twice");
    tensor_index_[t.id] = tensors_.size();
    tensors_.push_back(std::move(t));
  }

  void add_node(Node n) {
    if (node_index_.count(n.id)) throw ValidationError("node '" + n.id + "' declared twice");
    node_index_[n.id] = nodes_.size();
    nodes_.push_back(std::move(n));
  }

  const std::vector<TensorDesc>& tensors() const { return tensors_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  bool has_tensor(const std::string& id) const { return tensor_index_.count(id) != 0; }

  const TensorDesc& tensor(const std::string& id) const {
    auto it = tensor_index_.find(id);
    if (it == tensor_index_.end()) throw ValidationError("unknown tensor '" + id + "'");
    return tensors_[it->second];
  }

  const Node& node(const std::string& id) const {
    auto it = node_index_.find(id);
    if (it == node_index_.end()) throw ValidationError("unknown node '" + id + "'");
    return nodes_[it->second];
  }

  /// Node producing `tensor_id`, or nullptr for graph inputs.
  const Node* producer_of(const std::string& tensor_id) const {
    auto it = producer_.find(tensor_id);
    return it == producer_.end() ? nullptr : &nodes_[it->second];
  }

  std::vector<const Node*> consumers_of(const std::string& tensor_id) const {
    std::vector<const Node*> out;
    auto range = consumers_.equal_range(tensor_id);
    for (auto it = range.first; it != range.second; ++it) out.push_back(&nodes_[it->second]);
    return out;
  }

  /// Position of a node in the established topological order.
  std::size_t topo_index(const std::string& node_id) const {
    auto it = node_index_.find(node_id);
    if (it == node_index_.end()) throw ValidationError("unknown node '" + node_id + "'");
    return it->second;
  }

  /// Checks referential integrity, single-producer rule, acyclicity and
  /// per-kind shape compatibility; reorders nodes topologically (stable).
  void validate() {
    producer_.clear();
    consumers_.clear();

    for (std::size_t ni = 0; ni < nodes_.size(); ++ni) {
      const Node& n = nodes_[ni];
      if (n.outputs.empty())
        throw ValidationError("node '" + n.id + "': must produce at least one tensor");
      for (const auto& tid : n.inputs)
        if (!tensor_index_.count(tid))
          throw ValidationError("node '" + n.id + "': input tensor '" + tid + "' is not declared");
      for (const auto& tid : n.outputs) {
        if (!tensor_index_.count(tid))
          throw ValidationError("node '" + n.id + "': output tensor '" + tid + "' is not declared");
        if (producer_.count(tid))
          throw ValidationError("tensor '" + tid + "' has more than one producer (node '" +
                                n.id + "')");
        producer_[tid] = ni;
      }
    }
    for (std::size_t ni = 0; ni < nodes_.size(); ++ni)
      for (const auto& tid : nodes_[ni].inputs) consumers_.emplace(tid, ni);

    toposort();
    for (const Node& n : nodes_) check_node_shapes(n);

    for (const TensorDesc& t : tensors_) {
      if (t.dims.empty()) throw ValidationError("tensor '" + t.id + "': rank must be >= 1");
      for (std::int64_t d : t.dims)
        if (d < 1)
          throw ValidationError("tensor '" + t.id + "': all extents must be >= 1");
    }
  }

  /// Output shape a node must produce given its input shapes; also performs
  /// the per-kind compatibility checks.
  std::vector<std::int64_t> infer_output_dims(const Node& n) const {
    auto need_inputs = [&](std::size_t c) {
      if (n.inputs.size() != c)
        throw ValidationError("node '" + n.id + "': expected " + std::to_string(c) +
                              " inputs, got " + std::to_string(n.inputs.size()));
    };
    auto matmul_operand = [&](const std::string& tid) -> const TensorDesc& {
      const TensorDesc& t = tensor(tid);
      if (t.rank() < 2)
        throw ValidationError("node '" + n.id + "': matmul operand '" + tid +
                              "' must have rank >= 2");
      return t;
    };

    switch (n.kind) {
      case NodeKind::MatMul:
      case NodeKind::TransposedMatMul: {
        need_inputs(2);
        const TensorDesc& a = matmul_operand(n.inputs[0]);
        const TensorDesc& b = matmul_operand(n.inputs[1]);
        std::int64_t am = a.rows(), ak = a.cols();
        if (n.attr_bool("transpose_a")) std::swap(am, ak);
        std::int64_t bk = b.rows(), bn = b.cols();
        const bool tb = n.kind == NodeKind::TransposedMatMul || n.attr_bool("transpose_b");
        if (tb) std::swap(bk, bn);
        if (ak != bk)
          throw ValidationError("node '" + n.id + "': inner dimensions " + std::to_string(ak) +
                                " and " + std::to_string(bk) + " do not match");
        auto out = detail::broadcast_leading(detail::leading_of(a.dims),
                                             detail::leading_of(b.dims), "node '" + n.id + "'");
        out.push_back(am);
        out.push_back(bn);
        return out;
      }
      case NodeKind::Add: {
        need_inputs(2);
        const TensorDesc& a = tensor(n.inputs[0]);
        const TensorDesc& b = tensor(n.inputs[1]);
        if (a.rank() < 2 || b.rank() < 2)
          throw ValidationError("node '" + n.id + "': Add operands must have rank >= 2");
        if (a.rows() != b.rows() || a.cols() != b.cols())
          throw ValidationError("node '" + n.id + "': Add operand shapes do not match");
        auto out = detail::broadcast_leading(detail::leading_of(a.dims),
                                             detail::leading_of(b.dims), "node '" + n.id + "'");
        out.push_back(a.rows());
        out.push_back(a.cols());
        return out;
      }
      case NodeKind::SoftMax: {
        need_inputs(1);
        return tensor(n.inputs[0]).dims;
      }
      case NodeKind::Transpose: {
        need_inputs(1);
        const TensorDesc& a = tensor(n.inputs[0]);
        std::vector<std::int64_t> perm;
        if (n.attrs.is_object() && n.attrs.contains("perm")) {
          perm = n.attrs.at("perm").get<std::vector<std::int64_t>>();
        } else {
          for (std::int64_t i = 0; i < a.rank(); ++i) perm.push_back(i);
          if (a.rank() >= 2) std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
        }
        if (static_cast<std::int64_t>(perm.size()) != a.rank())
          throw ValidationError("node '" + n.id + "': perm length must equal input rank");
        std::vector<std::int64_t> out;
        std::vector<bool> seen(perm.size(), false);
        for (std::int64_t p : perm) {
          if (p < 0 || p >= a.rank() || seen[static_cast<std::size_t>(p)])
            throw ValidationError("node '" + n.id + "': perm is not a permutation");
          seen[static_cast<std::size_t>(p)] = true;
          out.push_back(a.dim(p));
        }
        return out;
      }
      case NodeKind::Pad: {
        need_inputs(1);
        const TensorDesc& a = tensor(n.inputs[0]);
        auto pads = n.attrs.is_object() && n.attrs.contains("pads")
                        ? n.attrs.at("pads").get<std::vector<std::int64_t>>()
                        : std::vector<std::int64_t>(a.dims.size(), 0);
        if (pads.size() != a.dims.size())
          throw ValidationError("node '" + n.id + "': pads length must equal input rank");
        std::vector<std::int64_t> out = a.dims;
        for (std::size_t i = 0; i < out.size(); ++i) {
          if (pads[i] < 0) throw ValidationError("node '" + n.id + "': negative pad");
          out[i] += pads[i];
        }
        return out;
      }
      case NodeKind::FoldedAttention: {
        if (n.inputs.size() < 2)
          throw ValidationError("node '" + n.id + "': FoldedAttention needs operand inputs");
        return tensor(n.outputs[0]).dims;  // declared output shapes are authoritative
      }
      case NodeKind::Opaque:
        return tensor(n.outputs[0]).dims;
    }
    return {};
  }

 private:
  void check_node_shapes(const Node& n) {
    if (n.kind == NodeKind::Opaque || n.kind == NodeKind::FoldedAttention) {
      infer_output_dims(n);  // structural checks only
      return;
    }
    const auto expect = infer_output_dims(n);
    if (n.outputs.size() != 1)
      throw ValidationError("node '" + n.id + "': expected exactly 1 output");
    const TensorDesc& out = tensor(n.outputs[0]);
    if (out.dims != expect) {
      throw ValidationError("node '" + n.id + "': output tensor '" + out.id +
                            "' shape does not match the operands");
    }
    if (n.kind == NodeKind::SoftMax) {
      const std::int64_t rank = out.rank();
      std::int64_t axis = n.attr_int("axis", -1);
      if (axis < 0) axis += rank;
      if (axis < 0 || axis >= rank)
        throw ValidationError("node '" + n.id + "': softmax axis out of range");
    }
  }

  // Kahn's algorithm; ties broken by declaration order so parse/serialize
  // round trips are stable.
  void toposort() {
    const std::size_t n = nodes_.size();
    std::vector<std::size_t> indeg(n, 0);
    std::vector<std::vector<std::size_t>> succ(n);
    for (std::size_t ni = 0; ni < n; ++ni) {
      for (const auto& tid : nodes_[ni].inputs) {
        auto it = producer_.find(tid);
        if (it != producer_.end() && it->second != ni) {
          succ[it->second].push_back(ni);
          ++indeg[ni];
        }
      }
    }
    std::vector<std::size_t> ready;
    for (std::size_t i = 0; i < n; ++i)
      if (indeg[i] == 0) ready.push_back(i);
    std::vector<std::size_t> order;
    order.reserve(n);
    while (!ready.empty()) {
      std::sort(ready.begin(), ready.end(), std::greater<>());
      const std::size_t cur = ready.back();
      ready.pop_back();
      order.push_back(cur);
      for (std::size_t s : succ[cur])
        if (--indeg[s] == 0) ready.push_back(s);
    }
    if (order.size() != n) {
      for (std::size_t i = 0; i < n; ++i)
        if (indeg[i] != 0)
          throw ValidationError("cycle detected involving node '" + nodes_[i].id + "'");
    }
    std::vector<Node> sorted;
    sorted.reserve(n);
    for (std::size_t i : order) sorted.push_back(std::move(nodes_[i]));
    nodes_ = std::move(sorted);
    node_index_.clear();
    producer_.clear();
    for (std::size_t i = 0; i < nodes_.size(); ++i) node_index_[nodes_[i].id] = i;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (const auto& tid : nodes_[i].outputs) producer_[tid] = i;
    consumers_.clear();
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (const auto& tid : nodes_[i].inputs) consumers_.emplace(tid, i);
  }

  std::vector<TensorDesc> tensors_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> tensor_index_;
  std::unordered_map<std::string, std::size_t> node_index_;
  std::unordered_map<std::string, std::size_t> producer_;
  std::unordered_multimap<std::string, std::size_t> consumers_;
};

/// Parses the JSON graph document:
///   {"tensors":[{"id","dims","role"?}], "nodes":[{"id","kind","inputs","outputs","attrs"?}]}
inline Graph parse_graph(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("graph document is not valid JSON: ") + e.what());
  }

  Graph g;
  try {
    if (!doc.is_object() || !doc.contains("tensors") || !doc.contains("nodes"))
      throw ValidationError("graph document must be an object with 'tensors' and 'nodes'");
    for (const auto& jt : doc.at("tensors")) {
      TensorDesc t;
      t.id = jt.at("id").get<std::string>();
      t.dims = jt.at("dims").get<std::vector<std::int64_t>>();
      if (jt.contains("role")) t.role = tensor_role_from_string(jt.at("role").get<std::string>());
      g.add_tensor(std::move(t));
    }
    for (const auto& jn : doc.at("nodes")) {
      Node n;
      n.id = jn.at("id").get<std::string>();
      n.kind = node_kind_from_string(jn.at("kind").get<std::string>());
      n.inputs = jn.at("inputs").get<std::vector<std::string>>();
      n.outputs = jn.at("outputs").get<std::vector<std::string>>();
      if (jn.contains("attrs")) n.attrs = jn.at("attrs");
      g.add_node(std::move(n));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("graph schema violation: ") + e.what());
  }
  g.validate();
  return g;
}

/// Deterministic serialization; parse(serialize(g)) is isomorphic to g.
inline std::string serialize(const Graph& g) {
  nlohmann::json doc;
  doc["tensors"] = nlohmann::json::array();
  for (const TensorDesc& t : g.tensors()) {
    nlohmann::json jt{{"id", t.id}, {"dims", t.dims}};
    if (t.role != TensorRole::Other) jt["role"] = to_string(t.role);
    doc["tensors"].push_back(std::move(jt));
  }
  doc["nodes"] = nlohmann::json::array();
  for (const Node& n : g.nodes()) {
    nlohmann::json jn{
        {"id", n.id}, {"kind", to_string(n.kind)}, {"inputs", n.inputs}, {"outputs", n.outputs}};
    if (n.attrs.is_object() && !n.attrs.empty()) jn["attrs"] = n.attrs;
    doc["nodes"].push_back(std::move(jn));
  }
  return doc.dump(2) + "\n";
}

}  // namespace attnfold
