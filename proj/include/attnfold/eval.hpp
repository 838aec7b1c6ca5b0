// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "attnfold/graph.hpp"
#include "attnfold/matcher.hpp"
#include "attnfold/sim.hpp"

namespace attnfold {

/// Tensor values for the node-by-node evaluator: one matrix per leading
/// (head) index, a single matrix for rank-2 tensors.
using TensorValue = std::vector<Matrix>;
using ValueMap = std::map<std::string, TensorValue>;

namespace detail {

inline const Matrix& head_of(const TensorValue& v, std::int64_t h, const std::string& id) {
  if (v.empty()) throw ValidationError("evaluate_graph: tensor '" + id + "' has no value");
  return v[v.size() == 1 ? 0 : static_cast<std::size_t>(h)];
}

}  // namespace detail

/// Executes a graph node by node in double precision. Dense semantics only
/// (no tiling); used to check that rewrites preserve the computation. Opaque
/// nodes cannot be evaluated.
inline ValueMap evaluate_graph(const Graph& g, const ValueMap& inputs) {
  ValueMap values = inputs;

  auto heads_of = [&](const std::string& id) -> std::int64_t {
    return static_cast<std::int64_t>(values.at(id).size());
  };

  for (const Node& n : g.nodes()) {
    switch (n.kind) {
      case NodeKind::MatMul:
      case NodeKind::TransposedMatMul: {
        const auto& av = values.at(n.inputs[0]);
        const auto& bv = values.at(n.inputs[1]);
        const std::int64_t heads = std::max(heads_of(n.inputs[0]), heads_of(n.inputs[1]));
        const bool ta = n.attr_bool("transpose_a");
        const bool tb = n.kind == NodeKind::TransposedMatMul || n.attr_bool("transpose_b");
        TensorValue out;
        for (std::int64_t h = 0; h < heads; ++h) {
          Matrix a = detail::head_of(av, h, n.inputs[0]);
          if (ta) a = transpose(a);
          const Matrix& b = detail::head_of(bv, h, n.inputs[1]);
          out.push_back(tb ? matmul_nt(a, b) : matmul(a, b));
        }
        values[n.outputs[0]] = std::move(out);
        break;
      }
      case NodeKind::Add: {
        const auto& av = values.at(n.inputs[0]);
        const auto& bv = values.at(n.inputs[1]);
        const std::int64_t heads = std::max(heads_of(n.inputs[0]), heads_of(n.inputs[1]));
        TensorValue out;
        for (std::int64_t h = 0; h < heads; ++h) {
          Matrix a = detail::head_of(av, h, n.inputs[0]);
          const Matrix& b = detail::head_of(bv, h, n.inputs[1]);
          if (!a.same_shape(b))
            throw ValidationError("evaluate_graph: Add '" + n.id + "' operand shapes differ");
          for (std::int64_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
          out.push_back(std::move(a));
        }
        values[n.outputs[0]] = std::move(out);
        break;
      }
      case NodeKind::SoftMax: {
        const auto& av = values.at(n.inputs[0]);
        TensorValue out;
        for (const Matrix& a : av) {
          Matrix p(a.rows(), a.cols());
          for (std::int64_t r = 0; r < a.rows(); ++r) {
            double m = -std::numeric_limits<double>::infinity();
            for (std::int64_t c = 0; c < a.cols(); ++c) m = std::max(m, a(r, c));
            double sum = 0.0;
            for (std::int64_t c = 0; c < a.cols(); ++c) {
              p(r, c) = std::exp(a(r, c) - m);
              sum += p(r, c);
            }
            for (std::int64_t c = 0; c < a.cols(); ++c) p(r, c) /= sum;
          }
          out.push_back(std::move(p));
        }
        values[n.outputs[0]] = std::move(out);
        break;
      }
      case NodeKind::Transpose: {
        const auto& av = values.at(n.inputs[0]);
        if (!detail::swaps_trailing_two(g, n))
          throw ValidationError("evaluate_graph: only trailing-two-dim transposes are supported");
        TensorValue out;
        for (const Matrix& a : av) out.push_back(transpose(a));
        values[n.outputs[0]] = std::move(out);
        break;
      }
      case NodeKind::FoldedAttention: {
        if (!n.attrs.contains("head_chains"))
          throw ValidationError("evaluate_graph: FoldedAttention '" + n.id +
                                "' lacks head_chains metadata");
        const bool level3 = n.attr_int("folding_level", 3) == 3;
        const bool k_natural = n.attr_bool("k_needs_transpose", true);
        for (const auto& jc : n.attrs.at("head_chains")) {
          const std::string qid = jc.at("q").get<std::string>();
          const std::string kid = jc.at("k").get<std::string>();
          const std::string vid = jc.at("v").get<std::string>();
          const std::string out_id = jc.at("out").get<std::string>();
          const auto& qv = values.at(qid);
          const auto& kv = values.at(kid);
          TensorValue out;
          const std::int64_t heads = static_cast<std::int64_t>(qv.size());
          for (std::int64_t h = 0; h < heads; ++h) {
            const Matrix& q = qv[static_cast<std::size_t>(h)];
            Matrix k = detail::head_of(kv, std::min<std::int64_t>(h, heads_of(kid) - 1), kid);
            if (!k_natural) k = transpose(k);  // stored (d, Lk)
            const Matrix* bias = nullptr;
            const Matrix* mask = nullptr;
            Matrix bias_m, mask_m;
            if (jc.contains("bias")) {
              bias_m = detail::head_of(values.at(jc.at("bias").get<std::string>()),
                                       h, jc.at("bias").get<std::string>());
              bias = &bias_m;
            }
            if (jc.contains("mask")) {
              mask_m = detail::head_of(values.at(jc.at("mask").get<std::string>()),
                                       h, jc.at("mask").get<std::string>());
              mask = &mask_m;
            }
            if (level3) {
              const Matrix& v = detail::head_of(values.at(vid),
                                                std::min<std::int64_t>(h, heads_of(vid) - 1), vid);
              out.push_back(reference_attention(q, k, v, bias, mask));
            } else {
              // Softmax output only; the retained SM*V MatMul consumes it.
              Matrix s = matmul_nt(q, k);
              if (bias != nullptr)
                for (std::int64_t i = 0; i < s.size(); ++i) s.data()[i] += bias->data()[i];
              if (mask != nullptr)
                for (std::int64_t i = 0; i < s.size(); ++i) s.data()[i] += mask->data()[i];
              Matrix p(s.rows(), s.cols());
              for (std::int64_t r = 0; r < s.rows(); ++r) {
                double m = -std::numeric_limits<double>::infinity();
                for (std::int64_t c = 0; c < s.cols(); ++c) m = std::max(m, s(r, c));
                double sum = 0.0;
                for (std::int64_t c = 0; c < s.cols(); ++c) {
                  p(r, c) = std::exp(s(r, c) - m);
                  sum += p(r, c);
                }
                for (std::int64_t c = 0; c < s.cols(); ++c) p(r, c) /= sum;
              }
              out.push_back(std::move(p));
            }
          }
          values[out_id] = std::move(out);
        }
        break;
      }
      case NodeKind::Pad:
        throw ValidationError("evaluate_graph: Pad nodes are not executable (padding is planned)");
      case NodeKind::Opaque:
        throw ValidationError("evaluate_graph: cannot evaluate Opaque node '" + n.id + "'");
    }
  }
  return values;
}

}  // namespace attnfold
