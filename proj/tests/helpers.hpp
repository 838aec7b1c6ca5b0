// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit and acceptance suites: programmatic graph
// builders plus independently coded oracles (naive attention, brute-force
// tiling scan). The oracles deliberately avoid the library code paths they
// check.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnfold/attnfold.hpp"

namespace testutil {

using namespace attnfold;

// ---- graph builders --------------------------------------------------------

enum class QkForm { TransposeNode, TransposeAttr, TransposedMatMul, PreTransposed };

struct ChainSpec {
  std::int64_t lq = 8, lk = 8, d = 8, d_v = 8;
  QkForm qk = QkForm::TransposeNode;
  std::optional<std::string> bias_id;  // shared tensor id; declared by caller
  std::optional<std::string> mask_id;

  ChainSpec() = default;
  ChainSpec(std::int64_t lq_, std::int64_t lk_, std::int64_t d_, std::int64_t dv_,
            QkForm qk_ = QkForm::TransposeNode,
            std::optional<std::string> bias = std::nullopt,
            std::optional<std::string> mask = std::nullopt)
      : lq(lq_), lk(lk_), d(d_), d_v(dv_), qk(qk_),
        bias_id(std::move(bias)), mask_id(std::move(mask)) {}
};

/// Appends one per-head attention chain (mirrors the shipped sample layout).
inline void add_chain(Graph& g, int i, const ChainSpec& c,
                      const std::optional<std::string>& shared_k = std::nullopt,
                      const std::optional<std::string>& shared_v = std::nullopt) {
  const std::string sfx = std::to_string(i);
  const std::string q = "q" + sfx;
  const std::string k = shared_k.value_or("k" + sfx);
  const std::string v = shared_v.value_or("v" + sfx);
  g.add_tensor({q, {c.lq, c.d}, TensorRole::Q});
  if (!shared_k) {
    if (c.qk == QkForm::PreTransposed)
      g.add_tensor({k, {c.d, c.lk}, TensorRole::K});
    else
      g.add_tensor({k, {c.lk, c.d}, TensorRole::K});
  }
  if (!shared_v) g.add_tensor({v, {c.lk, c.d_v}, TensorRole::V});

  const std::string s = "s" + sfx;
  g.add_tensor({s, {c.lq, c.lk}, TensorRole::Intermediate});
  switch (c.qk) {
    case QkForm::TransposeNode: {
      const std::string kt = "k" + sfx + "_t";
      g.add_tensor({kt, {c.d, c.lk}, TensorRole::Intermediate});
      Node t{"transpose_k" + sfx, NodeKind::Transpose, {k}, {kt}, {}};
      t.attrs = nlohmann::json{{"perm", {1, 0}}};
      g.add_node(std::move(t));
      g.add_node({"scores" + sfx, NodeKind::MatMul, {q, kt}, {s}, {}});
      break;
    }
    case QkForm::TransposeAttr: {
      Node n{"scores" + sfx, NodeKind::MatMul, {q, k}, {s}, {}};
      n.attrs = nlohmann::json{{"transpose_b", true}};
      g.add_node(std::move(n));
      break;
    }
    case QkForm::TransposedMatMul:
      g.add_node({"scores" + sfx, NodeKind::TransposedMatMul, {q, k}, {s}, {}});
      break;
    case QkForm::PreTransposed:
      g.add_node({"scores" + sfx, NodeKind::MatMul, {q, k}, {s}, {}});
      break;
  }

  std::string cur = s;
  if (c.bias_id) {
    const std::string nxt = s + "_b";
    g.add_tensor({nxt, {c.lq, c.lk}, TensorRole::Intermediate});
    g.add_node({"add_bias" + sfx, NodeKind::Add, {cur, *c.bias_id}, {nxt}, {}});
    cur = nxt;
  }
  if (c.mask_id) {
    const std::string nxt = s + "_m";
    g.add_tensor({nxt, {c.lq, c.lk}, TensorRole::Intermediate});
    g.add_node({"add_mask" + sfx, NodeKind::Add, {cur, *c.mask_id}, {nxt}, {}});
    cur = nxt;
  }

  const std::string sm = "sm" + sfx, z = "z" + sfx;
  g.add_tensor({sm, {c.lq, c.lk}, TensorRole::Intermediate});
  g.add_tensor({z, {c.lq, c.d_v}, TensorRole::Output});
  g.add_node({"softmax" + sfx, NodeKind::SoftMax, {cur}, {sm}, {}});
  g.add_node({"context" + sfx, NodeKind::MatMul, {sm, v}, {z}, {}});
}

/// n_heads identical per-head chains, optionally with a shared mask/bias.
inline Graph make_mha_graph(int n_heads, ChainSpec c, bool shared_mask = false,
                            bool shared_bias = false) {
  Graph g;
  if (shared_bias) {
    g.add_tensor({"attn_bias", {c.lq, c.lk}, TensorRole::Bias});
    c.bias_id = "attn_bias";
  }
  if (shared_mask) {
    g.add_tensor({"attn_mask", {c.lq, c.lk}, TensorRole::Mask});
    c.mask_id = "attn_mask";
  }
  for (int i = 0; i < n_heads; ++i) add_chain(g, i, c);
  g.validate();
  return g;
}

// ---- independent numeric oracle -------------------------------------------

/// Naive second implementation of the attention operator: explicit loops,
/// normalized weights before the value contraction (a different summation
/// order than the library's reference).
inline Matrix naive_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                              const Matrix* bias = nullptr, const Matrix* mask = nullptr) {
  const std::int64_t lq = q.rows(), lk = k.rows(), d = q.cols(), dv = v.cols();
  Matrix z(lq, dv);
  for (std::int64_t i = 0; i < lq; ++i) {
    std::vector<double> row(static_cast<std::size_t>(lk));
    for (std::int64_t j = 0; j < lk; ++j) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < d; ++t) acc += q(i, t) * k(j, t);
      if (bias != nullptr) acc += (*bias)(i, j);
      if (mask != nullptr) acc += (*mask)(i, j);
      row[static_cast<std::size_t>(j)] = acc;
    }
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double denom = 0.0;
    for (double& x : row) {
      x = std::exp(x - mx);
      denom += x;
    }
    for (double& x : row) x /= denom;
    for (std::int64_t c = 0; c < dv; ++c) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < lk; ++j) acc += row[static_cast<std::size_t>(j)] * v(j, c);
      z(i, c) = acc;
    }
  }
  return z;
}

// ---- independent tiler oracle ----------------------------------------------

/// Spreadsheet-style recomputation of the L1 footprint from its documented
/// definition, written without the library helpers.
inline std::int64_t oracle_footprint(std::int64_t qr, std::int64_t kr, std::int64_t d,
                                     std::int64_t dv, std::int64_t lk, int level, bool has_b,
                                     bool has_m, std::int64_t elem, int buffers = 2) {
  const bool k_streams = kr < lk;
  const std::int64_t fq = k_streams ? 1 : buffers;
  const std::int64_t fk = k_streams ? buffers : 1;
  std::int64_t elems = 0;
  elems += qr * d * fq;                          // S_q
  elems += kr * d * fk;                          // S_k
  if (level == 3) elems += kr * dv * fk;         // S_v
  elems += qr * kr;                              // score tile
  if (level == 3) elems += qr * dv;              // output accumulator
  if (has_b) elems += qr * kr * buffers;         // S_b
  if (has_m) elems += qr * kr * buffers;         // S_m
  elems += qr + qr;                              // running max + running sum
  return elems * elem;
}

struct OraclePlan {
  int level = 1;
  std::int64_t q_rows = 0, k_rows = 0;
};

/// Brute-force feasibility scan in the documented candidate order: q_rows
/// descending, then k_rows descending; level 3 first, then level 2.
inline OraclePlan oracle_select(std::int64_t lq, std::int64_t lk, std::int64_t d,
                                std::int64_t dv, bool has_b, bool has_m, std::int64_t l1,
                                std::int64_t elem, std::int64_t granule = 8) {
  for (int level : {3, 2}) {
    for (std::int64_t qr = lq; qr >= granule; --qr) {
      if (qr % granule != 0 || lq % qr != 0) continue;
      for (std::int64_t kr = lk; kr >= granule; --kr) {
        if (kr % granule != 0 || lk % kr != 0) continue;
        if (oracle_footprint(qr, kr, d, dv, lk, level, has_b, has_m, elem) <= l1)
          return {level, qr, kr};
      }
    }
  }
  return {1, 0, 0};
}

// ---- executor fixtures -------------------------------------------------------

inline AttnShape make_shape(std::int64_t lq, std::int64_t lk, std::int64_t d, std::int64_t dv,
                            bool bias = false, bool mask = false, std::int64_t heads = 1,
                            std::int64_t kv_heads = 0) {
  AttnShape s;
  s.heads = heads;
  s.kv_heads = kv_heads == 0 ? heads : kv_heads;
  s.lq = lq;
  s.lk = lk;
  s.d = d;
  s.d_v = dv;
  s.has_bias = bias;
  s.has_mask = mask;
  return s;
}

inline AttnInputs random_attn_inputs(const AttnShape& s, std::uint64_t seed) {
  AttnInputs in;
  SplitMix64 rng(seed);
  for (std::int64_t h = 0; h < s.heads; ++h) {
    Matrix q(s.lq, s.d);
    fill_uniform(q, rng.next());
    in.q.push_back(std::move(q));
  }
  for (std::int64_t h = 0; h < s.kv_heads; ++h) {
    Matrix k(s.lk, s.d), v(s.lk, s.d_v);
    fill_uniform(k, rng.next());
    fill_uniform(v, rng.next());
    in.k.push_back(std::move(k));
    in.v.push_back(std::move(v));
  }
  if (s.has_bias) {
    Matrix b(s.lq, s.lk);
    fill_uniform(b, rng.next());
    in.bias.push_back(std::move(b));
  }
  if (s.has_mask) {
    Matrix m(s.lq, s.lk);
    fill_uniform(m, rng.next());
    in.mask.push_back(std::move(m));
  }
  return in;
}

/// First feasible plan at a FIXED folding level (mirrors select_tiling's
/// scan order); lets tests pin level 2 and level 3 on the same shape.
inline std::optional<FoldingPlan> plan_at_level(const AttnShape& s, const NpuConfig& cfg,
                                                int level) {
  const KernelGranularity gran;
  for (const Subvolumes& sv : enumerate_tilings(s, gran)) {
    const std::int64_t fp = l1_footprint(sv, level, cfg, s.has_bias, s.has_mask);
    if (fp > cfg.l1_bytes) continue;
    FoldingPlan p;
    p.folding_level = level;
    p.subvolumes = sv;
    SpatialStrategy st;
    if (sv.k_rows == s.lk) {
      st.mode = SpatialStrategy::Mode::KvPinned;
      st.q_unroll_rows = std::min<std::int64_t>(cfg.rows, s.lq / sv.q_rows);
      st.head_unroll_cols = std::min<std::int64_t>(cfg.cols, s.heads);
    } else {
      st.mode = SpatialStrategy::Mode::KvSplit;
      st.reduce_cols = std::min<std::int64_t>(cfg.cols, s.lk / sv.k_rows);
      st.heads_temporal = true;
    }
    p.strategy = st;
    p.l1_footprint_bytes = fp;
    p.shape = s;
    p.logical_shape = s;
    return p;
  }
  return std::nullopt;
}

/// Worst per-head deviation of executor outputs from the dense reference;
/// pass a crop plan when the outputs carry padding.
inline double max_err_vs_reference(const AttnShape& logical, const std::vector<Matrix>& z,
                                   const AttnInputs& in, const PadPlan* crop = nullptr) {
  const std::int64_t group = logical.heads / logical.kv_heads;
  double err = 0.0;
  for (std::int64_t h = 0; h < logical.heads; ++h) {
    const Matrix ref = reference_attention(
        in.q[static_cast<std::size_t>(h)], in.k[static_cast<std::size_t>(h / group)],
        in.v[static_cast<std::size_t>(h / group)], detail::pick(in.bias, h),
        detail::pick(in.mask, h));
    const Matrix zh = crop != nullptr ? apply_depad(z[static_cast<std::size_t>(h)], *crop)
                                      : z[static_cast<std::size_t>(h)];
    err = std::max(err, max_abs_diff(zh, ref));
  }
  return err;
}

// ---- misc -------------------------------------------------------------------

/// Distance in units-in-the-last-place between two doubles.
inline std::uint64_t ulp_diff(double a, double b) {
  if (a == b) return 0;
  auto key = [](double x) {
    const std::uint64_t u = std::bit_cast<std::uint64_t>(x);
    return (u >> 63) ? (0x8000000000000000ull - u) : (u + 0x8000000000000000ull);
  };
  const std::uint64_t ka = key(a), kb = key(b);
  return ka > kb ? ka - kb : kb - ka;
}

inline Matrix random_matrix(std::int64_t r, std::int64_t c, std::uint64_t seed) {
  Matrix m(r, c);
  fill_uniform(m, seed);
  return m;
}

}  // namespace testutil
