// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attnfold/dense.hpp"
#include "attnfold/tiler.hpp"
#include "attnfold/transforms.hpp"

namespace attnfold {

// All simulator numerics run in double precision regardless of the modeled
// element width; elem_bytes affects only traffic and footprint accounting.
//
// Traffic accounting rules:
//  - Operand and block-output bytes are billed at LOGICAL extents (the read
//    DMA inserts padding on the L2->L1 path, and depad crops the output).
//  - Intermediate tensors (scores, softmax output) are billed at PADDED
//    extents; they live between kernels and are never depadded.
//  - Within one fused pass, the first touch of a (tensor, tile) is a DRAM
//    access; re-touches are served from L2 and billed there. Unfolded
//    execution starts a new pass per operator, so every intermediate makes a
//    full DRAM round trip.

enum class MemLevel { Dram, L2, L1 };

inline const char* to_string(MemLevel l) {
  switch (l) {
    case MemLevel::Dram: return "DRAM";
    case MemLevel::L2: return "L2";
    case MemLevel::L1: return "L1";
  }
  return "DRAM";
}

struct MemAccess {
  MemLevel level = MemLevel::Dram;
  TensorRole role = TensorRole::Other;
  std::string tensor;  // short tag: Q, K, V, B, M, A, SM, Z, stats
  std::int64_t bytes = 0;
};

/// One tile-level action on one core.
struct Step {
  std::int64_t core_row = 0;
  std::int64_t core_col = 0;
  std::string op;
  std::int64_t head = 0;
  std::int64_t q_tile = -1;
  std::int64_t k_tile = -1;
  std::int64_t ops = 0;  ///< MACs (counted as 2*M*K*N) + softmax/add element ops
  std::vector<MemAccess> reads;
  std::vector<MemAccess> writes;
};

struct Schedule {
  int folding_level = 1;
  std::optional<FoldingPlan> plan;
  std::vector<Step> steps;

  std::int64_t compute_ops() const {
    std::int64_t total = 0;
    for (const Step& s : steps) total += s.ops;
    return total;
  }

  std::int64_t bytes(MemLevel level, bool reads, bool writes) const {
    std::int64_t total = 0;
    for (const Step& s : steps) {
      if (reads)
        for (const MemAccess& a : s.reads)
          if (a.level == level) total += a.bytes;
      if (writes)
        for (const MemAccess& a : s.writes)
          if (a.level == level) total += a.bytes;
    }
    return total;
  }

  std::int64_t dram_read_bytes() const { return bytes(MemLevel::Dram, true, false); }
  std::int64_t dram_write_bytes() const { return bytes(MemLevel::Dram, false, true); }
  std::int64_t l2_bytes() const { return bytes(MemLevel::L2, true, true); }

  /// DRAM bytes of accesses whose tag matches (e.g. "SM" round trips).
  std::int64_t dram_bytes_for(const std::string& tag) const {
    std::int64_t total = 0;
    for (const Step& s : steps) {
      for (const MemAccess& a : s.reads)
        if (a.level == MemLevel::Dram && a.tensor == tag) total += a.bytes;
      for (const MemAccess& a : s.writes)
        if (a.level == MemLevel::Dram && a.tensor == tag) total += a.bytes;
    }
    return total;
  }
};

/// Total DRAM reads + writes of a schedule.
inline std::int64_t account_traffic(const Schedule& s) {
  return s.bytes(MemLevel::Dram, true, true);
}

inline void to_json(nlohmann::json& j, const MemAccess& a) {
  j = nlohmann::json{{"level", to_string(a.level)},
                     {"role", to_string(a.role)},
                     {"tensor", a.tensor},
                     {"bytes", a.bytes}};
}

inline void to_json(nlohmann::json& j, const Step& s) {
  j = nlohmann::json{{"core", {s.core_row, s.core_col}}, {"op", s.op},
                     {"head", s.head},                   {"q_tile", s.q_tile},
                     {"k_tile", s.k_tile},               {"ops", s.ops},
                     {"reads", s.reads},                 {"writes", s.writes}};
}

inline void to_json(nlohmann::json& j, const Schedule& s) {
  j = nlohmann::json{{"folding_level", s.folding_level},
                     {"compute_ops", s.compute_ops()},
                     {"dram_read_bytes", s.dram_read_bytes()},
                     {"dram_write_bytes", s.dram_write_bytes()},
                     {"l2_bytes", s.l2_bytes()},
                     {"steps", s.steps}};
}

enum class Bound { ComputeBound, MemoryBound };
inline const char* to_string(Bound b) {
  return b == Bound::ComputeBound ? "ComputeBound" : "MemoryBound";
}

/// Roofline estimate for one mapping. Utilization scales only the compute
/// term; DRAM bandwidth is shared and unaffected by grid occupancy.
struct CostReport {
  std::int64_t dram_bytes = 0;
  std::int64_t compute_ops = 0;
  double t_compute = 0.0;
  double t_memory = 0.0;
  double latency = 0.0;
  Bound bound = Bound::ComputeBound;
};

inline void to_json(nlohmann::json& j, const CostReport& c) {
  j = nlohmann::json{{"dram_bytes", c.dram_bytes}, {"compute_ops", c.compute_ops},
                     {"t_compute_s", c.t_compute}, {"t_memory_s", c.t_memory},
                     {"latency_s", c.latency},     {"bound", to_string(c.bound)}};
}

inline CostReport estimate_latency(const Schedule& s, const NpuConfig& cfg, double util) {
  if (s.steps.empty()) return CostReport{};
  if (!(util > 0.0) || util > 1.0)
    throw ValidationError("estimate_latency: utilization must be in (0, 1]");
  CostReport r;
  r.dram_bytes = account_traffic(s);
  r.compute_ops = s.compute_ops();
  r.t_compute = static_cast<double>(r.compute_ops) / (cfg.peak_ops_per_s * util);
  r.t_memory = static_cast<double>(r.dram_bytes) / cfg.dram_bw_bytes_per_s;
  r.latency = std::max(r.t_compute, r.t_memory);
  r.bound = r.t_memory > r.t_compute ? Bound::MemoryBound : Bound::ComputeBound;
  return r;
}

// ---- softmax partials ------------------------------------------------------

/// Per-row running max and running exp-sum of a partially scanned score row.
struct SoftmaxPartial {
  std::vector<double> m;  ///< running max
  std::vector<double> s;  ///< running sum of exp(score - m)

  static SoftmaxPartial neutral(std::int64_t rows) {
    SoftmaxPartial p;
    p.m.assign(static_cast<std::size_t>(rows), -std::numeric_limits<double>::infinity());
    p.s.assign(static_cast<std::size_t>(rows), 0.0);
    return p;
  }
};

/// Merges two partials covering disjoint key ranges of the same rows.
/// Associative and commutative; neutral() is the identity element.
inline SoftmaxPartial combine_partials(const SoftmaxPartial& a, const SoftmaxPartial& b) {
  if (a.m.size() != b.m.size())
    throw ValidationError("combine_partials: row counts do not match");
  SoftmaxPartial out;
  out.m.resize(a.m.size());
  out.s.resize(a.m.size());
  for (std::size_t r = 0; r < a.m.size(); ++r) {
    const double m = std::max(a.m[r], b.m[r]);
    const double sa = a.s[r] == 0.0 ? 0.0 : a.s[r] * std::exp(a.m[r] - m);
    const double sb = b.s[r] == 0.0 ? 0.0 : b.s[r] * std::exp(b.m[r] - m);
    out.m[r] = m;
    out.s[r] = sa + sb;
  }
  return out;
}

// ---- reference oracle ------------------------------------------------------

/// Ground truth: Z = softmax(Q*K^T + B + M) * V, dense, row-wise softmax.
/// K is taken in natural (Lk, d) layout.
inline Matrix reference_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                  const Matrix* bias = nullptr, const Matrix* mask = nullptr) {
  if (q.cols() != k.cols()) throw ValidationError("reference_attention: Q/K head dims differ");
  if (v.rows() != k.rows()) throw ValidationError("reference_attention: K/V lengths differ");
  Matrix s = matmul_nt(q, k);
  if (bias != nullptr) {
    if (!s.same_shape(*bias)) throw ValidationError("reference_attention: bias shape mismatch");
    for (std::int64_t i = 0; i < s.size(); ++i) s.data()[i] += bias->data()[i];
  }
  if (mask != nullptr) {
    if (!s.same_shape(*mask)) throw ValidationError("reference_attention: mask shape mismatch");
    for (std::int64_t i = 0; i < s.size(); ++i) s.data()[i] += mask->data()[i];
  }
  Matrix p(s.rows(), s.cols());
  std::vector<double> denom(static_cast<std::size_t>(s.rows()));
  for (std::int64_t r = 0; r < s.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < s.cols(); ++c) m = std::max(m, s(r, c));
    double sum = 0.0;
    for (std::int64_t c = 0; c < s.cols(); ++c) {
      p(r, c) = std::exp(s(r, c) - m);
      sum += p(r, c);
    }
    denom[static_cast<std::size_t>(r)] = sum;
  }
  Matrix z = matmul(p, v);
  for (std::int64_t r = 0; r < z.rows(); ++r)
    for (std::int64_t c = 0; c < z.cols(); ++c) z(r, c) /= denom[static_cast<std::size_t>(r)];
  return z;
}

// ---- executors -------------------------------------------------------------

/// Per-head input matrices, padded to the plan's shape. k/v hold one matrix
/// per KV head; bias/mask hold zero, one (broadcast) or `heads` matrices.
struct AttnInputs {
  std::vector<Matrix> q;
  std::vector<Matrix> k;  ///< natural (Lk, d) layout
  std::vector<Matrix> v;
  std::vector<Matrix> bias;
  std::vector<Matrix> mask;
};

struct ExecResult {
  std::vector<Matrix> z;   ///< per q-head outputs, padded extents
  std::vector<Matrix> sm;  ///< per q-head softmax outputs (level 2 only)
  Schedule schedule;
};

namespace detail {

inline const Matrix* pick(const std::vector<Matrix>& v, std::int64_t h) {
  if (v.empty()) return nullptr;
  return &v[v.size() == 1 ? 0 : static_cast<std::size_t>(h)];
}

// Bytes of a row-range tile clipped against the logical extents.
inline std::int64_t clip_rows_bytes(std::int64_t r0, std::int64_t nr, std::int64_t logical_rows,
                                    std::int64_t logical_cols, std::int64_t elem) {
  const std::int64_t rows = std::clamp<std::int64_t>(logical_rows - r0, 0, nr);
  return rows * logical_cols * elem;
}

inline std::int64_t clip_both_bytes(std::int64_t r0, std::int64_t nr, std::int64_t c0,
                                    std::int64_t nc, std::int64_t logical_rows,
                                    std::int64_t logical_cols, std::int64_t elem) {
  const std::int64_t rows = std::clamp<std::int64_t>(logical_rows - r0, 0, nr);
  const std::int64_t cols = std::clamp<std::int64_t>(logical_cols - c0, 0, nc);
  return rows * cols * elem;
}

// Emits steps and applies the first-touch-DRAM / re-touch-L2 rule within one
// pass. new_pass() forgets all touches (unfolded operators, the level-2
// SM*V pass).
class ScheduleBuilder {
 public:
  explicit ScheduleBuilder(Schedule& s) : s_(s) {}

  void new_pass() {
    reads_.clear();
    writes_.clear();
  }

  Step& step(std::int64_t row, std::int64_t col, std::string op, std::int64_t head,
             std::int64_t qt, std::int64_t kt) {
    Step st;
    st.core_row = row;
    st.core_col = col;
    st.op = std::move(op);
    st.head = head;
    st.q_tile = qt;
    st.k_tile = kt;
    s_.steps.push_back(std::move(st));
    return s_.steps.back();
  }

  void read(Step& st, const char* tag, TensorRole role, std::int64_t key_head,
            std::int64_t key_tile, std::int64_t bytes) {
    if (bytes <= 0) return;
    const auto key = std::make_tuple(std::string(tag), key_head, key_tile);
    if (reads_.insert(key).second)
      st.reads.push_back({MemLevel::Dram, role, tag, bytes});
    else
      st.reads.push_back({MemLevel::L2, role, tag, bytes});
  }

  void write_dram(Step& st, const char* tag, TensorRole role, std::int64_t key_head,
                  std::int64_t key_tile, std::int64_t bytes) {
    if (bytes <= 0) return;
    const auto key = std::make_tuple(std::string(tag), key_head, key_tile);
    if (writes_.insert(key).second) st.writes.push_back({MemLevel::Dram, role, tag, bytes});
  }

  void l1_write(Step& st, const char* tag, TensorRole role, std::int64_t bytes) {
    st.writes.push_back({MemLevel::L1, role, tag, bytes});
  }
  void l2_read(Step& st, const char* tag, TensorRole role, std::int64_t bytes) {
    st.reads.push_back({MemLevel::L2, role, tag, bytes});
  }
  void l2_write(Step& st, const char* tag, TensorRole role, std::int64_t bytes) {
    st.writes.push_back({MemLevel::L2, role, tag, bytes});
  }

 private:
  Schedule& s_;
  std::set<std::tuple<std::string, std::int64_t, std::int64_t>> reads_;
  std::set<std::tuple<std::string, std::int64_t, std::int64_t>> writes_;
};

inline Matrix tile_view(const Matrix& m, std::int64_t r0, std::int64_t nr, std::int64_t c0,
                        std::int64_t nc) {
  Matrix t(nr, nc);
  for (std::int64_t r = 0; r < nr; ++r)
    for (std::int64_t c = 0; c < nc; ++c) t(r, c) = m(r0 + r, c0 + c);
  return t;
}

// Running softmax state for one q tile: rescales the output accumulator
// whenever the running max advances.
struct OnlineState {
  SoftmaxPartial p;
  Matrix acc;  // q_rows x d_v, level 3 only

  OnlineState(std::int64_t rows, std::int64_t dv, bool with_acc)
      : p(SoftmaxPartial::neutral(rows)), acc(with_acc ? rows : 0, with_acc ? dv : 0) {}
};

// One online-softmax step over a score tile.
inline void online_update(OnlineState& st, const Matrix& score, const Matrix* v_tile) {
  const std::int64_t rows = score.rows();
  Matrix p(rows, score.cols());
  std::vector<double> scale(static_cast<std::size_t>(rows), 1.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t ri = static_cast<std::size_t>(r);
    double mt = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < score.cols(); ++c) mt = std::max(mt, score(r, c));
    const double m_new = std::max(st.p.m[ri], mt);
    double sum = 0.0;
    for (std::int64_t c = 0; c < score.cols(); ++c) {
      p(r, c) = std::exp(score(r, c) - m_new);
      sum += p(r, c);
    }
    const double sc = std::exp(st.p.m[ri] - m_new);  // exp(-inf - finite) == 0
    scale[ri] = sc;
    st.p.s[ri] = st.p.s[ri] * sc + sum;
    st.p.m[ri] = m_new;
  }
  if (v_tile != nullptr) {
    Matrix pv = matmul(p, *v_tile);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < st.acc.cols(); ++c)
        st.acc(r, c) = st.acc(r, c) * scale[static_cast<std::size_t>(r)] + pv(r, c);
  }
}

// Spatial reduction of two column states; combine_partials carries the
// statistics and the output accumulators are rescaled to the merged max.
inline OnlineState merge_states(const OnlineState& a, const OnlineState& b) {
  OnlineState out(static_cast<std::int64_t>(a.p.m.size()), a.acc.cols(), a.acc.size() > 0);
  out.p = combine_partials(a.p, b.p);
  if (a.acc.size() > 0) {
    for (std::int64_t r = 0; r < a.acc.rows(); ++r) {
      const std::size_t ri = static_cast<std::size_t>(r);
      const double wa = a.p.s[ri] == 0.0 ? 0.0 : std::exp(a.p.m[ri] - out.p.m[ri]);
      const double wb = b.p.s[ri] == 0.0 ? 0.0 : std::exp(b.p.m[ri] - out.p.m[ri]);
      for (std::int64_t c = 0; c < a.acc.cols(); ++c)
        out.acc(r, c) = a.acc(r, c) * wa + b.acc(r, c) * wb;
    }
  }
  return out;
}

}  // namespace detail

/// Executes an attention block tile-by-tile under a level 2 or 3 folding
/// plan. Inputs must be padded to plan.shape; pass nullptr to build the
/// schedule without numerics (sweeps and fold/unfold report modes).
inline ExecResult execute_folded(const FoldingPlan& plan, const NpuConfig& cfg,
                                 const AttnInputs* in) {
  if (plan.folding_level < 2 || !plan.subvolumes || !plan.strategy)
    throw ValidationError("execute_folded: plan folding_level must be 2 or 3");
  const Subvolumes& sv = *plan.subvolumes;
  const SpatialStrategy& strat = *plan.strategy;
  const AttnShape& padded = plan.shape;
  const AttnShape& logical = plan.logical_shape;
  const std::int64_t e = cfg.elem_bytes;
  const std::int64_t qtn = padded.lq / sv.q_rows;
  const std::int64_t ktn = padded.lk / sv.k_rows;
  const std::int64_t group = padded.heads / padded.kv_heads;
  const bool level3 = plan.folding_level == 3;

  if (in != nullptr) {
    if (static_cast<std::int64_t>(in->q.size()) != padded.heads ||
        static_cast<std::int64_t>(in->k.size()) != padded.kv_heads ||
        static_cast<std::int64_t>(in->v.size()) != padded.kv_heads)
      throw ValidationError("execute_folded: input head counts do not match the plan");
    for (const Matrix& q : in->q)
      if (q.rows() != padded.lq || q.cols() != padded.d)
        throw ValidationError("execute_folded: Q dims do not match the padded shape");
    for (const Matrix& k : in->k)
      if (k.rows() != padded.lk || k.cols() != padded.d)
        throw ValidationError("execute_folded: K dims do not match the padded shape");
    for (const Matrix& v : in->v)
      if (v.rows() != padded.lk || v.cols() != padded.d_v)
        throw ValidationError("execute_folded: V dims do not match the padded shape");
  }

  ExecResult res;
  res.schedule.folding_level = plan.folding_level;
  res.schedule.plan = plan;
  detail::ScheduleBuilder b(res.schedule);

  const bool kv_split = strat.mode == SpatialStrategy::Mode::KvSplit;
  const std::int64_t ncols = kv_split ? strat.reduce_cols : 1;
  const std::int64_t tiles_per_col = (ktn + ncols - 1) / ncols;
  const std::int64_t row_span =
      kv_split ? std::min<std::int64_t>(cfg.rows, qtn) : strat.q_unroll_rows;
  const std::int64_t add_ops = (padded.has_bias ? 1 : 0) + (padded.has_mask ? 1 : 0);

  // Fused pass over all heads (level 2 emits SM tiles to DRAM as it goes).
  for (std::int64_t h = 0; h < padded.heads; ++h) {
    const std::int64_t hk = h / group;
    const Matrix* bias_h = in ? detail::pick(in->bias, h) : nullptr;
    const Matrix* mask_h = in ? detail::pick(in->mask, h) : nullptr;
    Matrix z_h(in && level3 ? padded.lq : 0, in && level3 ? padded.d_v : 0);
    Matrix sm_h(in && !level3 ? padded.lq : 0, in && !level3 ? padded.lk : 0);

    for (std::int64_t qt = 0; qt < qtn; ++qt) {
      const std::int64_t q0 = qt * sv.q_rows;
      const std::int64_t row = row_span > 0 ? qt % row_span : 0;
      const std::int64_t pin_col = kv_split ? 0 : h % strat.head_unroll_cols;
      Matrix q_tile = in ? detail::tile_view(in->q[static_cast<std::size_t>(h)], q0, sv.q_rows,
                                             0, padded.d)
                         : Matrix();

      std::vector<detail::OnlineState> col_states;
      std::vector<std::vector<std::pair<std::int64_t, Matrix>>> col_stash;  // level 2
      for (std::int64_t g = 0; g < ncols; ++g) {
        col_states.emplace_back(sv.q_rows, padded.d_v, level3 && in != nullptr);
        col_stash.emplace_back();
      }

      for (std::int64_t kt = 0; kt < ktn; ++kt) {
        const std::int64_t g = kt / tiles_per_col;
        const std::int64_t col = kv_split ? g : pin_col;
        const std::int64_t k0 = kt * sv.k_rows;
        Step& st = b.step(row, col, level3 ? "qk_softmax_sv" : "qk_softmax_scan", h, qt, kt);

        // Q is fetched once per (head, q tile) and broadcast to further
        // columns through L2. Under KvPinned, K/V tiles only move on the
        // first q tile and stay resident in L1 afterwards.
        if (kt == g * tiles_per_col)
          b.read(st, "Q", TensorRole::Q, h, qt,
                 detail::clip_rows_bytes(q0, sv.q_rows, logical.lq, logical.d, e));
        if (kv_split || qt == 0) {
          b.read(st, "K", TensorRole::K, hk, kt,
                 detail::clip_rows_bytes(k0, sv.k_rows, logical.lk, logical.d, e));
          if (level3)
            b.read(st, "V", TensorRole::V, hk, kt,
                   detail::clip_rows_bytes(k0, sv.k_rows, logical.lk, logical.d_v, e));
        }
        if (padded.has_bias)
          b.read(st, "B", TensorRole::Bias, in && in->bias.size() > 1 ? h : 0, qt * ktn + kt,
                 detail::clip_both_bytes(q0, sv.q_rows, k0, sv.k_rows, logical.lq, logical.lk, e));
        if (padded.has_mask)
          b.read(st, "M", TensorRole::Mask, in && in->mask.size() > 1 ? h : 0, qt * ktn + kt,
                 detail::clip_both_bytes(q0, sv.q_rows, k0, sv.k_rows, logical.lq, logical.lk, e));

        st.ops = 2 * sv.q_rows * padded.d * sv.k_rows + add_ops * sv.score_elems();
        if (level3) st.ops += 5 * sv.score_elems() + 2 * sv.q_rows * sv.k_rows * padded.d_v;
        b.l1_write(st, "A", TensorRole::Intermediate, sv.score_elems() * e);
        if (!level3)  // raw scores spill to L2 until the row stats are final
          b.l2_write(st, "A", TensorRole::Intermediate, sv.score_elems() * e);

        if (in != nullptr) {
          Matrix k_tile =
              detail::tile_view(in->k[static_cast<std::size_t>(hk)], k0, sv.k_rows, 0, padded.d);
          Matrix score = matmul_nt(q_tile, k_tile);
          if (bias_h != nullptr)
            for (std::int64_t r = 0; r < sv.q_rows; ++r)
              for (std::int64_t c = 0; c < sv.k_rows; ++c)
                score(r, c) += (*bias_h)(q0 + r, k0 + c);
          if (mask_h != nullptr)
            for (std::int64_t r = 0; r < sv.q_rows; ++r)
              for (std::int64_t c = 0; c < sv.k_rows; ++c)
                score(r, c) += (*mask_h)(q0 + r, k0 + c);
          // Padded key columns must vanish under softmax even when the graph
          // carries no mask operand.
          if (k0 + sv.k_rows > logical.lk)
            for (std::int64_t r = 0; r < sv.q_rows; ++r)
              for (std::int64_t c = std::max<std::int64_t>(0, logical.lk - k0); c < sv.k_rows;
                   ++c)
                score(r, c) += kScoreMaskFill;

          if (level3) {
            Matrix v_tile = detail::tile_view(in->v[static_cast<std::size_t>(hk)], k0,
                                              sv.k_rows, 0, padded.d_v);
            detail::online_update(col_states[static_cast<std::size_t>(g)], score, &v_tile);
          } else {
            detail::online_update(col_states[static_cast<std::size_t>(g)], score, nullptr);
            col_stash[static_cast<std::size_t>(g)].emplace_back(kt, std::move(score));
          }
        }
      }

      // Spatial reduction across columns, left to right. Partial stats (and
      // the rescaled accumulator at level 3) hop over L2; no DRAM involved.
      const std::int64_t used_cols = (ktn - 1) / tiles_per_col + 1;
      detail::OnlineState merged = std::move(col_states[0]);
      for (std::int64_t g = 1; g < used_cols; ++g) {
        Step& st = b.step(row, g, "softmax_combine", h, qt, -1);
        const std::int64_t hop =
            2 * sv.q_rows * e + (level3 ? sv.q_rows * padded.d_v * e : 0);
        b.l2_read(st, "stats", TensorRole::Intermediate, hop);
        b.l2_write(st, "stats", TensorRole::Intermediate, hop);
        if (in != nullptr)
          merged = detail::merge_states(merged, col_states[static_cast<std::size_t>(g)]);
      }

      if (level3) {
        Step& st = b.step(row, kv_split ? used_cols - 1 : pin_col, "emit_z", h, qt, -1);
        b.write_dram(st, "Z", TensorRole::Output, h, qt,
                     detail::clip_rows_bytes(q0, sv.q_rows, logical.lq, logical.d_v, e));
        if (in != nullptr) {
          for (std::int64_t r = 0; r < sv.q_rows; ++r) {
            const double denom = merged.p.s[static_cast<std::size_t>(r)];
            for (std::int64_t c = 0; c < padded.d_v; ++c)
              z_h(q0 + r, c) = merged.acc(r, c) / denom;
          }
        }
      } else {
        for (std::int64_t g = 0; g < used_cols; ++g) {
          const std::int64_t col = kv_split ? g : pin_col;
          const std::int64_t lo = g * tiles_per_col;
          const std::int64_t hi = std::min(ktn, (g + 1) * tiles_per_col);
          for (std::int64_t kt = lo; kt < hi; ++kt) {
            Step& st = b.step(row, col, "softmax_emit", h, qt, kt);
            b.l2_read(st, "A", TensorRole::Intermediate, sv.score_elems() * e);
            st.ops = 5 * sv.score_elems();
            b.write_dram(st, "SM", TensorRole::Output, h, qt * ktn + kt, sv.score_elems() * e);
          }
        }
        if (in != nullptr) {
          for (std::int64_t g = 0; g < used_cols; ++g) {
            for (auto& [kt, score] : col_stash[static_cast<std::size_t>(g)]) {
              const std::int64_t k0 = kt * sv.k_rows;
              for (std::int64_t r = 0; r < sv.q_rows; ++r) {
                const std::size_t ri = static_cast<std::size_t>(r);
                for (std::int64_t c = 0; c < sv.k_rows; ++c)
                  sm_h(q0 + r, k0 + c) =
                      std::exp(score(r, c) - merged.p.m[ri]) / merged.p.s[ri];
              }
            }
          }
        }
      }
    }

    if (in != nullptr) {
      if (level3)
        res.z.push_back(std::move(z_h));
      else
        res.sm.push_back(std::move(sm_h));
    }
  }

  if (!level3) {
    // Separate SM*V pass over all heads; SM makes a DRAM round trip.
    b.new_pass();
    for (std::int64_t h = 0; h < padded.heads; ++h) {
      const std::int64_t hk = h / group;
      Matrix zt(in ? padded.lq : 0, in ? padded.d_v : 0);
      for (std::int64_t qt = 0; qt < qtn; ++qt) {
        const std::int64_t q0 = qt * sv.q_rows;
        for (std::int64_t kt = 0; kt < ktn; ++kt) {
          const std::int64_t k0 = kt * sv.k_rows;
          const std::int64_t flat = (h * qtn + qt) * ktn + kt;
          Step& st =
              b.step((flat / cfg.cols) % cfg.rows, flat % cfg.cols, "matmul_sv", h, qt, kt);
          b.read(st, "SM", TensorRole::Intermediate, h, qt * ktn + kt, sv.score_elems() * e);
          b.read(st, "V", TensorRole::V, hk, kt,
                 detail::clip_rows_bytes(k0, sv.k_rows, logical.lk, logical.d_v, e));
          st.ops = 2 * sv.q_rows * sv.k_rows * padded.d_v;
          if (in != nullptr) {
            Matrix p_tile = detail::tile_view(res.sm[static_cast<std::size_t>(h)], q0,
                                              sv.q_rows, k0, sv.k_rows);
            Matrix v_tile = detail::tile_view(in->v[static_cast<std::size_t>(hk)], k0,
                                              sv.k_rows, 0, padded.d_v);
            Matrix pv = matmul(p_tile, v_tile);
            for (std::int64_t r = 0; r < sv.q_rows; ++r)
              for (std::int64_t c = 0; c < padded.d_v; ++c) zt(q0 + r, c) += pv(r, c);
          }
          if (kt == ktn - 1)
            b.write_dram(st, "Z", TensorRole::Output, h, qt,
                         detail::clip_rows_bytes(q0, sv.q_rows, logical.lq, logical.d_v, e));
        }
      }
      if (in != nullptr) res.z.push_back(std::move(zt));
    }
  }
  return res;
}

/// Executes the chain operator by operator: every intermediate makes a DRAM
/// round trip. Numerically equals the reference oracle (and execute_folded).
inline ExecResult execute_unfolded(const AttnShape& logical, const AttnShape& padded,
                                   const NpuConfig& cfg, const AttnInputs* in) {
  if (padded.heads % padded.kv_heads != 0)
    throw ValidationError("execute_unfolded: head counts do not group");
  const std::int64_t e = cfg.elem_bytes;
  const std::int64_t group = padded.heads / padded.kv_heads;
  ExecResult res;
  res.schedule.folding_level = 1;
  detail::ScheduleBuilder b(res.schedule);

  const std::int64_t grid = cfg.rows * cfg.cols;
  auto assign = [&](std::int64_t i) {
    return std::pair<std::int64_t, std::int64_t>{(i / cfg.cols) % cfg.rows, i % cfg.cols};
  };
  static const std::vector<Matrix> kNoOperand;

  std::vector<Matrix> scores;
  if (in != nullptr) {
    if (static_cast<std::int64_t>(in->q.size()) != padded.heads ||
        static_cast<std::int64_t>(in->k.size()) != padded.kv_heads ||
        static_cast<std::int64_t>(in->v.size()) != padded.kv_heads)
      throw ValidationError("execute_unfolded: input head counts do not match the shape");
    for (std::int64_t h = 0; h < padded.heads; ++h) {
      const std::int64_t hk = h / group;
      scores.push_back(
          matmul_nt(in->q[static_cast<std::size_t>(h)], in->k[static_cast<std::size_t>(hk)]));
    }
  }

  // Q*K^T
  b.new_pass();
  for (std::int64_t h = 0; h < padded.heads; ++h) {
    const std::int64_t hk = h / group;
    auto [r, c] = assign(h % grid);
    Step& st = b.step(r, c, "matmul_qk", h, -1, -1);
    b.read(st, "Q", TensorRole::Q, h, 0, logical.lq * logical.d * e);
    b.read(st, "K", TensorRole::K, hk, 0, logical.lk * logical.d * e);
    b.write_dram(st, "A", TensorRole::Intermediate, h, 0, padded.lq * padded.lk * e);
    st.ops = 2 * padded.lq * padded.d * padded.lk;
  }

  // + bias, + mask: separate passes, separate round trips.
  for (int a = 0; a < 2; ++a) {
    const bool present = a == 0 ? padded.has_bias : padded.has_mask;
    if (!present) continue;
    const std::vector<Matrix>& operand =
        in == nullptr ? kNoOperand : (a == 0 ? in->bias : in->mask);
    b.new_pass();
    for (std::int64_t h = 0; h < padded.heads; ++h) {
      auto [r, c] = assign(h % grid);
      Step& st = b.step(r, c, a == 0 ? "add_bias" : "add_mask", h, -1, -1);
      b.read(st, "A", TensorRole::Intermediate, h, 0, padded.lq * padded.lk * e);
      b.read(st, a == 0 ? "B" : "M", a == 0 ? TensorRole::Bias : TensorRole::Mask,
             operand.size() > 1 ? h : 0, 0, logical.lq * logical.lk * e);
      b.write_dram(st, "A", TensorRole::Intermediate, h, 0, padded.lq * padded.lk * e);
      st.ops = padded.lq * padded.lk;
      if (in != nullptr) {
        const Matrix* op = detail::pick(operand, h);
        if (op != nullptr)
          for (std::int64_t i = 0; i < scores[static_cast<std::size_t>(h)].size(); ++i)
            scores[static_cast<std::size_t>(h)].data()[i] += op->data()[i];
      }
    }
  }

  // SoftMax
  b.new_pass();
  std::vector<Matrix> sm;
  for (std::int64_t h = 0; h < padded.heads; ++h) {
    auto [r, c] = assign(h % grid);
    Step& st = b.step(r, c, "softmax", h, -1, -1);
    b.read(st, "A", TensorRole::Intermediate, h, 0, padded.lq * padded.lk * e);
    b.write_dram(st, "SM", TensorRole::Intermediate, h, 0, padded.lq * padded.lk * e);
    st.ops = 5 * padded.lq * padded.lk;
    if (in != nullptr) {
      Matrix& s = scores[static_cast<std::size_t>(h)];
      if (padded.lk > logical.lk)  // padded keys vanish here too
        for (std::int64_t i = 0; i < s.rows(); ++i)
          for (std::int64_t j = logical.lk; j < padded.lk; ++j) s(i, j) += kScoreMaskFill;
      Matrix p(s.rows(), s.cols());
      for (std::int64_t i = 0; i < s.rows(); ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < s.cols(); ++j) m = std::max(m, s(i, j));
        double sum = 0.0;
        for (std::int64_t j = 0; j < s.cols(); ++j) {
          p(i, j) = std::exp(s(i, j) - m);
          sum += p(i, j);
        }
        for (std::int64_t j = 0; j < s.cols(); ++j) p(i, j) /= sum;
      }
      sm.push_back(std::move(p));
    }
  }

  // SM * V
  b.new_pass();
  for (std::int64_t h = 0; h < padded.heads; ++h) {
    const std::int64_t hk = h / group;
    auto [r, c] = assign(h % grid);
    Step& st = b.step(r, c, "matmul_sv", h, -1, -1);
    b.read(st, "SM", TensorRole::Intermediate, h, 0, padded.lq * padded.lk * e);
    b.read(st, "V", TensorRole::V, hk, 0, logical.lk * logical.d_v * e);
    b.write_dram(st, "Z", TensorRole::Output, h, 0, logical.lq * logical.d_v * e);
    st.ops = 2 * padded.lq * padded.lk * padded.d_v;
    if (in != nullptr)
      res.z.push_back(
          matmul(sm[static_cast<std::size_t>(h)], in->v[static_cast<std::size_t>(hk)]));
  }
  return res;
}

}  // namespace attnfold
