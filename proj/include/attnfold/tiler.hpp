// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnfold/hw_model.hpp"
#include "attnfold/transforms.hpp"

namespace attnfold {

/// Per-head attention problem shape. The tiler operates on padded shapes
/// (every dim a multiple of its kernel granularity); ragged inputs are
/// rejected rather than handled with tail tiles.
struct AttnShape {
  std::int64_t heads = 1;     ///< query heads
  std::int64_t kv_heads = 1;  ///< key/value heads (MHA: == heads, MQA: 1)
  std::int64_t lq = 0;        ///< query sequence length
  std::int64_t lk = 0;        ///< key/context length
  std::int64_t d = 0;         ///< head dim of Q and K
  std::int64_t d_v = 0;       ///< head dim of V (and the output)
  bool has_bias = false;
  bool has_mask = false;
};

inline AttnShape padded_shape(const AttnShape& s, const KernelGranularity& g) {
  AttnShape p = s;
  p.lq = round_up(s.lq, g.m_min);
  p.lk = round_up(s.lk, g.k_row_granule());
  p.d = round_up(s.d, g.k_min);
  p.d_v = round_up(s.d_v, g.n_min);
  return p;
}

inline void to_json(nlohmann::json& j, const AttnShape& s) {
  j = nlohmann::json{{"heads", s.heads}, {"kv_heads", s.kv_heads}, {"lq", s.lq},
                     {"lk", s.lk},       {"d", s.d},               {"d_v", s.d_v},
                     {"has_bias", s.has_bias}, {"has_mask", s.has_mask}};
}

/// Chosen L1 tile extents. Only the row counts over Lq and Lk are free; the
/// head dims d / d_v are carried whole, and the bias/mask tiles equal the
/// score tile. The padded full dims are carried so the footprint formula can
/// tell which operand side streams through L1.
struct Subvolumes {
  std::int64_t q_rows = 0;  ///< S_q rows (tile of Q over Lq)
  std::int64_t k_rows = 0;  ///< S_k/S_v rows (tile of K and V over Lk)
  std::int64_t d = 0;
  std::int64_t d_v = 0;
  std::int64_t lq = 0;  ///< padded full Lq (q_rows divides it)
  std::int64_t lk = 0;  ///< padded full Lk (k_rows divides it)
  bool has_b = false;
  bool has_m = false;

  std::int64_t s_q_elems() const { return q_rows * d; }
  std::int64_t s_k_elems() const { return k_rows * d; }
  std::int64_t s_v_elems() const { return k_rows * d_v; }
  std::int64_t score_elems() const { return q_rows * k_rows; }
  std::int64_t out_elems() const { return q_rows * d_v; }

  bool operator==(const Subvolumes& o) const {
    return q_rows == o.q_rows && k_rows == o.k_rows && d == o.d && d_v == o.d_v &&
           lq == o.lq && lk == o.lk && has_b == o.has_b && has_m == o.has_m;
  }
};

inline void to_json(nlohmann::json& j, const Subvolumes& sv) {
  j = nlohmann::json{{"s_q", {sv.q_rows, sv.d}},
                     {"s_k", {sv.k_rows, sv.d}},
                     {"s_v", {sv.k_rows, sv.d_v}},
                     {"s_b", sv.has_b ? nlohmann::json({sv.q_rows, sv.k_rows}) : nlohmann::json()},
                     {"s_m", sv.has_m ? nlohmann::json({sv.q_rows, sv.k_rows}) : nlohmann::json()}};
}

/// How tiles are laid over the core grid.
///  - KvPinned: K and V stay resident in L1; S_q tiles unroll across the core
///    rows of a column and heads unroll across columns.
///  - KvSplit: K and V are split across columns, per-column partial softmax
///    statistics reduce spatially, heads iterate temporally.
struct SpatialStrategy {
  enum class Mode { KvPinned, KvSplit };
  Mode mode = Mode::KvPinned;
  std::int64_t q_unroll_rows = 0;    ///< KvPinned: core rows S_q is unrolled across
  std::int64_t head_unroll_cols = 0; ///< KvPinned: columns used for head parallelism
  std::int64_t reduce_cols = 0;      ///< KvSplit: columns joining the spatial reduction
  bool heads_temporal = false;       ///< KvSplit: heads always iterate in time
};

inline const char* to_string(SpatialStrategy::Mode m) {
  return m == SpatialStrategy::Mode::KvPinned ? "KvPinned" : "KvSplit";
}

inline void to_json(nlohmann::json& j, const SpatialStrategy& s) {
  j = nlohmann::json{{"mode", to_string(s.mode)}};
  if (s.mode == SpatialStrategy::Mode::KvPinned) {
    j["q_unroll_rows"] = s.q_unroll_rows;
    j["head_unroll_cols"] = s.head_unroll_cols;
  } else {
    j["reduce_cols"] = s.reduce_cols;
    j["heads_temporal"] = s.heads_temporal;
  }
}

/// Result of the tiling search. folding_level 3 folds the whole chain,
/// 2 folds everything but the final SM*V MatMul, 1 is unfolded.
struct FoldingPlan {
  int folding_level = 1;
  std::optional<Subvolumes> subvolumes;
  std::optional<SpatialStrategy> strategy;
  std::int64_t l1_footprint_bytes = 0;
  std::optional<TransposePlan> transpose_plan;
  std::vector<PadPlan> pad_plans;
  AttnShape shape;          ///< padded shape the plan was computed for
  AttnShape logical_shape;  ///< pre-padding shape (== shape when none was needed)
};

inline void to_json(nlohmann::json& j, const FoldingPlan& p) {
  j = nlohmann::json{{"folding_level", p.folding_level},
                     {"l1_footprint_bytes", p.l1_footprint_bytes},
                     {"shape", p.shape}};
  j["subvolumes"] = p.subvolumes ? nlohmann::json(*p.subvolumes) : nlohmann::json();
  j["strategy"] = p.strategy ? nlohmann::json(*p.strategy) : nlohmann::json();
}

namespace detail {

inline void check_padded(const AttnShape& s, const KernelGranularity& g) {
  if (s.heads < 1 || s.kv_heads < 1)
    throw ValidationError("tiler: head counts must be >= 1");
  if (s.lq < 1 || s.lk < 1 || s.d < 1 || s.d_v < 1)
    throw ValidationError("tiler: all shape dims must be >= 1");
  if (s.lq % g.m_min != 0 || s.lk % g.k_row_granule() != 0 || s.d % g.k_min != 0 ||
      s.d_v % g.n_min != 0)
    throw ValidationError("tiler: shape dims must be pre-padded to kernel granularity multiples");
}

}  // namespace detail

/// All candidate subvolumes whose tile dims are granularity multiples and
/// divide the padded dims, sorted to maximize S_q first: q_rows descending,
/// then k_rows descending (larger contiguous K tiles mean fewer reduction
/// steps), then fewer total tiles. Head count does not affect the list.
inline std::vector<Subvolumes> enumerate_tilings(const AttnShape& shape,
                                                 const KernelGranularity& gran) {
  detail::check_padded(shape, gran);
  const std::int64_t gq = gran.m_min;
  const std::int64_t gk = gran.k_row_granule();
  std::vector<Subvolumes> out;
  for (std::int64_t qr = shape.lq; qr >= gq; qr -= gq) {
    if (shape.lq % qr != 0) continue;
    for (std::int64_t kr = shape.lk; kr >= gk; kr -= gk) {
      if (shape.lk % kr != 0) continue;
      Subvolumes sv;
      sv.q_rows = qr;
      sv.k_rows = kr;
      sv.d = shape.d;
      sv.d_v = shape.d_v;
      sv.lq = shape.lq;
      sv.lk = shape.lk;
      sv.has_b = shape.has_bias;
      sv.has_m = shape.has_mask;
      out.push_back(sv);
    }
  }
  return out;
}

/// Peak per-core L1 bytes for one tile pipeline step.
///
/// The streamed operand side is double-buffered (factor `streamed_buffers`):
/// when k_rows < Lk the K/V tiles are the innermost iteration and stream;
/// when K/V are pinned whole, the Q tiles stream instead. Bias/mask tiles
/// change on every inner step in both regimes, so they always carry the
/// factor. The score tile, the output accumulator (level 3 only) and the
/// softmax statistics (running max + running sum, one pair per score row)
/// are single-buffered.
inline std::int64_t l1_footprint(const Subvolumes& sv, int level, const NpuConfig& cfg,
                                 bool has_b, bool has_m, int streamed_buffers = 2) {
  if (level != 2 && level != 3)
    throw ValidationError("l1_footprint: folding level must be 2 or 3");
  if (streamed_buffers < 1)
    throw ValidationError("l1_footprint: streamed_buffers must be >= 1");
  const bool k_streams = sv.k_rows < sv.lk;
  const std::int64_t fq = k_streams ? 1 : streamed_buffers;
  const std::int64_t fk = k_streams ? streamed_buffers : 1;
  const std::int64_t fbm = streamed_buffers;

  std::int64_t elems = sv.s_q_elems() * fq + sv.s_k_elems() * fk;
  if (level == 3) elems += sv.s_v_elems() * fk;
  elems += sv.score_elems();
  if (level == 3) elems += sv.out_elems();
  if (has_b) elems += sv.score_elems() * fbm;
  if (has_m) elems += sv.score_elems() * fbm;
  elems += 2 * sv.q_rows;  // softmax running max + running sum
  return cfg.elem_bytes * elems;
}

namespace detail {

inline SpatialStrategy assign_strategy(const Subvolumes& sv, const AttnShape& shape,
                                       const NpuConfig& cfg) {
  SpatialStrategy st;
  if (sv.k_rows == shape.lk) {
    st.mode = SpatialStrategy::Mode::KvPinned;
    st.q_unroll_rows = std::min<std::int64_t>(cfg.rows, shape.lq / sv.q_rows);
    st.head_unroll_cols = std::min<std::int64_t>(cfg.cols, shape.heads);
  } else {
    st.mode = SpatialStrategy::Mode::KvSplit;
    st.reduce_cols = std::min<std::int64_t>(cfg.cols, shape.lk / sv.k_rows);
    st.heads_temporal = true;
  }
  return st;
}

}  // namespace detail

/// Scans the enumerated candidates at level 3, then at level 2 (fresh scan),
/// returning the first feasible one; level 1 (unfolded) is the total
/// fallback and never fails.
inline FoldingPlan select_tiling(const AttnShape& shape, const KernelGranularity& gran,
                                 const NpuConfig& cfg, int streamed_buffers = 2) {
  cfg.validate();
  gran.validate(cfg);
  const auto candidates = enumerate_tilings(shape, gran);
  for (int level : {3, 2}) {
    for (const Subvolumes& sv : candidates) {
      const std::int64_t bytes =
          l1_footprint(sv, level, cfg, shape.has_bias, shape.has_mask, streamed_buffers);
      if (bytes <= cfg.l1_bytes) {
        FoldingPlan plan;
        plan.folding_level = level;
        plan.subvolumes = sv;
        plan.strategy = detail::assign_strategy(sv, shape, cfg);
        plan.l1_footprint_bytes = bytes;
        plan.shape = shape;
        plan.logical_shape = shape;
        return plan;
      }
    }
  }
  FoldingPlan plan;
  plan.folding_level = 1;
  plan.shape = shape;
  plan.logical_shape = shape;
  return plan;
}

/// Fraction of grid cores assigned at least one tile under the plan's
/// strategy. Heads beyond the unrolled columns wrap temporally, so they do
/// not reduce occupancy.
inline double utilization(const FoldingPlan& plan, const AttnShape& shape,
                          const NpuConfig& cfg) {
  if (plan.folding_level < 2 || !plan.subvolumes || !plan.strategy)
    throw ValidationError("utilization: not applicable to an unfolded (level 1) plan");
  const std::int64_t q_tiles = shape.lq / plan.subvolumes->q_rows;
  const SpatialStrategy& st = *plan.strategy;
  std::int64_t used = 0;
  if (st.mode == SpatialStrategy::Mode::KvPinned) {
    used = st.q_unroll_rows * st.head_unroll_cols;
  } else {
    used = std::min<std::int64_t>(cfg.rows, q_tiles) * st.reduce_cols;
  }
  return static_cast<double>(used) / static_cast<double>(cfg.rows * cfg.cols);
}

}  // namespace attnfold
