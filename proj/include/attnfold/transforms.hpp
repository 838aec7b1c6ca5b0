// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnfold/dense.hpp"
#include "attnfold/graph.hpp"
#include "attnfold/hw_model.hpp"

namespace attnfold {

/// Additive score injected on padded key columns so softmax assigns them
/// vanishing weight (exp underflows to exactly 0 in double precision).
inline constexpr double kScoreMaskFill = -1e9;

enum class TransposeStage { L2Dma };
enum class PadMechanism { DmaPad, ProducerPad };

inline const char* to_string(TransposeStage) { return "L2-DMA"; }
inline const char* to_string(PadMechanism m) {
  return m == PadMechanism::DmaPad ? "DmaPad" : "ProducerPad";
}

/// How a tensor's trailing-two-dims transpose is realized without breaking
/// the fold: the DMA moves block x block tiles while descending stride order
/// (block transpose), and the consuming MatMul kernel transposes each tile in
/// registers (Transposed-MatMul). Element-granularity DMA transpose is only
/// legal when one element covers the minimum DMA stride.
struct TransposePlan {
  std::string tensor;
  std::int64_t block = 8;
  TransposeStage stage = TransposeStage::L2Dma;
  bool consumer_transposed_matmul = false;  ///< consuming MatMul handles intra-block transpose
  bool needs_separate_kernel = false;       ///< standalone transpose pass required (unfolded)
};

struct PadPlan {
  std::string tensor;
  std::vector<std::int64_t> logical_dims;
  std::vector<std::int64_t> padded_dims;
  std::vector<std::int64_t> pad;  ///< per-dim amounts, padded - logical
  PadMechanism mechanism = PadMechanism::DmaPad;
  /// Crop extents for the block output; depad restores exactly logical_dims.
  std::vector<std::int64_t> depad;

  bool any() const {
    for (std::int64_t p : pad)
      if (p > 0) return true;
    return false;
  }
};

inline void to_json(nlohmann::json& j, const TransposePlan& p) {
  j = nlohmann::json{{"tensor", p.tensor},
                     {"block", p.block},
                     {"stage", to_string(p.stage)},
                     {"consumer_transposed_matmul", p.consumer_transposed_matmul},
                     {"needs_separate_kernel", p.needs_separate_kernel}};
}

inline void to_json(nlohmann::json& j, const PadPlan& p) {
  j = nlohmann::json{{"tensor", p.tensor},
                     {"logical_dims", p.logical_dims},
                     {"padded_dims", p.padded_dims},
                     {"pad", p.pad},
                     {"mechanism", to_string(p.mechanism)},
                     {"depad", p.depad}};
}

/// Plans the transpose of a tensor's trailing two dims.
///
/// With 2B elements and a 4B minimum DMA stride the DMA cannot address single
/// elements, so the plan always falls back to block granularity with the
/// intra-block transpose delegated to the consuming kernel. When folding, the
/// block route is used even if element DMA would be stride-legal, so one
/// mechanism serves all element widths; no L1 staging buffer is needed either
/// way because the data lands in L1 already block-permuted.
inline TransposePlan plan_transpose(const TensorDesc& tensor, const NpuConfig& cfg,
                                    const KernelGranularity& gran, bool folded) {
  if (tensor.rank() < 2)
    throw ValidationError("plan_transpose: tensor '" + tensor.id + "' must have rank >= 2");
  gran.validate(cfg);

  const bool element_dma_ok = cfg.elem_bytes >= cfg.dma_min_stride_bytes;
  TransposePlan plan;
  plan.tensor = tensor.id;
  plan.stage = TransposeStage::L2Dma;
  plan.block = (folded || !element_dma_ok) ? gran.block : 1;
  plan.consumer_transposed_matmul = folded;
  plan.needs_separate_kernel = !folded;

  if (plan.block > 1 &&
      (tensor.rows() % plan.block != 0 || tensor.cols() % plan.block != 0))
    throw ValidationError("plan_transpose: tensor '" + tensor.id +
                          "' dims must be padded to multiples of the transpose block first");
  return plan;
}

/// Permutes block x block tiles of an R x C array into a C x R array; the
/// contents of each tile are NOT transposed (that is the consumer's job).
template <typename T>
Mat<T> block_transpose(const Mat<T>& data, std::int64_t block) {
  if (block < 1) throw ValidationError("block_transpose: block must be >= 1");
  if (data.rows() % block != 0 || data.cols() % block != 0)
    throw ValidationError("block_transpose: dims must be multiples of the block edge");
  Mat<T> out(data.cols(), data.rows());
  const std::int64_t gr = data.rows() / block;
  const std::int64_t gc = data.cols() / block;
  for (std::int64_t i = 0; i < gr; ++i)
    for (std::int64_t j = 0; j < gc; ++j)
      for (std::int64_t r = 0; r < block; ++r)
        for (std::int64_t c = 0; c < block; ++c)
          out(j * block + r, i * block + c) = data(i * block + r, j * block + c);
  return out;
}

/// True mathematical transpose of one square tile (register-level shuffle in
/// the real kernel).
template <typename T>
Mat<T> intra_block_transpose(const Mat<T>& tile) {
  if (tile.rows() != tile.cols())
    throw ValidationError("intra_block_transpose: tile must be square");
  return transpose(tile);
}

/// Applies intra_block_transpose to every tile in place of a block-permuted
/// array; composed with block_transpose this yields the dense transpose.
template <typename T>
Mat<T> intra_block_transpose_tiles(const Mat<T>& data, std::int64_t block) {
  if (data.rows() % block != 0 || data.cols() % block != 0)
    throw ValidationError("intra_block_transpose_tiles: dims must be multiples of the block edge");
  Mat<T> out(data.rows(), data.cols());
  for (std::int64_t i = 0; i < data.rows() / block; ++i)
    for (std::int64_t j = 0; j < data.cols() / block; ++j)
      for (std::int64_t r = 0; r < block; ++r)
        for (std::int64_t c = 0; c < block; ++c)
          out(i * block + r, j * block + c) = data(i * block + c, j * block + r);
  return out;
}

namespace detail {

// Per-dimension granules for a tensor, by role. Key-length dims must satisfy
// the matmul-N, contraction and softmax floors at once, hence the lcm.
inline std::vector<std::int64_t> pad_granules(const TensorDesc& t, const KernelGranularity& g) {
  std::vector<std::int64_t> gr(t.dims.size(), 1);
  if (t.rank() < 2) return gr;
  const std::int64_t kg = g.k_row_granule();
  std::int64_t row_g = g.m_min, col_g = g.n_min;
  switch (t.role) {
    case TensorRole::Q: row_g = g.m_min, col_g = g.k_min; break;
    case TensorRole::K: row_g = kg, col_g = g.k_min; break;
    case TensorRole::V: row_g = kg, col_g = g.n_min; break;
    case TensorRole::Bias:
    case TensorRole::Mask: row_g = g.m_min, col_g = kg; break;
    case TensorRole::Output: row_g = g.m_min, col_g = g.n_min; break;
    default: break;
  }
  gr[gr.size() - 2] = row_g;
  gr[gr.size() - 1] = col_g;
  return gr;
}

}  // namespace detail

/// Pads each dim to the next multiple of its kernel granularity. The padding
/// itself is carried out by read-DMA descriptors when few enough dims are
/// ragged; otherwise the producing node is asked to emit padded output. No
/// standalone Pad operator is ever scheduled: the depad spec crops the block
/// output instead.
inline PadPlan plan_padding(const TensorDesc& tensor, const KernelGranularity& gran,
                            const NpuConfig& cfg, bool producer_can_pad) {
  if (tensor.dims.empty())
    throw ValidationError("plan_padding: tensor '" + tensor.id + "' has no dims");
  PadPlan plan;
  plan.tensor = tensor.id;
  plan.logical_dims = tensor.dims;
  const auto granules = detail::pad_granules(tensor, gran);
  int ragged = 0;
  for (std::size_t i = 0; i < tensor.dims.size(); ++i) {
    const std::int64_t padded = round_up(tensor.dims[i], granules[i]);
    plan.padded_dims.push_back(padded);
    plan.pad.push_back(padded - tensor.dims[i]);
    if (padded != tensor.dims[i]) ++ragged;
  }
  plan.depad = plan.logical_dims;
  if (ragged <= cfg.dma_pad_dims) {
    plan.mechanism = PadMechanism::DmaPad;
  } else if (producer_can_pad) {
    plan.mechanism = PadMechanism::ProducerPad;
  } else {
    throw ValidationError("plan_padding: tensor '" + tensor.id + "' needs padding on " +
                          std::to_string(ragged) + " dims but the DMA pads at most " +
                          std::to_string(cfg.dma_pad_dims) +
                          " and the producer cannot pad");
  }
  return plan;
}

/// Pads a per-head matrix to the plan's trailing-two padded extents. Mask
/// tensors get kScoreMaskFill in padded key columns (so padded keys vanish
/// under softmax); everything else pads with zero.
inline Matrix apply_pad(const Matrix& data, const PadPlan& plan,
                        TensorRole role = TensorRole::Other) {
  if (plan.logical_dims.size() < 2)
    throw ValidationError("apply_pad: plan must cover a rank >= 2 tensor");
  const std::int64_t lr = plan.logical_dims[plan.logical_dims.size() - 2];
  const std::int64_t lc = plan.logical_dims.back();
  const std::int64_t pr = plan.padded_dims[plan.padded_dims.size() - 2];
  const std::int64_t pc = plan.padded_dims.back();
  if (data.rows() != lr || data.cols() != lc)
    throw ValidationError("apply_pad: data dims do not match the plan's logical dims");
  Matrix out(pr, pc, 0.0);
  if (role == TensorRole::Mask && pc > lc)
    for (std::int64_t r = 0; r < pr; ++r)
      for (std::int64_t c = lc; c < pc; ++c) out(r, c) = kScoreMaskFill;
  for (std::int64_t r = 0; r < lr; ++r)
    for (std::int64_t c = 0; c < lc; ++c) out(r, c) = data(r, c);
  return out;
}

/// Crops a padded per-head matrix back to the plan's logical extents.
inline Matrix apply_depad(const Matrix& data, const PadPlan& plan) {
  if (plan.padded_dims.size() < 2)
    throw ValidationError("apply_depad: plan must cover a rank >= 2 tensor");
  const std::int64_t pr = plan.padded_dims[plan.padded_dims.size() - 2];
  const std::int64_t pc = plan.padded_dims.back();
  if (data.rows() != pr || data.cols() != pc)
    throw ValidationError("apply_depad: data dims do not match the plan's padded dims");
  const std::int64_t lr = plan.depad[plan.depad.size() - 2];
  const std::int64_t lc = plan.depad.back();
  Matrix out(lr, lc);
  for (std::int64_t r = 0; r < lr; ++r)
    for (std::int64_t c = 0; c < lc; ++c) out(r, c) = data(r, c);
  return out;
}

}  // namespace attnfold
