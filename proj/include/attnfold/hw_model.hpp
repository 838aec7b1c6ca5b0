// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <numeric>
#include <string>

#include <json.hpp>

#include "attnfold/errors.hpp"

namespace attnfold {

/// Parameterized NPU model. Every other module consults this; instances are
/// immutable values after construction and safe to share across threads.
struct NpuConfig {
  std::int64_t rows = 4;   ///< core rows in the grid
  std::int64_t cols = 8;   ///< core columns in the grid
  std::int64_t l1_bytes = 64 * 1024;   ///< L1 scratchpad per core tile
  std::int64_t l2_bytes = 512 * 1024;  ///< L2 staging memory per tile
  double dram_bw_bytes_per_s = 60e9;   ///< shared DRAM read+write bandwidth
  double peak_ops_per_s = 50e12;       ///< peak MAC throughput
  std::int64_t dma_min_stride_bytes = 4;  ///< minimum DMA traversal stride
  int dma_pad_dims = 3;                ///< dimensions the read DMA can pad
  std::int64_t elem_bytes = 2;         ///< modeled tensor element width

  void validate() const {
    if (rows < 1 || cols < 1) throw ValidationError("NpuConfig: grid must be at least 1x1");
    if (l1_bytes <= 0) throw ValidationError("NpuConfig: l1_bytes must be positive");
    if (l2_bytes < l1_bytes) throw ValidationError("NpuConfig: l2_bytes must be >= l1_bytes");
    if (dram_bw_bytes_per_s <= 0 || peak_ops_per_s <= 0)
      throw ValidationError("NpuConfig: bandwidth and peak rate must be positive");
    if (dma_min_stride_bytes < 1) throw ValidationError("NpuConfig: dma_min_stride_bytes must be >= 1");
    if (dma_pad_dims < 0) throw ValidationError("NpuConfig: dma_pad_dims must be >= 0");
    if (elem_bytes < 1 || elem_bytes > 8) throw ValidationError("NpuConfig: elem_bytes out of range");
    // Note: dma_min_stride_bytes may exceed elem_bytes; that mismatch is what
    // forces block transpose instead of element-granularity DMA transpose.
  }
};

/// XDNA2-class profile: 4x8 grid, 64KB L1 / 512KB L2, ~60 GB/s shared DRAM,
/// 50 TOPs peak, 4B minimum DMA stride, 3 paddable read dimensions, 2B elements.
inline NpuConfig default_xdna2_config() { return NpuConfig{}; }

/// Minimum tile extents prescribed by the compute kernels (vector lane widths
/// and unrolled-loop depths), plus the DMA transpose block edge.
struct KernelGranularity {
  std::int64_t m_min = 8;   ///< minimum rows per MatMul tile
  std::int64_t k_min = 8;   ///< minimum contraction length
  std::int64_t n_min = 8;   ///< minimum output columns
  std::int64_t sm_min = 8;  ///< minimum softmax vector length
  std::int64_t block = 8;   ///< transpose block edge, in elements

  void validate(const NpuConfig& cfg) const {
    if (m_min < 1 || k_min < 1 || n_min < 1 || sm_min < 1 || block < 1)
      throw ValidationError("KernelGranularity: all fields must be >= 1");
    if (block * cfg.elem_bytes < cfg.dma_min_stride_bytes)
      throw ValidationError("KernelGranularity: block x elem_bytes must cover the DMA stride");
  }

  /// Granule for tiles over the key dimension: such tiles are simultaneously
  /// matmul output columns, a contraction length, and a softmax vector.
  std::int64_t k_row_granule() const {
    return std::lcm(std::lcm(n_min, k_min), sm_min);
  }
};

/// Smallest multiple of granule that is >= dim.
inline std::int64_t round_up(std::int64_t dim, std::int64_t granule) {
  if (granule < 1) throw ValidationError("round_up: granularity must be >= 1");
  if (dim < 0) throw ValidationError("round_up: dimension must be >= 0");
  return (dim + granule - 1) / granule * granule;
}

// ---- JSON I/O ------------------------------------------------------------
// Config files may specify any subset of fields; unspecified fields keep the
// defaults of the object they are loaded into.

inline void from_json(const nlohmann::json& j, NpuConfig& c) {
  c.rows = j.value("rows", c.rows);
  c.cols = j.value("cols", c.cols);
  c.l1_bytes = j.value("l1_bytes", c.l1_bytes);
  c.l2_bytes = j.value("l2_bytes", c.l2_bytes);
  c.dram_bw_bytes_per_s = j.value("dram_bw_bytes_per_s", c.dram_bw_bytes_per_s);
  c.peak_ops_per_s = j.value("peak_ops_per_s", c.peak_ops_per_s);
  c.dma_min_stride_bytes = j.value("dma_min_stride_bytes", c.dma_min_stride_bytes);
  c.dma_pad_dims = j.value("dma_pad_dims", c.dma_pad_dims);
  c.elem_bytes = j.value("elem_bytes", c.elem_bytes);
}

inline void to_json(nlohmann::json& j, const NpuConfig& c) {
  j = nlohmann::json{{"rows", c.rows},
                     {"cols", c.cols},
                     {"l1_bytes", c.l1_bytes},
                     {"l2_bytes", c.l2_bytes},
                     {"dram_bw_bytes_per_s", c.dram_bw_bytes_per_s},
                     {"peak_ops_per_s", c.peak_ops_per_s},
                     {"dma_min_stride_bytes", c.dma_min_stride_bytes},
                     {"dma_pad_dims", c.dma_pad_dims},
                     {"elem_bytes", c.elem_bytes}};
}

inline void from_json(const nlohmann::json& j, KernelGranularity& g) {
  g.m_min = j.value("m_min", g.m_min);
  g.k_min = j.value("k_min", g.k_min);
  g.n_min = j.value("n_min", g.n_min);
  g.sm_min = j.value("sm_min", g.sm_min);
  g.block = j.value("block", g.block);
}

inline void to_json(nlohmann::json& j, const KernelGranularity& g) {
  j = nlohmann::json{{"m_min", g.m_min},
                     {"k_min", g.k_min},
                     {"n_min", g.n_min},
                     {"sm_min", g.sm_min},
                     {"block", g.block}};
}

/// Applies one `key=value` override to whichever struct owns the key.
/// Field names of the two structs are disjoint, so a flat key space works.
inline void apply_override(NpuConfig& cfg, KernelGranularity& gran,
                           const std::string& key, const std::string& value) {
  auto as_i64 = [&]() -> std::int64_t {
    try {
      std::size_t pos = 0;
      const std::int64_t v = std::stoll(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw ParseError("override '" + key + "': cannot parse integer from '" + value + "'");
    }
  };
  auto as_f64 = [&]() -> double {
    try {
      std::size_t pos = 0;
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw ParseError("override '" + key + "': cannot parse number from '" + value + "'");
    }
  };

  if (key == "rows") cfg.rows = as_i64();
  else if (key == "cols") cfg.cols = as_i64();
  else if (key == "l1_bytes") cfg.l1_bytes = as_i64();
  else if (key == "l2_bytes") cfg.l2_bytes = as_i64();
  else if (key == "dram_bw_bytes_per_s") cfg.dram_bw_bytes_per_s = as_f64();
  else if (key == "peak_ops_per_s") cfg.peak_ops_per_s = as_f64();
  else if (key == "dma_min_stride_bytes") cfg.dma_min_stride_bytes = as_i64();
  else if (key == "dma_pad_dims") cfg.dma_pad_dims = static_cast<int>(as_i64());
  else if (key == "elem_bytes") cfg.elem_bytes = as_i64();
  else if (key == "m_min") gran.m_min = as_i64();
  else if (key == "k_min") gran.k_min = as_i64();
  else if (key == "n_min") gran.n_min = as_i64();
  else if (key == "sm_min") gran.sm_min = as_i64();
  else if (key == "block") gran.block = as_i64();
  else throw ParseError("unknown override key '" + key + "'");
}

}  // namespace attnfold
