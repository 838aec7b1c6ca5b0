// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnfold/eval.hpp"
#include "attnfold/matcher.hpp"
#include "attnfold/sim.hpp"

namespace attnfold {

inline constexpr double kVerifyTolerance = 1e-9;

enum class RunMode { Fold, Unfold, Compare, Verify };

inline const char* to_string(RunMode m) {
  switch (m) {
    case RunMode::Fold: return "fold";
    case RunMode::Unfold: return "unfold";
    case RunMode::Compare: return "compare";
    case RunMode::Verify: return "verify";
  }
  return "compare";
}

inline RunMode run_mode_from_string(const std::string& s) {
  if (s == "fold") return RunMode::Fold;
  if (s == "unfold") return RunMode::Unfold;
  if (s == "compare") return RunMode::Compare;
  if (s == "verify") return RunMode::Verify;
  throw ParseError("unknown mode '" + s + "' (expected fold|unfold|compare|verify)");
}

struct RunRequest {
  std::string graph_path;
  std::optional<std::string> config_path;
  RunMode mode = RunMode::Compare;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::optional<std::string> inputs_path;  ///< flat binary + JSON sidecar
  bool emit_schedules = false;             ///< include per-step schedules in the report
};

/// Per-tensor padding plans of one attention block.
struct BlockPadPlans {
  PadPlan q, k, v, z;
  std::optional<PadPlan> bias, mask;
};

struct BlockResult {
  AttentionMatch match;
  FoldingPlan plan;
  BlockPadPlans pads;
  double util = 1.0;
  CostReport folded_cost, unfolded_cost;
  double speedup = 1.0;
  std::string input_hash;  ///< empty for analytic modes
  double max_abs_err = 0.0;
  bool verified = false;
  Schedule folded_schedule, unfolded_schedule;
};

struct RunResult {
  nlohmann::json report;
  bool verify_ok = true;
  double max_abs_err = 0.0;
  std::vector<BlockResult> blocks;
  Graph rewritten;
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::uint64_t mix_seed(std::uint64_t seed, const std::string& id, std::int64_t head) {
  std::uint64_t h = fnv1a64(id);
  h = fnv1a64(&head, sizeof(head), h);
  return seed ^ h ^ 0x9e3779b97f4a7c15ull;
}

inline void hash_matrix(const Matrix& m, std::uint64_t& h) {
  h = fnv1a64(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// External tensor values: flat binary of doubles + JSON sidecar with dims.
struct ExternalInputs {
  std::map<std::string, std::vector<Matrix>> tensors;
};

inline ExternalInputs load_external_inputs(const std::string& sidecar_path) {
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_file(sidecar_path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("inputs sidecar is not valid JSON: ") + e.what());
  }
  const std::string bin_path = side.value("file", "");
  std::string dir;
  if (auto slash = sidecar_path.find_last_of('/'); slash != std::string::npos)
    dir = sidecar_path.substr(0, slash + 1);
  std::ifstream bin(dir + bin_path, std::ios::binary);
  if (!bin) throw ParseError("cannot read input binary '" + dir + bin_path + "'");

  ExternalInputs ext;
  for (const auto& jt : side.at("tensors")) {
    const std::string id = jt.at("id").get<std::string>();
    const auto dims = jt.at("dims").get<std::vector<std::int64_t>>();
    if (dims.size() < 2) throw ValidationError("input tensor '" + id + "' must have rank >= 2");
    std::int64_t heads = 1;
    for (std::size_t i = 0; i + 2 < dims.size(); ++i) heads *= dims[i];
    const std::int64_t rows = dims[dims.size() - 2], cols = dims.back();
    std::vector<Matrix> v;
    for (std::int64_t h = 0; h < heads; ++h) {
      Matrix m(rows, cols);
      bin.read(reinterpret_cast<char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
      if (!bin)
        throw ParseError("input binary ends before tensor '" + id + "' is complete");
      v.push_back(std::move(m));
    }
    ext.tensors[id] = std::move(v);
  }
  return ext;
}

}  // namespace detail

/// Builds per-tensor padding plans for one matched block. K descs are
/// normalized to natural (Lk, d) orientation before planning.
inline BlockPadPlans plan_block_padding(const Graph& g, const AttentionMatch& m,
                                        const KernelGranularity& gran, const NpuConfig& cfg) {
  const AttnShape& s = m.shape;
  auto can_pad = [&](const std::string& id) { return g.producer_of(id) != nullptr; };

  BlockPadPlans plans;
  plans.q = plan_padding(TensorDesc{m.q, {s.lq, s.d}, TensorRole::Q}, gran, cfg, can_pad(m.q));
  plans.k = plan_padding(TensorDesc{m.k, {s.lk, s.d}, TensorRole::K}, gran, cfg, can_pad(m.k));
  plans.v = plan_padding(TensorDesc{m.v, {s.lk, s.d_v}, TensorRole::V}, gran, cfg, can_pad(m.v));
  plans.z = plan_padding(TensorDesc{m.head_chains.front().z, {s.lq, s.d_v}, TensorRole::Output},
                         gran, cfg, true);
  if (m.bias)
    plans.bias = plan_padding(TensorDesc{*m.bias, {s.lq, s.lk}, TensorRole::Bias}, gran, cfg,
                              can_pad(*m.bias));
  if (m.mask)
    plans.mask = plan_padding(TensorDesc{*m.mask, {s.lq, s.lk}, TensorRole::Mask}, gran, cfg,
                              can_pad(*m.mask));
  return plans;
}

/// Seeded per-head logical inputs for one block. The stream is keyed by
/// tensor id and head index, so identical requests produce identical bytes.
inline AttnInputs generate_inputs(const AttentionMatch& m, std::uint64_t seed) {
  const AttnShape& s = m.shape;
  AttnInputs in;
  const std::int64_t chains = static_cast<std::int64_t>(m.head_chains.size());
  const std::int64_t heads_per_chain = s.heads / chains;
  for (const HeadChainRef& hc : m.head_chains)
    for (std::int64_t h = 0; h < heads_per_chain; ++h) {
      Matrix q(s.lq, s.d);
      fill_uniform(q, detail::mix_seed(seed, hc.q, h));
      in.q.push_back(std::move(q));
    }
  const auto k_ids = m.k_ids();
  const auto v_ids = m.v_ids();
  const std::int64_t kv_per_tensor = s.kv_heads / static_cast<std::int64_t>(k_ids.size());
  for (std::size_t i = 0; i < k_ids.size(); ++i)
    for (std::int64_t h = 0; h < kv_per_tensor; ++h) {
      Matrix k(s.lk, s.d), v(s.lk, s.d_v);
      fill_uniform(k, detail::mix_seed(seed, k_ids[i], h));
      fill_uniform(v, detail::mix_seed(seed, v_ids[i], h));
      in.k.push_back(std::move(k));
      in.v.push_back(std::move(v));
    }
  if (m.bias) {
    Matrix b(s.lq, s.lk);
    fill_uniform(b, detail::mix_seed(seed, *m.bias, 0));
    in.bias.push_back(std::move(b));
  }
  if (m.mask) {
    Matrix mm(s.lq, s.lk);
    fill_uniform(mm, detail::mix_seed(seed, *m.mask, 0));
    in.mask.push_back(std::move(mm));
  }
  return in;
}

/// Pads logical inputs per the block's pad plans (mask pad columns get the
/// score mask fill).
inline AttnInputs pad_inputs(const AttnInputs& in, const BlockPadPlans& plans) {
  AttnInputs out;
  for (const Matrix& q : in.q) out.q.push_back(apply_pad(q, plans.q, TensorRole::Q));
  for (const Matrix& k : in.k) out.k.push_back(apply_pad(k, plans.k, TensorRole::K));
  for (const Matrix& v : in.v) out.v.push_back(apply_pad(v, plans.v, TensorRole::V));
  for (const Matrix& b : in.bias)
    out.bias.push_back(apply_pad(b, *plans.bias, TensorRole::Bias));
  for (const Matrix& m : in.mask)
    out.mask.push_back(apply_pad(m, *plans.mask, TensorRole::Mask));
  return out;
}

inline std::string hash_inputs(const AttnInputs& in) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const Matrix& m : in.q) detail::hash_matrix(m, h);
  for (const Matrix& m : in.k) detail::hash_matrix(m, h);
  for (const Matrix& m : in.v) detail::hash_matrix(m, h);
  for (const Matrix& m : in.bias) detail::hash_matrix(m, h);
  for (const Matrix& m : in.mask) detail::hash_matrix(m, h);
  return detail::hex64(h);
}

/// Runs the full pipeline for one matched block: pad -> transpose plan ->
/// tile -> execute/schedule both mappings -> costs.
inline BlockResult process_block(const Graph& g, const AttentionMatch& m,
                                 const NpuConfig& cfg, const KernelGranularity& gran,
                                 RunMode mode, std::uint64_t seed,
                                 const AttnInputs* external = nullptr) {
  BlockResult blk;
  blk.match = m;
  blk.pads = plan_block_padding(g, m, gran, cfg);

  const AttnShape padded = padded_shape(m.shape, gran);
  FoldingPlan plan = select_tiling(padded, gran, cfg);
  plan.logical_shape = m.shape;
  plan.pad_plans = {blk.pads.q, blk.pads.k, blk.pads.v, blk.pads.z};
  if (blk.pads.bias) plan.pad_plans.push_back(*blk.pads.bias);
  if (blk.pads.mask) plan.pad_plans.push_back(*blk.pads.mask);
  if (m.k_needs_transpose) {
    plan.transpose_plan = plan_transpose(TensorDesc{m.k, {padded.lk, padded.d}, TensorRole::K},
                                         cfg, gran, plan.folding_level >= 2);
  }
  blk.plan = plan;
  blk.util = plan.folding_level >= 2 ? utilization(plan, padded, cfg) : 1.0;

  const bool numeric = mode == RunMode::Compare || mode == RunMode::Verify;
  AttnInputs logical_in, padded_in;
  if (numeric) {
    logical_in = external != nullptr ? *external : generate_inputs(m, seed);
    blk.input_hash = hash_inputs(logical_in);
    padded_in = pad_inputs(logical_in, blk.pads);
  }

  ExecResult unfolded = execute_unfolded(m.shape, padded, cfg, numeric ? &padded_in : nullptr);
  ExecResult folded;
  if (plan.folding_level >= 2) {
    folded = execute_folded(plan, cfg, numeric ? &padded_in : nullptr);
  } else {
    // Nothing folds: the "folded" mapping is the unfolded one.
    folded = execute_unfolded(m.shape, padded, cfg, numeric ? &padded_in : nullptr);
  }

  blk.folded_cost = estimate_latency(folded.schedule, cfg, blk.util);
  blk.unfolded_cost = estimate_latency(unfolded.schedule, cfg, blk.util);
  blk.speedup = blk.folded_cost.latency > 0.0
                    ? blk.unfolded_cost.latency / blk.folded_cost.latency
                    : 1.0;

  if (numeric) {
    const std::int64_t group = m.shape.heads / m.shape.kv_heads;
    double err = 0.0;
    for (std::int64_t h = 0; h < m.shape.heads; ++h) {
      const Matrix& q = logical_in.q[static_cast<std::size_t>(h)];
      const Matrix& k = logical_in.k[static_cast<std::size_t>(h / group)];
      const Matrix& v = logical_in.v[static_cast<std::size_t>(h / group)];
      const Matrix ref = reference_attention(q, k, v,
                                             detail::pick(logical_in.bias, h),
                                             detail::pick(logical_in.mask, h));
      const Matrix zf = apply_depad(folded.z[static_cast<std::size_t>(h)], blk.pads.z);
      const Matrix zu = apply_depad(unfolded.z[static_cast<std::size_t>(h)], blk.pads.z);
      err = std::max(err, max_abs_diff(zf, ref));
      err = std::max(err, max_abs_diff(zu, ref));
    }
    blk.max_abs_err = err;
    blk.verified = err < kVerifyTolerance;
  }

  blk.folded_schedule = std::move(folded.schedule);
  blk.unfolded_schedule = std::move(unfolded.schedule);
  return blk;
}

inline nlohmann::json block_report(const BlockResult& blk, RunMode mode,
                                   bool emit_schedules = false) {
  const AttentionMatch& m = blk.match;
  nlohmann::json jm{{"variant", to_string(m.variant)},
                    {"num_q_heads", m.num_q_heads},
                    {"num_kv_heads", m.num_kv_heads},
                    {"bias", m.bias.has_value()},
                    {"mask", m.mask.has_value()},
                    {"k_needs_transpose", m.k_needs_transpose},
                    {"q", m.q},
                    {"k", m.k},
                    {"v", m.v},
                    {"chain", m.chain},
                    {"shape", m.shape}};

  nlohmann::json j{{"match", std::move(jm)},
                   {"folding_plan", blk.plan},
                   {"utilization", blk.util}};
  j["transpose_plan"] =
      blk.plan.transpose_plan ? nlohmann::json(*blk.plan.transpose_plan) : nlohmann::json();
  j["pad_plans"] = nlohmann::json::array();
  for (const PadPlan& p : blk.plan.pad_plans) j["pad_plans"].push_back(p);

  nlohmann::json folded(blk.folded_cost), unfolded(blk.unfolded_cost);
  if (!blk.input_hash.empty()) {
    folded["input_hash"] = blk.input_hash;
    unfolded["input_hash"] = blk.input_hash;
  }
  if (mode != RunMode::Unfold) j["folded"] = std::move(folded);
  if (mode != RunMode::Fold) j["unfolded"] = std::move(unfolded);
  if (mode == RunMode::Compare || mode == RunMode::Verify) j["speedup"] = blk.speedup;
  if (mode == RunMode::Verify)
    j["verify"] = nlohmann::json{{"max_abs_error", blk.max_abs_err},
                                 {"tolerance", kVerifyTolerance},
                                 {"ok", blk.verified}};
  if (emit_schedules) {
    if (mode != RunMode::Unfold) j["folded_schedule"] = blk.folded_schedule;
    if (mode != RunMode::Fold) j["unfolded_schedule"] = blk.unfolded_schedule;
  }
  return j;
}

/// Full pipeline over a parsed graph: match -> batch -> per-block processing
/// -> fold rewrite. Does not write files; the CLI owns I/O.
inline RunResult run_pipeline(const Graph& g, const NpuConfig& cfg,
                              const KernelGranularity& gran, RunMode mode, std::uint64_t seed,
                              const detail::ExternalInputs* ext = nullptr,
                              bool emit_schedules = false) {
  cfg.validate();
  gran.validate(cfg);

  const auto matches = batch_heads(g, match_attention(g));
  RunResult res;
  res.rewritten = g;

  const bool numeric_mode = mode == RunMode::Compare || mode == RunMode::Verify;
  nlohmann::json blocks = nlohmann::json::array();
  for (const AttentionMatch& m : matches) {
    std::optional<AttnInputs> external;
    if (ext != nullptr && numeric_mode) {
      AttnInputs in;
      auto fetch = [&](const std::string& id, std::vector<Matrix>& dst) {
        auto it = ext->tensors.find(id);
        if (it == ext->tensors.end())
          throw ValidationError("external inputs missing tensor '" + id + "'");
        for (const Matrix& mat : it->second) dst.push_back(mat);
      };
      const std::int64_t chains = static_cast<std::int64_t>(m.head_chains.size());
      for (std::int64_t c = 0; c < chains; ++c) fetch(m.head_chains[static_cast<std::size_t>(c)].q, in.q);
      for (const auto& id : m.k_ids()) fetch(id, in.k);
      for (const auto& id : m.v_ids()) fetch(id, in.v);
      if (m.bias) fetch(*m.bias, in.bias);
      if (m.mask) fetch(*m.mask, in.mask);
      if (!m.k_needs_transpose)
        for (Matrix& k : in.k) k = transpose(k);  // stored (d, Lk)
      external = std::move(in);
    }
    BlockResult blk = process_block(g, m, cfg, gran, mode, seed,
                                    external ? &*external : nullptr);
    if (blk.plan.folding_level >= 2)
      res.rewritten = fold_attention(res.rewritten, m, blk.plan);
    res.max_abs_err = std::max(res.max_abs_err, blk.max_abs_err);
    if (mode == RunMode::Verify && !blk.verified) res.verify_ok = false;
    blocks.push_back(block_report(blk, mode, emit_schedules));
    res.blocks.push_back(std::move(blk));
  }

  res.report = nlohmann::json{{"mode", to_string(mode)},
                              {"config", cfg},
                              {"granularity", gran},
                              {"blocks", std::move(blocks)},
                              {"graph", nlohmann::json{{"nodes_before", g.nodes().size()},
                                                       {"nodes_after", res.rewritten.nodes().size()},
                                                       {"matches", matches.size()}}}};
  if (mode == RunMode::Compare || mode == RunMode::Verify) res.report["seed"] = seed;
  if (mode == RunMode::Verify) {
    res.report["verify"] = nlohmann::json{{"max_abs_error", res.max_abs_err},
                                          {"tolerance", kVerifyTolerance},
                                          {"ok", res.verify_ok}};
  }
  return res;
}

/// Entry point used by the CLI for graph runs.
inline RunResult run(const RunRequest& req) {
  if (req.mode == RunMode::Verify && !req.seed)
    throw ParseError("mode=verify requires --seed");
  NpuConfig cfg = default_xdna2_config();
  KernelGranularity gran;
  if (req.config_path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(detail::read_file(*req.config_path));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("config is not valid JSON: ") + e.what());
    }
    if (j.contains("npu")) j.at("npu").get_to(cfg);
    if (j.contains("granularity")) j.at("granularity").get_to(gran);
  }
  for (const auto& [k, v] : req.overrides) apply_override(cfg, gran, k, v);

  const Graph g = parse_graph(detail::read_file(req.graph_path));
  std::optional<detail::ExternalInputs> ext;
  if (req.inputs_path) ext = detail::load_external_inputs(*req.inputs_path);

  RunResult res = run_pipeline(g, cfg, gran, req.mode, req.seed.value_or(0),
                               ext ? &*ext : nullptr, req.emit_schedules);
  res.report["graph_path"] = req.graph_path;
  return res;
}

/// Plain-text table for a block or sweep report; the JSON stays the machine
/// interface.
inline std::string summary_table(const nlohmann::json& report) {
  std::ostringstream out;
  char line[256];
  auto us = [](const nlohmann::json& cost) { return cost.at("latency_s").get<double>() * 1e6; };

  if (report.contains("sweep")) {
    out << "   lq    lk     d heads lvl  util   folded_us unfolded_us speedup\n";
    for (const auto& row : report.at("sweep")) {
      std::snprintf(line, sizeof(line), "%5lld %5lld %5lld %5lld %3d %5.2f %11.3f %11.3f %7.2f\n",
                    static_cast<long long>(row.at("lq").get<std::int64_t>()),
                    static_cast<long long>(row.at("lk").get<std::int64_t>()),
                    static_cast<long long>(row.at("d").get<std::int64_t>()),
                    static_cast<long long>(row.at("heads").get<std::int64_t>()),
                    row.at("folding_level").get<int>(), row.at("utilization").get<double>(),
                    us(row.at("folded")), us(row.at("unfolded")),
                    row.at("speedup").get<double>());
      out << line;
    }
    return out.str();
  }

  out << "blk variant  q/kv heads lvl strategy  util   folded_us unfolded_us speedup bound\n";
  int i = 0;
  for (const auto& blk : report.at("blocks")) {
    const auto& m = blk.at("match");
    const auto& plan = blk.at("folding_plan");
    const std::string strategy =
        plan.at("strategy").is_null() ? "-" : plan.at("strategy").at("mode").get<std::string>();
    const bool has_f = blk.contains("folded"), has_u = blk.contains("unfolded");
    char speedup[16] = "-";
    if (blk.contains("speedup"))
      std::snprintf(speedup, sizeof(speedup), "%.2f", blk.at("speedup").get<double>());
    const std::string bound = has_f ? blk.at("folded").at("bound").get<std::string>()
                                    : blk.at("unfolded").at("bound").get<std::string>();
    std::snprintf(line, sizeof(line), "%3d %-7s %5lld/%-5lld %3d %-9s %5.2f %11.3f %11.3f %7s %s\n",
                  i++, m.at("variant").get<std::string>().c_str(),
                  static_cast<long long>(m.at("num_q_heads").get<std::int64_t>()),
                  static_cast<long long>(m.at("num_kv_heads").get<std::int64_t>()),
                  plan.at("folding_level").get<int>(), strategy.c_str(),
                  blk.at("utilization").get<double>(), has_f ? us(blk.at("folded")) : 0.0,
                  has_u ? us(blk.at("unfolded")) : 0.0, speedup, bound.c_str());
    out << line;
  }
  return out.str();
}

// ---- shape sweep -----------------------------------------------------------

struct SweepSpec {
  std::vector<std::int64_t> lq, lk, d, heads;
};

/// Parses "lq=64..1024,lk=64..4096,d=64,heads=12". A..B ranges double from A
/// up to B; A..B:S steps linearly by S.
inline SweepSpec parse_sweep(const std::string& text) {
  SweepSpec spec;
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ',')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos)
      throw ParseError("sweep field '" + field + "' must look like key=value");
    const std::string key = field.substr(0, eq);
    const std::string val = field.substr(eq + 1);
    std::vector<std::int64_t>* dst = nullptr;
    if (key == "lq") dst = &spec.lq;
    else if (key == "lk") dst = &spec.lk;
    else if (key == "d") dst = &spec.d;
    else if (key == "heads") dst = &spec.heads;
    else throw ParseError("unknown sweep key '" + key + "'");

    auto parse_int = [&](const std::string& s) -> std::int64_t {
      try {
        std::size_t pos = 0;
        const std::int64_t v = std::stoll(s, &pos);
        if (pos != s.size() || v < 1) throw std::invalid_argument(s);
        return v;
      } catch (const std::exception&) {
        throw ParseError("sweep value '" + s + "' is not a positive integer");
      }
    };

    const auto dots = val.find("..");
    if (dots == std::string::npos) {
      dst->push_back(parse_int(val));
      continue;
    }
    const std::int64_t lo = parse_int(val.substr(0, dots));
    std::string rest = val.substr(dots + 2);
    std::int64_t step = 0;  // 0 = doubling
    if (const auto colon = rest.find(':'); colon != std::string::npos) {
      step = parse_int(rest.substr(colon + 1));
      rest = rest.substr(0, colon);
    }
    const std::int64_t hi = parse_int(rest);
    if (hi < lo) throw ParseError("sweep range '" + val + "' is empty");
    for (std::int64_t v = lo; v <= hi; v = step > 0 ? v + step : v * 2) dst->push_back(v);
  }
  if (spec.lq.empty() || spec.lk.empty() || spec.d.empty() || spec.heads.empty())
    throw ParseError("sweep must specify lq, lk, d and heads (each may be a single value)");
  return spec;
}

/// Analytic folded-vs-unfolded table over the cartesian product of the sweep
/// ranges; no tensors are materialized.
inline nlohmann::json emit_shape_sweep(const SweepSpec& spec, const NpuConfig& cfg,
                                       const KernelGranularity& gran) {
  cfg.validate();
  gran.validate(cfg);
  nlohmann::json rows = nlohmann::json::array();
  for (std::int64_t heads : spec.heads)
    for (std::int64_t d : spec.d)
      for (std::int64_t lq : spec.lq)
        for (std::int64_t lk : spec.lk) {
          AttnShape logical;
          logical.heads = heads;
          logical.kv_heads = heads;
          logical.lq = lq;
          logical.lk = lk;
          logical.d = d;
          logical.d_v = d;
          const AttnShape padded = padded_shape(logical, gran);
          FoldingPlan plan = select_tiling(padded, gran, cfg);
          plan.logical_shape = logical;
          const double util =
              plan.folding_level >= 2 ? utilization(plan, padded, cfg) : 1.0;
          Schedule folded_sched =
              plan.folding_level >= 2
                  ? execute_folded(plan, cfg, nullptr).schedule
                  : execute_unfolded(logical, padded, cfg, nullptr).schedule;
          Schedule unfolded_sched = execute_unfolded(logical, padded, cfg, nullptr).schedule;
          const CostReport fc = estimate_latency(folded_sched, cfg, util);
          const CostReport uc = estimate_latency(unfolded_sched, cfg, util);
          nlohmann::json row{{"lq", lq},
                             {"lk", lk},
                             {"d", d},
                             {"heads", heads},
                             {"folding_level", plan.folding_level},
                             {"utilization", util},
                             {"folded", fc},
                             {"unfolded", uc},
                             {"speedup", fc.latency > 0.0 ? uc.latency / fc.latency : 1.0}};
          if (plan.strategy) row["strategy"] = *plan.strategy;
          rows.push_back(std::move(row));
        }
  return nlohmann::json{{"mode", "sweep"}, {"config", cfg}, {"granularity", gran},
                        {"sweep", std::move(rows)}};
}

}  // namespace attnfold
