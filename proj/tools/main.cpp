// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
//
// attnfold: match transformer attention chains in a JSON operator graph,
// plan L1 folding / transpose / padding for a parameterized NPU, and report
// folded-vs-unfolded DRAM traffic and roofline latency. See README.md.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnfold/attnfold.hpp"

namespace {

// Exit codes: 0 ok, 1 usage/parse, 2 validation, 3 verify tolerance breach.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitVerify = 3;

void write_report(const nlohmann::json& report, const std::string* out_path) {
  const std::string text = report.dump(2) + "\n";
  if (out_path != nullptr) {
    std::ofstream out(*out_path, std::ios::binary);
    if (!out) throw attnfold::ParseError("cannot write report to '" + *out_path + "'");
    out << text;
  } else {
    std::cout << text;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention folding planner and NPU cost simulator"};
  app.get_formatter()->column_width(34);

  std::string graph_path, config_path, mode_str = "compare", out_path, sweep_str, inputs_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> overrides;

  auto* graph_opt = app.add_option("--graph", graph_path, "JSON operator graph to analyze");
  app.add_option("--config", config_path,
                 "NPU config JSON ({\"npu\":{...},\"granularity\":{...}}); defaults to the "
                 "XDNA2 profile");
  app.add_option("--mode", mode_str, "fold | unfold | compare | verify")
      ->check(CLI::IsMember({"fold", "unfold", "compare", "verify"}));
  app.add_option_function<std::uint64_t>(
         "--seed",
         [&](const std::uint64_t& v) {
           seed = v;
           seed_set = true;
         },
         "RNG seed for input generation (required for verify)");
  app.add_option("--out", out_path, "report destination (stdout when omitted)");
  app.add_option("--set", overrides, "config override key=value (repeatable)")
      ->type_name("KEY=VALUE");
  auto* sweep_opt =
      app.add_option("--sweep", sweep_str,
                     "shape sweep, e.g. lq=1024,lk=64..4096,d=64,heads=12 (A..B doubles, "
                     "A..B:S steps by S)");
  app.add_option("--inputs", inputs_path,
                 "JSON sidecar naming a flat binary of double-precision tensors");
  bool emit_schedules = false;
  app.add_flag("--schedules", emit_schedules,
               "include per-step tile schedules in the report");
  bool summary = false;
  app.add_flag("--summary", summary,
               "print a plain-text summary table (stderr when the report goes to stdout)");
  sweep_opt->excludes(graph_opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    std::vector<std::pair<std::string, std::string>> kv;
    for (const std::string& s : overrides) {
      const auto eq = s.find('=');
      if (eq == std::string::npos)
        throw attnfold::ParseError("--set expects key=value, got '" + s + "'");
      kv.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }

    if (!sweep_str.empty()) {
      attnfold::NpuConfig cfg = attnfold::default_xdna2_config();
      attnfold::KernelGranularity gran;
      if (!config_path.empty()) {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(attnfold::detail::read_file(config_path));
        } catch (const nlohmann::json::exception& e) {
          throw attnfold::ParseError(std::string("config is not valid JSON: ") + e.what());
        }
        if (j.contains("npu")) j.at("npu").get_to(cfg);
        if (j.contains("granularity")) j.at("granularity").get_to(gran);
      }
      for (const auto& [k, v] : kv) attnfold::apply_override(cfg, gran, k, v);
      const auto spec = attnfold::parse_sweep(sweep_str);
      const nlohmann::json report = attnfold::emit_shape_sweep(spec, cfg, gran);
      write_report(report, out_path.empty() ? nullptr : &out_path);
      if (summary)
        (out_path.empty() ? std::cerr : std::cout) << attnfold::summary_table(report);
      return kExitOk;
    }

    if (graph_path.empty())
      throw attnfold::ParseError("either --graph or --sweep is required");

    attnfold::RunRequest req;
    req.graph_path = graph_path;
    if (!config_path.empty()) req.config_path = config_path;
    req.mode = attnfold::run_mode_from_string(mode_str);
    if (seed_set) req.seed = seed;
    if (!out_path.empty()) req.out_path = out_path;
    req.overrides = std::move(kv);
    if (!inputs_path.empty()) req.inputs_path = inputs_path;
    req.emit_schedules = emit_schedules;

    attnfold::RunResult res = attnfold::run(req);
    write_report(res.report, req.out_path ? &*req.out_path : nullptr);
    if (summary)
      (req.out_path ? std::cout : std::cerr) << attnfold::summary_table(res.report);

    if (req.mode == attnfold::RunMode::Verify && !res.verify_ok) {
      std::cerr << "verify: max abs error " << res.max_abs_err << " exceeds tolerance "
                << attnfold::kVerifyTolerance << "\n";
      return kExitVerify;
    }
    return kExitOk;
  } catch (const attnfold::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const attnfold::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const attnfold::VerifyError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitVerify;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}
