/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

// epsim run | verify | footprint

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "epsim/driver.hpp"
#include "json.hpp"

using namespace epsim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Settings {
  std::string mode = "ll";
  std::string layout = "optimized";
  std::string combine = "hierarchical";
  int ranks = 8;
  int ranks_per_node = 0;  // 0: all ranks on one node
  int experts = 32;
  int tokens = 16;
  int hidden = 128;
  int topk = 4;
  std::string dtype = "bf16";
  bool scales = false;
  int iters = 2;
  std::uint64_t seed = 1;
  std::int64_t delay_seed = -1;
  bool send_only = false;
  std::string expert = "affine";
  int chunk_tokens = 4;
  int fifo_depth = 8;
  std::string output;
  std::string trace;
  bool corrupt_combine_slot = false;
};

struct Flag {
  const char* key;
  CLI::Option* opt;
  std::function<void(const nlohmann::json&)> from_json;
  std::function<void()> from_flag;
};

template <typename T>
void add(CLI::App& app, std::vector<Flag>& flags, const char* name, const char* key, T Settings::*field,
         Settings& target, Settings& parsed, const char* help) {
  CLI::Option* opt = app.add_option(name, parsed.*field, help);
  flags.push_back({key, opt, [&target, field](const nlohmann::json& j) { target.*field = j.get<T>(); },
                   [&target, &parsed, field] { target.*field = parsed.*field; }});
}

void add_bool(CLI::App& app, std::vector<Flag>& flags, const char* name, const char* key,
              bool Settings::*field, Settings& target, Settings& parsed, const char* help) {
  CLI::Option* opt = app.add_flag(name, parsed.*field, help);
  flags.push_back({key, opt,
                   [&target, field](const nlohmann::json& j) { target.*field = j.get<bool>(); },
                   [&target, &parsed, field] { target.*field = parsed.*field; }});
}

EpConfig to_config(const Settings& s) {
  EpConfig c;
  if (s.mode == "ll") {
    c.algorithm = Algorithm::LL;
  } else if (s.mode == "ht") {
    c.algorithm = Algorithm::HT;
  } else {
    raise(ErrorCode::InvalidArgument, "--mode must be ll or ht");
  }
  if (s.layout == "optimized") {
    c.ll_layout = LlLayout::Optimized;
  } else if (s.layout == "legacy") {
    c.ll_layout = LlLayout::Legacy;
  } else {
    raise(ErrorCode::InvalidArgument, "--layout must be optimized or legacy");
  }
  if (s.combine == "hierarchical") {
    c.ht_combine_path = HtCombinePath::Hierarchical;
  } else if (s.combine == "flat") {
    c.ht_combine_path = HtCombinePath::Flat;
  } else {
    raise(ErrorCode::InvalidArgument, "--combine must be hierarchical or flat");
  }
  c.num_ranks = s.ranks;
  c.ranks_per_node = s.ranks_per_node > 0 ? s.ranks_per_node : s.ranks;
  c.num_experts = s.experts;
  c.max_tokens_per_rank = s.tokens;
  c.hidden = s.hidden;
  c.top_k = s.topk;
  c.token_dtype = parse_dtype(s.dtype);
  c.with_scales = s.scales;
  c.ht_chunk_tokens = s.chunk_tokens;
  c.ht_fifo_depth = s.fifo_depth;
  c.debug_corrupt_combine_slot = s.corrupt_combine_slot;
  c.validate();
  return c;
}

driver::CaseOptions to_case(const Settings& s) {
  driver::CaseOptions o;
  o.config = to_config(s);
  o.seed = s.seed;
  if (s.delay_seed >= 0) o.delay_seed = static_cast<std::uint64_t>(s.delay_seed);
  o.staged = s.send_only;
  o.expert = scenario::parse_expert_kind(s.expert);
  o.iterations = s.iters;
  o.record_trace = !s.trace.empty();
  o.timeout = std::nullopt;
  return o;
}

int cmd_run(const Settings& s) {
  const auto o = to_case(s);
  const auto result = driver::run_case(o);
  const std::string problem = driver::check_case(o, result);

  if (s.output.empty()) {
    driver::write_stats_csv(std::cout, result);
  } else {
    std::ofstream out(s.output);
    if (!out) {
      std::cerr << "cannot write " << s.output << "\n";
      return kExitUsage;
    }
    driver::write_stats_csv(out, result);
  }
  if (!s.trace.empty()) {
    std::ofstream out(s.trace);
    if (!out) {
      std::cerr << "cannot write " << s.trace << "\n";
      return kExitUsage;
    }
    write_trace(out, result.trace);
  }
  if (!problem.empty()) {
    std::cerr << "invariant violated: " << problem << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_verify(const Settings& s, const std::vector<Flag>& flags) {
  driver::GridOptions g;
  g.seed = s.seed;
  g.hidden = s.hidden;
  g.debug_corrupt_combine_slot = s.corrupt_combine_slot;
  for (const auto& f : flags) {
    if (f.opt->count() == 0) continue;
    if (std::string(f.key) == "layout") {
      g.layout = s.layout == "legacy" ? LlLayout::Legacy : LlLayout::Optimized;
      g.algorithm = Algorithm::LL;
    } else if (std::string(f.key) == "mode") {
      g.algorithm = s.mode == "ht" ? Algorithm::HT : Algorithm::LL;
    }
  }
  const auto start = std::chrono::steady_clock::now();
  const auto report = driver::verify_grid(g, [](const std::string& line) {
    std::cout << line << std::endl;
  });
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << (report.failures == 0 ? "PASS" : "FAIL") << " " << report.cases - report.failures
            << "/" << report.cases << " cases in " << std::fixed << std::setprecision(2) << secs
            << " s\n";
  return report.failures == 0 ? kExitOk : kExitFailure;
}

int cmd_footprint(const Settings& s) {
  Settings t = s;
  t.mode = "ll";
  const EpConfig c = to_config(t);
  const auto r = driver::footprint_report(c);
  std::cout << "experts,ranks,topk,hidden,tokens,dtype,legacy_bytes,optimized_bytes,"
               "formula_ratio,measured_ratio\n";
  std::cout << c.num_experts << ',' << c.num_ranks << ',' << c.top_k << ',' << c.hidden << ','
            << c.max_tokens_per_rank << ',' << to_string(c.token_dtype) << ',' << r.legacy_bytes
            << ',' << r.optimized_bytes << ',' << std::fixed << std::setprecision(4)
            << r.formula_ratio << ',' << r.measured_ratio << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  Settings settings;  // effective values
  Settings parsed;    // raw flag values
  CLI::App app{"Simulated expert-parallel dispatch/combine"};
  app.require_subcommand(1);
  app.fallthrough();

  std::vector<Flag> flags;
  add(app, flags, "--mode", "mode", &Settings::mode, settings, parsed, "ll | ht");
  add(app, flags, "--layout", "layout", &Settings::layout, settings, parsed,
      "optimized | legacy (LL)");
  add(app, flags, "--combine", "combine", &Settings::combine, settings, parsed,
      "hierarchical | flat (HT)");
  add(app, flags, "--ranks", "ranks", &Settings::ranks, settings, parsed, "simulated ranks");
  add(app, flags, "--ranks-per-node", "ranks_per_node", &Settings::ranks_per_node, settings,
      parsed, "ranks per node (default: all)");
  add(app, flags, "--experts", "experts", &Settings::experts, settings, parsed, "experts");
  add(app, flags, "--tokens", "tokens", &Settings::tokens, settings, parsed, "tokens per rank");
  add(app, flags, "--hidden", "hidden", &Settings::hidden, settings, parsed, "hidden size");
  add(app, flags, "--topk", "topk", &Settings::topk, settings, parsed, "experts per token");
  add(app, flags, "--dtype", "dtype", &Settings::dtype, settings, parsed, "f32 | bf16 | f16 | fp8");
  add_bool(app, flags, "--scales", "scales", &Settings::scales, settings, parsed,
           "block scales with fp8 tokens");
  add(app, flags, "--iters", "iters", &Settings::iters, settings, parsed, "iterations");
  add(app, flags, "--seed", "seed", &Settings::seed, settings, parsed, "workload seed");
  add(app, flags, "--delay-seed", "delay_seed", &Settings::delay_seed, settings, parsed,
      "randomized delivery seed (-1: in order)");
  add_bool(app, flags, "--send-only", "send_only", &Settings::send_only, settings, parsed,
           "staged dispatch/combine finished by complete");
  add(app, flags, "--expert", "expert", &Settings::expert, settings, parsed,
      "identity | scale | affine");
  add(app, flags, "--chunk-tokens", "chunk_tokens", &Settings::chunk_tokens, settings, parsed,
      "HT ring chunk");
  add(app, flags, "--fifo-depth", "fifo_depth", &Settings::fifo_depth, settings, parsed,
      "HT ring depth in chunks");
  add(app, flags, "--output", "output", &Settings::output, settings, parsed, "CSV path");
  add(app, flags, "--trace", "trace", &Settings::trace, settings, parsed, "trace log path");
  add_bool(app, flags, "--debug-corrupt-combine-slot", "debug_corrupt_combine_slot",
           &Settings::corrupt_combine_slot, settings, parsed,
           "shift the optimized combine slot (verifier self-test)");
  std::string config_path;
  app.add_option("--config", config_path, "JSON file with the same keys; flags win");

  auto* run = app.add_subcommand("run", "run a workload and print per-operation stats CSV");
  auto* verify = app.add_subcommand("verify", "sweep small configs against the oracle");
  auto* footprint = app.add_subcommand("footprint", "LL receive-buffer bytes per layout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) {
        std::cerr << "cannot read " << config_path << "\n";
        return kExitUsage;
      }
      const auto j = nlohmann::json::parse(in);
      for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (auto& f : flags) {
          if (key == f.key) {
            f.from_json(value);
            known = true;
          }
        }
        if (!known) {
          std::cerr << "unknown config key '" << key << "'\n";
          return kExitUsage;
        }
      }
    }
    for (auto& f : flags) {
      if (f.opt->count() > 0) f.from_flag();
    }
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "bad config: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*footprint) return cmd_footprint(settings);
    if (*verify) return cmd_verify(settings, flags);
    if (*run) return cmd_run(settings);
  } catch (const EpError& e) {
    std::cerr << to_string(e.code()) << ": " << e.detail() << "\n";
    return e.code() == ErrorCode::InvalidArgument ? kExitUsage : kExitFailure;
  }
  return kExitUsage;
}
