// SPDX-License-Identifier: Apache-2.0

// Command-line front end: gen, optimize, simulate, compare, oracle.

#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pooch/io.hpp"
#include "pooch/optimizer.hpp"
#include "pooch/oracle.hpp"
#include "pooch/synth.hpp"
#include "pooch/trace_export.hpp"

namespace pooch {

/// Decimal ("1.5") or fraction ("3/2") to a positive rational.
inline Rational parse_rational(const std::string& s) {
  auto digits = [&](const std::string& t) {
    return !t.empty() && t.size() <= 18 && t.find_first_not_of("0123456789") == std::string::npos;
  };
  Rational r;
  if (const auto slash = s.find('/'); slash != std::string::npos) {
    const auto a = s.substr(0, slash);
    const auto b = s.substr(slash + 1);
    if (!digits(a) || !digits(b)) throw UsageError("bad batch factor '" + s + "'");
    r = {std::stoll(a), std::stoll(b)};
  } else {
    const auto dot = s.find('.');
    const auto whole = s.substr(0, dot);
    const auto frac = dot == std::string::npos ? std::string{} : s.substr(dot + 1);
    if ((!whole.empty() && !digits(whole)) || (!frac.empty() && !digits(frac)) || (whole.empty() && frac.empty()) ||
        whole.size() + frac.size() > 18) {
      throw UsageError("bad batch factor '" + s + "'");
    }
    std::int64_t den = 1;
    for (std::size_t i = 0; i < frac.size(); ++i) den *= 10;
    r = {std::stoll(whole.empty() ? "0" : whole) * den + (frac.empty() ? 0 : std::stoll(frac)), den};
  }
  if (r.num <= 0 || r.den <= 0) throw UsageError("batch factor must be positive, got '" + s + "'");
  return r;
}

inline json to_json(const OverheadEval& e) {
  json out = {{"swap_overhead_us", e.swap_overhead}};
  out["recompute_overhead_us"] = e.recompute_overhead ? json(*e.recompute_overhead) : json(nullptr);
  out["r"] = e.infinite() ? json("inf") : json(e.ratio());
  return out;
}

inline json to_json(const PlanReport& r) {
  json baselines = json::object();
  for (const auto& [name, ms] : r.baseline_makespans) baselines[name] = ms ? json(*ms) : json(nullptr);
  const auto& s = r.stats;
  json decisions = json::array();
  for (const auto& d : r.decisions) {
    json j = {{"step", d.step}, {"round", d.round}, {"layer", d.layer}, {"action", std::string(to_string(d.action))}};
    if (d.eval) j["eval"] = to_json(*d.eval);
    if (d.makespan_before) j["makespan_before_us"] = *d.makespan_before;
    if (d.makespan_before || d.makespan_trial) {
      j["makespan_trial_us"] = d.makespan_trial ? json(*d.makespan_trial) : json(nullptr);
    }
    decisions.push_back(std::move(j));
  }
  return {
      {"plan", to_json(r.placement)},
      {"makespan_us", r.makespan},
      {"peak_memory_bytes", r.peak_memory},
      {"counts", {{"keep", r.counts[0]}, {"swap", r.counts[1]}, {"recompute", r.counts[2]}}},
      {"in_core", r.in_core},
      {"overhead_baseline", r.overhead_baseline},
      {"baseline_makespans_us", std::move(baselines)},
      {"stats",
       {{"simulations", s.simulations},
        {"step1_simulations", s.step1_simulations},
        {"step2_simulations", s.step2_simulations},
        {"swap_out_exposed", s.swap_out_exposed},
        {"swap_in_exposed", s.swap_in_exposed},
        {"tree_size", s.tree_size},
        {"scan_size", s.scan_size},
        {"step2_candidates", s.step2_candidates},
        {"truncated", s.truncated},
        {"wall_ms", s.wall_ms}}},
      {"decisions", std::move(decisions)},
  };
}

namespace detail {

struct ProfileArgs {
  std::string profile;
  std::string env;
  std::string batch;
};

inline void add_profile_args(CLI::App* cmd, ProfileArgs& a) {
  cmd->add_option("--profile", a.profile, "Profile JSON")->required();
  cmd->add_option("--env", a.env, "Replace the environment with a preset")
      ->check(CLI::IsMember({"pcie_x86", "nvlink_power9"}));
  cmd->add_option("--batch", a.batch, "Scale times and sizes by this factor (e.g. 2, 0.5, 3/2)");
}

inline Profile load_scaled(const ProfileArgs& a) {
  auto p = load_profile(a.profile);
  if (!a.env.empty()) p.env = preset_env(*env_preset_from_string(a.env));
  if (!a.batch.empty()) p = scale_profile(p, parse_rational(a.batch));
  validate(p);
  return p;
}

inline std::string fmt_ms(std::optional<Micros> v) { return v ? std::to_string(*v) : std::string("oom"); }

}  // namespace detail

/// Runs one command. Exit status: 0 success, 1 user or validation error, 2 infeasible input.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Out-of-core training memory planner", "pooch"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic profile");
  std::string shape;
  int n_layers = 3;
  int n_blocks = 0;
  int gen_batch = 1;
  std::uint64_t seed = 0;
  std::string gen_env = "pcie_x86";
  std::string gen_out;
  gen->add_option("--shape", shape, "chain | resnet_like | alexnet_like | resnext3d_like")
      ->required()
      ->check(CLI::IsMember({"chain", "resnet_like", "alexnet_like", "resnext3d_like"}));
  gen->add_option("--n", n_layers, "Chain length");
  gen->add_option("--blocks", n_blocks, "Residual blocks (0 = reference depth)");
  gen->add_option("--batch", gen_batch, "Batch size");
  gen->add_option("--seed", seed, "Jitter seed");
  gen->add_option("--env", gen_env, "Environment preset")->check(CLI::IsMember({"pcie_x86", "nvlink_power9"}));
  gen->add_option("--out", gen_out, "Output profile path")->required();

  // optimize
  auto* opt = app.add_subcommand("optimize", "Search for a keep/swap/recompute plan");
  detail::ProfileArgs opt_in;
  detail::add_profile_args(opt, opt_in);
  SearchConfig cfg;
  std::optional<std::int64_t> budget_ms;
  std::string opt_out;
  std::string report_path;
  std::string log_path;
  opt->add_option("--li-cap", cfg.li_cap, "Largest exhaustively searched swap-in set");
  opt->add_option("--parallel", cfg.parallel_width, "Concurrent simulations");
  opt->add_option("--time-budget", budget_ms, "Search wall-clock limit in milliseconds");
  opt->add_option("--out", opt_out, "Output plan path")->required();
  opt->add_option("--report", report_path, "Report JSON path (default <out>.report.json)");
  opt->add_option("--log", log_path, "Decision log path (default <out>.log)");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Simulate one plan");
  detail::ProfileArgs sim_in;
  detail::add_profile_args(sim, sim_in);
  std::string plan_path;
  std::string sched_name;
  std::string trace_path;
  std::string memtrace_path;
  sim->add_option("--plan", plan_path, "Plan JSON")->required();
  sim->add_option("--sched", sched_name, "Swap-in schedule (default: the plan's, else eager)")
      ->check(CLI::IsMember({"naive", "eager", "conv_anchored"}));
  sim->add_option("--trace", trace_path, "Chrome trace output");
  sim->add_option("--memtrace", memtrace_path, "Memory CSV output");

  // compare
  auto* cmp = app.add_subcommand("compare", "Tabulate strategies on one profile");
  detail::ProfileArgs cmp_in;
  detail::add_profile_args(cmp, cmp_in);
  std::vector<std::string> strategies;
  SearchConfig cmp_cfg;
  cmp->add_option("--strategies", strategies, "Comma-separated strategy names")
      ->delimiter(',')
      ->check(CLI::IsMember(strategy_names()));
  cmp->add_option("--li-cap", cmp_cfg.li_cap, "Largest exhaustively searched swap-in set");
  cmp->add_option("--parallel", cmp_cfg.parallel_width, "Concurrent simulations");

  // oracle
  auto* orc = app.add_subcommand("oracle", "Exhaustive optimum for small profiles");
  detail::ProfileArgs orc_in;
  detail::add_profile_args(orc, orc_in);
  std::string orc_sched = "eager";
  orc->add_option("--sched", orc_sched, "Swap-in schedule")->check(CLI::IsMember({"naive", "eager"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "pooch: usage error: " << e.what() << "\n";
    return 1;
  }

  const char* stage = "parse";
  try {
    if (*gen) {
      GenSpec spec;
      spec.shape = *shape_from_string(shape);
      spec.n_layers = n_layers;
      spec.n_blocks = n_blocks;
      spec.batch = gen_batch;
      spec.seed = seed;
      spec.env_preset = *env_preset_from_string(gen_env);
      stage = "generate";
      const auto p = generate(spec);
      save_profile(p, gen_out);
      out << "wrote " << gen_out << " (" << p.size() << " layers)\n";
      return 0;
    }

    if (*opt) {
      stage = "load";
      const auto p = detail::load_scaled(opt_in);
      if (budget_ms) cfg.time_budget = std::chrono::milliseconds(*budget_ms);
      validate(cfg);
      stage = "optimize";
      const auto rep = optimize(p, cfg);
      auto plan = rep.placement;
      plan.schedule = Schedule::eager;
      stage = "write";
      save_plan(plan, opt_out);
      write_file_atomic(report_path.empty() ? opt_out + ".report.json" : report_path, to_json(rep).dump(2) + "\n");
      write_file_atomic(log_path.empty() ? opt_out + ".log" : log_path, render_decision_log(rep.decisions));
      out << "makespan_us " << rep.makespan << "\n"
          << "peak_bytes " << rep.peak_memory << "\n"
          << "keep " << rep.counts[0] << " swap " << rep.counts[1] << " recompute " << rep.counts[2] << "\n"
          << "simulations " << rep.stats.simulations << (rep.stats.truncated ? " (time budget hit)" : "") << "\n";
      return 0;
    }

    if (*sim) {
      stage = "load";
      const auto p = detail::load_scaled(sim_in);
      auto pl = load_plan(plan_path);
      validate(pl, p);
      const auto sched = !sched_name.empty() ? *schedule_from_string(sched_name) : pl.schedule.value_or(Schedule::eager);
      stage = "simulate";
      const auto r = simulate(p, pl, sched);
      stage = "write";
      if (!trace_path.empty()) write_file_atomic(trace_path, chrome_trace(r.timeline).dump() + "\n");
      if (!memtrace_path.empty()) write_file_atomic(memtrace_path, memory_csv(r.memory));
      if (!r.feasible()) {
        const auto& o = *r.timeline.oom;
        err << "pooch: infeasible: out of memory at t=" << o.time << "us, layer " << o.layer << " needs " << o.requested
            << " bytes\n";
        return 2;
      }
      out << "makespan_us " << r.timeline.makespan << "\n"
          << "peak_bytes " << r.memory.peak << "\n";
      return 0;
    }

    if (*cmp) {
      stage = "load";
      const auto p = detail::load_scaled(cmp_in);
      validate(cmp_cfg);
      if (strategies.empty()) strategies = strategy_names();
      stage = "compare";
      char line[160];
      std::snprintf(line, sizeof line, "%-16s %14s %16s %6s %6s %10s\n", "strategy", "makespan_us", "peak_bytes", "keep",
                    "swap", "recompute");
      out << line;
      for (const auto& name : strategies) {
        std::optional<StrategyResult> r;
        try {
          r = run_strategy(p, name, cmp_cfg);
        } catch (const InfeasibleError&) {
          // search strategies need a feasible all-swap plan
        }
        if (!r) {
          std::snprintf(line, sizeof line, "%-16s %14s %16s %6s %6s %10s\n", name.c_str(), "infeasible", "-", "-", "-",
                        "-");
          out << line;
          continue;
        }
        const auto c = r->placement.counts();
        std::snprintf(line, sizeof line, "%-16s %14s %16lld %6d %6d %10d\n", name.c_str(),
                      detail::fmt_ms(r->feasible ? std::optional<Micros>(r->makespan) : std::nullopt).c_str(),
                      static_cast<long long>(r->peak_memory), c[0], c[1], c[2]);
        out << line;
      }
      return 0;
    }

    if (*orc) {
      stage = "load";
      const auto p = detail::load_scaled(orc_in);
      stage = "oracle";
      if (p.size() > kOracleMaxLayers) {
        err << "pooch: oracle: profile has " << p.size() << " layers, exhaustive search is limited to "
            << kOracleMaxLayers << "\n";
        return 1;
      }
      const auto r = exhaustive_search(p, *schedule_from_string(orc_sched));
      std::string classes;
      for (auto c : r.best_placement.classes) {
        if (!classes.empty()) classes += ',';
        classes += to_string(c);
      }
      out << "makespan_us " << r.best_makespan << "\n"
          << "classes " << classes << "\n"
          << "evaluated " << r.evaluated << " infeasible " << r.infeasible << "\n";
      return 0;
    }
  } catch (const InfeasibleError& e) {
    err << "pooch: " << stage << ": infeasible: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    err << "pooch: " << stage << ": parse error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    err << "pooch: " << stage << ": validation error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "pooch: " << stage << ": " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace pooch
