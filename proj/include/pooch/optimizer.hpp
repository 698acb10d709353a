// SPDX-License-Identifier: Apache-2.0

// Classification search. Step 1 starts from the all-swap placement, finds the feature maps
// whose transfers are exposed on the simulated timeline and decides keep/swap for them with a
// bounded binary tree plus a greedy scan from the output layer. Step 2 revisits every map left
// in swap and moves it to recompute when replaying is cheaper than transferring, one map per
// round, by the ratio of the two simulated overheads.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pooch/oracle.hpp"
#include "pooch/simulator.hpp"

namespace pooch {

struct SearchConfig {
  /// Largest set of exposed swap-ins searched exhaustively; the rest join the greedy scan.
  int li_cap = 18;
  /// Wall-clock limit; when hit, the search keeps the best plan found so far.
  std::optional<std::chrono::milliseconds> time_budget;
  int parallel_width = 1;
};

inline void validate(const SearchConfig& cfg) {
  if (cfg.li_cap < 0) throw UsageError("li_cap must be >= 0");
  if (cfg.li_cap > 30) throw UsageError("li_cap above 30 is not supported");
  if (cfg.parallel_width < 1) throw UsageError("parallel width must be >= 1");
}

/// Overheads of one swapped map relative to a run where it is resident for free.
/// A missing recompute_overhead means recomputing runs out of memory (or is not allowed).
struct OverheadEval {
  int layer = 0;
  Micros swap_overhead = 0;
  std::optional<Micros> recompute_overhead;

  /// r = recompute_overhead / swap_overhead; infinite when swap_overhead is zero.
  [[nodiscard]] bool infinite() const { return !recompute_overhead || swap_overhead == 0; }
  [[nodiscard]] double ratio() const {
    return infinite() ? std::numeric_limits<double>::infinity()
                      : static_cast<double>(*recompute_overhead) / static_cast<double>(swap_overhead);
  }
  [[nodiscard]] bool below_one() const { return !infinite() && *recompute_overhead < swap_overhead; }

  /// Exact comparison of ratios.
  [[nodiscard]] bool ratio_less(const OverheadEval& o) const {
    if (infinite()) return false;
    if (o.infinite()) return true;
    return static_cast<__int128>(*recompute_overhead) * o.swap_overhead <
           static_cast<__int128>(*o.recompute_overhead) * swap_overhead;
  }
  [[nodiscard]] bool ratio_equal(const OverheadEval& o) const {
    if (infinite() || o.infinite()) return infinite() == o.infinite();
    return static_cast<__int128>(*recompute_overhead) * o.swap_overhead ==
           static_cast<__int128>(*o.recompute_overhead) * swap_overhead;
  }
};

enum class Action : std::uint8_t {
  keep_committed,      // step 1 scan: swap -> keep accepted
  keep_rejected,       // step 1 scan: swap -> keep would oom or slow down
  fixed_swap_ratio,    // step 2: r >= 1, removed from the candidate set as swap
  recompute_committed, // step 2: smallest r < 1, re-simulation accepted
  recompute_rejected,  // step 2: smallest r < 1, re-simulation rejected, fixed as swap
  fixed_swap_budget,   // step 2: time budget exhausted
};

inline std::string_view to_string(Action a) {
  switch (a) {
    case Action::keep_committed: return "keep_committed";
    case Action::keep_rejected: return "keep_rejected";
    case Action::fixed_swap_ratio: return "fixed_swap_ratio";
    case Action::recompute_committed: return "recompute_committed";
    case Action::recompute_rejected: return "recompute_rejected";
    case Action::fixed_swap_budget: return "fixed_swap_budget";
  }
  return "?";
}

struct DecisionRecord {
  int step = 1;
  int round = 0;
  int layer = 0;
  Action action = Action::keep_committed;
  std::optional<OverheadEval> eval;
  /// Makespan before the flip and of the re-simulated trial (nullopt when it ran out of memory).
  std::optional<Micros> makespan_before;
  std::optional<Micros> makespan_trial;
};

inline std::string to_line(const DecisionRecord& d) {
  std::ostringstream os;
  os << "step" << d.step << " round=" << d.round << " layer=" << d.layer << " action=" << to_string(d.action);
  if (d.eval) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", d.eval->ratio());
    os << " r=" << buf << " swap_overhead=" << d.eval->swap_overhead << " recompute_overhead=";
    if (d.eval->recompute_overhead) {
      os << *d.eval->recompute_overhead;
    } else {
      os << "inf";
    }
  }
  if (d.makespan_before) os << " makespan_before=" << *d.makespan_before;
  if (d.makespan_before || d.makespan_trial) {
    os << " makespan_trial=";
    if (d.makespan_trial) {
      os << *d.makespan_trial;
    } else {
      os << "oom";
    }
  }
  return os.str();
}

inline std::string render_decision_log(const std::vector<DecisionRecord>& log) {
  std::string out;
  for (const auto& d : log) out += to_line(d) + "\n";
  return out;
}

struct SearchStats {
  std::int64_t simulations = 0;
  std::int64_t step1_simulations = 0;
  std::int64_t step2_simulations = 0;
  int swap_out_exposed = 0;  // |L_O|
  int swap_in_exposed = 0;   // |L_I|
  int tree_size = 0;
  int scan_size = 0;
  int step2_candidates = 0;  // |L| when step 2 starts
  bool truncated = false;
  double wall_ms = 0;
};

namespace detail {

using Clock = std::chrono::steady_clock;

/// Evaluates fn(0..count-1) with up to `width` threads; results stay in index order.
template <typename Fn>
auto parallel_map(int width, std::size_t count, Fn fn) -> std::vector<decltype(fn(std::size_t{}))> {
  std::vector<decltype(fn(std::size_t{}))> out(count);
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(width, 1)), count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= count) return;
      try {
        out[i] = fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  pool.clear();
  if (error) std::rethrow_exception(error);
  return out;
}

struct Deadline {
  std::optional<Clock::time_point> at;
  explicit Deadline(const SearchConfig& cfg, Clock::time_point start) {
    if (cfg.time_budget) at = start + *cfg.time_budget;
  }
  [[nodiscard]] bool passed() const { return at && Clock::now() >= *at; }
};

}  // namespace detail

struct Step1Result {
  Placement placement;
  Micros makespan = 0;
  Micros all_swap_makespan = 0;
  StallSets sets;
  std::vector<int> tree;
  std::vector<int> scan;
  std::vector<DecisionRecord> log;
};

/// Keep/swap classification. Throws InfeasibleError when even all-swap runs out of memory.
inline Step1Result step1_keep_swap(const Profile& p, const SearchConfig& cfg, SearchStats* stats = nullptr) {
  validate(cfg);
  const auto started = detail::Clock::now();
  const detail::Deadline deadline(cfg, started);
  SearchStats local;
  auto& st = stats ? *stats : local;
  const int n = p.size();

  const auto all_swap = Placement::uniform(n, Class::swap);
  const auto base = simulate(p, all_swap, Schedule::eager);
  ++st.simulations;
  if (!base.feasible()) {
    throw InfeasibleError("problem exceeds plannable size: all-swap placement runs out of memory at t=" +
                          std::to_string(base.timeline.oom->time) + "us (layer " +
                          std::to_string(base.timeline.oom->layer) + ")");
  }

  Step1Result res;
  res.all_swap_makespan = base.timeline.makespan;
  res.sets = extract_stall_sets(base.timeline, p);
  const auto& lo = res.sets.swap_out_exposed;
  const auto& li = res.sets.swap_in_exposed;

  std::vector<int> extra;
  res.tree = li;
  if (static_cast<int>(res.tree.size()) > cfg.li_cap) {
    auto ranked = li;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [&](int a, int b) { return res.sets.stalls.at(a) > res.sets.stalls.at(b); });
    res.tree.assign(ranked.begin(), ranked.begin() + cfg.li_cap);
    extra.assign(ranked.begin() + cfg.li_cap, ranked.end());
    std::sort(res.tree.begin(), res.tree.end());
  }
  for (int i : lo) {
    if (!std::binary_search(li.begin(), li.end(), i)) res.scan.push_back(i);
  }
  res.scan.insert(res.scan.end(), extra.begin(), extra.end());
  std::sort(res.scan.begin(), res.scan.end(), std::greater<>());

  st.swap_out_exposed = static_cast<int>(lo.size());
  st.swap_in_exposed = static_cast<int>(li.size());
  st.tree_size = static_cast<int>(res.tree.size());
  st.scan_size = static_cast<int>(res.scan.size());

  struct Leaf {
    bool feasible = false;
    Placement placement;
    Micros makespan = 0;
    std::int64_t sims = 0;
    std::vector<DecisionRecord> log;
  };
  // Kept maps live until their backward, so once the last forward has allocated its output they
  // are all resident together. Above capacity that is a certain oom; skip the simulation.
  auto over_floor = [&](const Placement& pl) {
    Bytes floor = p.env.resident_base_bytes;
    for (int i = 0; i < n; ++i) {
      if (pl[i] == Class::keep || i == n - 1) floor += p.layers[i].output_bytes;
    }
    return floor > p.env.capacity_bytes;
  };
  auto evaluate_leaf = [&](std::uint64_t mask) {
    Leaf leaf;
    leaf.placement = all_swap;
    for (std::size_t b = 0; b < res.tree.size(); ++b) {
      if (mask >> b & 1U) leaf.placement.classes[res.tree[b]] = Class::keep;
    }
    if (over_floor(leaf.placement)) return leaf;
    const auto first = simulate(p, leaf.placement, Schedule::eager);
    ++leaf.sims;
    if (!first.feasible()) return leaf;
    leaf.feasible = true;
    leaf.makespan = first.timeline.makespan;
    // Greedy swap -> keep from the output layer; only non-worsening feasible flips stick.
    for (int s : res.scan) {
      leaf.placement.classes[s] = Class::keep;
      DecisionRecord d{1, 0, s, Action::keep_rejected, std::nullopt, leaf.makespan, std::nullopt};
      std::optional<SimResult> trial;
      if (!over_floor(leaf.placement)) {
        trial = simulate(p, leaf.placement, Schedule::eager);
        ++leaf.sims;
        if (trial->feasible()) d.makespan_trial = trial->timeline.makespan;
      }
      if (d.makespan_trial && *d.makespan_trial <= leaf.makespan) {
        leaf.makespan = *d.makespan_trial;
        d.action = Action::keep_committed;
      } else {
        leaf.placement.classes[s] = Class::swap;
      }
      leaf.log.push_back(d);
    }
    return leaf;
  };

  const std::uint64_t leaves = std::uint64_t{1} << res.tree.size();
  const auto batch = static_cast<std::uint64_t>(std::max(1, cfg.parallel_width)) * 4;
  std::optional<Leaf> best;
  for (std::uint64_t lo_leaf = 0; lo_leaf < leaves; lo_leaf += batch) {
    // Leaf 0 (everything in the tree swapped) always runs, so the result never loses to all-swap.
    if (lo_leaf > 0 && deadline.passed()) {
      st.truncated = true;
      break;
    }
    const auto count = static_cast<std::size_t>(std::min(batch, leaves - lo_leaf));
    auto results = detail::parallel_map(cfg.parallel_width, count,
                                        [&](std::size_t k) { return evaluate_leaf(lo_leaf + k); });
    for (auto& leaf : results) {
      st.simulations += leaf.sims;
      st.step1_simulations += leaf.sims;
      if (!leaf.feasible) continue;
      if (!best || better_plan(leaf.makespan, leaf.placement, best->makespan, best->placement)) best = std::move(leaf);
    }
  }
  if (!best) {
    // Leaf 0 with every scan flip rejected is the all-swap plan, which is feasible.
    throw std::logic_error("step 1 found no feasible leaf");
  }
  res.placement = std::move(best->placement);
  res.makespan = best->makespan;
  res.log = std::move(best->log);
  st.wall_ms += std::chrono::duration<double, std::milli>(detail::Clock::now() - started).count();
  return res;
}

/// Overheads of swapping `x` with every other class fixed. `current_makespan` may be passed
/// when the caller already simulated `pl`; `sims` counts the simulations run.
inline OverheadEval overhead_of(const Profile& p, const Placement& pl, int x,
                                std::optional<Micros> current_makespan = std::nullopt, std::int64_t* sims = nullptr) {
  if (x < 0 || x >= p.size()) throw UsageError("overhead_of: layer " + std::to_string(x) + " out of range");
  if (pl[x] != Class::swap) throw UsageError("overhead_of: layer " + std::to_string(x) + " is not classified swap");
  std::int64_t count = 0;
  Micros current = 0;
  if (current_makespan) {
    current = *current_makespan;
  } else {
    const auto r = simulate(p, pl, Schedule::eager);
    ++count;
    if (!r.feasible()) throw UsageError("overhead_of: placement is infeasible");
    current = r.timeline.makespan;
  }
  SimOptions ideal;
  ideal.ideal_layer = x;
  const auto base_run = simulate(p, pl, Schedule::eager, ideal);
  ++count;
  const Micros baseline = base_run.feasible() ? base_run.timeline.makespan : current;

  OverheadEval e;
  e.layer = x;
  e.swap_overhead = std::max<Micros>(0, current - baseline);
  if (x != p.sink()) {
    auto trial = pl;
    trial.classes[x] = Class::recompute;
    const auto r = simulate(p, trial, Schedule::eager);
    ++count;
    if (r.feasible()) e.recompute_overhead = std::max<Micros>(0, r.timeline.makespan - baseline);
  }
  if (sims) *sims += count;
  return e;
}

/// Swap/recompute refinement of a feasible step-1 placement.
inline Placement step2_recompute(const Profile& p, const Placement& pl, const SearchConfig& cfg,
                                 std::vector<DecisionRecord>* log = nullptr, SearchStats* stats = nullptr) {
  validate(cfg);
  const auto started = detail::Clock::now();
  const detail::Deadline deadline(cfg, started);
  SearchStats local;
  auto& st = stats ? *stats : local;
  std::vector<DecisionRecord> scratch;
  auto& out_log = log ? *log : scratch;

  Placement cur = pl;
  cur.schedule.reset();
  const auto first = simulate(p, cur, Schedule::eager);
  ++st.simulations;
  if (!first.feasible()) throw UsageError("step 2 needs a feasible placement");
  Micros cur_ms = first.timeline.makespan;

  std::vector<int> candidates;
  for (int i = 0; i < p.size(); ++i) {
    if (cur[i] == Class::swap) candidates.push_back(i);
  }
  st.step2_candidates = static_cast<int>(candidates.size());

  for (int round = 1; !candidates.empty(); ++round) {
    if (deadline.passed()) {
      st.truncated = true;
      for (int x : candidates) out_log.push_back({2, round, x, Action::fixed_swap_budget, {}, {}, {}});
      break;
    }
    std::vector<std::int64_t> counts(candidates.size(), 0);
    const auto evals = detail::parallel_map(cfg.parallel_width, candidates.size(), [&](std::size_t k) {
      return overhead_of(p, cur, candidates[k], cur_ms, &counts[k]);
    });
    for (auto c : counts) {
      st.simulations += c;
      st.step2_simulations += c;
    }

    std::vector<int> remaining;
    std::optional<std::size_t> pick;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      const auto& e = evals[k];
      if (!e.below_one()) {
        out_log.push_back({2, round, e.layer, Action::fixed_swap_ratio, e, {}, {}});
        continue;
      }
      remaining.push_back(candidates[k]);
      if (!pick) {
        pick = k;
        continue;
      }
      const auto& b = evals[*pick];
      const Bytes eb = p.layers[e.layer].output_bytes;
      const Bytes bb = p.layers[b.layer].output_bytes;
      if (e.ratio_less(b) || (e.ratio_equal(b) && (eb > bb || (eb == bb && e.layer < b.layer)))) pick = k;
    }
    if (!pick) break;

    const auto& e = evals[*pick];
    auto trial = cur;
    trial.classes[e.layer] = Class::recompute;
    const auto r = simulate(p, trial, Schedule::eager);
    ++st.simulations;
    ++st.step2_simulations;
    DecisionRecord d{2, round, e.layer, Action::recompute_rejected, e, cur_ms, std::nullopt};
    if (r.feasible()) d.makespan_trial = r.timeline.makespan;
    if (r.feasible() && r.timeline.makespan <= cur_ms) {
      cur = std::move(trial);
      cur_ms = r.timeline.makespan;
      d.action = Action::recompute_committed;
    }
    out_log.push_back(d);
    std::erase(remaining, e.layer);
    candidates = std::move(remaining);
  }
  st.wall_ms += std::chrono::duration<double, std::milli>(detail::Clock::now() - started).count();
  return cur;
}

/// SuperNeurons-style static classification: keep from the output layer while memory lasts,
/// then swap convolution outputs and recompute the rest. Prefetches anchor on the closest
/// preceding convolution task and ignore live memory.
inline Placement superneurons_plan(const Profile& p) {
  const int n = p.size();
  Placement pl = Placement::uniform(n, Class::swap);
  pl.schedule = Schedule::conv_anchored;
  Bytes used = p.env.resident_base_bytes;
  int i = n - 1;
  for (; i >= 0; --i) {
    if (used + p.layers[i].output_bytes > p.env.capacity_bytes) break;
    used += p.layers[i].output_bytes;
    pl.classes[i] = Class::keep;
  }
  for (; i >= 0; --i) {
    const bool conv = p.layers[i].kind == LayerKind::convolution;
    pl.classes[i] = conv || i == n - 1 ? Class::swap : Class::recompute;
  }
  return pl;
}

/// Named comparison strategies.
inline const std::vector<std::string>& strategy_names() {
  static const std::vector<std::string> names = {"in-core", "swap-all-naive", "swap-all", "swap-opt", "superneurons",
                                                 "pooch"};
  return names;
}

struct PlanReport {
  Placement placement;
  Micros makespan = 0;
  Bytes peak_memory = 0;
  std::array<int, 3> counts{};
  /// Strategy name -> makespan; nullopt when that strategy runs out of memory.
  std::vector<std::pair<std::string, std::optional<Micros>>> baseline_makespans;
  SearchStats stats;
  std::vector<DecisionRecord> decisions;
  bool in_core = false;
  /// How per-map overheads are measured in step 2.
  std::string overhead_baseline = "ideal_resident";
};

/// Full planning pipeline.
inline PlanReport optimize(const Profile& p, const SearchConfig& cfg = {}) {
  validate(cfg);
  const auto started = detail::Clock::now();
  const int n = p.size();
  PlanReport rep;
  auto& st = rep.stats;
  auto run = [&](const Placement& pl, Schedule s) {
    ++st.simulations;
    return simulate(p, pl, s);
  };
  auto ms = [](const SimResult& r) -> std::optional<Micros> {
    if (!r.feasible()) return std::nullopt;
    return r.timeline.makespan;
  };

  const auto keep_all = Placement::uniform(n, Class::keep);
  const auto in_core = run(keep_all, Schedule::eager);
  const auto swap_all = Placement::uniform(n, Class::swap);
  const auto naive = run(swap_all, Schedule::naive);
  const auto eager = run(swap_all, Schedule::eager);
  const auto sn = superneurons_plan(p);
  const auto sn_run = run(sn, Schedule::conv_anchored);

  rep.baseline_makespans.emplace_back("in-core", ms(in_core));
  rep.baseline_makespans.emplace_back("swap-all-naive", ms(naive));
  rep.baseline_makespans.emplace_back("swap-all", ms(eager));

  Micros swap_opt_ms = 0;
  if (in_core.feasible()) {
    rep.in_core = true;
    rep.placement = keep_all;
  } else {
    auto s1 = step1_keep_swap(p, cfg, &st);
    swap_opt_ms = s1.makespan;
    rep.decisions = std::move(s1.log);
    rep.placement = step2_recompute(p, s1.placement, cfg, &rep.decisions, &st);
    rep.baseline_makespans.emplace_back("swap-opt", swap_opt_ms);
  }
  rep.baseline_makespans.emplace_back("superneurons", ms(sn_run));

  const auto final_run = run(rep.placement, Schedule::eager);
  if (!final_run.feasible()) throw std::logic_error("optimizer produced an infeasible placement");
  rep.makespan = final_run.timeline.makespan;
  rep.peak_memory = final_run.memory.peak;
  rep.counts = rep.placement.counts();
  rep.baseline_makespans.emplace_back("pooch", rep.makespan);
  st.wall_ms = std::chrono::duration<double, std::milli>(detail::Clock::now() - started).count();
  return rep;
}

struct StrategyResult {
  std::string name;
  Placement placement;
  Schedule schedule = Schedule::eager;
  bool feasible = false;
  Micros makespan = 0;
  Bytes peak_memory = 0;
};

/// Placement and simulated outcome of one named strategy. swap-opt and pooch run the search.
inline StrategyResult run_strategy(const Profile& p, const std::string& name, const SearchConfig& cfg = {}) {
  const int n = p.size();
  StrategyResult r;
  r.name = name;
  if (name == "in-core") {
    r.placement = Placement::uniform(n, Class::keep);
  } else if (name == "swap-all-naive") {
    r.placement = Placement::uniform(n, Class::swap);
    r.schedule = Schedule::naive;
  } else if (name == "swap-all") {
    r.placement = Placement::uniform(n, Class::swap);
  } else if (name == "swap-opt") {
    r.placement = step1_keep_swap(p, cfg).placement;
  } else if (name == "pooch") {
    r.placement = optimize(p, cfg).placement;
  } else if (name == "superneurons") {
    r.placement = superneurons_plan(p);
    r.schedule = Schedule::conv_anchored;
  } else {
    throw UsageError("unknown strategy '" + name + "'");
  }
  const auto sim = simulate(p, r.placement, r.schedule);
  r.feasible = sim.feasible();
  r.makespan = sim.timeline.makespan;
  r.peak_memory = sim.memory.peak;
  return r;
}

}  // namespace pooch
