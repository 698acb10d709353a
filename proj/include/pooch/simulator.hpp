// SPDX-License-Identifier: Apache-2.0

// Discrete-event simulation of one training iteration on a device with one compute engine
// and one copy engine per direction. Given a profile and a keep/swap/recompute placement it
// predicts the timeline of every compute and transfer task and the device memory ledger.

#pragma once

#include <algorithm>
#include <compare>
#include <limits>
#include <map>
#include <optional>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "pooch/model.hpp"

namespace pooch {

enum class Lane : std::uint8_t { compute = 0, d2h = 1, h2d = 2 };
inline constexpr int kNumLanes = 3;

enum class TaskKind : std::uint8_t { forward, backward, recompute, swap_out, swap_in };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::forward: return "forward";
    case TaskKind::backward: return "backward";
    case TaskKind::recompute: return "recompute";
    case TaskKind::swap_out: return "swap_out";
    case TaskKind::swap_in: return "swap_in";
  }
  return "?";
}

/// Identity of a task. `for_layer` is the backward a recompute replay was issued for; -1 otherwise.
struct TaskId {
  TaskKind kind = TaskKind::forward;
  int layer = 0;
  int for_layer = -1;

  friend auto operator<=>(const TaskId&, const TaskId&) = default;
};

inline std::string to_string(const TaskId& id) {
  auto s = std::string(to_string(id.kind)) + " " + std::to_string(id.layer);
  if (id.kind == TaskKind::recompute) s += " for " + std::to_string(id.for_layer);
  return s;
}

inline Lane lane_of(TaskKind k) {
  switch (k) {
    case TaskKind::swap_out: return Lane::d2h;
    case TaskKind::swap_in: return Lane::h2d;
    default: return Lane::compute;
  }
}

enum class MemReason : std::uint8_t { fwd_alloc, swap_out_free, swap_in_alloc, recompute_alloc, bwd_free, discard_free };

inline std::string_view to_string(MemReason r) {
  switch (r) {
    case MemReason::fwd_alloc: return "fwd_alloc";
    case MemReason::swap_out_free: return "swap_out_free";
    case MemReason::swap_in_alloc: return "swap_in_alloc";
    case MemReason::recompute_alloc: return "recompute_alloc";
    case MemReason::bwd_free: return "bwd_free";
    case MemReason::discard_free: return "discard_free";
  }
  return "?";
}

/// A feature map released when the owning task ends.
struct Release {
  int layer = 0;
  Bytes bytes = 0;
  MemReason reason = MemReason::bwd_free;
};

struct Task {
  TaskId id;
  Lane lane = Lane::compute;
  Micros duration = 0;
  /// Range in TaskGraph::dep_pool of the tasks that must have ended before this one may start.
  int dep_begin = 0;
  int dep_end = 0;
  /// Bytes reserved when the task starts (forward output, replayed output, prefetch buffer).
  Bytes alloc = 0;
  /// Range in TaskGraph::release_pool of the maps freed when this task ends.
  int rel_begin = 0;
  int rel_end = 0;
};

struct TaskGraph {
  std::vector<Task> tasks;
  std::vector<int> dep_pool;
  std::vector<Release> release_pool;
  /// Issue order on the compute lane: forwards, then per backward its replay chain and itself.
  std::vector<int> compute_order;
  /// Swap-ins in the order their tensors are first needed on the compute lane.
  std::vector<int> swap_in_order;
  /// For each entry of swap_in_order, the compute_order position of its first consumer.
  std::vector<int> first_need;

  [[nodiscard]] std::span<const int> deps(int task) const {
    const auto& t = tasks[task];
    return {dep_pool.data() + t.dep_begin, dep_pool.data() + t.dep_end};
  }
  [[nodiscard]] std::span<const Release> releases(int task) const {
    const auto& t = tasks[task];
    return {release_pool.data() + t.rel_begin, release_pool.data() + t.rel_end};
  }
};

/// Knobs that are not part of a placement.
struct SimOptions {
  /// Treat this layer's output as resident for free: no transfer, no memory. Used to measure
  /// the idealized baseline against which per-map overheads are defined.
  std::optional<int> ideal_layer;
};

/// Builds the task set for one iteration. Placement must be total over the profile.
inline TaskGraph build_tasks(const Profile& p, const Placement& pl, const SimOptions& opts = {}) {
  validate(pl, p);
  const int n = p.size();
  // Consumers of each layer, ascending, in one flat array.
  std::vector<int> cons_at(n + 1, 0), cons_flat;
  for (const auto& l : p.layers) {
    for (int in : l.inputs) ++cons_at[in + 1];
  }
  for (int i = 0; i < n; ++i) cons_at[i + 1] += cons_at[i];
  cons_flat.resize(cons_at[n]);
  {
    auto fill = cons_at;
    for (const auto& l : p.layers) {
      for (int in : l.inputs) cons_flat[fill[in]++] = l.id;
    }
  }
  auto cons = [&](int i) { return std::span<const int>(cons_flat.data() + cons_at[i], cons_flat.data() + cons_at[i + 1]); };
  auto is_ideal = [&](int i) { return opts.ideal_layer && *opts.ideal_layer == i; };
  auto cls = [&](int i) { return is_ideal(i) ? Class::keep : pl[i]; };
  auto bytes = [&](int i) -> Bytes { return is_ideal(i) ? 0 : p.layers[i].output_bytes; };

  TaskGraph g;
  g.tasks.reserve(4 * static_cast<std::size_t>(n));
  g.compute_order.reserve(2 * static_cast<std::size_t>(n));
  g.dep_pool.reserve(8 * static_cast<std::size_t>(n));
  auto add = [&](TaskId id, Micros duration, std::span<const int> deps, Bytes alloc) {
    const int first = static_cast<int>(g.dep_pool.size());
    g.dep_pool.insert(g.dep_pool.end(), deps.begin(), deps.end());
    g.tasks.push_back(Task{id, lane_of(id.kind), duration, first, static_cast<int>(g.dep_pool.size()), alloc});
    return static_cast<int>(g.tasks.size()) - 1;
  };

  std::vector<int> fwd(n), swap_out(n, -1), swap_in(n, -1), replay(n, -1), bwd(n, -1);
  std::vector<int> deps;
  std::vector<std::pair<int, Release>> frees;
  for (int i = 0; i < n; ++i) {
    deps.clear();
    for (int in : p.layers[i].inputs) deps.push_back(fwd[in]);
    fwd[i] = add({TaskKind::forward, i}, p.layers[i].fwd_time, deps, bytes(i));
    g.compute_order.push_back(fwd[i]);
  }
  for (int i = 0; i < n; ++i) {
    switch (cls(i)) {
      case Class::keep: break;
      case Class::swap: {
        deps.assign(1, fwd[i]);
        for (int c : cons(i)) deps.push_back(fwd[c]);
        swap_out[i] = add({TaskKind::swap_out, i}, p.swap_out_time(i), deps, 0);
        frees.push_back({swap_out[i], {i, bytes(i), MemReason::swap_out_free}});
        break;
      }
      case Class::recompute: {
        // Validation guarantees a consumer exists: only the sink has none.
        const int last = cons(i).back();
        frees.push_back({fwd[last], {i, bytes(i), MemReason::discard_free}});
        break;
      }
    }
  }

  // Task making layer k's output resident for the backward phase.
  auto resident = [&](int k) -> int {
    switch (cls(k)) {
      case Class::keep: return fwd[k];
      case Class::swap:
        if (swap_in[k] < 0) {
          swap_in[k] = add({TaskKind::swap_in, k}, p.swap_in_time(k), std::span<const int>(&swap_out[k], 1), bytes(k));
          g.swap_in_order.push_back(swap_in[k]);
          g.first_need.push_back(static_cast<int>(g.compute_order.size()));
        }
        return swap_in[k];
      case Class::recompute:
        if (replay[k] < 0) throw std::logic_error("unsatisfiable dependency: layer " + std::to_string(k) + " not replayed");
        return replay[k];
    }
    return -1;
  };

  std::vector<char> in_chain(n, 0);
  std::vector<int> needed, chain, stack, inputs;
  for (int j = n - 1; j >= 0; --j) {
    needed.assign(p.layers[j].inputs.begin(), p.layers[j].inputs.end());
    needed.push_back(j);
    std::sort(needed.begin(), needed.end());

    // Minimal replay chain: discarded tensors not yet regenerated, closed over their inputs.
    chain.clear();
    stack.clear();
    for (int t : needed) {
      if (cls(t) == Class::recompute && replay[t] < 0 && !in_chain[t]) {
        in_chain[t] = 1;
        stack.push_back(t);
      }
    }
    while (!stack.empty()) {
      const int t = stack.back();
      stack.pop_back();
      chain.push_back(t);
      for (int k : p.layers[t].inputs) {
        if (cls(k) == Class::recompute && replay[k] < 0 && !in_chain[k]) {
          in_chain[k] = 1;
          stack.push_back(k);
        }
      }
    }
    std::sort(chain.begin(), chain.end());
    for (int t : chain) {
      in_chain[t] = 0;
      inputs.assign(p.layers[t].inputs.begin(), p.layers[t].inputs.end());
      std::sort(inputs.begin(), inputs.end());
      // resident() may add swap-in tasks, so collect before adding
      deps.clear();
      for (int k : inputs) deps.push_back(resident(k));
      replay[t] = add({TaskKind::recompute, t, j}, p.layers[t].fwd_time, deps, bytes(t));
      g.compute_order.push_back(replay[t]);
    }

    deps.clear();
    for (int c : cons(j)) deps.push_back(bwd[c]);
    for (int t : needed) deps.push_back(resident(t));
    bwd[j] = add({TaskKind::backward, j}, p.layers[j].bwd_time, deps, 0);
    frees.push_back({bwd[j], {j, bytes(j), MemReason::bwd_free}});
    g.compute_order.push_back(bwd[j]);
  }

  // Bucket the frees by task, keeping their order within a task.
  std::vector<int> at(g.tasks.size() + 1, 0);
  for (const auto& [task, r] : frees) ++at[task + 1];
  for (std::size_t t = 0; t < g.tasks.size(); ++t) {
    at[t + 1] += at[t];
    g.tasks[t].rel_begin = g.tasks[t].rel_end = at[t];
  }
  g.release_pool.resize(frees.size());
  for (const auto& [task, r] : frees) g.release_pool[g.tasks[task].rel_end++] = r;
  return g;
}

struct Event {
  TaskId task;
  Lane lane = Lane::compute;
  Micros start = 0;
  Micros end = 0;

  friend auto operator<=>(const Event&, const Event&) = default;
};

struct OomRecord {
  Micros time = 0;
  int layer = 0;
  Bytes requested = 0;

  friend bool operator==(const OomRecord&, const OomRecord&) = default;
};

struct Timeline {
  /// In start order.
  std::vector<Event> events;
  Micros makespan = 0;
  /// Per layer, total time compute tasks waited on that layer's swap-in beyond their other deps.
  std::map<int, Micros> stalls;
  std::optional<OomRecord> oom;

  [[nodiscard]] bool feasible() const { return !oom.has_value(); }
};

struct MemoryEntry {
  Micros time = 0;
  Bytes delta = 0;
  int layer = 0;
  MemReason reason = MemReason::fwd_alloc;

  friend bool operator==(const MemoryEntry&, const MemoryEntry&) = default;
};

struct MemoryTrace {
  std::vector<MemoryEntry> entries;
  Bytes base = 0;
  /// Maximum of base + running sum.
  Bytes peak = 0;
};

struct SimResult {
  Timeline timeline;
  MemoryTrace memory;

  [[nodiscard]] bool feasible() const { return timeline.feasible(); }
  [[nodiscard]] Micros makespan() const {
    return feasible() ? timeline.makespan : std::numeric_limits<Micros>::max();
  }
};

namespace detail {

/// Event-driven executor over a prepared task graph.
class EventSimulator {
 public:
  EventSimulator(const Profile& p, const TaskGraph& g, Schedule sched) : p_(p), g_(g) {
    const auto count = g.tasks.size();
    pending_.resize(count);
    start_.assign(count, -1);
    end_.assign(count, -1);
    // Dependents of each task, ascending, in one flat array.
    dep_at_.assign(count + 1, 0);
    for (std::size_t i = 0; i < count; ++i) {
      pending_[i] = g.tasks[i].dep_end - g.tasks[i].dep_begin;
      for (int d : g.deps(static_cast<int>(i))) ++dep_at_[d + 1];
    }
    for (std::size_t i = 0; i < count; ++i) dep_at_[i + 1] += dep_at_[i];
    dependents_.resize(dep_at_[count]);
    auto fill = dep_at_;
    for (std::size_t i = 0; i < count; ++i) {
      for (int d : g.deps(static_cast<int>(i))) dependents_[fill[d]++] = static_cast<int>(i);
    }
    d2h_ready_.reserve(count);
    result_.timeline.events.reserve(count);
    result_.memory.entries.reserve(2 * count);
    const int last_forward = p.size() - 1;
    anchor_.resize(g.swap_in_order.size());
    for (std::size_t q = 0; q < g.swap_in_order.size(); ++q) {
      const int need = g.first_need[q];
      int pos = 0;
      switch (sched) {
        case Schedule::eager: pos = last_forward; break;
        case Schedule::naive: pos = need - 1; break;
        case Schedule::conv_anchored:
          pos = 0;
          for (int k = need - 1; k >= 0; --k) {
            const int layer = g.tasks[g.compute_order[k]].id.layer;
            if (p.layers[layer].kind == LayerKind::convolution) {
              pos = k;
              break;
            }
          }
          break;
      }
      anchor_[q] = g.compute_order[pos];
    }
    used_ = p.env.resident_base_bytes;
    result_.memory.base = used_;
    result_.memory.peak = used_;
  }

  SimResult run() {
    const auto total = g_.tasks.size();
    for (auto& t : running_) t = -1;
    Micros now = 0;
    for (;;) {
      for (int lane = 0; lane < kNumLanes; ++lane) {
        if (running_[lane] >= 0 && end_[running_[lane]] == now) complete(running_[lane], now);
      }
      try_compute(now);
      try_d2h(now);
      try_h2d(now);
      if (done_ == total) break;
      Micros next = std::numeric_limits<Micros>::max();
      for (int lane = 0; lane < kNumLanes; ++lane) {
        if (running_[lane] >= 0) next = std::min(next, end_[running_[lane]]);
      }
      if (next == std::numeric_limits<Micros>::max()) {
        record_oom(now);
        break;
      }
      now = next;
    }
    auto& tl = result_.timeline;
    for (const auto& e : tl.events) tl.makespan = std::max(tl.makespan, e.end);
    return std::move(result_);
  }

 private:
  [[nodiscard]] bool fits(Bytes b) const { return used_ + b <= p_.env.capacity_bytes; }

  void account(Micros now, Bytes delta, int layer, MemReason reason) {
    if (delta == 0) return;
    used_ += delta;
    result_.memory.peak = std::max(result_.memory.peak, used_);
    result_.memory.entries.push_back({now, delta, layer, reason});
  }

  void start(int task, Micros now) {
    const auto& t = g_.tasks[task];
    start_[task] = now;
    end_[task] = now + t.duration;
    running_[static_cast<int>(t.lane)] = task;
    if (t.alloc > 0) {
      const auto reason = t.id.kind == TaskKind::forward    ? MemReason::fwd_alloc
                          : t.id.kind == TaskKind::swap_in ? MemReason::swap_in_alloc
                                                           : MemReason::recompute_alloc;
      account(now, t.alloc, t.id.layer, reason);
    }
    result_.timeline.events.push_back({t.id, t.lane, now, end_[task]});
  }

  void complete(int task, Micros now) {
    const auto& t = g_.tasks[task];
    running_[static_cast<int>(t.lane)] = -1;
    ++done_;
    for (const auto& r : g_.releases(task)) account(now, -r.bytes, r.layer, r.reason);
    if (t.lane == Lane::compute) last_compute_end_ = now;
    for (int k = dep_at_[task]; k < dep_at_[task + 1]; ++k) {
      const int d = dependents_[k];
      if (--pending_[d] == 0 && g_.tasks[d].lane == Lane::d2h) {
        d2h_ready_.emplace_back(now, g_.tasks[d].id.layer, d);
        std::push_heap(d2h_ready_.begin(), d2h_ready_.end(), std::greater<>());
      }
    }
  }

  void try_compute(Micros now) {
    if (running_[0] >= 0 || cpos_ >= g_.compute_order.size()) return;
    const int task = g_.compute_order[cpos_];
    const auto& t = g_.tasks[task];
    if (pending_[task] > 0 || !fits(t.alloc)) return;
    // Waits on swap-ins are charged against the latest of every other dependency.
    Micros bound = last_compute_end_;
    for (int d : g_.deps(task)) {
      if (g_.tasks[d].id.kind != TaskKind::swap_in) bound = std::max(bound, end_[d]);
    }
    for (int d : g_.deps(task)) {
      if (g_.tasks[d].id.kind == TaskKind::swap_in && end_[d] > bound) {
        result_.timeline.stalls[g_.tasks[d].id.layer] += end_[d] - bound;
      }
    }
    ++cpos_;
    start(task, now);
  }

  void try_d2h(Micros now) {
    if (running_[1] >= 0 || d2h_ready_.empty()) return;
    std::pop_heap(d2h_ready_.begin(), d2h_ready_.end(), std::greater<>());
    const int task = std::get<2>(d2h_ready_.back());
    d2h_ready_.pop_back();
    start(task, now);
  }

  [[nodiscard]] bool h2d_issuable(std::size_t q) const {
    const int task = g_.swap_in_order[q];
    return pending_[task] == 0 && start_[anchor_[q]] >= 0;
  }

  void try_h2d(Micros now) {
    if (running_[2] >= 0 || hpos_ >= g_.swap_in_order.size()) return;
    const int task = g_.swap_in_order[hpos_];
    if (!h2d_issuable(hpos_) || !fits(g_.tasks[task].alloc)) return;
    ++hpos_;
    start(task, now);
  }

  void record_oom(Micros now) {
    if (cpos_ < g_.compute_order.size()) {
      const int task = g_.compute_order[cpos_];
      if (pending_[task] == 0) {
        result_.timeline.oom = OomRecord{now, g_.tasks[task].id.layer, g_.tasks[task].alloc};
        return;
      }
    }
    if (hpos_ < g_.swap_in_order.size() && h2d_issuable(hpos_)) {
      const int task = g_.swap_in_order[hpos_];
      result_.timeline.oom = OomRecord{now, g_.tasks[task].id.layer, g_.tasks[task].alloc};
      return;
    }
    throw std::logic_error("simulation stalled without a blocked allocation");
  }

  const Profile& p_;
  const TaskGraph& g_;
  std::vector<int> pending_;
  std::vector<int> dep_at_;
  std::vector<int> dependents_;
  std::vector<Micros> start_, end_;
  std::vector<int> anchor_;
  int running_[kNumLanes] = {-1, -1, -1};
  // min-heap on (ready time, layer, task)
  std::vector<std::tuple<Micros, int, int>> d2h_ready_;
  std::size_t cpos_ = 0;
  std::size_t hpos_ = 0;
  std::size_t done_ = 0;
  Micros last_compute_end_ = 0;
  Bytes used_ = 0;
  SimResult result_;
};

}  // namespace detail

/// Simulates one iteration. Running out of memory is reported in `timeline.oom`, not thrown.
inline SimResult simulate(const Profile& p, const Placement& pl, Schedule sched, const SimOptions& opts = {}) {
  const auto g = build_tasks(p, pl, opts);
  return detail::EventSimulator(p, g, sched).run();
}

/// Simulates with the placement's own schedule when it carries one, else eager.
inline SimResult simulate(const Profile& p, const Placement& pl) {
  return simulate(p, pl, pl.schedule.value_or(Schedule::eager));
}

/// Feature maps whose transfers are not hidden in an all-swap run.
struct StallSets {
  /// Swap-out ends after the last forward compute event.
  std::vector<int> swap_out_exposed;
  /// Some compute task waited on the swap-in.
  std::vector<int> swap_in_exposed;
  std::map<int, Micros> stalls;
};

/// Requires an all-swap timeline without oom.
inline StallSets extract_stall_sets(const Timeline& t, const Profile& p) {
  if (t.oom) throw UsageError("stall sets need a timeline without oom");
  const int n = p.size();
  std::vector<Micros> swap_out_end(n, -1);
  std::vector<char> swapped_in(n, 0);
  Micros last_forward_end = 0;
  for (const auto& e : t.events) {
    if (e.task.layer < 0 || e.task.layer >= n) throw UsageError("timeline does not match profile");
    switch (e.task.kind) {
      case TaskKind::forward: last_forward_end = std::max(last_forward_end, e.end); break;
      case TaskKind::swap_out: swap_out_end[e.task.layer] = e.end; break;
      case TaskKind::swap_in: swapped_in[e.task.layer] = 1; break;
      default: break;
    }
  }
  StallSets s;
  for (int i = 0; i < n; ++i) {
    if (swap_out_end[i] < 0 || !swapped_in[i]) {
      throw UsageError("stall sets need an all-swap timeline; layer " + std::to_string(i) + " was not swapped");
    }
    if (swap_out_end[i] > last_forward_end) s.swap_out_exposed.push_back(i);
    const auto it = t.stalls.find(i);
    if (it != t.stalls.end() && it->second > 0) s.swap_in_exposed.push_back(i);
  }
  s.stalls = t.stalls;
  return s;
}

}  // namespace pooch
