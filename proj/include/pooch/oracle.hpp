// SPDX-License-Identifier: Apache-2.0

// Test oracles. reference_simulate re-derives the execution rules from the profile with its
// own job table and advances time one microsecond per step; it shares only the data model
// with the event-driven simulator. exhaustive_search enumerates every placement.

#pragma once

#include <cmath>
#include <functional>
#include <set>

#include "pooch/simulator.hpp"

namespace pooch {

namespace detail {

struct RefJob {
  TaskId id;
  int lane = 0;
  Micros dur = 0;
  std::vector<int> prereq;     // must have finished
  std::vector<int> waits_on;   // tensors (layer ids) read by a compute job, ascending
  Bytes take = 0;
  std::vector<std::tuple<int, Bytes, MemReason>> give_back;
  Micros started = -1;
  Micros finished = -1;
  bool done = false;
};

class TickSimulator {
 public:
  TickSimulator(const Profile& p, const Placement& pl, Schedule sched) : p_(p), pl_(pl), sched_(sched) {
    validate(pl, p);
    n_ = p.size();
    users_.assign(n_, {});
    for (int j = 0; j < n_; ++j) {
      for (int k : p.layers[j].inputs) users_[k].push_back(j);
    }
    lay_out_jobs();
  }

  SimResult run() {
    SimResult out;
    Bytes mem = p_.env.resident_base_bytes;
    out.memory.base = mem;
    out.memory.peak = mem;
    auto note = [&](Micros t, Bytes d, int layer, MemReason why) {
      if (d == 0) return;
      mem += d;
      out.memory.peak = std::max(out.memory.peak, mem);
      out.memory.entries.push_back({t, d, layer, why});
    };

    int busy[3] = {-1, -1, -1};
    std::size_t next_compute = 0;
    std::size_t next_prefetch = 0;
    std::vector<Micros> queued_at(jobs_.size(), -1);
    Micros compute_free_at = 0;
    std::size_t finished_count = 0;

    auto all_done = [&](const RefJob& j) {
      return std::all_of(j.prereq.begin(), j.prereq.end(), [&](int d) { return jobs_[d].done; });
    };

    for (Micros t = 0;; ++t) {
      for (int lane = 0; lane < 3; ++lane) {
        const int b = busy[lane];
        if (b < 0 || jobs_[b].finished != t) continue;
        jobs_[b].done = true;
        ++finished_count;
        busy[lane] = -1;
        if (lane == 0) compute_free_at = t;
        for (const auto& [layer, bytes, why] : jobs_[b].give_back) note(t, -bytes, layer, why);
      }
      for (int idx : evictions_) {
        if (queued_at[idx] < 0 && all_done(jobs_[idx])) queued_at[idx] = t;
      }

      auto launch = [&](int idx, MemReason why) {
        auto& j = jobs_[idx];
        j.started = t;
        j.finished = t + j.dur;
        busy[j.lane] = idx;
        note(t, j.take, j.id.layer, why);
        out.timeline.events.push_back({j.id, static_cast<Lane>(j.lane), t, j.finished});
      };

      if (busy[0] < 0 && next_compute < sequence_.size()) {
        const int idx = sequence_[next_compute];
        auto& j = jobs_[idx];
        if (all_done(j) && mem + j.take <= p_.env.capacity_bytes) {
          Micros others = compute_free_at;
          std::vector<std::pair<int, Micros>> fetched;
          for (int d : j.prereq) {
            if (jobs_[d].id.kind == TaskKind::swap_in) {
              fetched.emplace_back(jobs_[d].id.layer, jobs_[d].finished);
            } else {
              others = std::max(others, jobs_[d].finished);
            }
          }
          for (const auto& [layer, fin] : fetched) {
            if (fin > others) out.timeline.stalls[layer] += fin - others;
          }
          launch(idx, j.id.kind == TaskKind::forward ? MemReason::fwd_alloc : MemReason::recompute_alloc);
          ++next_compute;
        }
      }
      if (busy[1] < 0) {
        int pick = -1;
        for (int idx : evictions_) {
          if (queued_at[idx] < 0 || jobs_[idx].started >= 0) continue;
          if (pick < 0 || queued_at[idx] < queued_at[pick] ||
              (queued_at[idx] == queued_at[pick] && jobs_[idx].id.layer < jobs_[pick].id.layer)) {
            pick = idx;
          }
        }
        if (pick >= 0) launch(pick, MemReason::fwd_alloc);
      }
      if (busy[2] < 0 && next_prefetch < prefetch_.size()) {
        const int idx = prefetch_[next_prefetch];
        auto& j = jobs_[idx];
        const bool gate_open = jobs_[gate_[next_prefetch]].started >= 0;
        if (gate_open && all_done(j) && mem + j.take <= p_.env.capacity_bytes) {
          launch(idx, MemReason::swap_in_alloc);
          ++next_prefetch;
        }
      }

      if (finished_count == jobs_.size()) break;
      if (busy[0] < 0 && busy[1] < 0 && busy[2] < 0) {
        // Nothing in flight and nothing can start: the blocked allocation is the oom.
        if (next_compute < sequence_.size() && all_done(jobs_[sequence_[next_compute]])) {
          const auto& j = jobs_[sequence_[next_compute]];
          out.timeline.oom = OomRecord{t, j.id.layer, j.take};
        } else if (next_prefetch < prefetch_.size()) {
          const auto& j = jobs_[prefetch_[next_prefetch]];
          out.timeline.oom = OomRecord{t, j.id.layer, j.take};
        } else {
          throw std::logic_error("reference simulation deadlocked");
        }
        break;
      }
    }
    for (const auto& e : out.timeline.events) out.timeline.makespan = std::max(out.timeline.makespan, e.end);
    return out;
  }

 private:
  int push(RefJob j) {
    jobs_.push_back(std::move(j));
    return static_cast<int>(jobs_.size()) - 1;
  }

  void lay_out_jobs() {
    const auto& L = p_.layers;
    std::vector<int> fwd(n_), out(n_, -1), in(n_, -1), re(n_, -1), bw(n_, -1);

    // Forward pass: one job per layer, each after the previous one on the compute lane.
    for (int i = 0; i < n_; ++i) {
      RefJob j;
      j.id = {TaskKind::forward, i};
      j.dur = L[i].fwd_time;
      j.take = L[i].output_bytes;
      if (i > 0) j.prereq.push_back(fwd[i - 1]);
      fwd[i] = push(std::move(j));
      sequence_.push_back(fwd[i]);
    }
    for (int i = 0; i < n_; ++i) {
      if (pl_[i] == Class::swap) {
        RefJob j;
        j.id = {TaskKind::swap_out, i};
        j.lane = 1;
        j.dur = p_.swap_out_time(i);
        j.prereq.push_back(fwd[i]);
        for (int u : users_[i]) j.prereq.push_back(fwd[u]);
        j.give_back.emplace_back(i, L[i].output_bytes, MemReason::swap_out_free);
        out[i] = push(std::move(j));
        evictions_.push_back(out[i]);
      } else if (pl_[i] == Class::recompute) {
        const int last_user = *std::max_element(users_[i].begin(), users_[i].end());
        jobs_[fwd[last_user]].give_back.emplace_back(i, L[i].output_bytes, MemReason::discard_free);
      }
    }

    // Backward pass. A discarded tensor is regenerated at most once, right before the first
    // compute job that reads it, together with every discarded ancestor it transitively needs.
    std::vector<char> alive(n_, 0);
    for (int i = 0; i < n_; ++i) alive[i] = pl_[i] == Class::keep;
    std::set<int> chain;
    std::function<void(int)> collect = [&](int t) {
      if (pl_[t] != Class::recompute || re[t] >= 0 || chain.count(t)) return;
      chain.insert(t);
      for (int k : L[t].inputs) collect(k);
    };
    for (int j = n_ - 1; j >= 0; --j) {
      std::set<int> reads(L[j].inputs.begin(), L[j].inputs.end());
      reads.insert(j);
      chain.clear();
      for (int t : reads) collect(t);
      for (int t : chain) {
        RefJob r;
        r.id = {TaskKind::recompute, t, j};
        r.dur = L[t].fwd_time;
        r.take = L[t].output_bytes;
        r.waits_on.assign(L[t].inputs.begin(), L[t].inputs.end());
        std::sort(r.waits_on.begin(), r.waits_on.end());
        r.prereq.push_back(sequence_.back());
        re[t] = push(std::move(r));
        sequence_.push_back(re[t]);
      }
      RefJob b;
      b.id = {TaskKind::backward, j};
      b.dur = L[j].bwd_time;
      b.waits_on.assign(reads.begin(), reads.end());
      b.prereq.push_back(sequence_.back());
      b.give_back.emplace_back(j, L[j].output_bytes, MemReason::bwd_free);
      bw[j] = push(std::move(b));
      sequence_.push_back(bw[j]);
    }

    // Resolve tensor reads into job prerequisites; swap-ins are created in first-read order.
    std::vector<int> first_read;
    for (std::size_t pos = 0; pos < sequence_.size(); ++pos) {
      const int idx = sequence_[pos];
      const auto reads = jobs_[idx].waits_on;
      for (int t : reads) {
        int producer = -1;
        switch (pl_[t]) {
          case Class::keep: producer = fwd[t]; break;
          case Class::recompute: producer = re[t]; break;
          case Class::swap:
            if (in[t] < 0) {
              RefJob s;
              s.id = {TaskKind::swap_in, t};
              s.lane = 2;
              s.dur = p_.swap_in_time(t);
              s.take = L[t].output_bytes;
              s.prereq.push_back(out[t]);
              in[t] = push(std::move(s));
              prefetch_.push_back(in[t]);
              first_read.push_back(static_cast<int>(pos));
            }
            producer = in[t];
            break;
        }
        jobs_[idx].prereq.push_back(producer);
      }
    }

    for (int read_pos : first_read) {
      int g = 0;
      if (sched_ == Schedule::eager) {
        g = n_ - 1;
      } else if (sched_ == Schedule::naive) {
        g = read_pos - 1;
      } else {
        g = 0;
        for (int k = read_pos - 1; k >= 0; --k) {
          if (L[jobs_[sequence_[k]].id.layer].kind == LayerKind::convolution) {
            g = k;
            break;
          }
        }
      }
      gate_.push_back(sequence_[g]);
    }
  }

  const Profile& p_;
  const Placement& pl_;
  Schedule sched_;
  int n_ = 0;
  std::vector<std::vector<int>> users_;
  std::vector<RefJob> jobs_;
  std::vector<int> sequence_;
  std::vector<int> evictions_;
  std::vector<int> prefetch_;
  std::vector<int> gate_;
};

}  // namespace detail

/// Independent reference for `simulate`; same contract, microsecond time-stepping.
inline SimResult reference_simulate(const Profile& p, const Placement& pl, Schedule sched) {
  return detail::TickSimulator(p, pl, sched).run();
}

struct OracleResult {
  Placement best_placement;
  Micros best_makespan = 0;
  std::int64_t evaluated = 0;
  std::int64_t infeasible = 0;
};

inline constexpr int kOracleMaxLayers = 10;

/// Lexicographic (makespan, #keep, class vector) order used by every search for ties.
inline bool better_plan(Micros makespan_a, const Placement& a, Micros makespan_b, const Placement& b) {
  if (makespan_a != makespan_b) return makespan_a < makespan_b;
  const int keep_a = a.counts()[0];
  const int keep_b = b.counts()[0];
  if (keep_a != keep_b) return keep_a < keep_b;
  return a.classes < b.classes;
}

/// Enumerates all 2 * 3^(n-1) placements (the sink is never recompute). Throws UsageError for
/// n > 10 and InfeasibleError when every placement runs out of memory.
inline OracleResult exhaustive_search(const Profile& p, Schedule sched = Schedule::eager) {
  const int n = p.size();
  if (n > kOracleMaxLayers) {
    throw UsageError("exhaustive search is limited to " + std::to_string(kOracleMaxLayers) + " layers, profile has " +
                     std::to_string(n));
  }
  OracleResult r;
  Placement pl = Placement::uniform(n, Class::keep);
  bool have = false;
  for (;;) {
    ++r.evaluated;
    const auto sim = simulate(p, pl, sched);
    if (!sim.feasible()) {
      ++r.infeasible;
    } else if (!have || better_plan(sim.timeline.makespan, pl, r.best_makespan, r.best_placement)) {
      have = true;
      r.best_makespan = sim.timeline.makespan;
      r.best_placement = pl;
    }
    // Odometer over class vectors; the sink digit only takes keep and swap.
    int d = n - 1;
    for (; d >= 0; --d) {
      const int limit = d == n - 1 ? 2 : 3;
      auto& c = pl.classes[d];
      if (static_cast<int>(c) + 1 < limit) {
        c = static_cast<Class>(static_cast<int>(c) + 1);
        break;
      }
      c = Class::keep;
    }
    if (d < 0) break;
  }
  if (!have) throw InfeasibleError("no placement fits in device memory");
  return r;
}

}  // namespace pooch
