// SPDX-License-Identifier: Apache-2.0

// Random profiles and independent timeline checks shared by the test binaries.

#pragma once

#include <algorithm>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pooch/model.hpp"
#include "pooch/simulator.hpp"

namespace pooch::testing {

using Rng = std::mt19937_64;

inline int uniform(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

/// Chain with uniform times and sizes.
inline Profile chain(int n, Micros fwd, Micros bwd, Bytes bytes, Bytes capacity, Bytes base = 1) {
  Profile p;
  for (int i = 0; i < n; ++i) {
    LayerNode l{i, "l" + std::to_string(i), LayerKind::other, fwd, bwd, bytes, {}};
    if (i > 0) l.inputs = {i - 1};
    p.layers.push_back(l);
  }
  p.env.capacity_bytes = capacity;
  p.env.resident_base_bytes = base;
  p.env.d2h_bandwidth = 1'000'000;
  p.env.h2d_bandwidth = 1'000'000;
  return p;
}

/// Same transfer time for every layer in both directions.
inline void set_transfer(Profile& p, Micros t) {
  p.swap_out_time_override = std::vector<Micros>(p.layers.size(), t);
  p.swap_in_time_override = std::vector<Micros>(p.layers.size(), t);
}

struct RandomShape {
  int n = 6;
  bool dag = false;   // extra skip inputs (branches and joins)
  bool tight = false; // capacity well below the sum of all maps
};

inline Profile random_profile(Rng& rng, RandomShape shape) {
  Profile p;
  Bytes total = 0;
  Bytes largest = 0;
  for (int i = 0; i < shape.n; ++i) {
    LayerNode l;
    l.id = i;
    l.name = "l" + std::to_string(i);
    l.kind = uniform(rng, 0, 2) == 0 ? LayerKind::convolution : LayerKind::batch_norm;
    l.fwd_time = uniform(rng, 1, 12);
    l.bwd_time = uniform(rng, 1, 12);
    l.output_bytes = 8 * uniform(rng, 1, 8);
    if (i > 0) l.inputs = {i - 1};
    if (shape.dag && i > 1 && uniform(rng, 0, 2) == 0) l.inputs.insert(l.inputs.begin(), uniform(rng, 0, i - 2));
    total += l.output_bytes;
    largest = std::max(largest, l.output_bytes);
    p.layers.push_back(l);
  }
  p.env.resident_base_bytes = 16;
  if (uniform(rng, 0, 1) == 0) {
    p.env.d2h_bandwidth = 1'000'000 * uniform(rng, 2, 16);
    p.env.h2d_bandwidth = 1'000'000 * uniform(rng, 2, 16);
  } else {
    std::vector<Micros> out, in;
    for (int i = 0; i < shape.n; ++i) {
      out.push_back(uniform(rng, 1, 15));
      in.push_back(uniform(rng, 1, 15));
    }
    p.swap_out_time_override = out;
    p.swap_in_time_override = in;
  }
  if (shape.tight) {
    const Bytes lo = std::min(total, 3 * largest);
    const Bytes hi = std::max(lo, total * 3 / 4);
    p.env.capacity_bytes = p.env.resident_base_bytes + std::uniform_int_distribution<Bytes>(lo, hi)(rng);
  } else {
    p.env.capacity_bytes = p.env.resident_base_bytes + total + uniform(rng, 0, 64);
  }
  return p;
}

inline Placement random_placement(Rng& rng, int n) {
  Placement pl;
  for (int i = 0; i < n; ++i) pl.classes.push_back(static_cast<Class>(uniform(rng, 0, i == n - 1 ? 1 : 2)));
  return pl;
}

inline std::vector<Event> sorted_events(std::vector<Event> v) {
  std::sort(v.begin(), v.end());
  return v;
}

/// Timeline and memory invariants, derived from the placement semantics rather than from the
/// simulator's task graph. Returns an empty string when everything holds.
inline std::string check_run(const Profile& p, const Placement& pl, const SimResult& r) {
  std::ostringstream err;
  const int n = p.size();
  const auto cons = p.consumers();
  std::map<TaskId, Event> by_id;
  for (const auto& e : r.timeline.events) {
    if (!by_id.emplace(e.task, e).second) err << "duplicate event " << to_string(e.task) << "; ";
  }

  // Lane exclusivity.
  for (int lane = 0; lane < kNumLanes; ++lane) {
    std::vector<std::pair<Micros, Micros>> iv;
    for (const auto& e : r.timeline.events) {
      if (static_cast<int>(e.lane) == lane) iv.emplace_back(e.start, e.end);
    }
    std::sort(iv.begin(), iv.end());
    for (std::size_t k = 1; k < iv.size(); ++k) {
      if (iv[k].first < iv[k - 1].second) err << "lane " << lane << " overlap at " << iv[k].first << "; ";
    }
  }

  // Durations.
  for (const auto& e : r.timeline.events) {
    const int i = e.task.layer;
    Micros want = 0;
    switch (e.task.kind) {
      case TaskKind::forward:
      case TaskKind::recompute: want = p.layers[i].fwd_time; break;
      case TaskKind::backward: want = p.layers[i].bwd_time; break;
      case TaskKind::swap_out: want = p.swap_out_time(i); break;
      case TaskKind::swap_in: want = p.swap_in_time(i); break;
    }
    if (e.end - e.start != want) err << to_string(e.task) << " lasted " << e.end - e.start << "; ";
  }

  auto end_of = [&](TaskId id) -> std::optional<Micros> {
    const auto it = by_id.find(id);
    if (it == by_id.end()) return std::nullopt;
    return it->second.end;
  };
  // Task that made layer k's output resident; a replayed map is regenerated once.
  auto maker_end = [&](int k) -> std::optional<Micros> {
    switch (pl[k]) {
      case Class::keep: return end_of({TaskKind::forward, k, -1});
      case Class::swap: return end_of({TaskKind::swap_in, k, -1});
      case Class::recompute: {
        for (const auto& [id, e] : by_id) {
          if (id.kind == TaskKind::recompute && id.layer == k) return e.end;
        }
        return std::nullopt;
      }
    }
    return std::nullopt;
  };
  auto need = [&](const Event& e, std::optional<Micros> dep, const std::string& what) {
    if (!dep) {
      if (r.feasible()) err << to_string(e.task) << " missing dependency " << what << "; ";
      return;
    }
    if (*dep > e.start) err << to_string(e.task) << " starts before " << what << "; ";
  };

  for (const auto& e : r.timeline.events) {
    const int i = e.task.layer;
    switch (e.task.kind) {
      case TaskKind::forward:
        for (int in : p.layers[i].inputs) need(e, end_of({TaskKind::forward, in, -1}), "forward of input");
        break;
      case TaskKind::swap_out:
        need(e, end_of({TaskKind::forward, i, -1}), "own forward");
        for (int c : cons[i]) need(e, end_of({TaskKind::forward, c, -1}), "consumer forward");
        break;
      case TaskKind::swap_in: need(e, end_of({TaskKind::swap_out, i, -1}), "swap-out"); break;
      case TaskKind::recompute:
        for (int in : p.layers[i].inputs) need(e, maker_end(in), "replay input");
        break;
      case TaskKind::backward:
        for (int c : cons[i]) need(e, end_of({TaskKind::backward, c, -1}), "consumer backward");
        need(e, maker_end(i), "own map");
        for (int in : p.layers[i].inputs) need(e, maker_end(in), "input map");
        break;
    }
  }

  // Memory: running total never below the base, peak is the max, and a feasible run stays
  // under capacity.
  Bytes total = r.memory.base;
  Bytes peak = total;
  Micros prev = 0;
  for (const auto& m : r.memory.entries) {
    if (m.time < prev) err << "memory trace not time ordered; ";
    prev = m.time;
    total += m.delta;
    if (total < r.memory.base) err << "memory below base at " << m.time << "; ";
    peak = std::max(peak, total);
  }
  if (peak != r.memory.peak) err << "peak " << r.memory.peak << " but replay gives " << peak << "; ";
  if (r.feasible() && r.memory.peak > p.env.capacity_bytes) err << "peak above capacity; ";

  // Residency: replay per-layer allocations and check every tensor read by a compute task.
  if (r.feasible()) {
    for (const auto& e : r.timeline.events) {
      if (e.lane != Lane::compute) continue;
      std::vector<Bytes> held(static_cast<std::size_t>(n), 0);
      for (const auto& m : r.memory.entries) {
        if (m.time > e.start) break;
        held[m.layer] += m.delta;
      }
      std::vector<int> reads = p.layers[e.task.layer].inputs;
      if (e.task.kind == TaskKind::backward) reads.push_back(e.task.layer);
      for (int k : reads) {
        if (held[k] <= 0) err << to_string(e.task) << " reads layer " << k << " while not resident; ";
      }
    }
  }

  if (r.feasible()) {
    Micros ms = 0;
    for (const auto& e : r.timeline.events) ms = std::max(ms, e.end);
    if (ms != r.timeline.makespan) err << "makespan " << r.timeline.makespan << " but last event ends " << ms << "; ";
    for (int i = 0; i < n; ++i) {
      if (!end_of({TaskKind::forward, i, -1}) || !end_of({TaskKind::backward, i, -1})) {
        err << "layer " << i << " missing forward or backward; ";
      }
    }
  }
  return err.str();
}

}  // namespace pooch::testing
