// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "pooch/oracle.hpp"
#include "pooch/simulator.hpp"
#include "pooch/trace_export.hpp"
#include "test_support.hpp"

using namespace pooch;
using namespace pooch::testing;

namespace {

Event ev(TaskKind k, int layer, Micros s, Micros e, int for_layer = -1) {
  return Event{{k, layer, for_layer}, lane_of(k), s, e};
}

// Eight-layer chain whose all-swap timeline exposes the swap-outs of 5, 6, 7 and makes the
// backwards wait on the swap-ins of 4, 6, 7 (long transfers on the late layers).
Profile exposed_tail() {
  const Micros t[8][5] = {{5, 8, 24, 3, 2}, {6, 4, 24, 3, 1},   {4, 2, 16, 2, 1}, {6, 5, 24, 3, 1},
                          {3, 4, 8, 11, 16}, {8, 3, 8, 16, 2}, {7, 6, 24, 7, 11}, {4, 3, 24, 3, 2}};
  Profile p = chain(8, 1, 1, 8, 1 << 20, 64);
  std::vector<Micros> out, in;
  for (int i = 0; i < 8; ++i) {
    p.layers[i].fwd_time = t[i][0];
    p.layers[i].bwd_time = t[i][1];
    p.layers[i].output_bytes = t[i][2];
    out.push_back(t[i][3]);
    in.push_back(t[i][4]);
  }
  p.swap_out_time_override = out;
  p.swap_in_time_override = in;
  return p;
}

}  // namespace

TEST(BuildTasks, SingleKeepLayerHasForwardAndBackward) {
  const auto p = chain(1, 4, 4, 8, 64);
  const auto g = build_tasks(p, Placement::uniform(1, Class::keep));
  ASSERT_EQ(g.tasks.size(), 2u);
  EXPECT_EQ(g.tasks[0].id, (TaskId{TaskKind::forward, 0, -1}));
  EXPECT_EQ(g.tasks[1].id, (TaskId{TaskKind::backward, 0, -1}));
  EXPECT_EQ(std::vector<int>(g.deps(1).begin(), g.deps(1).end()), std::vector<int>{0});
}

TEST(BuildTasks, RecomputeOfFirstLayerReplaysBeforeSecondBackward) {
  const auto p = chain(2, 4, 4, 8, 64);
  const Placement pl{{Class::recompute, Class::keep}, {}};
  const auto g = build_tasks(p, pl);
  std::vector<TaskId> order;
  for (int t : g.compute_order) order.push_back(g.tasks[t].id);
  const std::vector<TaskId> want = {{TaskKind::forward, 0, -1},
                                    {TaskKind::forward, 1, -1},
                                    {TaskKind::recompute, 0, 1},
                                    {TaskKind::backward, 1, -1},
                                    {TaskKind::backward, 0, -1}};
  EXPECT_EQ(order, want);
  // Layer 0 reads only the network input, which is always resident.
  for (int d : g.deps(g.compute_order[2])) EXPECT_EQ(g.tasks[d].lane, Lane::compute);
}

TEST(BuildTasks, RecursiveReplayChain) {
  const auto p = chain(3, 4, 4, 8, 64);
  const Placement pl{{Class::recompute, Class::recompute, Class::keep}, {}};
  const auto g = build_tasks(p, pl);
  std::vector<TaskId> order;
  for (int t : g.compute_order) order.push_back(g.tasks[t].id);
  const std::vector<TaskId> want = {{TaskKind::forward, 0, -1},   {TaskKind::forward, 1, -1},
                                    {TaskKind::forward, 2, -1},   {TaskKind::recompute, 0, 2},
                                    {TaskKind::recompute, 1, 2},  {TaskKind::backward, 2, -1},
                                    {TaskKind::backward, 1, -1},  {TaskKind::backward, 0, -1}};
  EXPECT_EQ(order, want);
}

TEST(BuildTasks, SinkRecomputeRejected) {
  const auto p = chain(2, 4, 4, 8, 64);
  EXPECT_THROW(build_tasks(p, Placement{{Class::keep, Class::recompute}, {}}), ValidationError);
  EXPECT_THROW(build_tasks(p, Placement::uniform(3, Class::keep)), ValidationError);
}

TEST(Simulate, SingleKeepLayer) {
  const auto p = chain(1, 4, 4, 8, 64, 16);
  const auto r = simulate(p, Placement::uniform(1, Class::keep), Schedule::eager);
  ASSERT_TRUE(r.feasible());
  EXPECT_EQ(r.timeline.makespan, 8);
  EXPECT_EQ(r.memory.peak, 16 + 8);
}

TEST(Simulate, SingleSwapLayerEventTrace) {
  auto p = chain(1, 4, 4, 8, 64);
  set_transfer(p, 6);
  const auto r = simulate(p, Placement::uniform(1, Class::swap), Schedule::eager);
  ASSERT_TRUE(r.feasible());
  const std::vector<Event> want = {ev(TaskKind::forward, 0, 0, 4), ev(TaskKind::swap_out, 0, 4, 10),
                                   ev(TaskKind::swap_in, 0, 10, 16), ev(TaskKind::backward, 0, 16, 20)};
  EXPECT_EQ(sorted_events(r.timeline.events), sorted_events(want));
  EXPECT_EQ(r.timeline.makespan, 20);
  EXPECT_EQ(r.timeline.stalls.at(0), 12);

  const std::vector<MemoryEntry> mem = {{0, 8, 0, MemReason::fwd_alloc},
                                        {10, -8, 0, MemReason::swap_out_free},
                                        {10, 8, 0, MemReason::swap_in_alloc},
                                        {20, -8, 0, MemReason::bwd_free}};
  EXPECT_EQ(r.memory.entries, mem);
}

TEST(Simulate, ReplayedMapHandTrace) {
  // F0 [0,4] F1 [4,8] R0 [8,12] B1 [12,16] B0 [16,20]
  const auto p = chain(2, 4, 4, 8, 64);
  const auto r = simulate(p, Placement{{Class::recompute, Class::keep}, {}}, Schedule::eager);
  ASSERT_TRUE(r.feasible());
  const std::vector<Event> want = {ev(TaskKind::forward, 0, 0, 4), ev(TaskKind::forward, 1, 4, 8),
                                   ev(TaskKind::recompute, 0, 8, 12, 1), ev(TaskKind::backward, 1, 12, 16),
                                   ev(TaskKind::backward, 0, 16, 20)};
  EXPECT_EQ(sorted_events(r.timeline.events), sorted_events(want));
  const std::vector<MemoryEntry> mem = {{0, 8, 0, MemReason::fwd_alloc},   {4, 8, 1, MemReason::fwd_alloc},
                                        {8, -8, 0, MemReason::discard_free}, {8, 8, 0, MemReason::recompute_alloc},
                                        {16, -8, 1, MemReason::bwd_free},    {20, -8, 0, MemReason::bwd_free}};
  EXPECT_EQ(r.memory.entries, mem);
  EXPECT_EQ(r.memory.peak, 1 + 16);
}

TEST(Simulate, OomWhenFirstMapDoesNotFit) {
  const auto p = chain(1, 4, 4, 8, 20, 16);
  const auto r = simulate(p, Placement::uniform(1, Class::keep), Schedule::eager);
  ASSERT_FALSE(r.feasible());
  EXPECT_EQ(*r.timeline.oom, (OomRecord{0, 0, 8}));
  EXPECT_EQ(r.makespan(), std::numeric_limits<Micros>::max());
}

TEST(Simulate, EagerNotSlowerThanNaiveOnThreeLayerChain) {
  auto p = chain(3, 4, 4, 8, 1024);
  set_transfer(p, 6);
  const auto all_swap = Placement::uniform(3, Class::swap);
  const auto eager = simulate(p, all_swap, Schedule::eager);
  const auto naive = simulate(p, all_swap, Schedule::naive);
  ASSERT_TRUE(eager.feasible());
  ASSERT_TRUE(naive.feasible());
  EXPECT_LE(eager.timeline.makespan, naive.timeline.makespan);
  EXPECT_EQ(eager.timeline.makespan, reference_simulate(p, all_swap, Schedule::eager).timeline.makespan);
  EXPECT_EQ(naive.timeline.makespan, reference_simulate(p, all_swap, Schedule::naive).timeline.makespan);
}

TEST(Simulate, AllKeepChainIsSerialSum) {
  Rng rng(11);
  for (int it = 0; it < 100; ++it) {
    auto p = random_profile(rng, {uniform(rng, 1, 12), false, false});
    Micros sum = 0;
    for (const auto& l : p.layers) sum += l.fwd_time + l.bwd_time;
    const auto r = simulate(p, Placement::uniform(p.size(), Class::keep), Schedule::eager);
    ASSERT_TRUE(r.feasible());
    EXPECT_EQ(r.timeline.makespan, sum);
  }
}

TEST(SimulateProperty, TimelineAndMemoryInvariants) {
  Rng rng(2024);
  int feasible = 0;
  for (int it = 0; it < 600; ++it) {
    const RandomShape shape{uniform(rng, 1, 10), it % 2 == 1, it % 3 != 0};
    const auto p = random_profile(rng, shape);
    const auto pl = random_placement(rng, p.size());
    const auto sched = static_cast<Schedule>(uniform(rng, 0, 2));
    const auto r = simulate(p, pl, sched);
    feasible += r.feasible();
    const auto problems = check_run(p, pl, r);
    ASSERT_TRUE(problems.empty()) << "iteration " << it << " sched " << to_string(sched) << ": " << problems;
  }
  EXPECT_GT(feasible, 100);
}

TEST(SimulateProperty, Deterministic) {
  Rng rng(5);
  for (int it = 0; it < 100; ++it) {
    const auto p = random_profile(rng, {uniform(rng, 1, 10), true, true});
    const auto pl = random_placement(rng, p.size());
    const auto a = simulate(p, pl, Schedule::eager);
    const auto b = simulate(p, pl, Schedule::eager);
    EXPECT_EQ(a.timeline.events, b.timeline.events);
    EXPECT_EQ(a.timeline.stalls, b.timeline.stalls);
    EXPECT_EQ(a.timeline.oom, b.timeline.oom);
    EXPECT_EQ(a.memory.entries, b.memory.entries);
  }
}

TEST(SimulateProperty, EagerDominatesNaiveForAllSwap) {
  Rng rng(77);
  int compared = 0;
  for (int it = 0; it < 400; ++it) {
    const auto p = random_profile(rng, {uniform(rng, 1, 12), it % 2 == 0, it % 3 == 0});
    const auto all_swap = Placement::uniform(p.size(), Class::swap);
    const auto eager = simulate(p, all_swap, Schedule::eager);
    const auto naive = simulate(p, all_swap, Schedule::naive);
    if (!naive.feasible()) continue;
    ASSERT_TRUE(eager.feasible()) << "iteration " << it;
    EXPECT_LE(eager.timeline.makespan, naive.timeline.makespan) << "iteration " << it;
    ++compared;
  }
  EXPECT_GT(compared, 300);
}

TEST(StallSets, ExposedTailGeometry) {
  const auto p = exposed_tail();
  const auto r = simulate(p, Placement::uniform(8, Class::swap), Schedule::eager);
  ASSERT_TRUE(r.feasible());
  const auto s = extract_stall_sets(r.timeline, p);
  EXPECT_EQ(s.swap_out_exposed, (std::vector<int>{5, 6, 7}));
  EXPECT_EQ(s.swap_in_exposed, (std::vector<int>{4, 6, 7}));
  const auto ref = reference_simulate(p, Placement::uniform(8, Class::swap), Schedule::eager);
  EXPECT_EQ(ref.timeline.stalls, r.timeline.stalls);
}

TEST(StallSets, ShortTransfersLeaveOnlyTheLastTwoMaps) {
  // Swap-outs of the output map and of its input both wait for the last forward, and the first
  // backward reads both right away. Nothing else is exposed when transfers are short.
  auto p = chain(6, 10, 10, 8, 1 << 20);
  set_transfer(p, 1);
  const auto r = simulate(p, Placement::uniform(6, Class::swap), Schedule::eager);
  const auto s = extract_stall_sets(r.timeline, p);
  EXPECT_EQ(s.swap_out_exposed, (std::vector<int>{4, 5}));
  EXPECT_EQ(s.swap_in_exposed, (std::vector<int>{4, 5}));
}

TEST(StallSets, EmptyWhenNothingIsExposed) {
  // Build the timeline by hand: every swap-out ends before the final forward, nothing waits.
  Timeline t;
  t.events = {ev(TaskKind::forward, 0, 0, 10), ev(TaskKind::swap_out, 0, 10, 11), ev(TaskKind::forward, 1, 10, 20),
              ev(TaskKind::swap_out, 1, 12, 13), ev(TaskKind::swap_in, 0, 20, 21), ev(TaskKind::swap_in, 1, 21, 22)};
  Profile p = chain(2, 10, 10, 8, 1024);
  const auto s = extract_stall_sets(t, p);
  EXPECT_TRUE(s.swap_out_exposed.empty());
  EXPECT_TRUE(s.swap_in_exposed.empty());
}

TEST(StallSets, RejectsNonSwapTimelines) {
  const auto p = chain(2, 4, 4, 8, 1024);
  const auto keep = simulate(p, Placement::uniform(2, Class::keep), Schedule::eager);
  EXPECT_THROW(extract_stall_sets(keep.timeline, p), UsageError);
  const auto tight = chain(2, 4, 4, 8, 4);
  const auto oom = simulate(tight, Placement::uniform(2, Class::swap), Schedule::eager);
  ASSERT_FALSE(oom.feasible());
  EXPECT_THROW(extract_stall_sets(oom.timeline, tight), UsageError);
}

TEST(TraceExport, ChromeTraceAndMemoryCsv) {
  auto p = chain(1, 4, 4, 8, 64, 16);
  set_transfer(p, 6);
  const auto r = simulate(p, Placement::uniform(1, Class::swap), Schedule::eager);
  const auto trace = chrome_trace(r.timeline);
  ASSERT_EQ(trace.size(), 4u);
  for (const auto& e : trace) {
    EXPECT_EQ(e["ph"], "X");
    EXPECT_EQ(e["pid"], 0);
  }
  const auto& so = *std::find_if(trace.begin(), trace.end(), [](const json& e) { return e["tid"] == 1; });
  EXPECT_EQ(so["ts"], 4);
  EXPECT_EQ(so["dur"], 6);
  EXPECT_EQ(memory_csv(r.memory),
            "time_us,delta_bytes,total_bytes,layer,reason\n"
            "0,8,24,0,fwd_alloc\n"
            "10,-8,16,0,swap_out_free\n"
            "10,8,24,0,swap_in_alloc\n"
            "20,-8,16,0,bwd_free\n");
}
