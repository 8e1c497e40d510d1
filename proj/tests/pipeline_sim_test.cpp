#include <gtest/gtest.h>

#include <functional>
#include <random>
#include <sstream>

#include "comet/pipeline_sim.hpp"

using namespace comet::sim;

namespace {

SimConfig make(std::size_t w, std::size_t c, std::size_t l, double t = 1.0, double comm = 0.0) {
  SimConfig s;
  s.n_workers = w;
  s.n_chunks = c;
  s.n_layers = l;
  s.t_layer = t;
  s.t_comm = comm;
  return s;
}

// Earliest finish times as a longest path over the dependency graph, with a
// worker running its chunks in assignment order. Written as a memoized
// recursion, independent of the simulator's event loop.
std::vector<double> longest_path(const SimConfig& c, bool layerwise) {
  const std::size_t L = c.n_layers, W = c.n_workers;
  std::vector<double> memo(c.n_chunks * L, -1.0);
  std::function<double(std::size_t, std::size_t)> finish = [&](std::size_t ch, std::size_t l) -> double {
    double& m = memo[ch * L + l];
    if (m >= 0.0) return m;
    double start = 0.0;
    if (l > 0) start = std::max(start, finish(ch, l - 1));
    if (l == 0 && ch >= W) start = std::max(start, finish(ch - W, L - 1));
    if (ch > 0) {
      const double comm = (ch % W) != ((ch - 1) % W) ? c.t_comm : 0.0;
      start = std::max(start, finish(ch - 1, layerwise ? l : L - 1) + comm);
    }
    return m = start + c.t_layer;
  };
  std::vector<double> out;
  for (std::size_t ch = 0; ch < c.n_chunks; ++ch)
    for (std::size_t l = 0; l < L; ++l) out.push_back(finish(ch, l));
  return out;
}

}  // namespace

TEST(PipelineSim, WorkedExamples) {
  auto c = compare(make(4, 4, 3));
  EXPECT_EQ(c.naive.makespan, 12.0);
  EXPECT_EQ(c.layerwise.makespan, 6.0);
  EXPECT_EQ(c.speedup, 2.0);
  c = compare(make(2, 2, 2, 1.0, 1.0));
  EXPECT_EQ(c.naive.makespan, 5.0);
  EXPECT_EQ(c.layerwise.makespan, 4.0);
}

TEST(PipelineSim, ClosedFormsForSquareConfigs) {
  for (std::size_t w = 1; w <= 32; ++w)
    for (std::size_t l = 1; l <= 32; ++l) {
      const auto c = compare(make(w, w, l, 0.5));
      ASSERT_EQ(c.naive.makespan, double(w * l) * 0.5) << w << "x" << l;
      ASSERT_EQ(c.layerwise.makespan, double(w + l - 1) * 0.5) << w << "x" << l;
      ASSERT_DOUBLE_EQ(c.speedup, double(w * l) / double(w + l - 1));
    }
}

TEST(PipelineSim, SingleWorkerGainsNothing) {
  for (std::size_t chunks : {1u, 3u, 9u}) {
    const auto c = compare(make(1, chunks, 4, 2.0, 5.0));
    EXPECT_EQ(c.naive.makespan, double(chunks * 4) * 2.0);
    EXPECT_EQ(c.layerwise.makespan, c.naive.makespan);
    EXPECT_EQ(c.speedup, 1.0);
    for (std::size_t i = 0; i < c.naive.tasks.size(); ++i) {
      EXPECT_EQ(c.naive.tasks[i].start, c.layerwise.tasks[i].start);
    }
  }
}

TEST(PipelineSim, RandomConfigsAgainstLongestPath) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> w_d(1, 8), c_d(1, 24), l_d(1, 12);
  std::uniform_real_distribution<double> t_d(0.0, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto cfg = make(w_d(rng), c_d(rng), l_d(rng), t_d(rng), trial % 4 == 0 ? 0.0 : t_d(rng));
    const auto c = compare(cfg);
    ASSERT_LE(c.layerwise.makespan, c.naive.makespan + 1e-12);
    ASSERT_EQ(check_schedule(c.naive, false), "");
    ASSERT_EQ(check_schedule(c.layerwise, true), "");
    const double work = double(cfg.n_chunks * cfg.n_layers) * cfg.t_layer;
    ASSERT_NEAR(c.naive.busy_time, work, 1e-9);
    ASSERT_NEAR(c.layerwise.busy_time, work, 1e-9);
    const auto naive = longest_path(cfg, false), layer = longest_path(cfg, true);
    for (std::size_t i = 0; i < naive.size(); ++i) {
      ASSERT_NEAR(c.naive.tasks[i].finish, naive[i], 1e-9);
      ASSERT_NEAR(c.layerwise.tasks[i].finish, layer[i], 1e-9);
    }
    for (double u : c.layerwise.utilization) {
      ASSERT_GE(u, 0.0);
      ASSERT_LE(u, 1.0 + 1e-12);
    }
  }
}

TEST(PipelineSim, BubbleFraction) {
  const auto c = compare(make(4, 4, 3));
  // Naive: 12 units of work spread over 4 workers x 12 time units.
  EXPECT_DOUBLE_EQ(c.naive.bubble_fraction, 1.0 - 12.0 / 48.0);
  EXPECT_DOUBLE_EQ(c.layerwise.bubble_fraction, 1.0 - 12.0 / 24.0);
  EXPECT_EQ(c.naive.utilization, (std::vector<double>(4, 0.25)));
}

TEST(PipelineSim, SpeedupNonIncreasingInCommCost) {
  // One chunk per worker: both makespans grow by (W-1)c, so the ratio falls.
  for (auto base : {make(4, 4, 3), make(2, 2, 7), make(8, 8, 2), make(6, 5, 4)}) {
    double prev = 1e300;
    for (double comm = 0.0; comm <= 20.0; comm += 0.25) {
      base.t_comm = comm;
      const auto c = compare(base);
      const double hops = double(base.n_chunks - 1) * comm;
      EXPECT_DOUBLE_EQ(c.naive.makespan, double(base.n_chunks * base.n_layers) + hops);
      EXPECT_DOUBLE_EQ(c.layerwise.makespan, double(base.n_chunks + base.n_layers - 1) + hops);
      EXPECT_LE(c.speedup, prev + 1e-12) << "comm " << comm;
      EXPECT_GE(c.speedup, 1.0);
      prev = c.speedup;
    }
  }
}

TEST(PipelineSim, MoreChunksThanWorkersCanHideComm) {
  // With workers reused, layerwise is bound by worker time and absorbs the
  // transfer that naive pays on every hop, so speedup may rise with c.
  auto cfg = make(3, 10, 5);
  const double s0 = compare(cfg).speedup;
  cfg.t_comm = 0.5;
  EXPECT_GT(compare(cfg).speedup, s0);
}

TEST(PipelineSim, ZeroLayerTimeIsDegenerate) {
  const auto c = compare(make(3, 5, 2, 0.0, 0.0));
  EXPECT_EQ(c.naive.makespan, 0.0);
  EXPECT_EQ(c.speedup, 1.0);
  EXPECT_EQ(c.naive.bubble_fraction, 0.0);
}

TEST(PipelineSim, InvalidConfigsRejected) {
  EXPECT_THROW(sim_naive(make(0, 1, 1)), std::invalid_argument);
  EXPECT_THROW(sim_naive(make(1, 0, 1)), std::invalid_argument);
  EXPECT_THROW(sim_layerwise(make(1, 1, 0)), std::invalid_argument);
  EXPECT_THROW(sim_layerwise(make(1, 1, 1, -1.0)), std::invalid_argument);
  EXPECT_THROW(compare(make(1, 1, 1, 1.0, -0.5)), std::invalid_argument);
}

TEST(PipelineSim, CheckerCatchesViolations) {
  auto r = sim_layerwise(make(2, 4, 3));
  auto bad = r;
  bad.tasks[5].start -= 0.5;
  EXPECT_NE(check_schedule(bad, true), "");
  // A layerwise schedule breaks the naive dependency rule.
  EXPECT_EQ(check_schedule(r, false), "chunk dependency");
}

TEST(PipelineSim, GanttCsvAndSummary) {
  const auto c = compare(make(2, 2, 1));
  std::ostringstream os;
  write_gantt_csv(os, {&c.naive, &c.layerwise});
  EXPECT_EQ(os.str(),
            "scheduler,worker,chunk,layer,start,finish\n"
            "naive,0,0,0,0,1\nnaive,1,1,0,1,2\n"
            "layerwise,0,0,0,0,1\nlayerwise,1,1,0,1,2\n");
  const auto j = summary_json(c);
  EXPECT_EQ(j["speedup"], 1.0);
  EXPECT_EQ(j["config"]["n_workers"], 2);
  EXPECT_EQ(j["naive"]["makespan"], 2.0);
}
