// Serial vs OpenMP rollouts, plus single-threaded simulation throughput.
#include <chrono>
#include <cstdio>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>

#include "tsclab/harness.hpp"

using namespace tsclab;
using Clock = std::chrono::steady_clock;

namespace {

EnvConfig scenario(int rows, int cols, double rate) {
  EnvConfig cfg;
  GridOptions g;
  g.rows = rows;
  g.cols = cols;
  cfg.network = std::make_shared<const RoadNetwork>(generate_grid(g));
  TripOptions t;
  t.rate = rate;
  cfg.flows = generate_trips(*cfg.network, t);
  return cfg;
}

template <class F>
double seconds(F&& f) {
  const auto t0 = Clock::now();
  f();
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rollout benchmark"};
  int rows = 2, cols = 2, k = 4, reps = 25;
  double rate = 300.0;
  std::uint64_t seed = 1;
  app.add_option("--rows", rows)->capture_default_str();
  app.add_option("--cols", cols)->capture_default_str();
  app.add_option("--rate", rate)->capture_default_str();
  app.add_option("--envs", k, "environments per batch")->capture_default_str();
  app.add_option("--reps", reps, "batches per measurement")->capture_default_str();
  app.add_option("--seed", seed)->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const EnvConfig cfg = scenario(rows, cols, rate);
  ControllerParams p;
  p.kind = ControllerKind::random;
  p.seed = seed;
  const PolicyFactory policy = controller_policy(p);
  const double sim_per_episode = cfg.episode_limit * cfg.action_interval;

  int threads = 1;
#ifdef _OPENMP
  threads = omp_get_max_threads();
#endif

  std::vector<Rollout> serial, parallel;
  const double ts = seconds([&] {
    for (int r = 0; r < reps; ++r) serial = run_serial(cfg, k, seed + static_cast<std::uint64_t>(r) * k, policy);
  });
  const double tp = seconds([&] {
    for (int r = 0; r < reps; ++r) parallel = run_parallel(cfg, k, seed + static_cast<std::uint64_t>(r) * k, policy);
  });
  bool same = true;
  for (int i = 0; i < k; ++i) same = same && serial[i].metrics == parallel[i].metrics;

  const double episodes = static_cast<double>(reps) * k;
  std::printf("scenario        %dx%d grid, %.0f veh/h per entry, random controller\n", rows, cols, rate);
  std::printf("episodes        %.0f x %.0f sim-s\n", episodes, sim_per_episode);
  std::printf("omp threads     %d\n", threads);
  std::printf("serial          %.3f s  %.0f sim-s per wall-s\n", ts, episodes * sim_per_episode / ts);
  std::printf("openmp          %.3f s  %.0f sim-s per wall-s\n", tp, episodes * sim_per_episode / tp);
  std::printf("speedup         %.2fx\n", ts / tp);
  std::printf("results match   %s\n", same ? "yes" : "NO");
  return same ? 0 : 1;
}
