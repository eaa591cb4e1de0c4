#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "fixtures.hpp"
#include "scratch.hpp"
#include "tsclab/errors.hpp"
#include "tsclab/harness.hpp"

using namespace tsclab;

namespace {

RunConfig small_run(Algorithm algo, const std::filesystem::path& out, int episodes = 12) {
  RunConfig c;
  c.env = fixtures::grid_env(2, 2, 400.0);
  TrainerConfig t;
  t.algorithm = algo;
  t.hidden_dim = 16;
  t.batch_episodes = 4;
  t.buffer_episodes = 50;
  t.target_update_episodes = 4;
  t.epsilon_anneal_steps = 500;
  t.mixer_embed = 8;
  t.hypernet_hidden = 16;
  c.trainer = t;
  c.total_steps = 72LL * episodes;
  c.eval_interval = 4;
  c.eval_episodes = 2;
  c.parallel_envs = 4;
  c.seed = 7;
  c.output_dir = out;
  return c;
}

std::size_t count_prefix(const std::vector<std::string>& rows, const std::string& prefix) {
  return static_cast<std::size_t>(
      std::count_if(rows.begin(), rows.end(), [&](const std::string& r) { return r.rfind(prefix, 0) == 0; }));
}

}  // namespace

TEST_CASE("ten episodes make one simulated hour") {
  const EnvConfig cfg;
  CHECK(kEpisodesPerHour * cfg.episode_limit * cfg.action_interval == 3600);
}

TEST_CASE("empty demand gives zero queue, delay and occupancy") {
  EnvConfig cfg = fixtures::grid_env(2, 2, 0.0);
  cfg.flows.clear();
  const EvalReport rep = evaluate(cfg, controller_policy({}), 3, 11);
  REQUIRE(rep.episodes.size() == 3);
  CHECK(rep.mean.queue == 0.0);
  CHECK(rep.mean.delay == 0.0);
  CHECK(rep.mean.occupancy == 0.0);
  CHECK(rep.mean.speed == 1.0);
  CHECK(rep.mean.travel_time == 0.0);
  CHECK(rep.mean.steps == 72);
}

TEST_CASE("aggregate of a constant trace is that constant") {
  EpisodeMetrics m;
  m.queue = 12.25;
  m.delay = 0.375;
  m.speed = 0.625;
  m.occupancy = 0.125;
  m.wait_time = 31.5;
  m.travel_time = 88.0;
  m.episode_return = -882.0;
  m.completed = 40;
  m.steps = 72;
  const std::vector<EpisodeMetrics> trace(7, m);
  CHECK(aggregate(trace) == m);
}

TEST_CASE("episode metrics match a recomputation from raw state") {
  const EnvConfig cfg = fixtures::grid_env(2, 2, 500.0);
  // reference: step by hand, compute every metric straight from the simulator state
  Environment env(cfg);
  env.reset(5);
  std::map<std::uint64_t, std::int64_t> waits;  // vehicle id -> last seen wait
  env.set_tick_observer([&](const SimState& st) {
    for (std::size_t s = 0; s < st.vehicles.size(); ++s) {
      if (st.slot_live[s]) waits[st.vehicles[s].id] = st.vehicles[s].wait_ticks;
    }
  });
  Controller ctl(ControllerParams{});
  ctl.reset(env);
  double queue = 0.0, delay = 0.0, speed = 0.0, occ = 0.0, ret = 0.0;
  int steps = 0;
  for (bool done = false; !done;) {
    const StepResult r = env.step(ctl.act(env));
    done = r.terminated;
    const SimState& st = env.sim_state();
    double q = 0.0, n = 0.0, moving = 0.0, o = 0.0;
    for (std::size_t l = 0; l < st.lanes.size(); ++l) {
      q += st.lanes[l].queued.size();
      n += st.lanes[l].occupancy();
      moving += st.lanes[l].running.size();
      o += st.lanes[l].occupancy() / static_cast<double>(env.network().lanes()[l].capacity);
    }
    queue += q;
    delay += n > 0 ? 1.0 - moving / n : 0.0;
    speed += n > 0 ? moving / n : 1.0;
    occ += o / static_cast<double>(st.lanes.size());
    ret += r.reward;
    ++steps;
  }
  double wait_sum = 0.0;
  for (const auto& [id, w] : waits) wait_sum += static_cast<double>(w);

  auto policy = controller_policy(ControllerParams{})(0, 5);
  const Rollout ro = rollout(cfg, 5, *policy);
  const EpisodeMetrics& m = ro.metrics;
  CHECK(m.steps == steps);
  CHECK(m.queue == doctest::Approx(queue / steps).epsilon(1e-12));
  CHECK(m.delay == doctest::Approx(delay / steps).epsilon(1e-12));
  CHECK(m.speed == doctest::Approx(speed / steps).epsilon(1e-12));
  CHECK(m.delay + m.speed == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.occupancy == doctest::Approx(occ / steps).epsilon(1e-12));
  CHECK(m.episode_return == ret);
  CHECK(m.queue == doctest::Approx(-ret / steps).epsilon(1e-12));
  REQUIRE(env.sim_state().spawned == static_cast<std::int64_t>(waits.size()));
  CHECK(m.wait_time == doctest::Approx(wait_sum / waits.size()).epsilon(1e-12));
  CHECK(m.completed == env.sim_state().completed);
  CHECK(m.completed > 0);
  CHECK(m.travel_time > 0.0);
  for (double v : {m.delay, m.speed, m.occupancy}) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("evaluation is deterministic") {
  const EnvConfig cfg = fixtures::grid_env(2, 2, 400.0);
  ControllerParams p;
  p.kind = ControllerKind::random;
  p.seed = 3;
  const EvalReport a = evaluate(cfg, controller_policy(p), 5, 100, 2);
  const EvalReport b = evaluate(cfg, controller_policy(p), 5, 100, 2);
  CHECK(a.episodes == b.episodes);
  CHECK(a.mean == b.mean);
  // chunking by parallel width does not change anything
  const EvalReport c = evaluate(cfg, controller_policy(p), 5, 100, 1);
  CHECK(a.episodes == c.episodes);
}

TEST_CASE("run_parallel") {
  const EnvConfig cfg = fixtures::grid_env(2, 2, 400.0);
  ControllerParams p;
  p.kind = ControllerKind::random;

  SUBCASE("k=1 equals a sequential rollout") {
    const auto par = run_parallel(cfg, 1, 42, controller_policy(p));
    auto policy = controller_policy(p)(0, 42);
    const Rollout seq = rollout(cfg, 42, *policy);
    REQUIRE(par.size() == 1);
    CHECK(par[0].metrics == seq.metrics);
  }
  SUBCASE("k=4 matches the serial reference and repeats") {
    const auto a = run_parallel(cfg, 4, 42, controller_policy(p));
    const auto b = run_parallel(cfg, 4, 42, controller_policy(p));
    const auto s = run_serial(cfg, 4, 42, controller_policy(p));
    for (int i = 0; i < 4; ++i) {
      CHECK(a[i].seed == 42 + static_cast<std::uint64_t>(i));
      CHECK(a[i].metrics == b[i].metrics);
      CHECK(a[i].metrics == s[i].metrics);
    }
    CHECK(a[0].metrics != a[1].metrics);
  }
  SUBCASE("recorded episodes match the serial reference") {
    ValueTrainer tr(InputLayout::from_spec(Environment(cfg).spec()), TrainerConfig{}, 1);
    RecordSpec rec;
    rec.layout = &tr.layout();
    rec.with_state = true;
    const auto a = run_parallel(cfg, 3, 9, value_policy(tr, 0.5), rec);
    const auto s = run_serial(cfg, 3, 9, value_policy(tr, 0.5), rec);
    for (int i = 0; i < 3; ++i) {
      REQUIRE(a[i].episode.has_value());
      CHECK(a[i].episode->steps == 72);
      CHECK(a[i].episode->actions == s[i].episode->actions);
      CHECK(a[i].episode->obs == s[i].episode->obs);
      CHECK(a[i].episode->state == s[i].episode->state);
      CHECK(std::all_of(a[i].episode->done.begin(), a[i].episode->done.end(), [](auto d) { return d == 0; }));
      double ret = 0.0;
      for (double r : a[i].episode->rewards) ret += r;
      CHECK(ret == a[i].metrics.episode_return);
    }
  }
  SUBCASE("k must be positive") { CHECK_THROWS_AS(run_parallel(cfg, 0, 1, controller_policy(p)), ContractError); }
}

TEST_CASE("csv headers match the golden files") {
  const std::string golden = TSCLAB_TEST_DIR "/golden/";
  scratch::Dir dir("golden");
  RunConfig c = small_run(Algorithm::iql, dir.path(), 4);
  c.log_steps = true;
  train(c);
  CHECK(scratch::lines(dir / "metrics.csv").at(0) == scratch::lines(golden + "metrics_header.csv").at(0));
  CHECK(scratch::lines(dir / "eval.csv").at(0) == scratch::lines(golden + "eval_header.csv").at(0));
  CHECK(scratch::lines(dir / "steps.csv").at(0) == scratch::lines(golden + "steps_header.csv").at(0));
  CHECK(scratch::lines(dir / "steps.csv").size() == 1 + 4 * 72);
}

TEST_CASE("zero-step training writes headers and an initial checkpoint") {
  scratch::Dir dir("zero");
  RunConfig c = small_run(Algorithm::qmix, dir.path(), 0);
  const RunSummary s = train(c);
  CHECK(s.episodes == 0);
  CHECK(!s.last_eval);
  CHECK(scratch::lines(dir / "metrics.csv").size() == 1);
  CHECK(scratch::lines(dir / "eval.csv").size() == 1);
  CHECK(std::filesystem::exists(dir / "checkpoints" / "episode_00000000.json"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "final.json"));
  CHECK(std::filesystem::exists(dir / "run.json"));
}

TEST_CASE("row counts follow the evaluation cadence") {
  scratch::Dir dir("rows");
  RunConfig c = small_run(Algorithm::vdn, dir.path(), 12);
  const RunSummary s = train(c);
  CHECK(s.episodes == 12);
  CHECK(s.env_steps == 12 * 72);
  const auto rows = scratch::lines(dir / "metrics.csv");
  CHECK(count_prefix(rows, "train,") == 12);
  CHECK(count_prefix(rows, "eval,") == 3);  // after episodes 4, 8, 12
  CHECK(rows.size() == 1 + 12 + 3);
  CHECK(scratch::lines(dir / "eval.csv").size() == 1 + 3 * 2);
  for (int e : {0, 4, 8, 12}) {
    char name[64];
    std::snprintf(name, sizeof name, "episode_%08d.json", e);
    CHECK(std::filesystem::exists(dir / "checkpoints" / name));
  }
  // updates start once the buffer holds a batch
  CHECK(rows[3].back() == ',');
  CHECK(rows[4].back() != ',');
}

TEST_CASE("training is byte-reproducible with parallel environments") {
  for (Algorithm algo : {Algorithm::iql, Algorithm::qmix, Algorithm::maa2c}) {
    CAPTURE(to_string(algo));
    scratch::Dir a("det_a"), b("det_b");
    train(small_run(algo, a.path(), 8));
    train(small_run(algo, b.path(), 8));
    CHECK(scratch::slurp(a / "metrics.csv") == scratch::slurp(b / "metrics.csv"));
    CHECK(scratch::slurp(a / "eval.csv") == scratch::slurp(b / "eval.csv"));
    CHECK(scratch::slurp(a / "checkpoints" / "final.json") == scratch::slurp(b / "checkpoints" / "final.json"));
    // a different seed changes the run
    RunConfig other = small_run(algo, b.path(), 8);
    other.seed = 8;
    train(other);
    CHECK(scratch::slurp(a / "metrics.csv") != scratch::slurp(b / "metrics.csv"));
  }
}

TEST_CASE("a restored checkpoint reproduces the final evaluation") {
  for (Algorithm algo : {Algorithm::qmix, Algorithm::ia2c}) {
    CAPTURE(to_string(algo));
    scratch::Dir dir("ckpt"), ev("ckpt_eval");
    RunConfig c = small_run(algo, dir.path(), 8);
    const RunSummary s = train(c);
    REQUIRE(s.last_eval);
    c.output_dir = ev.path();
    const RunSummary e = run_evaluation(c, dir / "checkpoints" / "final.json");
    REQUIRE(e.last_eval);
    CHECK(e.last_eval->episodes == s.last_eval->episodes);
    CHECK(std::filesystem::exists(ev / "eval.json"));
    CHECK(!std::filesystem::exists(ev / "metrics.csv"));
  }
}

TEST_CASE("baseline evaluation uses the controller's natural mode") {
  scratch::Dir dir("baseline");
  nlohmann::json doc{{"env", {{"network", {{"grid", {{"rows", 2}, {"cols", 2}}}}}, {"flows", {{"generate", {{"rate", 300}}}}}}},
                     {"controller", "max_pressure"},
                     {"eval_episodes", 3},
                     {"output_dir", dir.path().string()}};
  const RunConfig c = RunConfig::from_json(doc);
  CHECK(c.env.action_mode == ActionMode::free_select);
  const RunSummary s = run_evaluation(c);
  REQUIRE(s.last_eval);
  CHECK(s.last_eval->episodes.size() == 3);
  CHECK(scratch::lines(dir / "eval.csv").size() == 4);

  doc["controller"] = "sotl";
  CHECK(RunConfig::from_json(doc).env.action_mode == ActionMode::round_robin);
}

TEST_CASE("run config validation") {
  nlohmann::json doc{{"env", {{"network", {{"grid", {{"rows", 2}, {"cols", 2}}}}}, {"action_mode", "free_select"}}},
                     {"controller", "sotl"}};
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);
  doc["controller"] = "fixed_time";
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);
  doc["controller"] = "greedy";
  CHECK_NOTHROW(RunConfig::from_json(doc));

  doc["trainer"] = {{"algorithm", "iql"}};
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);  // both trainer and controller
  doc.erase("controller");
  CHECK_NOTHROW(RunConfig::from_json(doc));
  for (const char* key : {"eval_interval", "parallel_envs", "eval_episodes"}) {
    nlohmann::json bad = doc;
    bad[key] = 0;
    CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  }
  nlohmann::json neg = doc;
  neg["total_steps"] = -1;
  CHECK_THROWS_AS(RunConfig::from_json(neg), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json::array()), ConfigError);

  const RunConfig d = RunConfig::from_json(doc);
  CHECK(d.total_steps == 4320000);
  CHECK(d.eval_interval == 200);
  CHECK(d.eval_episodes == 10);
  CHECK(d.parallel_envs == 4);
}

TEST_CASE("unwritable output directory") {
  scratch::Dir dir("unwritable");
  std::ofstream(dir / "file") << "x";
  RunConfig c = small_run(Algorithm::iql, dir / "file" / "sub", 4);
  CHECK_THROWS_AS(train(c), IoError);
}

TEST_CASE("shipped desk preset loads") {
  const RunConfig c = load_run_config(TSCLAB_PRESET_DIR "/desk_2x2_iql.json");
  CHECK(c.trainer->algorithm == Algorithm::iql);
  CHECK(c.env.network->num_signals() == 4);
  CHECK(c.total_episodes() == 1000);
  CHECK(c.eval_interval == 200);
}
