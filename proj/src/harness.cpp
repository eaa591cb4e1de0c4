#include "tsclab/harness.hpp"

#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "tsclab/errors.hpp"

namespace tsclab {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

}  // namespace

void MetricsAccumulator::add_step(const StepInfo& info, double reward) {
  sum_.queue += info.queue_sum;
  sum_.delay += info.mean_delay;
  sum_.speed += info.mean_speed;
  sum_.occupancy += info.mean_occupancy;
  sum_.episode_return += reward;
  sum_.steps += 1;
}

EpisodeMetrics MetricsAccumulator::finish(const SimState& st) const {
  EpisodeMetrics m;
  m.steps = sum_.steps;
  m.episode_return = sum_.episode_return;
  if (sum_.steps > 0) {
    const double n = sum_.steps;
    m.queue = sum_.queue / n;
    m.delay = sum_.delay / n;
    m.speed = sum_.speed / n;
    m.occupancy = sum_.occupancy / n;
  }
  std::int64_t waits = st.completed_wait_ticks;
  for (std::size_t s = 0; s < st.vehicles.size(); ++s) {
    if (st.slot_live[s]) waits += st.vehicles[s].wait_ticks;
  }
  if (st.spawned > 0) m.wait_time = static_cast<double>(waits) / static_cast<double>(st.spawned);
  if (!st.completed_travel_times.empty()) {
    double total = 0.0;
    for (auto t : st.completed_travel_times) total += static_cast<double>(t);
    m.travel_time = total / static_cast<double>(st.completed_travel_times.size());
  }
  m.completed = st.completed;
  return m;
}

EpisodeMetrics aggregate(std::span<const EpisodeMetrics> episodes) {
  EpisodeMetrics m;
  if (episodes.empty()) return m;
  m.speed = 0.0;
  double completed = 0.0;
  double steps = 0.0;
  for (const auto& e : episodes) {
    m.queue += e.queue;
    m.delay += e.delay;
    m.speed += e.speed;
    m.occupancy += e.occupancy;
    m.wait_time += e.wait_time;
    m.travel_time += e.travel_time;
    m.episode_return += e.episode_return;
    completed += static_cast<double>(e.completed);
    steps += e.steps;
  }
  const double n = static_cast<double>(episodes.size());
  m.queue /= n;
  m.delay /= n;
  m.speed /= n;
  m.occupancy /= n;
  m.wait_time /= n;
  m.travel_time /= n;
  m.episode_return /= n;
  m.completed = static_cast<std::int64_t>(completed / n);
  m.steps = static_cast<int>(steps / n);
  return m;
}

// ---- policies

namespace {

class ControllerPolicy final : public Policy {
 public:
  explicit ControllerPolicy(ControllerParams p) : controller_(p) {}
  void begin_episode(const Environment& env) override { controller_.reset(env); }
  std::vector<int> act(const Environment& env, std::span<const Observation>) override { return controller_.act(env); }

 private:
  Controller controller_;
};

class ValuePolicy final : public Policy {
 public:
  ValuePolicy(const ValueTrainer& t, double eps, std::uint64_t seed) : trainer_(t), eps_(eps), rng_(seed) {}
  void begin_episode(const Environment&) override {}
  std::vector<int> act(const Environment&, std::span<const Observation> obs) override {
    return trainer_.select_actions(obs, eps_, rng_);
  }

 private:
  const ValueTrainer& trainer_;
  double eps_;
  Rng rng_;
};

class ActorPolicy final : public Policy {
 public:
  ActorPolicy(const ActorCriticTrainer& t, bool greedy, std::uint64_t seed) : trainer_(t), greedy_(greedy), rng_(seed) {}
  void begin_episode(const Environment&) override {}
  std::vector<int> act(const Environment&, std::span<const Observation> obs) override {
    return trainer_.select_actions(obs, rng_, greedy_);
  }

 private:
  const ActorCriticTrainer& trainer_;
  bool greedy_;
  Rng rng_;
};

// action-selection streams are keyed on the env seed so they do not depend on scheduling
constexpr std::uint64_t kPolicyStream = 0x5eed;

}  // namespace

PolicyFactory controller_policy(ControllerParams params) {
  return [params](int, std::uint64_t env_seed) {
    ControllerParams p = params;
    p.seed = mix_seed(params.seed, env_seed);
    return std::make_unique<ControllerPolicy>(p);
  };
}

PolicyFactory value_policy(const ValueTrainer& trainer, double epsilon) {
  return [&trainer, epsilon](int, std::uint64_t env_seed) {
    return std::make_unique<ValuePolicy>(trainer, epsilon, mix_seed(env_seed, kPolicyStream));
  };
}

PolicyFactory actor_policy(const ActorCriticTrainer& trainer, bool greedy) {
  return [&trainer, greedy](int, std::uint64_t env_seed) {
    return std::make_unique<ActorPolicy>(trainer, greedy, mix_seed(env_seed, kPolicyStream));
  };
}

// ---- rollouts

Rollout rollout(const EnvConfig& config, std::uint64_t seed, Policy& policy, const RecordSpec& record) {
  Environment env(config);
  Rollout out;
  out.seed = seed;
  ResetResult r = env.reset(seed);
  policy.begin_episode(env);

  if (record.layout) {
    const InputLayout& l = *record.layout;
    out.episode.emplace(l.n_agents, l.obs_dim, record.with_state ? l.state_dim : 0,
                        record.local_reward ? l.n_agents : 1);
    out.episode->policy_version = record.policy_version;
    out.episode->begin(r.observations, record.with_state ? &r.state : nullptr);
  }

  MetricsAccumulator acc;
  std::vector<Observation> obs = std::move(r.observations);
  bool done = false;
  while (!done) {
    const std::vector<int> a = policy.act(env, obs);
    StepResult s = env.step(a);
    acc.add_step(s.info, s.reward);
    if (record.step_infos) out.step_infos.push_back(s.info);
    done = s.terminated;
    if (out.episode) {
      const std::span<const double> rw =
          record.local_reward ? std::span<const double>(s.local_rewards) : std::span<const double>(&s.reward, 1);
      // the episode limit is a truncation, never a terminal
      out.episode->push(a, rw, false, s.observations, record.with_state ? &s.state : nullptr);
    }
    obs = std::move(s.observations);
  }
  out.metrics = acc.finish(env.sim_state());
  return out;
}

std::vector<Rollout> run_serial(const EnvConfig& config, int k, std::uint64_t base_seed, const PolicyFactory& factory,
                                const RecordSpec& record) {
  if (k < 1) throw ContractError("run needs at least one environment");
  std::vector<Rollout> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(i);
    auto policy = factory(i, seed);
    out.push_back(rollout(config, seed, *policy, record));
  }
  return out;
}

std::vector<Rollout> run_parallel(const EnvConfig& config, int k, std::uint64_t base_seed,
                                  const PolicyFactory& factory, const RecordSpec& record) {
  if (k < 1) throw ContractError("run needs at least one environment");
  config.validate();
  std::vector<std::unique_ptr<Policy>> policies;
  for (int i = 0; i < k; ++i) policies.push_back(factory(i, base_seed + static_cast<std::uint64_t>(i)));
  std::vector<Rollout> out(static_cast<std::size_t>(k));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(k));

#pragma omp parallel for schedule(static)
  for (int i = 0; i < k; ++i) {
    try {
      out[i] = rollout(config, base_seed + static_cast<std::uint64_t>(i), *policies[i], record);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

EvalReport evaluate(const EnvConfig& config, const PolicyFactory& factory, int episodes, std::uint64_t seed,
                    int parallel) {
  if (episodes < 1) throw ContractError("evaluation needs at least one episode");
  if (parallel < 1) parallel = 1;
  EvalReport rep;
  for (int done = 0; done < episodes;) {
    const int k = std::min(parallel, episodes - done);
    for (auto& r : run_parallel(config, k, seed + static_cast<std::uint64_t>(done), factory)) {
      rep.episodes.push_back(r.metrics);
    }
    done += k;
  }
  rep.mean = aggregate(rep.episodes);
  return rep;
}

// ---- run configuration

void RunConfig::validate() const {
  env.validate();
  if (trainer.has_value() == controller.has_value()) {
    throw ConfigError("run config needs exactly one of \"trainer\" or \"controller\"");
  }
  if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
  if (parallel_envs < 1) throw ConfigError("parallel_envs must be >= 1");
  if (controller && env.action_mode == ActionMode::free_select &&
      (controller->kind == ControllerKind::fixed_time || controller->kind == ControllerKind::sotl)) {
    throw ConfigError(to_string(controller->kind) + " controller requires action_mode round_robin");
  }
  if (trainer && trainer->local_reward && trainer->algorithm == Algorithm::maa2c) {
    throw ConfigError("local_reward is not supported with maa2c");
  }
}

RunConfig RunConfig::from_json(const nlohmann::json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
  if (!doc.contains("env")) throw ConfigError("run config needs \"env\"");
  RunConfig c;
  c.source = doc;
  c.env = env_config_from_json(doc["env"], base_dir);
  c.env_sets_mode = doc["env"].contains("action_mode");
  try {
    if (doc.contains("trainer")) c.trainer = TrainerConfig::from_json(doc["trainer"]);
    if (doc.contains("controller")) c.controller = ControllerParams::from_json(doc["controller"]);
    c.total_steps = doc.value("total_steps", c.total_steps);
    c.eval_interval = doc.value("eval_interval", c.eval_interval);
    c.eval_episodes = doc.value("eval_episodes", c.eval_episodes);
    c.parallel_envs = doc.value("parallel_envs", c.parallel_envs);
    c.seed = doc.value("seed", c.seed);
    if (doc.contains("output_dir")) c.output_dir = doc["output_dir"].get<std::string>();
    c.log_steps = doc.value("log_steps", c.log_steps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  if (c.controller && !c.env_sets_mode) c.env.action_mode = natural_mode(c.controller->kind);
  if (c.trainer) c.env.local_reward = c.trainer->local_reward;
  c.validate();
  return c;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j{{"env", env_config_to_json(env)},
                   {"total_steps", total_steps},
                   {"eval_interval", eval_interval},
                   {"eval_episodes", eval_episodes},
                   {"parallel_envs", parallel_envs},
                   {"seed", seed},
                   {"output_dir", output_dir.string()},
                   {"log_steps", log_steps}};
  if (trainer) j["trainer"] = trainer->to_json();
  if (controller) j["controller"] = controller->to_json();
  return j;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("run config " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(doc, path.parent_path());
}

// ---- output

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{"phase",     "episode",   "env_steps", "epsilon",     "return",
                                             "queue",     "delay",     "speed",     "occupancy",   "wait_time",
                                             "travel_time", "completed", "loss"};
  return cols;
}

const std::vector<std::string>& eval_columns() {
  static const std::vector<std::string> cols{"episode", "eval_episode", "seed",      "return",      "queue",
                                             "delay",   "speed",        "occupancy", "wait_time", "travel_time",
                                             "completed"};
  return cols;
}

const std::vector<std::string>& step_columns() {
  static const std::vector<std::string> cols{"episode", "step",     "queue",     "delay",
                                             "speed",   "occupancy", "completed", "dropped"};
  return cols;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

namespace {

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& columns) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot write " + path.string());
    row(columns);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::vector<std::string> metric_cells(const EpisodeMetrics& m) {
  return {format_number(m.episode_return), format_number(m.queue),     format_number(m.delay),
          format_number(m.speed),          format_number(m.occupancy), format_number(m.wait_time),
          format_number(m.travel_time),    std::to_string(m.completed)};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

void prepare_output(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "checkpoints", ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

nlohmann::json run_document(const RunConfig& c, const std::string& command) {
  return {{"command", command},   {"version", kVersion},     {"seed", c.seed},
          {"config", c.to_json()}, {"source", c.source.is_null() ? nlohmann::json::object() : c.source}};
}

class Recorder {
 public:
  Recorder(const RunConfig& c, bool training) : eval_(c.output_dir / "eval.csv", eval_columns()) {
    if (training) metrics_.emplace(c.output_dir / "metrics.csv", metrics_columns());
    if (training && c.log_steps) steps_.emplace(c.output_dir / "steps.csv", step_columns());
  }

  void train_row(std::int64_t episode, std::int64_t env_steps, double eps, const Rollout& r,
                 std::optional<double> loss) {
    std::vector<std::string> cells{"train", std::to_string(episode), std::to_string(env_steps), format_number(eps)};
    for (auto& s : metric_cells(r.metrics)) cells.push_back(std::move(s));
    cells.push_back(loss ? format_number(*loss) : "");
    metrics_->row(cells);
    if (steps_) {
      for (std::size_t t = 0; t < r.step_infos.size(); ++t) {
        const StepInfo& i = r.step_infos[t];
        steps_->row({std::to_string(episode), std::to_string(t + 1), format_number(i.queue_sum),
                     format_number(i.mean_delay), format_number(i.mean_speed), format_number(i.mean_occupancy),
                     std::to_string(i.completed), std::to_string(i.dropped)});
      }
    }
  }

  void eval_rows(std::int64_t episode, std::int64_t env_steps, const EvalReport& rep, std::uint64_t seed) {
    std::vector<std::string> cells{"eval", std::to_string(episode), std::to_string(env_steps), format_number(0.0)};
    for (auto& s : metric_cells(rep.mean)) cells.push_back(std::move(s));
    cells.push_back("");
    if (metrics_) metrics_->row(cells);
    for (std::size_t k = 0; k < rep.episodes.size(); ++k) {
      std::vector<std::string> ec{std::to_string(episode), std::to_string(k), std::to_string(seed + k)};
      for (auto& s : metric_cells(rep.episodes[k])) ec.push_back(std::move(s));
      eval_.row(ec);
    }
  }

 private:
  CsvWriter eval_;
  std::optional<CsvWriter> metrics_;
  std::optional<CsvWriter> steps_;
};

std::string describe(const EvalReport& rep) {
  std::ostringstream s;
  s << "queue " << format_number(rep.mean.queue) << " delay " << format_number(rep.mean.delay) << " travel "
    << format_number(rep.mean.travel_time);
  return s.str();
}

// Owns whichever trainer the config names and exposes the loop's needs uniformly.
struct TrainerBox {
  InputLayout layout;
  TrainerConfig config;
  std::unique_ptr<ValueTrainer> value;
  std::unique_ptr<ActorCriticTrainer> ac;

  TrainerBox(const EnvConfig& env, const TrainerConfig& tc, std::uint64_t seed) : config(tc) {
    Environment probe(env);
    probe.reset(0);
    layout = InputLayout::from_spec(probe.spec());
    if (is_value_based(tc.algorithm)) {
      value = std::make_unique<ValueTrainer>(layout, tc, seed);
    } else {
      ac = std::make_unique<ActorCriticTrainer>(layout, tc, seed);
    }
  }

  PolicyFactory explore(double eps) const { return value ? value_policy(*value, eps) : actor_policy(*ac, false); }
  PolicyFactory greedy() const { return value ? value_policy(*value, 0.0) : actor_policy(*ac, true); }

  nlohmann::json to_json() const { return value ? value->to_json() : ac->to_json(); }
  void load_json(const nlohmann::json& j) {
    if (value) {
      value->load_json(j);
    } else {
      ac->load_json(j);
    }
  }
};

fs::path write_checkpoint(const RunConfig& c, const TrainerBox& box, std::int64_t episode, std::int64_t env_steps) {
  char name[64];
  std::snprintf(name, sizeof name, "episode_%08lld.json", static_cast<long long>(episode));
  const fs::path path = c.output_dir / "checkpoints" / name;
  const nlohmann::json doc{{"version", kVersion},
                           {"algorithm", to_string(box.config.algorithm)},
                           {"episode", episode},
                           {"env_steps", env_steps},
                           {"seed", c.seed},
                           {"trainer", box.to_json()}};
  write_json(path, doc);
  write_json(c.output_dir / "checkpoints" / "final.json", doc);
  return path;
}

}  // namespace

RunSummary train(const RunConfig& config, const ProgressFn& progress) {
  config.validate();
  if (!config.trainer) throw ConfigError("train needs a \"trainer\" section");
  const auto t0 = std::chrono::steady_clock::now();
  prepare_output(config.output_dir);
  nlohmann::json run = run_document(config, "train");
  write_json(config.output_dir / "run.json", run);
  Recorder rec(config, true);

  const TrainerConfig& tc = *config.trainer;
  TrainerBox box(config.env, tc, config.seed);
  EpisodeBuffer buffer(static_cast<std::size_t>(tc.buffer_episodes));
  Rng sample_rng(mix_seed(config.seed, 1));

  RecordSpec spec;
  spec.layout = &box.layout;
  spec.with_state = needs_state(tc.algorithm);
  spec.local_reward = tc.local_reward;
  spec.step_infos = config.log_steps;

  RunSummary sum;
  sum.last_checkpoint = write_checkpoint(config, box, 0, 0);
  const std::int64_t total = config.total_episodes();
  std::int64_t last_eval = 0;

  auto run_eval = [&] {
    EvalReport rep =
        evaluate(config.env, box.greedy(), config.eval_episodes, config.eval_seed(), config.parallel_envs);
    rec.eval_rows(sum.episodes, sum.env_steps, rep, config.eval_seed());
    sum.last_checkpoint = write_checkpoint(config, box, sum.episodes, sum.env_steps);
    if (progress) progress("episode " + std::to_string(sum.episodes) + " eval " + describe(rep));
    sum.last_eval = std::move(rep);
    last_eval = sum.episodes;
  };

  while (sum.episodes < total) {
    const int k = static_cast<int>(std::min<std::int64_t>(config.parallel_envs, total - sum.episodes));
    const double eps =
        box.value ? epsilon_schedule(sum.env_steps, tc.epsilon_start, tc.epsilon_finish, tc.epsilon_anneal_steps) : 0.0;
    if (box.ac) spec.policy_version = box.ac->policy_version();
    // training env seeds run consecutively from the run seed: episode e uses seed + e
    std::vector<Rollout> batch =
        run_parallel(config.env, k, config.seed + static_cast<std::uint64_t>(sum.episodes), box.explore(eps), spec);

    std::optional<ActorCriticTrainer::Stats> ac_stats;
    if (box.ac) {
      std::vector<Episode> eps_batch;
      for (auto& r : batch) eps_batch.push_back(*r.episode);
      ac_stats = box.ac->a2c_update(eps_batch);
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Rollout& r = batch[i];
      sum.episodes += 1;
      sum.env_steps += r.metrics.steps;
      std::optional<double> loss;
      if (box.value) {
        buffer.add(std::move(*r.episode));
        if (buffer.size() >= static_cast<std::size_t>(tc.batch_episodes)) {
          loss = box.value->train(buffer, sample_rng);
          box.value->target_sync(sum.episodes);
        }
      } else if (i + 1 == batch.size()) {
        loss = ac_stats->policy_loss + ac_stats->value_loss;
      }
      rec.train_row(sum.episodes, sum.env_steps, eps, r, loss);
    }
    if (sum.episodes / config.eval_interval > last_eval / config.eval_interval) run_eval();
  }
  if (sum.episodes > last_eval) run_eval();

  run["episodes"] = sum.episodes;
  run["env_steps"] = sum.env_steps;
  run["final_checkpoint"] = sum.last_checkpoint.string();
  run["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(config.output_dir / "run.json", run);
  return sum;
}

RunSummary run_evaluation(const RunConfig& config, const std::optional<fs::path>& checkpoint,
                          const ProgressFn& progress) {
  config.validate();
  prepare_output(config.output_dir);
  nlohmann::json run = run_document(config, "eval");

  PolicyFactory factory;
  std::unique_ptr<TrainerBox> box;
  if (config.controller) {
    factory = controller_policy(*config.controller);
    run["policy"] = config.controller->to_json();
  } else {
    if (!checkpoint) throw ConfigError("evaluating a trainer needs a checkpoint");
    std::ifstream in(*checkpoint);
    if (!in) throw IoError("cannot open checkpoint " + checkpoint->string());
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("checkpoint " + checkpoint->string() + " is not valid JSON: " + e.what());
    }
    if (!doc.contains("trainer")) throw ParseError("checkpoint has no \"trainer\" section");
    TrainerConfig tc = doc["trainer"].contains("config") ? TrainerConfig::from_json(doc["trainer"]["config"])
                                                         : *config.trainer;
    if (tc.algorithm != config.trainer->algorithm) {
      throw ConfigError("checkpoint algorithm " + to_string(tc.algorithm) + " does not match config " +
                        to_string(config.trainer->algorithm));
    }
    EnvConfig env = config.env;
    env.local_reward = tc.local_reward;
    box = std::make_unique<TrainerBox>(env, tc, config.seed);
    box->load_json(doc["trainer"]);
    factory = box->greedy();
    run["checkpoint"] = checkpoint->string();
  }

  Recorder rec(config, false);
  RunSummary sum;
  EvalReport rep = evaluate(config.env, factory, config.eval_episodes, config.eval_seed(), config.parallel_envs);
  rec.eval_rows(0, 0, rep, config.eval_seed());
  if (progress) progress("eval " + describe(rep));
  const auto& m = rep.mean;
  run["mean"] = {{"return", m.episode_return}, {"queue", m.queue},         {"delay", m.delay},
                 {"speed", m.speed},           {"occupancy", m.occupancy}, {"wait_time", m.wait_time},
                 {"travel_time", m.travel_time}, {"completed", m.completed}};
  write_json(config.output_dir / "eval.json", run);
  sum.last_eval = std::move(rep);
  return sum;
}

}  // namespace tsclab
