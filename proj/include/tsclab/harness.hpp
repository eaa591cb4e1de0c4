#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsclab/baselines.hpp"
#include "tsclab/env.hpp"
#include "tsclab/marl.hpp"

namespace tsclab {

inline constexpr int kEpisodesPerHour = 10;  // 10 x 72 steps x 5 s

/// Network-level metrics of one episode. Queue, delay, speed and occupancy are
/// averaged over decision steps; wait and travel time are per vehicle.
struct EpisodeMetrics {
  double queue = 0.0;        // vehicles
  double delay = 0.0;        // [0,1]
  double speed = 1.0;        // [0,1]
  double occupancy = 0.0;    // [0,1]
  double wait_time = 0.0;    // seconds, mean over every vehicle that entered
  double travel_time = 0.0;  // seconds, mean over completed trips; 0 when none
  double episode_return = 0.0;
  std::int64_t completed = 0;
  int steps = 0;

  bool operator==(const EpisodeMetrics&) const = default;
};

/// Accumulates per-step infos into EpisodeMetrics.
class MetricsAccumulator {
 public:
  void add_step(const StepInfo& info, double reward);
  EpisodeMetrics finish(const SimState& final_state) const;

 private:
  EpisodeMetrics sum_{.speed = 0.0};
};

struct EvalReport {
  std::vector<EpisodeMetrics> episodes;
  EpisodeMetrics mean;
};

/// Mean of every field; `steps` and `completed` are averaged and truncated.
EpisodeMetrics aggregate(std::span<const EpisodeMetrics> episodes);

/// Per-environment decision maker. One instance per environment, so it may keep state.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void begin_episode(const Environment& env) = 0;
  virtual std::vector<int> act(const Environment& env, std::span<const Observation> obs) = 0;
};

/// Makes the policy for environment `index` of a rollout, given its env seed.
using PolicyFactory = std::function<std::unique_ptr<Policy>(int index, std::uint64_t env_seed)>;

PolicyFactory controller_policy(ControllerParams params);
/// Epsilon-greedy over the trainer's Q-values; the trainer must outlive the rollout.
PolicyFactory value_policy(const ValueTrainer& trainer, double epsilon);
/// Samples from the actor, or its argmax when greedy.
PolicyFactory actor_policy(const ActorCriticTrainer& trainer, bool greedy);

struct RecordSpec {
  const InputLayout* layout = nullptr;  // null: no episode recorded
  bool with_state = false;
  bool local_reward = false;
  std::uint64_t policy_version = 0;
  bool step_infos = false;
};

struct Rollout {
  std::uint64_t seed = 0;
  EpisodeMetrics metrics;
  std::optional<Episode> episode;
  std::vector<StepInfo> step_infos;
};

/// One full episode of `config` with env seed `seed`.
Rollout rollout(const EnvConfig& config, std::uint64_t seed, Policy& policy, const RecordSpec& record = {});

/// k independent episodes with env seeds base_seed + i, run concurrently and
/// returned in index order.
std::vector<Rollout> run_parallel(const EnvConfig& config, int k, std::uint64_t base_seed,
                                  const PolicyFactory& factory, const RecordSpec& record = {});
/// Same contract, one environment after another.
std::vector<Rollout> run_serial(const EnvConfig& config, int k, std::uint64_t base_seed,
                                const PolicyFactory& factory, const RecordSpec& record = {});

/// `episodes` deterministic episodes with env seeds seed + i.
EvalReport evaluate(const EnvConfig& config, const PolicyFactory& factory, int episodes, std::uint64_t seed,
                    int parallel = 1);

struct RunConfig {
  EnvConfig env;
  bool env_sets_mode = false;  // action_mode given explicitly
  std::optional<TrainerConfig> trainer;
  std::optional<ControllerParams> controller;
  std::int64_t total_steps = 4320000;
  int eval_interval = 200;  // global episodes
  int eval_episodes = 10;
  int parallel_envs = 4;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  bool log_steps = false;
  nlohmann::json source;  // document the config was read from

  /// Checks ranges and the controller / action mode pairing; throws ConfigError.
  void validate() const;
  std::int64_t total_episodes() const { return total_steps / env.episode_limit; }
  /// Env seeds of evaluation episodes start here, disjoint from training seeds.
  std::uint64_t eval_seed() const { return seed + 1000000000ULL; }

  static RunConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

/// Column sets; fixed and covered by a golden test.
const std::vector<std::string>& metrics_columns();
const std::vector<std::string>& eval_columns();
const std::vector<std::string>& step_columns();

/// Fixed-precision decimal rendering used for every CSV value.
std::string format_number(double v);

struct RunSummary {
  std::int64_t episodes = 0;
  std::int64_t env_steps = 0;
  std::optional<EvalReport> last_eval;
  std::filesystem::path last_checkpoint;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains the configured algorithm, writing metrics.csv, eval.csv, run.json and
/// checkpoints/ under output_dir.
RunSummary train(const RunConfig& config, const ProgressFn& progress = {});

/// Evaluates the configured controller, or a trainer restored from `checkpoint`,
/// writing eval.csv and eval.json under output_dir.
RunSummary run_evaluation(const RunConfig& config, const std::optional<std::filesystem::path>& checkpoint = {},
                          const ProgressFn& progress = {});

}  // namespace tsclab
