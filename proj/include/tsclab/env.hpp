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

#include "tsclab/mesosim.hpp"
#include "tsclab/netgraph.hpp"

namespace tsclab {

enum class ActionMode { free_select, round_robin };

std::string to_string(ActionMode mode);
ActionMode action_mode_from_string(std::string_view name);

struct EnvConfig {
  std::shared_ptr<const RoadNetwork> network;
  std::vector<FlowSpec> flows;
  ActionMode action_mode = ActionMode::round_robin;
  int episode_limit = 72;   // decision steps
  int action_interval = 5;  // seconds per decision step
  int yellow_duration = 5;  // seconds
  /// Observation range in meters; when unset each signal's own visibility is used.
  std::optional<double> visibility;
  std::uint64_t seed = 0;
  /// Also report per-agent rewards from each signal's own incoming lanes.
  bool local_reward = false;
  double saturation_flow = kDefaultSaturationFlow;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

/// Builds a config from JSON. "network" may be a file path (relative to
/// base_dir), an inline network document, or {"grid": {...}}; "flows" may be
/// a path, an inline list, or {"generate": {...}}.
EnvConfig env_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
nlohmann::json env_config_to_json(const EnvConfig& config);

struct Observation {
  int agent = 0;
  std::vector<double> values;

  bool operator==(const Observation&) const = default;
};

struct GlobalState {
  std::vector<double> values;

  bool operator==(const GlobalState&) const = default;
};

struct StepInfo {
  double queue_sum = 0.0;
  double mean_delay = 0.0;
  double mean_speed = 1.0;
  double mean_occupancy = 0.0;
  std::int64_t completed = 0;
  std::int64_t dropped = 0;

  nlohmann::json to_json() const;
  bool operator==(const StepInfo&) const = default;
};

struct StepResult {
  std::vector<Observation> observations;
  GlobalState state;
  double reward = 0.0;
  std::vector<double> local_rewards;  // filled only when EnvConfig::local_reward
  bool terminated = false;
  StepInfo info;

  bool operator==(const StepResult&) const = default;
};

struct ResetResult {
  std::vector<Observation> observations;
  GlobalState state;
};

struct ActionSpace {
  int size = 0;
  ActionMode mode = ActionMode::round_robin;
};

struct EnvSpec {
  int n_agents = 0;
  std::vector<int> obs_sizes;
  std::vector<int> action_sizes;
  int state_size = 0;
  int episode_limit = 0;

  nlohmann::json to_json() const;
};

ActionSpace action_space(const TrafficSignal& signal, ActionMode mode);

/// Green phase an action selects, given the signal's current green.
int resolve_action(ActionMode mode, int action, int current_green, int num_phases);

/// Negated network-wide queue count (no visibility cap).
double compute_reward(const SimState& state, const RoadNetwork& net);

/// All lanes' (n/cap, s, q/cap) in id order, then every signal's phase one-hot.
GlobalState global_state(const SimState& state, const RoadNetwork& net);

/// One agent's lanes within `visibility` plus its phase one-hot.
Observation observe(const SimState& state, const RoadNetwork& net, std::size_t signal, double visibility);

StepInfo gather_info(const SimState& state, const RoadNetwork& net);

/// Multi-agent environment: one agent per traffic signal, shared global reward.
class Environment {
 public:
  explicit Environment(EnvConfig config);

  ResetResult reset();
  ResetResult reset(std::uint64_t seed);
  StepResult step(std::span<const int> joint_action);

  int n_agents() const { return static_cast<int>(net_->num_signals()); }
  ActionSpace action_space(int agent) const;
  EnvSpec spec() const;

  std::vector<Observation> observations() const;
  GlobalState global_state() const { return tsclab::global_state(sim_->state(), *net_); }
  int current_green(int agent) const;

  bool is_reset() const { return sim_ != nullptr; }
  int steps_taken() const { return steps_; }
  const EnvConfig& config() const { return config_; }
  const RoadNetwork& network() const { return *net_; }
  const SimState& sim_state() const;

  /// Called after every simulated second inside step(), before yellow timers advance,
  /// so the signal states seen are the ones that governed that second.
  using TickObserver = std::function<void(const SimState&)>;
  void set_tick_observer(TickObserver observer) { observer_ = std::move(observer); }

 private:
  double visibility_for(std::size_t signal) const;

  EnvConfig config_;
  std::shared_ptr<const RoadNetwork> net_;
  std::unique_ptr<Simulator> sim_;
  int steps_ = 0;
  TickObserver observer_;
};

}  // namespace tsclab
