#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsclab/env.hpp"
#include "tsclab/rng.hpp"

namespace tsclab {

enum class ControllerKind { fixed_time, greedy, max_pressure, sotl, random };

std::string to_string(ControllerKind kind);
ControllerKind controller_kind_from_string(std::string_view name);

struct ControllerParams {
  ControllerKind kind = ControllerKind::fixed_time;
  double fixed_green = 25.0;        // seconds per phase, yellow included
  double sotl_theta = 30.0;         // vehicle-seconds
  double sotl_min_green = 10.0;     // seconds
  double pressure_min_green = 5.0;  // seconds; one action interval
  std::uint64_t seed = 0;           // random controller only

  /// Reads {"kind": ..., parameters...}; unknown kinds or negative values throw ConfigError.
  static ControllerParams from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

/// Action space a controller was written for.
ActionMode natural_mode(ControllerKind kind);

struct SignalControl {
  // Seconds since the last switch command, so yellow is included. Reset puts the
  // initial green on the same footing as one that just came out of yellow.
  double green_elapsed = 0.0;
  double sotl_counter = 0.0;
  int cursor = 0;  // green the controller believes is active
};

struct ControllerState {
  std::vector<SignalControl> signals;
};

/// Full-lane halted counts indexed like RoadNetwork::lanes().
std::vector<int> lane_queues(const SimState& state, const RoadNetwork& net);

/// Per green phase: sum of queues on the distinct lanes feeding it.
std::vector<double> phase_queue_sums(const RoadNetwork& net, std::span<const int> queues, std::size_t signal);

/// Per green phase: feeding-lane queues minus queues on the distinct receiving lanes.
std::vector<double> phase_pressures(const RoadNetwork& net, std::span<const int> queues, std::size_t signal);

/// Index of the maximum, lowest index on ties.
int argmax_lowest(std::span<const double> values);

bool fixed_time(const SignalControl& ctl, double fixed_green);
int greedy(std::span<const double> phase_queues);
int max_pressure(const SignalControl& ctl, std::span<const double> pressures, double yellow, double min_green);
/// Adds red-approach demand for one interval and decides; clears the counter on advance.
bool sotl(SignalControl& ctl, double red_queue, double interval, double yellow, double theta, double min_green);

/// Maps a target green to an action: the target itself in free_select, keep/advance in round_robin.
int encode_action(ActionMode mode, int target, int current, int num_phases);

class Controller {
 public:
  explicit Controller(ControllerParams params) : params_(params), rng_(params.seed) {}

  const ControllerParams& params() const { return params_; }
  std::string name() const { return to_string(params_.kind); }

  void reset(const Environment& env);
  /// One joint action in env's action mode; updates the per-signal timers.
  std::vector<int> act(const Environment& env);

  const ControllerState& state() const { return state_; }

 private:
  ControllerParams params_;
  ControllerState state_;
  Rng rng_;
  std::uint64_t episodes_ = 0;
};

}  // namespace tsclab
