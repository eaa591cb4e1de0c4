#pragma once

#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsclab/netgraph.hpp"
#include "tsclab/rng.hpp"

namespace tsclab {

/// Vehicles per second a green movement can discharge (2 s headway).
inline constexpr double kDefaultSaturationFlow = 0.5;
inline constexpr int kDefaultYellowDuration = 5;

struct FlowSpec {
  std::string origin;       // entry lane id
  std::string destination;  // exit lane id
  double rate = 0.0;        // vehicles / hour
  double start = 0.0;       // seconds, inclusive
  double end = 86400.0;     // seconds, exclusive

  bool operator==(const FlowSpec&) const = default;
};

enum class VehicleMode : std::uint8_t { running, queued };

struct Vehicle {
  std::uint64_t id = 0;
  std::uint32_t route = 0;  // index into SimState::routes
  std::uint32_t leg = 0;    // index into the route
  double position = 0.0;    // meters from lane start
  VehicleMode mode = VehicleMode::running;
  std::int64_t spawn_tick = 0;
  std::int64_t wait_ticks = 0;
  std::optional<std::int64_t> queue_join_tick;

  bool operator==(const Vehicle&) const = default;
};

/// Vehicles on one lane as slot indices into SimState::vehicles.
struct LaneState {
  std::deque<std::uint32_t> running;  // front = furthest along
  std::deque<std::uint32_t> queued;   // front = at the stop line

  std::size_t occupancy() const { return running.size() + queued.size(); }
  bool operator==(const LaneState&) const = default;
};

struct SignalState {
  int active_green = 0;  // green index; while yellow, the green being cleared
  bool yellow = false;
  int phase_elapsed = 0;
  std::optional<int> pending_green;

  PhaseKind kind() const { return yellow ? PhaseKind::yellow : PhaseKind::green; }
  bool operator==(const SignalState&) const = default;
};

struct SimState {
  std::int64_t clock = 0;
  std::vector<LaneState> lanes;
  std::vector<SignalState> signals;
  std::vector<double> discharge_credit;  // per movement
  std::vector<std::vector<std::size_t>> routes;  // per flow, lane indices

  std::vector<Vehicle> vehicles;  // slot storage
  std::vector<std::uint8_t> slot_live;
  std::vector<std::uint32_t> free_slots;
  std::uint64_t next_vehicle_id = 0;

  std::int64_t spawned = 0;  // entered the network
  std::int64_t dropped = 0;  // arrivals refused at a full origin lane
  std::int64_t completed = 0;
  std::vector<std::int64_t> completed_travel_times;
  std::int64_t completed_wait_ticks = 0;

  std::size_t active_vehicles() const { return vehicles.size() - free_slots.size(); }
  bool operator==(const SimState&) const = default;
};

struct SimParams {
  double saturation_flow = kDefaultSaturationFlow;
};

struct LaneMetrics {
  int n = 0;       // vehicles within view
  double s = 1.0;  // mean normalized speed; 1.0 when nothing is visible
  int q = 0;       // queued vehicles within view
};

/// Fresh state at clock 0 with every signal showing green phase 0.
/// Resolves and caches one route per flow; throws ConfigError for invalid flows.
SimState make_initial_state(const RoadNetwork& net, const std::vector<FlowSpec>& flows);

/// Poisson arrivals for the current second on every active flow.
void spawn(const std::vector<FlowSpec>& flows, SimState& state, const RoadNetwork& net, Rng& rng);

/// Advances the state by one second: free-flow motion, green discharge, waiting, clock.
void tick(SimState& state, const RoadNetwork& net, const SimParams& params = {});

/// Requests a new green; switching always goes through the current green's yellow.
void set_phase(SimState& state, const RoadNetwork& net, std::size_t signal, int target_green);

/// Counts phase time for one tick and promotes pending greens once yellow has run its course.
void advance_signals(SimState& state, int yellow_duration);

LaneMetrics lane_metrics(const SimState& state, const RoadNetwork& net, std::size_t lane,
                         double visibility);

inline LaneMetrics full_lane_metrics(const SimState& state, const RoadNetwork& net, std::size_t lane) {
  return lane_metrics(state, net, lane, std::numeric_limits<double>::infinity());
}

/// Convenience bundle of network, demand, state and RNG.
class Simulator {
 public:
  Simulator(std::shared_ptr<const RoadNetwork> net, std::vector<FlowSpec> flows, SimParams params,
            std::uint64_t seed);

  void spawn() { tsclab::spawn(flows_, state_, *net_, rng_); }
  void tick() { tsclab::tick(state_, *net_, params_); }
  void set_phase(std::size_t signal, int green) { tsclab::set_phase(state_, *net_, signal, green); }
  void advance_signals(int yellow_duration) { tsclab::advance_signals(state_, yellow_duration); }
  LaneMetrics lane_metrics(std::size_t lane, double visibility) const {
    return tsclab::lane_metrics(state_, *net_, lane, visibility);
  }

  const SimState& state() const { return state_; }
  SimState& mutable_state() { return state_; }
  const RoadNetwork& network() const { return *net_; }
  const std::vector<FlowSpec>& flows() const { return flows_; }

 private:
  std::shared_ptr<const RoadNetwork> net_;
  std::vector<FlowSpec> flows_;
  SimParams params_;
  Rng rng_;
  SimState state_;
};

enum class TripPattern { through, all_exits };

struct TripOptions {
  double rate = 300.0;  // vehicles / hour per entry lane
  /// Entry lanes whose id starts with a key use that rate instead (longest prefix wins).
  std::map<std::string, double> rate_overrides;
  TripPattern pattern = TripPattern::through;
  double start = 0.0;
  double end = 86400.0;
};

/// Synthetic demand: one flow per entry lane following through movements,
/// or the entry's rate split evenly across every reachable exit.
std::vector<FlowSpec> generate_trips(const RoadNetwork& net, const TripOptions& options);

nlohmann::json serialize_flows(const std::vector<FlowSpec>& flows);
std::vector<FlowSpec> parse_flows(const nlohmann::json& document);
std::vector<FlowSpec> load_flows_file(const std::string& path);

}  // namespace tsclab
