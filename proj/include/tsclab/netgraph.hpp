#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace tsclab {

/// Jam spacing per queued vehicle; fixes lane capacity as floor(length / spacing).
inline constexpr double kVehicleSpacing = 7.5;
inline constexpr double kDefaultVisibility = 50.0;

enum class Turn { through, left, right };
enum class PhaseKind { green, yellow };
enum class PhaseScheme { two_phase, four_phase };

struct Lane {
  std::string id;
  double length = 0.0;       // meters
  double speed_limit = 0.0;  // m/s
  int capacity = 0;          // vehicles
  std::optional<std::string> upstream_intersection;
  std::optional<std::string> downstream_intersection;

  bool operator==(const Lane&) const = default;
};

struct Movement {
  std::string id;
  std::string from_lane;
  std::string to_lane;
  Turn turn = Turn::through;

  bool operator==(const Movement&) const = default;
};

struct Phase {
  int index = 0;
  std::vector<std::string> permitted;  // movement ids, sorted
  PhaseKind kind = PhaseKind::green;

  bool operator==(const Phase&) const = default;
};

struct TrafficSignal {
  std::string id;
  std::vector<std::string> incoming_lanes;  // sorted by id
  std::vector<std::string> outgoing_lanes;  // sorted by id
  std::vector<Phase> green_phases;          // dense indices 0..P-1
  double visibility = kDefaultVisibility;

  int num_phases() const { return static_cast<int>(green_phases.size()); }

  /// The yellow phase that must follow green phase `green_index`.
  Phase yellow_of(int green_index) const {
    Phase p = green_phases.at(static_cast<std::size_t>(green_index));
    p.kind = PhaseKind::yellow;
    return p;
  }

  bool operator==(const TrafficSignal&) const = default;
};

/// Immutable, validated lane graph. Lanes, movements and signals are stored
/// sorted by id; every index-based accessor refers to that order.
class RoadNetwork {
 public:
  /// Index-resolved view of a signal, precomputed for the simulator hot loop.
  struct SignalTopology {
    std::vector<std::size_t> incoming;                    // lane indices
    std::vector<std::vector<std::size_t>> phase_moves;    // per green phase: movement indices
    std::vector<std::vector<std::size_t>> phase_lanes;    // per green phase: distinct feeding lanes
  };

  RoadNetwork() = default;
  /// Sorts and validates; throws ParseError naming the offending entity.
  RoadNetwork(std::vector<Lane> lanes, std::vector<Movement> movements,
              std::vector<TrafficSignal> signals);

  const std::vector<Lane>& lanes() const { return lanes_; }
  const std::vector<Movement>& movements() const { return movements_; }
  const std::vector<TrafficSignal>& signals() const { return signals_; }
  std::size_t num_lanes() const { return lanes_.size(); }
  std::size_t num_signals() const { return signals_.size(); }

  std::optional<std::size_t> find_lane(std::string_view id) const;
  std::optional<std::size_t> find_movement(std::string_view id) const;
  std::optional<std::size_t> find_signal(std::string_view id) const;
  std::size_t lane_index(std::string_view id) const;  // throws ParseError

  const std::vector<std::size_t>& entry_lanes() const { return entry_lanes_; }
  const std::vector<std::size_t>& exit_lanes() const { return exit_lanes_; }
  bool is_entry(std::size_t lane) const;
  bool is_exit(std::size_t lane) const;

  /// Movement indices leaving `lane`, ordered by destination lane id.
  const std::vector<std::size_t>& movements_from(std::size_t lane) const { return out_moves_[lane]; }
  /// Movement index joining two lanes, if declared.
  std::optional<std::size_t> movement_between(std::size_t from, std::size_t to) const;
  std::size_t movement_from_lane(std::size_t m) const { return move_from_[m]; }
  std::size_t movement_to_lane(std::size_t m) const { return move_to_[m]; }

  /// Signal controlling the stop line of `lane`, or nullopt for exit lanes.
  std::optional<std::size_t> downstream_signal(std::size_t lane) const;
  const SignalTopology& topology(std::size_t signal) const { return topo_[signal]; }

  bool operator==(const RoadNetwork& other) const {
    return lanes_ == other.lanes_ && movements_ == other.movements_ && signals_ == other.signals_;
  }

 private:
  void index_and_validate();

  std::vector<Lane> lanes_;
  std::vector<Movement> movements_;
  std::vector<TrafficSignal> signals_;

  std::unordered_map<std::string, std::size_t> lane_ix_;
  std::unordered_map<std::string, std::size_t> move_ix_;
  std::unordered_map<std::string, std::size_t> signal_ix_;
  std::vector<std::size_t> entry_lanes_;
  std::vector<std::size_t> exit_lanes_;
  std::vector<std::vector<std::size_t>> out_moves_;
  std::vector<std::size_t> move_from_;
  std::vector<std::size_t> move_to_;
  std::vector<std::optional<std::size_t>> lane_signal_;
  std::vector<SignalTopology> topo_;
};

struct GridOptions {
  int rows = 2;
  int cols = 2;
  double edge_length = 200.0;
  double speed_limit = 13.89;
  PhaseScheme scheme = PhaseScheme::two_phase;
};

/// rows x cols lattice of 4-way signalized intersections, one lane per
/// direction per edge. Throws ConfigError on invalid dimensions.
RoadNetwork generate_grid(const GridOptions& options);

nlohmann::json serialize_network(const RoadNetwork& net);
RoadNetwork parse_network(const nlohmann::json& document);
RoadNetwork load_network_file(const std::string& path);

std::string to_string(Turn turn);
std::string to_string(PhaseScheme scheme);
PhaseScheme phase_scheme_from_string(std::string_view name);

using AdjacencyMatrix = std::vector<std::vector<int>>;

/// Symmetric 0/1 signal adjacency: (i,j) = 1 iff a lane joins the two intersections.
AdjacencyMatrix adjacency_matrix(const RoadNetwork& net);

/// Row degree / (n - 1). Throws std::domain_error for fewer than two signals.
std::vector<double> degree_centrality(const RoadNetwork& net);

/// Minimal-hop, movement-consistent lane sequence from an entry lane to an
/// exit lane. Among equal-length routes the one whose lane ids are
/// lexicographically smallest at each position wins.
std::vector<std::size_t> shortest_route(const RoadNetwork& net, std::size_t origin,
                                        std::size_t destination);
std::vector<std::string> shortest_route(const RoadNetwork& net, std::string_view origin,
                                        std::string_view destination);

}  // namespace tsclab
