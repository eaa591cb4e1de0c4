#pragma once

#include <memory>
#include <string>

#include <json.hpp>

#include "tsclab/env.hpp"
#include "tsclab/netgraph.hpp"

namespace fixtures {

inline nlohmann::json lane(const std::string& id, const char* up, const char* down, double length = 200.0) {
  nlohmann::json j{{"id", id}, {"length", length}, {"speed_limit", 13.89}};
  j["upstream_intersection"] = up ? nlohmann::json(up) : nlohmann::json();
  j["downstream_intersection"] = down ? nlohmann::json(down) : nlohmann::json();
  return j;
}

inline nlohmann::json move(const std::string& from, const std::string& to, const char* turn = "through") {
  return {{"id", from + ">" + to}, {"from_lane", from}, {"to_lane", to}, {"turn", turn}};
}

/// Eastbound arterial W0 -> A -> B -> C -> E0 with a north->south side street at each signal.
inline nlohmann::json arterial() {
  using nlohmann::json;
  json lanes = json::array({lane("W0-A", nullptr, "A"), lane("A-B", "A", "B"), lane("B-C", "B", "C"),
                            lane("C-E0", "C", nullptr)});
  json moves = json::array({move("W0-A", "A-B"), move("A-B", "B-C"), move("B-C", "C-E0")});
  json signals = json::array();
  const char* ids[] = {"A", "B", "C"};
  const std::string main_in[] = {"W0-A", "A-B", "B-C"};
  const std::string main_out[] = {"A-B", "B-C", "C-E0"};
  for (int i = 0; i < 3; ++i) {
    const std::string s = ids[i];
    lanes.push_back(lane("n" + s + "-" + s, nullptr, ids[i]));
    lanes.push_back(lane(s + "-s" + s, ids[i], nullptr));
    moves.push_back(move("n" + s + "-" + s, s + "-s" + s));
    signals.push_back({{"id", s},
                       {"incoming_lanes", {main_in[i], "n" + s + "-" + s}},
                       {"outgoing_lanes", {main_out[i], s + "-s" + s}},
                       {"green_phases",
                        {{{"index", 0}, {"permitted", {main_in[i] + ">" + main_out[i]}}},
                         {{"index", 1}, {"permitted", {"n" + s + "-" + s + ">" + s + "-s" + s}}}}}});
  }
  return {{"lanes", lanes}, {"movements", moves}, {"signals", signals}};
}

/// Three signals joined pairwise (A->B->C->A) with one side street each.
inline nlohmann::json triangle() {
  using nlohmann::json;
  json lanes = json::array({lane("A-B", "A", "B"), lane("B-C", "B", "C"), lane("C-A", "C", "A")});
  json moves = json::array({move("C-A", "A-B"), move("A-B", "B-C"), move("B-C", "C-A")});
  json signals = json::array();
  const char* ids[] = {"A", "B", "C"};
  const std::string ring_in[] = {"C-A", "A-B", "B-C"};
  const std::string ring_out[] = {"A-B", "B-C", "C-A"};
  for (int i = 0; i < 3; ++i) {
    const std::string s = ids[i];
    lanes.push_back(lane("x" + s + "-" + s, nullptr, ids[i]));
    lanes.push_back(lane(s + "-y" + s, ids[i], nullptr));
    moves.push_back(move("x" + s + "-" + s, s + "-y" + s));
    signals.push_back({{"id", s},
                       {"incoming_lanes", {ring_in[i], "x" + s + "-" + s}},
                       {"outgoing_lanes", {ring_out[i], s + "-y" + s}},
                       {"green_phases",
                        {{{"index", 0}, {"permitted", {ring_in[i] + ">" + ring_out[i]}}},
                         {{"index", 1}, {"permitted", {"x" + s + "-" + s + ">" + s + "-y" + s}}}}}});
  }
  return {{"lanes", lanes}, {"movements", moves}, {"signals", signals}};
}

inline std::shared_ptr<const tsclab::RoadNetwork> grid(int rows, int cols,
                                                       tsclab::PhaseScheme scheme = tsclab::PhaseScheme::two_phase) {
  tsclab::GridOptions opt;
  opt.rows = rows;
  opt.cols = cols;
  opt.scheme = scheme;
  return std::make_shared<const tsclab::RoadNetwork>(tsclab::generate_grid(opt));
}

/// Environment config on a grid with straight-through demand.
inline tsclab::EnvConfig grid_env(int rows, int cols, double rate, std::uint64_t seed = 1,
                                  tsclab::ActionMode mode = tsclab::ActionMode::round_robin) {
  tsclab::EnvConfig cfg;
  cfg.network = grid(rows, cols);
  tsclab::TripOptions trips;
  trips.rate = rate;
  cfg.flows = tsclab::generate_trips(*cfg.network, trips);
  cfg.action_mode = mode;
  cfg.seed = seed;
  return cfg;
}

}  // namespace fixtures
