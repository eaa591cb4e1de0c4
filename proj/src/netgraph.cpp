#include "tsclab/netgraph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <set>
#include <stdexcept>

#include "tsclab/errors.hpp"

namespace tsclab {

namespace {

template <class T>
void sort_by_id(std::vector<T>& items) {
  std::sort(items.begin(), items.end(), [](const T& a, const T& b) { return a.id < b.id; });
}

template <class T>
std::unordered_map<std::string, std::size_t> index_unique(const std::vector<T>& items,
                                                          std::string_view what) {
  std::unordered_map<std::string, std::size_t> ix;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].id.empty()) throw ParseError(std::string(what) + " with empty id");
    if (!ix.emplace(items[i].id, i).second) {
      throw ParseError("duplicate " + std::string(what) + " id \"" + items[i].id + "\"");
    }
  }
  return ix;
}

}  // namespace

RoadNetwork::RoadNetwork(std::vector<Lane> lanes, std::vector<Movement> movements,
                         std::vector<TrafficSignal> signals)
    : lanes_(std::move(lanes)), movements_(std::move(movements)), signals_(std::move(signals)) {
  sort_by_id(lanes_);
  sort_by_id(movements_);
  sort_by_id(signals_);
  for (auto& s : signals_) {
    std::sort(s.incoming_lanes.begin(), s.incoming_lanes.end());
    std::sort(s.outgoing_lanes.begin(), s.outgoing_lanes.end());
    std::sort(s.green_phases.begin(), s.green_phases.end(),
              [](const Phase& a, const Phase& b) { return a.index < b.index; });
    for (auto& p : s.green_phases) std::sort(p.permitted.begin(), p.permitted.end());
  }
  index_and_validate();
}

void RoadNetwork::index_and_validate() {
  lane_ix_ = index_unique(lanes_, "lane");
  move_ix_ = index_unique(movements_, "movement");
  signal_ix_ = index_unique(signals_, "signal");

  const auto known_signal = [&](const std::optional<std::string>& s) {
    return !s || signal_ix_.count(*s) > 0;
  };

  for (std::size_t i = 0; i < lanes_.size(); ++i) {
    const Lane& l = lanes_[i];
    if (!(l.length > 0.0) || !std::isfinite(l.length)) {
      throw ParseError("lane \"" + l.id + "\" has non-positive length");
    }
    if (!(l.speed_limit > 0.0) || !std::isfinite(l.speed_limit)) {
      throw ParseError("lane \"" + l.id + "\" has non-positive speed_limit");
    }
    const int max_cap = static_cast<int>(std::floor(l.length / kVehicleSpacing));
    if (l.capacity < 1 || l.capacity > max_cap) {
      throw ParseError("lane \"" + l.id + "\" capacity must be in [1, floor(length/7.5)]");
    }
    if (!known_signal(l.upstream_intersection)) {
      throw ParseError("lane \"" + l.id + "\" references unknown upstream intersection \"" +
                       *l.upstream_intersection + "\"");
    }
    if (!known_signal(l.downstream_intersection)) {
      throw ParseError("lane \"" + l.id + "\" references unknown downstream intersection \"" +
                       *l.downstream_intersection + "\"");
    }
    if (!l.upstream_intersection && !l.downstream_intersection) {
      throw ParseError("lane \"" + l.id + "\" is not attached to any intersection");
    }
    if (!l.upstream_intersection) entry_lanes_.push_back(i);
    if (!l.downstream_intersection) exit_lanes_.push_back(i);
  }

  out_moves_.assign(lanes_.size(), {});
  move_from_.resize(movements_.size());
  move_to_.resize(movements_.size());
  for (std::size_t m = 0; m < movements_.size(); ++m) {
    const Movement& mv = movements_[m];
    const auto from = lane_ix_.find(mv.from_lane);
    if (from == lane_ix_.end()) {
      throw ParseError("movement \"" + mv.id + "\" references missing lane \"" + mv.from_lane + "\"");
    }
    const auto to = lane_ix_.find(mv.to_lane);
    if (to == lane_ix_.end()) {
      throw ParseError("movement \"" + mv.id + "\" references missing lane \"" + mv.to_lane + "\"");
    }
    const Lane& a = lanes_[from->second];
    const Lane& b = lanes_[to->second];
    if (!a.downstream_intersection || a.downstream_intersection != b.upstream_intersection) {
      throw ParseError("movement \"" + mv.id + "\" does not cross exactly one intersection");
    }
    move_from_[m] = from->second;
    move_to_[m] = to->second;
    out_moves_[from->second].push_back(m);
  }
  for (auto& outs : out_moves_) {
    std::sort(outs.begin(), outs.end(),
              [&](std::size_t x, std::size_t y) { return move_to_[x] < move_to_[y]; });
  }

  lane_signal_.assign(lanes_.size(), std::nullopt);
  for (std::size_t i = 0; i < lanes_.size(); ++i) {
    if (lanes_[i].downstream_intersection) {
      lane_signal_[i] = signal_ix_.at(*lanes_[i].downstream_intersection);
    }
  }

  topo_.clear();
  for (std::size_t s = 0; s < signals_.size(); ++s) {
    const TrafficSignal& sig = signals_[s];
    if (sig.incoming_lanes.empty()) {
      throw ParseError("signal \"" + sig.id + "\" has no incoming lanes");
    }
    if (sig.green_phases.size() < 2) {
      throw ParseError("signal \"" + sig.id + "\" needs at least two green phases");
    }
    if (!(sig.visibility > 0.0)) {
      throw ParseError("signal \"" + sig.id + "\" has non-positive visibility");
    }
    SignalTopology topo;
    for (const auto& lid : sig.incoming_lanes) {
      const auto it = lane_ix_.find(lid);
      if (it == lane_ix_.end()) {
        throw ParseError("signal \"" + sig.id + "\" references missing lane \"" + lid + "\"");
      }
      if (lanes_[it->second].downstream_intersection != sig.id) {
        throw ParseError("signal \"" + sig.id + "\" lists incoming lane \"" + lid +
                         "\" that does not end at it");
      }
      topo.incoming.push_back(it->second);
    }
    for (const auto& lid : sig.outgoing_lanes) {
      const auto it = lane_ix_.find(lid);
      if (it == lane_ix_.end()) {
        throw ParseError("signal \"" + sig.id + "\" references missing lane \"" + lid + "\"");
      }
      if (lanes_[it->second].upstream_intersection != sig.id) {
        throw ParseError("signal \"" + sig.id + "\" lists outgoing lane \"" + lid +
                         "\" that does not start at it");
      }
    }
    for (std::size_t i = 0; i < lanes_.size(); ++i) {
      if (lanes_[i].downstream_intersection == sig.id &&
          !std::binary_search(sig.incoming_lanes.begin(), sig.incoming_lanes.end(), lanes_[i].id)) {
        throw ParseError("signal \"" + sig.id + "\" is missing incoming lane \"" + lanes_[i].id + "\"");
      }
    }
    for (std::size_t p = 0; p < sig.green_phases.size(); ++p) {
      const Phase& ph = sig.green_phases[p];
      if (ph.index != static_cast<int>(p)) {
        throw ParseError("signal \"" + sig.id + "\" phase indices are not dense 0..P-1");
      }
      if (ph.kind != PhaseKind::green) {
        throw ParseError("signal \"" + sig.id + "\" lists a non-green phase; yellow phases are implied");
      }
      std::vector<std::size_t> moves;
      std::set<std::size_t> feeders;
      for (const auto& mid : ph.permitted) {
        const auto it = move_ix_.find(mid);
        if (it == move_ix_.end()) {
          throw ParseError("signal \"" + sig.id + "\" phase " + std::to_string(p) +
                           " permits unknown movement \"" + mid + "\"");
        }
        if (lane_signal_[move_from_[it->second]] != s) {
          throw ParseError("signal \"" + sig.id + "\" phase " + std::to_string(p) +
                           " permits movement \"" + mid + "\" of another intersection");
        }
        moves.push_back(it->second);
        feeders.insert(move_from_[it->second]);
      }
      topo.phase_moves.push_back(std::move(moves));
      topo.phase_lanes.emplace_back(feeders.begin(), feeders.end());
    }
    topo_.push_back(std::move(topo));
  }
}

std::optional<std::size_t> RoadNetwork::find_lane(std::string_view id) const {
  const auto it = lane_ix_.find(std::string(id));
  if (it == lane_ix_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> RoadNetwork::find_movement(std::string_view id) const {
  const auto it = move_ix_.find(std::string(id));
  if (it == move_ix_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> RoadNetwork::find_signal(std::string_view id) const {
  const auto it = signal_ix_.find(std::string(id));
  if (it == signal_ix_.end()) return std::nullopt;
  return it->second;
}

std::size_t RoadNetwork::lane_index(std::string_view id) const {
  const auto ix = find_lane(id);
  if (!ix) throw ParseError("unknown lane \"" + std::string(id) + "\"");
  return *ix;
}

bool RoadNetwork::is_entry(std::size_t lane) const { return !lanes_[lane].upstream_intersection; }
bool RoadNetwork::is_exit(std::size_t lane) const { return !lanes_[lane].downstream_intersection; }

std::optional<std::size_t> RoadNetwork::movement_between(std::size_t from, std::size_t to) const {
  for (std::size_t m : out_moves_[from]) {
    if (move_to_[m] == to) return m;
  }
  return std::nullopt;
}

std::optional<std::size_t> RoadNetwork::downstream_signal(std::size_t lane) const {
  return lane_signal_[lane];
}

// ---------------------------------------------------------------------------
// Grid generator

namespace {

enum Side { kNorth = 0, kEast = 1, kSouth = 2, kWest = 3 };

struct GridBuilder {
  const GridOptions& opt;
  std::vector<Lane> lanes;
  std::vector<Movement> movements;
  std::vector<TrafficSignal> signals;

  static std::string junction(int r, int c) {
    return "J" + std::to_string(r) + "_" + std::to_string(c);
  }

  bool is_junction(const std::string& node) const { return node.front() == 'J'; }

  /// Node adjacent to (r,c) on `side`; boundary terminals are N{c}, S{c}, W{r}, E{r}.
  std::string neighbor(int r, int c, Side side) const {
    switch (side) {
      case kNorth: return r == 0 ? "N" + std::to_string(c) : junction(r - 1, c);
      case kSouth: return r == opt.rows - 1 ? "S" + std::to_string(c) : junction(r + 1, c);
      case kWest: return c == 0 ? "W" + std::to_string(r) : junction(r, c - 1);
      case kEast: return c == opt.cols - 1 ? "E" + std::to_string(r) : junction(r, c + 1);
    }
    return {};
  }

  static std::string lane_id(const std::string& from, const std::string& to) { return from + "-" + to; }

  void add_lane(const std::string& from, const std::string& to) {
    const int cap = static_cast<int>(std::floor(opt.edge_length / kVehicleSpacing));
    Lane l{lane_id(from, to), opt.edge_length, opt.speed_limit, cap, std::nullopt, std::nullopt};
    if (is_junction(from)) l.upstream_intersection = from;
    if (is_junction(to)) l.downstream_intersection = to;
    lanes.push_back(std::move(l));
  }

  RoadNetwork build() {
    // Every junction owns its incoming lanes; boundary exit lanes are owned by their upstream junction.
    for (int r = 0; r < opt.rows; ++r) {
      for (int c = 0; c < opt.cols; ++c) {
        const std::string j = junction(r, c);
        for (Side side : {kNorth, kEast, kSouth, kWest}) {
          const std::string nb = neighbor(r, c, side);
          add_lane(nb, j);
          if (!is_junction(nb)) add_lane(j, nb);
        }
      }
    }

    for (int r = 0; r < opt.rows; ++r) {
      for (int c = 0; c < opt.cols; ++c) {
        const std::string j = junction(r, c);
        TrafficSignal sig;
        sig.id = j;
        std::vector<std::vector<std::string>> through_right(4), left(4);
        for (Side from : {kNorth, kEast, kSouth, kWest}) {
          const std::string in = lane_id(neighbor(r, c, from), j);
          sig.incoming_lanes.push_back(in);
          sig.outgoing_lanes.push_back(lane_id(j, neighbor(r, c, from)));
          // Arriving from `from`, heading towards the opposite side (right-hand traffic).
          const Side through = static_cast<Side>((from + 2) % 4);
          const Side right = static_cast<Side>((from + 3) % 4);
          const Side left_side = static_cast<Side>((from + 1) % 4);
          auto add_move = [&](Side to, Turn turn, std::vector<std::string>& bucket) {
            const std::string out = lane_id(j, neighbor(r, c, to));
            Movement mv{in + ">" + out, in, out, turn};
            bucket.push_back(mv.id);
            movements.push_back(std::move(mv));
          };
          add_move(through, Turn::through, through_right[from]);
          add_move(right, Turn::right, through_right[from]);
          if (opt.scheme == PhaseScheme::four_phase) add_move(left_side, Turn::left, left[from]);
        }
        auto merge = [](const std::vector<std::string>& a, const std::vector<std::string>& b) {
          std::vector<std::string> out(a);
          out.insert(out.end(), b.begin(), b.end());
          return out;
        };
        std::vector<std::vector<std::string>> phase_sets;
        phase_sets.push_back(merge(through_right[kNorth], through_right[kSouth]));
        if (opt.scheme == PhaseScheme::four_phase) phase_sets.push_back(merge(left[kNorth], left[kSouth]));
        phase_sets.push_back(merge(through_right[kEast], through_right[kWest]));
        if (opt.scheme == PhaseScheme::four_phase) phase_sets.push_back(merge(left[kEast], left[kWest]));
        for (std::size_t p = 0; p < phase_sets.size(); ++p) {
          sig.green_phases.push_back(Phase{static_cast<int>(p), phase_sets[p], PhaseKind::green});
        }
        signals.push_back(std::move(sig));
      }
    }
    return RoadNetwork(std::move(lanes), std::move(movements), std::move(signals));
  }
};

}  // namespace

RoadNetwork generate_grid(const GridOptions& options) {
  if (options.rows < 1 || options.cols < 1) {
    throw ConfigError("grid dimensions must be positive, got " + std::to_string(options.rows) + "x" +
                      std::to_string(options.cols));
  }
  if (!(options.edge_length >= 2.0 * kVehicleSpacing)) {
    throw ConfigError("grid edge_length must be at least " + std::to_string(2.0 * kVehicleSpacing) + " m");
  }
  if (!(options.speed_limit > 0.0)) throw ConfigError("grid speed_limit must be positive");
  GridBuilder b{options, {}, {}, {}};
  return b.build();
}

// ---------------------------------------------------------------------------
// JSON

std::string to_string(Turn turn) {
  switch (turn) {
    case Turn::through: return "through";
    case Turn::left: return "left";
    case Turn::right: return "right";
  }
  return "through";
}

std::string to_string(PhaseScheme scheme) {
  return scheme == PhaseScheme::two_phase ? "two_phase" : "four_phase";
}

PhaseScheme phase_scheme_from_string(std::string_view name) {
  if (name == "two_phase") return PhaseScheme::two_phase;
  if (name == "four_phase") return PhaseScheme::four_phase;
  throw ConfigError("unknown phase scheme \"" + std::string(name) + "\"");
}

namespace {

Turn turn_from_string(const std::string& s, const std::string& owner) {
  if (s == "through") return Turn::through;
  if (s == "left") return Turn::left;
  if (s == "right") return Turn::right;
  throw ParseError("movement \"" + owner + "\" has unknown turn \"" + s + "\"");
}

template <class T>
T field(const nlohmann::json& obj, const char* key, const std::string& owner) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(owner + " is missing field \"" + key + "\"");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(owner + " field \"" + key + "\" has the wrong type");
  }
}

std::optional<std::string> optional_id(const nlohmann::json& obj, const char* key) {
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  return it->get<std::string>();
}

}  // namespace

nlohmann::json serialize_network(const RoadNetwork& net) {
  using nlohmann::json;
  json lanes = json::array();
  for (const auto& l : net.lanes()) {
    lanes.push_back({{"id", l.id},
                     {"length", l.length},
                     {"speed_limit", l.speed_limit},
                     {"capacity", l.capacity},
                     {"upstream_intersection", l.upstream_intersection ? json(*l.upstream_intersection) : json()},
                     {"downstream_intersection",
                      l.downstream_intersection ? json(*l.downstream_intersection) : json()}});
  }
  json moves = json::array();
  for (const auto& m : net.movements()) {
    moves.push_back({{"id", m.id}, {"from_lane", m.from_lane}, {"to_lane", m.to_lane}, {"turn", to_string(m.turn)}});
  }
  json signals = json::array();
  for (const auto& s : net.signals()) {
    json phases = json::array();
    for (const auto& p : s.green_phases) {
      phases.push_back({{"index", p.index}, {"permitted", p.permitted}, {"kind", "green"}});
    }
    signals.push_back({{"id", s.id},
                       {"incoming_lanes", s.incoming_lanes},
                       {"outgoing_lanes", s.outgoing_lanes},
                       {"green_phases", phases},
                       {"visibility", s.visibility}});
  }
  return json{{"lanes", lanes}, {"movements", moves}, {"signals", signals}};
}

RoadNetwork parse_network(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ParseError("network document must be a JSON object");
  for (const char* key : {"lanes", "movements", "signals"}) {
    if (!doc.contains(key) || !doc[key].is_array()) {
      throw ParseError(std::string("network document needs an array \"") + key + "\"");
    }
  }
  std::vector<Lane> lanes;
  for (const auto& jl : doc["lanes"]) {
    const std::string id = field<std::string>(jl, "id", "lane");
    const std::string owner = "lane \"" + id + "\"";
    Lane l;
    l.id = id;
    l.length = field<double>(jl, "length", owner);
    l.speed_limit = field<double>(jl, "speed_limit", owner);
    l.capacity = jl.contains("capacity") ? field<int>(jl, "capacity", owner)
                                         : static_cast<int>(std::floor(l.length / kVehicleSpacing));
    l.upstream_intersection = optional_id(jl, "upstream_intersection");
    l.downstream_intersection = optional_id(jl, "downstream_intersection");
    lanes.push_back(std::move(l));
  }
  std::vector<Movement> moves;
  for (const auto& jm : doc["movements"]) {
    const std::string id = field<std::string>(jm, "id", "movement");
    const std::string owner = "movement \"" + id + "\"";
    moves.push_back(Movement{id, field<std::string>(jm, "from_lane", owner),
                             field<std::string>(jm, "to_lane", owner),
                             turn_from_string(field<std::string>(jm, "turn", owner), id)});
  }
  std::vector<TrafficSignal> signals;
  for (const auto& js : doc["signals"]) {
    const std::string id = field<std::string>(js, "id", "signal");
    const std::string owner = "signal \"" + id + "\"";
    TrafficSignal s;
    s.id = id;
    s.incoming_lanes = field<std::vector<std::string>>(js, "incoming_lanes", owner);
    s.outgoing_lanes = js.contains("outgoing_lanes")
                           ? field<std::vector<std::string>>(js, "outgoing_lanes", owner)
                           : std::vector<std::string>{};
    s.visibility = js.contains("visibility") ? field<double>(js, "visibility", owner) : kDefaultVisibility;
    for (const auto& jp : field<nlohmann::json>(js, "green_phases", owner)) {
      Phase p;
      p.index = field<int>(jp, "index", owner + " phase");
      p.permitted = field<std::vector<std::string>>(jp, "permitted", owner + " phase");
      const std::string kind = jp.value("kind", std::string("green"));
      if (kind != "green") throw ParseError(owner + " lists a non-green phase; yellow phases are implied");
      s.green_phases.push_back(std::move(p));
    }
    signals.push_back(std::move(s));
  }
  return RoadNetwork(std::move(lanes), std::move(moves), std::move(signals));
}

RoadNetwork load_network_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open network file \"" + path + "\"");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("network file \"" + path + "\" is not valid JSON: " + e.what());
  }
  return parse_network(doc);
}

// ---------------------------------------------------------------------------
// Analytics

AdjacencyMatrix adjacency_matrix(const RoadNetwork& net) {
  const std::size_t n = net.num_signals();
  AdjacencyMatrix adj(n, std::vector<int>(n, 0));
  for (const auto& l : net.lanes()) {
    if (!l.upstream_intersection || !l.downstream_intersection) continue;
    const std::size_t i = *net.find_signal(*l.upstream_intersection);
    const std::size_t j = *net.find_signal(*l.downstream_intersection);
    if (i == j) continue;
    adj[i][j] = 1;
    adj[j][i] = 1;
  }
  return adj;
}

std::vector<double> degree_centrality(const RoadNetwork& net) {
  const std::size_t n = net.num_signals();
  if (n < 2) throw std::domain_error("degree centrality is undefined for fewer than two signals");
  const AdjacencyMatrix adj = adjacency_matrix(net);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    int deg = 0;
    for (int v : adj[i]) deg += v;
    out[i] = static_cast<double>(deg) / static_cast<double>(n - 1);
  }
  return out;
}

std::vector<std::size_t> shortest_route(const RoadNetwork& net, std::size_t origin,
                                        std::size_t destination) {
  if (origin >= net.num_lanes() || !net.is_entry(origin)) {
    throw RoutingError("route origin is not an entry lane");
  }
  if (destination >= net.num_lanes() || !net.is_exit(destination)) {
    throw RoutingError("route destination \"" +
                       (destination < net.num_lanes() ? net.lanes()[destination].id : std::string("?")) +
                       "\" is not an exit lane");
  }
  // Hop distance to the destination over reversed movements, then a greedy
  // forward walk picking the lowest-id lane that stays on a shortest path.
  constexpr std::size_t kUnreached = static_cast<std::size_t>(-1);
  std::vector<std::vector<std::size_t>> preds(net.num_lanes());
  for (std::size_t m = 0; m < net.movements().size(); ++m) {
    preds[net.movement_to_lane(m)].push_back(net.movement_from_lane(m));
  }
  std::vector<std::size_t> dist(net.num_lanes(), kUnreached);
  std::deque<std::size_t> frontier{destination};
  dist[destination] = 0;
  while (!frontier.empty()) {
    const std::size_t u = frontier.front();
    frontier.pop_front();
    for (std::size_t p : preds[u]) {
      if (dist[p] == kUnreached) {
        dist[p] = dist[u] + 1;
        frontier.push_back(p);
      }
    }
  }
  if (dist[origin] == kUnreached) {
    throw RoutingError("no route from \"" + net.lanes()[origin].id + "\" to \"" +
                       net.lanes()[destination].id + "\"");
  }
  std::vector<std::size_t> route{origin};
  std::size_t cur = origin;
  while (cur != destination) {
    std::size_t best = kUnreached;
    for (std::size_t m : net.movements_from(cur)) {
      const std::size_t nxt = net.movement_to_lane(m);
      if (dist[nxt] + 1 == dist[cur] && nxt < best) best = nxt;
    }
    route.push_back(best);
    cur = best;
  }
  return route;
}

std::vector<std::string> shortest_route(const RoadNetwork& net, std::string_view origin,
                                        std::string_view destination) {
  const auto o = net.find_lane(origin);
  if (!o) throw RoutingError("unknown origin lane \"" + std::string(origin) + "\"");
  const auto d = net.find_lane(destination);
  if (!d) throw RoutingError("unknown destination lane \"" + std::string(destination) + "\"");
  std::vector<std::string> ids;
  for (std::size_t l : shortest_route(net, *o, *d)) ids.push_back(net.lanes()[l].id);
  return ids;
}

}  // namespace tsclab
