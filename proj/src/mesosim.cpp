#include "tsclab/mesosim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "tsclab/errors.hpp"

namespace tsclab {

namespace {

void validate_flow(const RoadNetwork& net, const FlowSpec& f) {
  if (!(f.rate >= 0.0) || !std::isfinite(f.rate)) {
    throw ConfigError("flow " + f.origin + "->" + f.destination + " has negative rate");
  }
  if (!(f.start < f.end)) {
    throw ConfigError("flow " + f.origin + "->" + f.destination + " needs start < end");
  }
  const auto o = net.find_lane(f.origin);
  if (!o || !net.is_entry(*o)) throw ConfigError("flow origin \"" + f.origin + "\" is not an entry lane");
  const auto d = net.find_lane(f.destination);
  if (!d || !net.is_exit(*d)) {
    throw ConfigError("flow destination \"" + f.destination + "\" is not an exit lane");
  }
}

std::uint32_t allocate_vehicle(SimState& st, Vehicle v) {
  if (!st.free_slots.empty()) {
    const std::uint32_t slot = st.free_slots.back();
    st.free_slots.pop_back();
    st.vehicles[slot] = std::move(v);
    st.slot_live[slot] = 1;
    return slot;
  }
  st.vehicles.push_back(std::move(v));
  st.slot_live.push_back(1);
  return static_cast<std::uint32_t>(st.vehicles.size() - 1);
}

void complete_vehicle(SimState& st, std::uint32_t slot, std::int64_t now) {
  const Vehicle& v = st.vehicles[slot];
  st.completed += 1;
  st.completed_travel_times.push_back(now - v.spawn_tick);
  st.completed_wait_ticks += v.wait_ticks;
  st.vehicles[slot] = Vehicle{};
  st.slot_live[slot] = 0;
  st.free_slots.push_back(slot);
}

}  // namespace

SimState make_initial_state(const RoadNetwork& net, const std::vector<FlowSpec>& flows) {
  SimState st;
  st.lanes.assign(net.num_lanes(), LaneState{});
  st.signals.assign(net.num_signals(), SignalState{});
  st.discharge_credit.assign(net.movements().size(), 0.0);
  st.routes.reserve(flows.size());
  for (const auto& f : flows) {
    validate_flow(net, f);
    try {
      st.routes.push_back(shortest_route(net, net.lane_index(f.origin), net.lane_index(f.destination)));
    } catch (const RoutingError& e) {
      throw ConfigError(std::string("flow is not routable: ") + e.what());
    }
  }
  return st;
}

void spawn(const std::vector<FlowSpec>& flows, SimState& st, const RoadNetwork& net, Rng& rng) {
  const double now = static_cast<double>(st.clock);
  for (std::size_t f = 0; f < flows.size(); ++f) {
    const FlowSpec& flow = flows[f];
    if (now < flow.start || now >= flow.end) continue;
    const int arrivals = rng.poisson(flow.rate / 3600.0);
    const std::size_t origin = st.routes[f].front();
    for (int k = 0; k < arrivals; ++k) {
      LaneState& lane = st.lanes[origin];
      if (lane.occupancy() >= static_cast<std::size_t>(net.lanes()[origin].capacity)) {
        st.dropped += 1;
        continue;
      }
      Vehicle v;
      v.id = st.next_vehicle_id++;
      v.route = static_cast<std::uint32_t>(f);
      v.spawn_tick = st.clock;
      lane.running.push_back(allocate_vehicle(st, std::move(v)));
      st.spawned += 1;
    }
  }
}

void tick(SimState& st, const RoadNetwork& net, const SimParams& params) {
  const auto& lanes = net.lanes();

  // (1) free-flow advance, capped at the back of the queue
  for (std::size_t l = 0; l < lanes.size(); ++l) {
    LaneState& ls = st.lanes[l];
    const Lane& lane = lanes[l];
    const bool sink = net.is_exit(l);
    double back = lane.length - static_cast<double>(ls.queued.size()) * kVehicleSpacing;
    std::size_t i = 0;
    while (i < ls.running.size()) {
      const std::uint32_t slot = ls.running[i];
      Vehicle& v = st.vehicles[slot];
      const double next = v.position + lane.speed_limit;
      if (sink) {
        if (next >= lane.length) {
          ls.running.pop_front();
          complete_vehicle(st, slot, st.clock + 1);
          continue;
        }
        v.position = next;
      } else if (next >= back) {
        v.position = back;
        v.mode = VehicleMode::queued;
        v.queue_join_tick = st.clock;
        back -= kVehicleSpacing;
        ls.queued.push_back(slot);
        ls.running.pop_front();
        continue;
      } else {
        v.position = next;
      }
      ++i;
    }
  }

  // (2) discharge through green movements
  // Credit only survives on movements that stay green.
  std::vector<std::uint8_t> green(net.movements().size(), 0);
  for (std::size_t s = 0; s < net.num_signals(); ++s) {
    const SignalState& sig = st.signals[s];
    if (sig.yellow) continue;
    for (std::size_t m : net.topology(s).phase_moves[static_cast<std::size_t>(sig.active_green)]) green[m] = 1;
  }
  for (std::size_t m = 0; m < green.size(); ++m) {
    if (!green[m]) st.discharge_credit[m] = 0.0;
  }
  for (std::size_t s = 0; s < net.num_signals(); ++s) {
    const SignalState& sig = st.signals[s];
    if (sig.yellow) continue;
    for (std::size_t m : net.topology(s).phase_moves[static_cast<std::size_t>(sig.active_green)]) {
      const std::size_t from = net.movement_from_lane(m);
      const std::size_t to = net.movement_to_lane(m);
      LaneState& src = st.lanes[from];
      if (src.queued.empty()) continue;
      double& credit = st.discharge_credit[m];
      credit += params.saturation_flow;
      LaneState& dst = st.lanes[to];
      const auto cap = static_cast<std::size_t>(lanes[to].capacity);
      while (credit >= 1.0 && !src.queued.empty()) {
        const std::uint32_t slot = src.queued.front();
        Vehicle& v = st.vehicles[slot];
        const auto& route = st.routes[v.route];
        if (v.leg + 1 >= route.size()) {
          src.queued.pop_front();
          complete_vehicle(st, slot, st.clock + 1);
          credit -= 1.0;
          continue;
        }
        if (route[v.leg + 1] != to || dst.occupancy() >= cap) break;
        src.queued.pop_front();
        v.leg += 1;
        v.position = 0.0;
        v.mode = VehicleMode::running;
        v.queue_join_tick.reset();
        dst.running.push_back(slot);
        credit -= 1.0;
      }
      credit = std::min(credit, 1.0);
    }
  }
  // Queue positions close up behind departures.
  for (std::size_t l = 0; l < lanes.size(); ++l) {
    double pos = lanes[l].length;
    for (std::uint32_t slot : st.lanes[l].queued) {
      st.vehicles[slot].position = pos;
      pos -= kVehicleSpacing;
    }
  }

  // (3) waiting
  for (auto& ls : st.lanes) {
    for (std::uint32_t slot : ls.queued) st.vehicles[slot].wait_ticks += 1;
  }

  // (4)
  st.clock += 1;
}

void set_phase(SimState& st, const RoadNetwork& net, std::size_t signal, int target_green) {
  if (signal >= net.num_signals()) throw ContractError("unknown signal index " + std::to_string(signal));
  const int phases = net.signals()[signal].num_phases();
  if (target_green < 0 || target_green >= phases) {
    throw ContractError("signal \"" + net.signals()[signal].id + "\" has no green phase " +
                        std::to_string(target_green));
  }
  SignalState& sig = st.signals[signal];
  if (sig.yellow) {
    sig.pending_green = target_green;
    return;
  }
  if (target_green == sig.active_green) return;
  sig.yellow = true;
  sig.pending_green = target_green;
  sig.phase_elapsed = 0;
}

void advance_signals(SimState& st, int yellow_duration) {
  for (auto& sig : st.signals) {
    sig.phase_elapsed += 1;
    if (sig.yellow && sig.phase_elapsed >= yellow_duration) {
      sig.active_green = *sig.pending_green;
      sig.pending_green.reset();
      sig.yellow = false;
      sig.phase_elapsed = 0;
    }
  }
}

LaneMetrics lane_metrics(const SimState& st, const RoadNetwork& net, std::size_t lane, double visibility) {
  const double length = net.lanes()[lane].length;
  const LaneState& ls = st.lanes[lane];
  LaneMetrics out;
  int moving = 0;
  for (std::uint32_t slot : ls.queued) {
    if (length - st.vehicles[slot].position <= visibility) ++out.q;
  }
  // running is ordered front-first, so the visible ones form a prefix
  for (std::uint32_t slot : ls.running) {
    if (length - st.vehicles[slot].position > visibility) break;
    ++moving;
  }
  out.n = out.q + moving;
  out.s = out.n == 0 ? 1.0 : static_cast<double>(moving) / static_cast<double>(out.n);
  return out;
}

Simulator::Simulator(std::shared_ptr<const RoadNetwork> net, std::vector<FlowSpec> flows, SimParams params,
                     std::uint64_t seed)
    : net_(std::move(net)),
      flows_(std::move(flows)),
      params_(params),
      rng_(seed),
      state_(make_initial_state(*net_, flows_)) {}

// ---------------------------------------------------------------------------

std::vector<FlowSpec> generate_trips(const RoadNetwork& net, const TripOptions& opt) {
  if (!(opt.rate >= 0.0)) throw ConfigError("trip rate must be non-negative");
  if (!(opt.start < opt.end)) throw ConfigError("trip window needs start < end");
  std::vector<FlowSpec> flows;
  for (std::size_t entry : net.entry_lanes()) {
    const std::string& id = net.lanes()[entry].id;
    double rate = opt.rate;
    std::size_t best_len = 0;
    for (const auto& [prefix, r] : opt.rate_overrides) {
      if (id.rfind(prefix, 0) == 0 && prefix.size() >= best_len) {
        best_len = prefix.size();
        rate = r;
      }
    }
    if (opt.pattern == TripPattern::through) {
      std::size_t cur = entry;
      std::size_t hops = 0;
      bool found = true;
      while (!net.is_exit(cur)) {
        std::optional<std::size_t> next;
        for (std::size_t m : net.movements_from(cur)) {
          if (net.movements()[m].turn == Turn::through) {
            next = net.movement_to_lane(m);
            break;
          }
        }
        if (!next || ++hops > net.num_lanes()) {
          found = false;
          break;
        }
        cur = *next;
      }
      if (found) flows.push_back(FlowSpec{id, net.lanes()[cur].id, rate, opt.start, opt.end});
    } else {
      std::vector<std::size_t> reachable;
      for (std::size_t exit : net.exit_lanes()) {
        try {
          shortest_route(net, entry, exit);
          reachable.push_back(exit);
        } catch (const RoutingError&) {
        }
      }
      for (std::size_t exit : reachable) {
        flows.push_back(FlowSpec{id, net.lanes()[exit].id, rate / static_cast<double>(reachable.size()),
                                 opt.start, opt.end});
      }
    }
  }
  return flows;
}

nlohmann::json serialize_flows(const std::vector<FlowSpec>& flows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& f : flows) {
    out.push_back({{"origin", f.origin},
                   {"destination", f.destination},
                   {"rate", f.rate},
                   {"start", f.start},
                   {"end", f.end}});
  }
  return out;
}

std::vector<FlowSpec> parse_flows(const nlohmann::json& doc) {
  if (!doc.is_array()) throw ParseError("flow document must be a JSON array");
  std::vector<FlowSpec> flows;
  for (const auto& j : doc) {
    try {
      FlowSpec f;
      f.origin = j.at("origin").get<std::string>();
      f.destination = j.at("destination").get<std::string>();
      f.rate = j.at("rate").get<double>();
      f.start = j.value("start", 0.0);
      f.end = j.value("end", 86400.0);
      if (!(f.rate >= 0.0)) throw ParseError("flow " + f.origin + " has negative rate");
      if (!(f.start < f.end)) throw ParseError("flow " + f.origin + " needs start < end");
      flows.push_back(std::move(f));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed flow entry: ") + e.what());
    }
  }
  return flows;
}

std::vector<FlowSpec> load_flows_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open flow file \"" + path + "\"");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("flow file \"" + path + "\" is not valid JSON: " + e.what());
  }
  return parse_flows(doc);
}

}  // namespace tsclab
