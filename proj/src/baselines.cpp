#include "tsclab/baselines.hpp"

#include <algorithm>

#include "tsclab/errors.hpp"

namespace tsclab {

std::string to_string(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::fixed_time: return "fixed_time";
    case ControllerKind::greedy: return "greedy";
    case ControllerKind::max_pressure: return "max_pressure";
    case ControllerKind::sotl: return "sotl";
    case ControllerKind::random: return "random";
  }
  return "unknown";
}

ControllerKind controller_kind_from_string(std::string_view name) {
  for (auto k : {ControllerKind::fixed_time, ControllerKind::greedy, ControllerKind::max_pressure, ControllerKind::sotl,
                 ControllerKind::random}) {
    if (name == to_string(k)) return k;
  }
  throw ConfigError("unknown controller kind \"" + std::string(name) + "\"");
}

ControllerParams ControllerParams::from_json(const nlohmann::json& doc) {
  ControllerParams p;
  try {
    if (doc.is_string()) {
      p.kind = controller_kind_from_string(doc.get<std::string>());
      return p;
    }
    p.kind = controller_kind_from_string(doc.at("kind").get<std::string>());
    p.fixed_green = doc.value("fixed_green", p.fixed_green);
    p.sotl_theta = doc.value("theta", p.sotl_theta);
    p.sotl_min_green = doc.value("min_green", p.sotl_min_green);
    p.pressure_min_green = doc.value("pressure_min_green", p.pressure_min_green);
    p.seed = doc.value("seed", p.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed controller config: ") + e.what());
  }
  if (p.fixed_green <= 0.0) throw ConfigError("fixed_green must be > 0");
  if (p.sotl_theta < 0.0 || p.sotl_min_green < 0.0 || p.pressure_min_green < 0.0) {
    throw ConfigError("controller thresholds must be >= 0");
  }
  return p;
}

nlohmann::json ControllerParams::to_json() const {
  return {{"kind", to_string(kind)},  {"fixed_green", fixed_green},
          {"theta", sotl_theta},      {"min_green", sotl_min_green},
          {"pressure_min_green", pressure_min_green}, {"seed", seed}};
}

ActionMode natural_mode(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::greedy:
    case ControllerKind::max_pressure: return ActionMode::free_select;
    default: return ActionMode::round_robin;
  }
}

std::vector<int> lane_queues(const SimState& state, const RoadNetwork& net) {
  std::vector<int> q(net.num_lanes());
  for (std::size_t l = 0; l < q.size(); ++l) q[l] = static_cast<int>(state.lanes[l].queued.size());
  return q;
}

std::vector<double> phase_queue_sums(const RoadNetwork& net, std::span<const int> queues, std::size_t signal) {
  const auto& topo = net.topology(signal);
  std::vector<double> out(topo.phase_lanes.size(), 0.0);
  for (std::size_t p = 0; p < out.size(); ++p) {
    for (std::size_t l : topo.phase_lanes[p]) out[p] += queues[l];
  }
  return out;
}

std::vector<double> phase_pressures(const RoadNetwork& net, std::span<const int> queues, std::size_t signal) {
  const auto& topo = net.topology(signal);
  std::vector<double> out = phase_queue_sums(net, queues, signal);
  for (std::size_t p = 0; p < out.size(); ++p) {
    std::vector<std::size_t> receiving;
    for (std::size_t m : topo.phase_moves[p]) receiving.push_back(net.lane_index(net.movements()[m].to_lane));
    std::sort(receiving.begin(), receiving.end());
    receiving.erase(std::unique(receiving.begin(), receiving.end()), receiving.end());
    for (std::size_t l : receiving) out[p] -= queues[l];
  }
  return out;
}

int argmax_lowest(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

bool fixed_time(const SignalControl& ctl, double fixed_green) { return ctl.green_elapsed >= fixed_green; }

int greedy(std::span<const double> phase_queues) { return argmax_lowest(phase_queues); }

int max_pressure(const SignalControl& ctl, std::span<const double> pressures, double yellow, double min_green) {
  if (ctl.green_elapsed - yellow < min_green) return ctl.cursor;
  return argmax_lowest(pressures);
}

bool sotl(SignalControl& ctl, double red_queue, double interval, double yellow, double theta, double min_green) {
  ctl.sotl_counter += red_queue * interval;
  if (ctl.green_elapsed - yellow >= min_green && ctl.sotl_counter >= theta) {
    ctl.sotl_counter = 0.0;
    return true;
  }
  return false;
}

int encode_action(ActionMode mode, int target, int current, int num_phases) {
  if (mode == ActionMode::free_select) return target;
  (void)num_phases;
  return target == current ? 0 : 1;
}

void Controller::reset(const Environment& env) {
  const double yellow = env.config().yellow_duration;
  state_.signals.assign(static_cast<std::size_t>(env.n_agents()), SignalControl{});
  for (std::size_t s = 0; s < state_.signals.size(); ++s) {
    state_.signals[s].green_elapsed = yellow;
    state_.signals[s].cursor = env.current_green(static_cast<int>(s));
  }
  rng_ = Rng(mix_seed(params_.seed, episodes_++));
}

std::vector<int> Controller::act(const Environment& env) {
  const auto& net = env.network();
  const int n = env.n_agents();
  if (state_.signals.size() != static_cast<std::size_t>(n)) throw ContractError("controller used before reset");
  const double interval = env.config().action_interval;
  const double yellow = env.config().yellow_duration;
  const ActionMode mode = env.config().action_mode;
  std::vector<int> queues;
  if (params_.kind != ControllerKind::fixed_time && params_.kind != ControllerKind::random) {
    queues = lane_queues(env.sim_state(), net);
  }

  std::vector<int> actions(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& ctl = state_.signals[static_cast<std::size_t>(i)];
    const std::size_t s = static_cast<std::size_t>(i);
    const int phases = net.signals()[s].num_phases();
    ctl.cursor = env.current_green(i);
    const int next = (ctl.cursor + 1) % phases;
    int target = ctl.cursor;
    switch (params_.kind) {
      case ControllerKind::fixed_time:
        if (fixed_time(ctl, params_.fixed_green)) target = next;
        break;
      case ControllerKind::greedy:
        target = greedy(phase_queue_sums(net, queues, s));
        break;
      case ControllerKind::max_pressure:
        target = max_pressure(ctl, phase_pressures(net, queues, s), yellow, params_.pressure_min_green);
        break;
      case ControllerKind::sotl: {
        const auto& topo = net.topology(s);
        double red = 0.0;
        for (std::size_t l : topo.incoming) {
          const auto& served = topo.phase_lanes[static_cast<std::size_t>(ctl.cursor)];
          if (std::find(served.begin(), served.end(), l) == served.end()) red += queues[l];
        }
        if (sotl(ctl, red, interval, yellow, params_.sotl_theta, params_.sotl_min_green)) target = next;
        break;
      }
      case ControllerKind::random: {
        const int a = static_cast<int>(rng_.below(static_cast<std::uint64_t>(env.action_space(i).size)));
        target = resolve_action(mode, a, ctl.cursor, phases);
        break;
      }
    }
    actions[s] = encode_action(mode, target, ctl.cursor, phases);
    const bool switched = resolve_action(mode, actions[s], ctl.cursor, phases) != ctl.cursor;
    ctl.green_elapsed = (switched ? 0.0 : ctl.green_elapsed) + interval;
    if (switched) ctl.cursor = resolve_action(mode, actions[s], ctl.cursor, phases);
  }
  return actions;
}

}  // namespace tsclab
