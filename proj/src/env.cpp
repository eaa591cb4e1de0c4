#include "tsclab/env.hpp"

#include <fstream>

#include "tsclab/errors.hpp"

namespace tsclab {

std::string to_string(ActionMode mode) {
  return mode == ActionMode::free_select ? "free_select" : "round_robin";
}

ActionMode action_mode_from_string(std::string_view name) {
  if (name == "free_select") return ActionMode::free_select;
  if (name == "round_robin") return ActionMode::round_robin;
  throw ConfigError("unknown action_mode \"" + std::string(name) + "\"");
}

void EnvConfig::validate() const {
  if (!network) throw ConfigError("environment config has no network");
  if (network->num_signals() == 0) throw ConfigError("network has no traffic signals");
  if (episode_limit < 1) throw ConfigError("episode_limit must be >= 1");
  if (action_interval < 1) throw ConfigError("action_interval must be >= 1");
  if (yellow_duration != action_interval) {
    throw ConfigError("yellow_duration must equal action_interval");
  }
  if (visibility && !(*visibility > 0.0)) throw ConfigError("visibility must be positive");
  if (!(saturation_flow > 0.0)) throw ConfigError("saturation_flow must be positive");
}

namespace {

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open \"" + path.string() + "\"");
  try {
    nlohmann::json doc;
    in >> doc;
    return doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("\"" + path.string() + "\" is not valid JSON: " + e.what());
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_relative() && !base.empty() ? base / path : path;
}

RoadNetwork network_from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  if (j.is_string()) return parse_network(read_json_file(resolve(base, j.get<std::string>())));
  if (j.is_object() && j.contains("grid")) {
    const auto& g = j["grid"];
    GridOptions opt;
    opt.rows = g.value("rows", opt.rows);
    opt.cols = g.value("cols", opt.cols);
    opt.edge_length = g.value("edge_length", opt.edge_length);
    opt.speed_limit = g.value("speed_limit", opt.speed_limit);
    opt.scheme = phase_scheme_from_string(g.value("phase_scheme", to_string(opt.scheme)));
    return generate_grid(opt);
  }
  return parse_network(j);
}

std::vector<FlowSpec> flows_from_json(const nlohmann::json& j, const RoadNetwork& net,
                                      const std::filesystem::path& base) {
  if (j.is_string()) return parse_flows(read_json_file(resolve(base, j.get<std::string>())));
  if (j.is_object() && j.contains("generate")) {
    const auto& g = j["generate"];
    TripOptions opt;
    opt.rate = g.value("rate", opt.rate);
    if (g.contains("rate_overrides")) opt.rate_overrides = g["rate_overrides"].get<std::map<std::string, double>>();
    const std::string pattern = g.value("pattern", std::string("through"));
    if (pattern == "through") {
      opt.pattern = TripPattern::through;
    } else if (pattern == "all_exits") {
      opt.pattern = TripPattern::all_exits;
    } else {
      throw ConfigError("unknown trip pattern \"" + pattern + "\"");
    }
    opt.start = g.value("start", opt.start);
    opt.end = g.value("end", opt.end);
    return generate_trips(net, opt);
  }
  return parse_flows(j);
}

}  // namespace

EnvConfig env_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("environment config must be a JSON object");
  if (!doc.contains("network")) throw ConfigError("environment config needs \"network\"");
  EnvConfig cfg;
  try {
    cfg.network = std::make_shared<const RoadNetwork>(network_from_json(doc["network"], base_dir));
    if (doc.contains("flows")) cfg.flows = flows_from_json(doc["flows"], *cfg.network, base_dir);
    cfg.action_mode = action_mode_from_string(doc.value("action_mode", to_string(cfg.action_mode)));
    cfg.episode_limit = doc.value("episode_limit", cfg.episode_limit);
    cfg.action_interval = doc.value("action_interval", cfg.action_interval);
    cfg.yellow_duration = doc.value("yellow_duration", cfg.yellow_duration);
    if (doc.contains("visibility") && !doc["visibility"].is_null()) cfg.visibility = doc["visibility"].get<double>();
    cfg.seed = doc.value("seed", cfg.seed);
    cfg.local_reward = doc.value("local_reward", cfg.local_reward);
    cfg.saturation_flow = doc.value("saturation_flow", cfg.saturation_flow);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed environment config: ") + e.what());
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  cfg.validate();
  // Routability of every flow is checked here rather than at first reset.
  (void)make_initial_state(*cfg.network, cfg.flows);
  return cfg;
}

nlohmann::json env_config_to_json(const EnvConfig& cfg) {
  nlohmann::json j{{"network", serialize_network(*cfg.network)},
                   {"flows", serialize_flows(cfg.flows)},
                   {"action_mode", to_string(cfg.action_mode)},
                   {"episode_limit", cfg.episode_limit},
                   {"action_interval", cfg.action_interval},
                   {"yellow_duration", cfg.yellow_duration},
                   {"seed", cfg.seed},
                   {"local_reward", cfg.local_reward},
                   {"saturation_flow", cfg.saturation_flow}};
  j["visibility"] = cfg.visibility ? nlohmann::json(*cfg.visibility) : nlohmann::json();
  return j;
}

nlohmann::json StepInfo::to_json() const {
  return {{"queue_sum", queue_sum},     {"mean_delay", mean_delay}, {"mean_speed", mean_speed},
          {"mean_occupancy", mean_occupancy}, {"completed", completed},   {"dropped", dropped}};
}

nlohmann::json EnvSpec::to_json() const {
  return {{"n_agents", n_agents},
          {"obs_sizes", obs_sizes},
          {"action_sizes", action_sizes},
          {"state_size", state_size},
          {"episode_limit", episode_limit}};
}

ActionSpace action_space(const TrafficSignal& signal, ActionMode mode) {
  return ActionSpace{mode == ActionMode::free_select ? signal.num_phases() : 2, mode};
}

int resolve_action(ActionMode mode, int action, int current_green, int num_phases) {
  if (mode == ActionMode::free_select) return action;
  return action == 0 ? current_green : (current_green + 1) % num_phases;
}

double compute_reward(const SimState& state, const RoadNetwork& /*net*/) {
  std::size_t queued = 0;
  for (const auto& ls : state.lanes) queued += ls.queued.size();
  return -static_cast<double>(queued);
}

namespace {

void append_lane_features(std::vector<double>& out, const LaneMetrics& m, int capacity) {
  out.push_back(static_cast<double>(m.n) / capacity);
  out.push_back(m.s);
  out.push_back(static_cast<double>(m.q) / capacity);
}

void append_phase_one_hot(std::vector<double>& out, const SignalState& sig, int phases) {
  for (int p = 0; p < phases; ++p) out.push_back(p == sig.active_green ? 1.0 : 0.0);
}

}  // namespace

GlobalState global_state(const SimState& state, const RoadNetwork& net) {
  GlobalState gs;
  gs.values.reserve(3 * net.num_lanes() + 4 * net.num_signals());
  for (std::size_t l = 0; l < net.num_lanes(); ++l) {
    append_lane_features(gs.values, full_lane_metrics(state, net, l), net.lanes()[l].capacity);
  }
  for (std::size_t s = 0; s < net.num_signals(); ++s) {
    append_phase_one_hot(gs.values, state.signals[s], net.signals()[s].num_phases());
  }
  return gs;
}

Observation observe(const SimState& state, const RoadNetwork& net, std::size_t signal, double visibility) {
  Observation obs;
  obs.agent = static_cast<int>(signal);
  const auto& topo = net.topology(signal);
  obs.values.reserve(3 * topo.incoming.size() + 4);
  for (std::size_t l : topo.incoming) {
    append_lane_features(obs.values, lane_metrics(state, net, l, visibility), net.lanes()[l].capacity);
  }
  append_phase_one_hot(obs.values, state.signals[signal], net.signals()[signal].num_phases());
  return obs;
}

StepInfo gather_info(const SimState& state, const RoadNetwork& net) {
  StepInfo info;
  double vehicles = 0.0;
  double moving = 0.0;
  double occupancy = 0.0;
  for (std::size_t l = 0; l < net.num_lanes(); ++l) {
    const LaneState& ls = state.lanes[l];
    info.queue_sum += static_cast<double>(ls.queued.size());
    vehicles += static_cast<double>(ls.occupancy());
    moving += static_cast<double>(ls.running.size());
    occupancy += static_cast<double>(ls.occupancy()) / net.lanes()[l].capacity;
  }
  info.mean_speed = vehicles > 0.0 ? moving / vehicles : 1.0;
  info.mean_delay = vehicles > 0.0 ? 1.0 - info.mean_speed : 0.0;
  info.mean_occupancy = net.num_lanes() ? occupancy / static_cast<double>(net.num_lanes()) : 0.0;
  info.completed = state.completed;
  info.dropped = state.dropped;
  return info;
}

Environment::Environment(EnvConfig config) : config_(std::move(config)) {
  config_.validate();
  net_ = config_.network;
}

ResetResult Environment::reset() { return reset(config_.seed); }

ResetResult Environment::reset(std::uint64_t seed) {
  config_.seed = seed;
  sim_ = std::make_unique<Simulator>(net_, config_.flows, SimParams{config_.saturation_flow}, seed);
  steps_ = 0;
  return ResetResult{observations(), global_state()};
}

const SimState& Environment::sim_state() const {
  if (!sim_) throw ContractError("environment has not been reset");
  return sim_->state();
}

double Environment::visibility_for(std::size_t signal) const {
  return config_.visibility ? *config_.visibility : net_->signals()[signal].visibility;
}

ActionSpace Environment::action_space(int agent) const {
  return tsclab::action_space(net_->signals().at(static_cast<std::size_t>(agent)), config_.action_mode);
}

EnvSpec Environment::spec() const {
  EnvSpec spec;
  spec.n_agents = n_agents();
  for (std::size_t s = 0; s < net_->num_signals(); ++s) {
    const auto& sig = net_->signals()[s];
    spec.obs_sizes.push_back(static_cast<int>(3 * sig.incoming_lanes.size()) + sig.num_phases());
    spec.action_sizes.push_back(action_space(static_cast<int>(s)).size);
    spec.state_size += sig.num_phases();
  }
  spec.state_size += static_cast<int>(3 * net_->num_lanes());
  spec.episode_limit = config_.episode_limit;
  return spec;
}

int Environment::current_green(int agent) const {
  return sim_state().signals.at(static_cast<std::size_t>(agent)).active_green;
}

std::vector<Observation> Environment::observations() const {
  std::vector<Observation> out;
  out.reserve(net_->num_signals());
  for (std::size_t s = 0; s < net_->num_signals(); ++s) {
    out.push_back(observe(sim_state(), *net_, s, visibility_for(s)));
  }
  return out;
}

StepResult Environment::step(std::span<const int> joint_action) {
  if (!sim_) throw ContractError("step called before reset");
  if (steps_ >= config_.episode_limit) throw ContractError("episode already terminated; call reset");
  if (joint_action.size() != net_->num_signals()) {
    throw ContractError("expected " + std::to_string(net_->num_signals()) + " actions, got " +
                        std::to_string(joint_action.size()));
  }
  for (std::size_t s = 0; s < net_->num_signals(); ++s) {
    const int size = action_space(static_cast<int>(s)).size;
    if (joint_action[s] < 0 || joint_action[s] >= size) {
      throw ContractError("action " + std::to_string(joint_action[s]) + " for agent " + std::to_string(s) +
                          " (" + net_->signals()[s].id + ") is outside [0, " + std::to_string(size) + ")");
    }
  }
  for (std::size_t s = 0; s < net_->num_signals(); ++s) {
    const SignalState& sig = sim_->state().signals[s];
    const int target =
        resolve_action(config_.action_mode, joint_action[s], sig.active_green, net_->signals()[s].num_phases());
    sim_->set_phase(s, target);
  }
  for (int t = 0; t < config_.action_interval; ++t) {
    sim_->spawn();
    sim_->tick();
    if (observer_) observer_(sim_->state());
    sim_->advance_signals(config_.yellow_duration);
  }
  ++steps_;

  StepResult r;
  r.observations = observations();
  r.state = global_state();
  r.reward = compute_reward(sim_->state(), *net_);
  if (config_.local_reward) {
    for (std::size_t s = 0; s < net_->num_signals(); ++s) {
      double q = 0.0;
      for (std::size_t l : net_->topology(s).incoming) q += static_cast<double>(sim_->state().lanes[l].queued.size());
      r.local_rewards.push_back(-q);
    }
  }
  r.terminated = steps_ >= config_.episode_limit;
  r.info = gather_info(sim_->state(), *net_);
  return r;
}

}  // namespace tsclab
