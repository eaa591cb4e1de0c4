// tsclab command-line entry point.
#include <pthread.h>
#include <signal.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tsclab/envserver.hpp"
#include "tsclab/errors.hpp"
#include "tsclab/harness.hpp"
#include "tsclab/netgraph.hpp"

using namespace tsclab;
using nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

void fail_line(const std::string& kind, const std::string& what) {
  std::cerr << "error " << kind << ": " << one_line(what) << "\n";
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path + " is not valid JSON: " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

// Flags mirroring RunConfig keys. A key present in the config file wins over the flag.
struct RunFlags {
  std::string config;
  std::optional<std::int64_t> total_steps;
  std::optional<int> eval_interval, eval_episodes, parallel_envs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::string> controller;
  bool log_steps = false;

  void add_to(CLI::App* app, bool with_controller) {
    app->add_option("--config", config, "run config JSON")->required()->check(CLI::ExistingFile);
    app->add_option("--total-steps", total_steps, "total training env steps");
    app->add_option("--eval-interval", eval_interval, "episodes between evaluations");
    app->add_option("--eval-episodes", eval_episodes, "episodes per evaluation");
    app->add_option("--parallel-envs", parallel_envs, "environments stepped concurrently");
    app->add_option("--seed", seed, "run seed");
    app->add_option("--output-dir", output_dir, "directory for every output file");
    app->add_flag("--log-steps", log_steps, "also write per-step rows to steps.csv");
    if (with_controller) app->add_option("--controller", controller, "baseline controller kind");
  }

  RunConfig load() const {
    json doc = read_json(config);
    auto merge = [&](const char* key, const char* flag, const auto& value) {
      if (!value) return;
      if (doc.contains(key)) {
        std::cerr << "warning: " << flag << " ignored; " << config << " sets \"" << key << "\"\n";
        return;
      }
      doc[key] = *value;
    };
    merge("total_steps", "--total-steps", total_steps);
    merge("eval_interval", "--eval-interval", eval_interval);
    merge("eval_episodes", "--eval-episodes", eval_episodes);
    merge("parallel_envs", "--parallel-envs", parallel_envs);
    merge("seed", "--seed", seed);
    merge("output_dir", "--output-dir", output_dir);
    merge("controller", "--controller", controller);
    merge("log_steps", "--log-steps", log_steps ? std::optional<bool>(true) : std::nullopt);
    return RunConfig::from_json(doc, std::filesystem::path(config).parent_path());
  }
};

void print_progress(const std::string& line) {
  std::cout << line << std::endl;
}

void print_eval(const EvalReport& rep) {
  const EpisodeMetrics& m = rep.mean;
  json j{{"episodes", rep.episodes.size()}, {"queue", m.queue},         {"delay", m.delay},
         {"speed", m.speed},                {"occupancy", m.occupancy}, {"wait_time", m.wait_time},
         {"travel_time", m.travel_time},    {"return", m.episode_return}};
  std::cout << j.dump() << std::endl;
}

// ---- plot

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string svg_line_chart(const std::vector<std::pair<double, double>>& pts, const std::string& xlabel,
                           const std::string& ylabel, const std::string& title) {
  const double w = 640, h = 400, left = 70, right = 20, top = 40, bottom = 50;
  double x0 = pts.front().first, x1 = x0, y0 = pts.front().second, y1 = y0;
  for (auto [x, y] : pts) {
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  auto sy = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << left << "\" y=\"" << h - bottom + 16 << "\" text-anchor=\"middle\">" << format_number(x0) << "</text>\n";
  s << "<text x=\"" << w - right << "\" y=\"" << h - bottom + 16 << "\" text-anchor=\"middle\">" << format_number(x1) << "</text>\n";
  s << "<text x=\"" << left - 6 << "\" y=\"" << h - bottom << "\" text-anchor=\"end\">" << format_number(y0) << "</text>\n";
  s << "<text x=\"" << left - 6 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << format_number(y1) << "</text>\n";
  s << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  s << "<text x=\"16\" y=\"" << (top + h - bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (top + h - bottom) / 2 << ")\">" << ylabel << "</text>\n";
  s << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    s << (i ? " " : "") << format_number(sx(pts[i].first)) << "," << format_number(sy(pts[i].second));
  }
  s << "\"/>\n</svg>\n";
  return s.str();
}

int cmd_plot(const std::string& csv, const std::string& out, const std::string& xcol, const std::string& ycol,
             const std::string& phase) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(csv + " is empty");
  const auto header = split(line);
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto xi = column(xcol), yi = column(ycol), pi = column("phase");
  if (!xi) throw UsageError("column \"" + xcol + "\" not in " + csv);
  if (!yi) throw UsageError("column \"" + ycol + "\" not in " + csv);
  std::vector<std::pair<double, double>> pts;
  while (std::getline(in, line)) {
    const auto cells = split(line);
    if (cells.size() != header.size()) throw ParseError("row with " + std::to_string(cells.size()) + " cells in " + csv);
    if (pi && !phase.empty() && cells[*pi] != phase) continue;
    if (cells[*xi].empty() || cells[*yi].empty()) continue;
    pts.emplace_back(std::stod(cells[*xi]), std::stod(cells[*yi]));
  }
  if (pts.empty()) throw ParseError("no plottable rows in " + csv);
  write_text(out, svg_line_chart(pts, xcol, ycol, phase.empty() ? ycol : phase + " " + ycol));
  std::cout << "wrote " << out << " (" << pts.size() << " points)" << std::endl;
  return 0;
}

// ---- serve

int cmd_serve(const std::string& config_path, const std::string& bind, std::optional<std::uint64_t> seed) {
  json doc = read_json(config_path);
  const json env_doc = doc.contains("env") ? doc["env"] : doc;
  EnvConfig cfg = env_config_from_json(env_doc, std::filesystem::path(config_path).parent_path());
  if (seed) {
    if (env_doc.contains("seed")) {
      std::cerr << "warning: --seed ignored; " << config_path << " sets \"seed\"\n";
    } else {
      cfg.seed = *seed;
    }
  }
  // handle SIGINT/SIGTERM synchronously; worker threads inherit the blocked mask
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  EnvServer server(cfg, BindAddress::parse(bind));
  server.start();
  std::cout << "listening on " << BindAddress::parse(bind).host << ":" << server.port() << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  std::cout << "shutting down (" << server.live_sessions() << " live sessions)" << std::endl;
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tsclab: traffic signal control simulator, baselines and MARL trainers"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // grid
  auto* grid = app.add_subcommand("grid", "write a rows x cols grid network JSON");
  GridOptions gopt;
  std::string grid_out, scheme = "two_phase";
  std::optional<std::uint64_t> grid_seed;
  grid->add_option("--rows", gopt.rows, "intersection rows")->required()->check(CLI::PositiveNumber);
  grid->add_option("--cols", gopt.cols, "intersection columns")->required()->check(CLI::PositiveNumber);
  grid->add_option("--out", grid_out, "output network file")->required();
  grid->add_option("--edge-length", gopt.edge_length, "lane length in meters")->capture_default_str();
  grid->add_option("--speed-limit", gopt.speed_limit, "m/s")->capture_default_str();
  grid->add_option("--phase-scheme", scheme, "two_phase or four_phase")->capture_default_str();
  grid->add_option("--seed", grid_seed, "accepted for uniformity; grids are deterministic");

  // trips
  auto* trips = app.add_subcommand("trips", "write synthetic flows for a network");
  std::string trips_net, trips_out, pattern = "through";
  TripOptions topt;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> trips_seed;
  trips->add_option("--net", trips_net, "network file")->required()->check(CLI::ExistingFile);
  trips->add_option("--rate", topt.rate, "vehicles per hour per entry lane")->required()->check(CLI::NonNegativeNumber);
  trips->add_option("--out", trips_out, "output flows file")->required();
  trips->add_option("--pattern", pattern, "through or all_exits")->capture_default_str();
  trips->add_option("--override", overrides, "PREFIX=RATE for entry lanes whose id starts with PREFIX");
  trips->add_option("--start", topt.start, "flow start, seconds")->capture_default_str();
  trips->add_option("--end", topt.end, "flow end, seconds")->capture_default_str();
  trips->add_option("--seed", trips_seed, "accepted for uniformity; flows are rates, sampling happens in the simulator");

  // inspect
  auto* inspect = app.add_subcommand("inspect", "print network analytics as JSON");
  std::string inspect_net;
  std::optional<std::uint64_t> inspect_seed;
  inspect->add_option("--net", inspect_net, "network file")->required()->check(CLI::ExistingFile);
  inspect->add_option("--seed", inspect_seed, "accepted for uniformity");

  RunFlags base_flags, train_flags, eval_flags;
  auto* baseline = app.add_subcommand("run-baseline", "evaluate a rule-based controller");
  base_flags.add_to(baseline, true);
  auto* train_cmd = app.add_subcommand("train", "train a MARL algorithm");
  train_flags.add_to(train_cmd, false);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained checkpoint");
  eval_flags.add_to(eval_cmd, false);
  std::string checkpoint;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint JSON")->required()->check(CLI::ExistingFile);

  auto* serve = app.add_subcommand("serve", "serve an environment over TCP");
  std::string serve_config, bind = "127.0.0.1:5555";
  std::optional<std::uint64_t> serve_seed;
  serve->add_option("--config", serve_config, "env config or run config JSON")->required()->check(CLI::ExistingFile);
  serve->add_option("--bind", bind, "host:port; port 0 picks a free one")->capture_default_str();
  serve->add_option("--seed", serve_seed, "default reset seed");

  auto* plot = app.add_subcommand("plot", "draw one CSV column against another as SVG");
  std::string plot_csv, plot_out, xcol = "episode", ycol = "queue", phase = "eval";
  std::optional<std::uint64_t> plot_seed;
  plot->add_option("--csv", plot_csv, "metrics.csv or eval.csv")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", plot_out, "output SVG")->required();
  plot->add_option("--x", xcol, "x column")->capture_default_str();
  plot->add_option("--y", ycol, "y column")->capture_default_str();
  plot->add_option("--phase", phase, "keep rows with this phase; empty keeps all")->capture_default_str();
  plot->add_option("--seed", plot_seed, "accepted for uniformity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("usage", e.what());
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return kExitUsage;
  }

  try {
    if (*grid) {
      gopt.scheme = phase_scheme_from_string(scheme);
      const RoadNetwork net = generate_grid(gopt);
      write_text(grid_out, serialize_network(net).dump(1) + "\n");
      std::cout << "wrote " << grid_out << " (" << net.num_signals() << " signals, " << net.num_lanes() << " lanes)"
                << std::endl;
    } else if (*trips) {
      const RoadNetwork net = load_network_file(trips_net);
      if (pattern == "through") {
        topt.pattern = TripPattern::through;
      } else if (pattern == "all_exits") {
        topt.pattern = TripPattern::all_exits;
      } else {
        throw UsageError("--pattern must be through or all_exits");
      }
      for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("--override expects PREFIX=RATE, got " + o);
        try {
          topt.rate_overrides[o.substr(0, eq)] = std::stod(o.substr(eq + 1));
        } catch (const std::exception&) {
          throw UsageError("--override expects PREFIX=RATE, got " + o);
        }
      }
      const auto flows = generate_trips(net, topt);
      write_text(trips_out, serialize_flows(flows).dump(1) + "\n");
      std::cout << "wrote " << trips_out << " (" << flows.size() << " flows)" << std::endl;
    } else if (*inspect) {
      const RoadNetwork net = load_network_file(inspect_net);
      json j{{"signals", net.num_signals()},        {"lanes", net.num_lanes()},
             {"movements", net.movements().size()}, {"entry_lanes", net.entry_lanes().size()},
             {"exit_lanes", net.exit_lanes().size()}};
      json ids = json::array();
      for (const auto& s : net.signals()) ids.push_back(s.id);
      j["signal_ids"] = ids;
      j["adjacency"] = adjacency_matrix(net);
      j["centrality"] = net.num_signals() >= 2 ? json(degree_centrality(net)) : json();
      std::cout << j.dump() << std::endl;
    } else if (*baseline) {
      const RunConfig c = base_flags.load();
      if (!c.controller) throw UsageError("run-baseline needs a \"controller\" in the config or --controller");
      const RunSummary s = run_evaluation(c, std::nullopt, print_progress);
      print_eval(*s.last_eval);
    } else if (*train_cmd) {
      const RunConfig c = train_flags.load();
      if (!c.trainer) throw UsageError("train needs a \"trainer\" section in the config");
      const RunSummary s = train(c, print_progress);
      std::cout << "trained " << s.episodes << " episodes; final checkpoint " << s.last_checkpoint.string()
                << std::endl;
    } else if (*eval_cmd) {
      const RunConfig c = eval_flags.load();
      if (!c.trainer) throw UsageError("eval needs a \"trainer\" section in the config");
      const RunSummary s = run_evaluation(c, checkpoint, print_progress);
      print_eval(*s.last_eval);
    } else if (*serve) {
      return cmd_serve(serve_config, bind, serve_seed);
    } else if (*plot) {
      return cmd_plot(plot_csv, plot_out, xcol, ycol, phase);
    }
  } catch (const UsageError& e) {
    fail_line("usage", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    fail_line("config", e.what());
    return kExitRuntime;
  } catch (const ParseError& e) {
    fail_line("parse", e.what());
    return kExitRuntime;
  } catch (const IoError& e) {
    fail_line("io", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    fail_line("runtime", e.what());
    return kExitRuntime;
  }
  return 0;
}
