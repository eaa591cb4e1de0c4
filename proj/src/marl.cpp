#include "tsclab/marl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tsclab/errors.hpp"

namespace tsclab {

using nn::Mat;
using nn::Vec;

namespace {

std::vector<int> net_sizes(int in, int hidden, int layers, int out) {
  std::vector<int> s{in};
  for (int k = 0; k < layers; ++k) s.push_back(hidden);
  s.push_back(out);
  return s;
}

double sign(double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); }

int argmax_valid(const Mat& m, Eigen::Index col, int valid) {
  int best = 0;
  for (int a = 1; a < valid; ++a) {
    if (m(a, col) > m(best, col)) best = a;
  }
  return best;
}

void fill_column(Mat& x, Eigen::Index col, const float* values, int dim, int n_agents, int agent) {
  for (int k = 0; k < dim; ++k) x(k, col) = values[k];
  for (int k = 0; k < n_agents; ++k) x(dim + k, col) = 0.0;
  x(dim + agent, col) = 1.0;
}

std::size_t total_steps(EpisodeBatch batch) {
  std::size_t n = 0;
  for (const auto& ep : batch) n += static_cast<std::size_t>(ep->steps);
  return n;
}

/// Scales every gradient so their joint L2 norm is at most max_norm.
void clip_joint(std::initializer_list<Vec*> grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (Vec* g : grads) sq += g->squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    for (Vec* g : grads) *g *= max_norm / norm;
  }
}

}  // namespace

std::string to_string(Algorithm algo) {
  switch (algo) {
    case Algorithm::iql: return "iql";
    case Algorithm::vdn: return "vdn";
    case Algorithm::qmix: return "qmix";
    case Algorithm::ia2c: return "ia2c";
    case Algorithm::maa2c: return "maa2c";
  }
  return "unknown";
}

Algorithm algorithm_from_string(std::string_view name) {
  for (auto a : {Algorithm::iql, Algorithm::vdn, Algorithm::qmix, Algorithm::ia2c, Algorithm::maa2c}) {
    if (name == to_string(a)) return a;
  }
  throw ConfigError("unknown algorithm \"" + std::string(name) + "\"");
}

double epsilon_schedule(std::int64_t env_steps, double start, double finish, std::int64_t anneal_steps) {
  if (env_steps <= 0) return start;
  if (anneal_steps <= 0 || env_steps >= anneal_steps) return finish;
  const double frac = static_cast<double>(env_steps) / static_cast<double>(anneal_steps);
  return start + (finish - start) * frac;
}

TrainerConfig TrainerConfig::from_json(const nlohmann::json& doc) {
  TrainerConfig c;
  try {
    c.algorithm = algorithm_from_string(doc.value("algorithm", to_string(c.algorithm)));
    c.gamma = doc.value("gamma", c.gamma);
    c.lr = doc.value("lr", c.lr);
    c.hidden_dim = doc.value("hidden_dim", c.hidden_dim);
    c.hidden_layers = doc.value("hidden_layers", c.hidden_layers);
    c.batch_episodes = doc.value("batch_episodes", c.batch_episodes);
    c.buffer_episodes = doc.value("buffer_episodes", c.buffer_episodes);
    c.target_update_episodes = doc.value("target_update_episodes", c.target_update_episodes);
    c.epsilon_start = doc.value("epsilon_start", c.epsilon_start);
    c.epsilon_finish = doc.value("epsilon_finish", c.epsilon_finish);
    c.epsilon_anneal_steps = doc.value("epsilon_anneal_steps", c.epsilon_anneal_steps);
    c.mixer_embed = doc.value("mixer_embed", c.mixer_embed);
    c.hypernet_hidden = doc.value("hypernet_hidden", c.hypernet_hidden);
    c.entropy_coef = doc.value("entropy_coef", c.entropy_coef);
    c.grad_clip = doc.value("grad_clip", c.grad_clip);
    c.reward_scale = doc.value("reward_scale", c.reward_scale);
    c.local_reward = doc.value("local_reward", c.local_reward);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed trainer config: ") + e.what());
  }
  if (c.gamma < 0.0 || c.gamma > 1.0) throw ConfigError("gamma must lie in [0, 1]");
  if (c.lr <= 0.0) throw ConfigError("lr must be > 0");
  if (c.hidden_dim < 1 || c.hidden_layers < 0) throw ConfigError("hidden_dim must be >= 1 and hidden_layers >= 0");
  if (c.batch_episodes < 1 || c.buffer_episodes < c.batch_episodes) {
    throw ConfigError("need 1 <= batch_episodes <= buffer_episodes");
  }
  if (c.target_update_episodes < 1) throw ConfigError("target_update_episodes must be >= 1");
  if (c.mixer_embed < 1 || c.hypernet_hidden < 1) throw ConfigError("mixer sizes must be >= 1");
  return c;
}

nlohmann::json TrainerConfig::to_json() const {
  return {{"algorithm", to_string(algorithm)},
          {"gamma", gamma},
          {"lr", lr},
          {"hidden_dim", hidden_dim},
          {"hidden_layers", hidden_layers},
          {"batch_episodes", batch_episodes},
          {"buffer_episodes", buffer_episodes},
          {"target_update_episodes", target_update_episodes},
          {"epsilon_start", epsilon_start},
          {"epsilon_finish", epsilon_finish},
          {"epsilon_anneal_steps", epsilon_anneal_steps},
          {"mixer_embed", mixer_embed},
          {"hypernet_hidden", hypernet_hidden},
          {"entropy_coef", entropy_coef},
          {"grad_clip", grad_clip},
          {"reward_scale", reward_scale},
          {"local_reward", local_reward}};
}

// ---------------------------------------------------------------- layout / episodes

InputLayout InputLayout::from_spec(const EnvSpec& spec) {
  InputLayout l;
  l.n_agents = spec.n_agents;
  l.obs_sizes = spec.obs_sizes;
  l.action_sizes = spec.action_sizes;
  l.obs_dim = *std::max_element(spec.obs_sizes.begin(), spec.obs_sizes.end());
  l.n_actions = *std::max_element(spec.action_sizes.begin(), spec.action_sizes.end());
  l.state_dim = spec.state_size;
  return l;
}

Mat InputLayout::encode(std::span<const Observation> obs) const {
  if (static_cast<int>(obs.size()) != n_agents) throw ContractError("observation count does not match agent count");
  Mat x = Mat::Zero(agent_input(), n_agents);
  for (int i = 0; i < n_agents; ++i) {
    const auto& v = obs[static_cast<std::size_t>(i)].values;
    for (std::size_t k = 0; k < v.size() && static_cast<int>(k) < obs_dim; ++k) x(static_cast<Eigen::Index>(k), i) = v[k];
    x(obs_dim + i, i) = 1.0;
  }
  return x;
}

Episode::Episode(int n, int od, int sd, int rd) : n_agents(n), obs_dim(od), state_dim(sd), reward_dim(rd) {}

namespace {

void append_obs(std::vector<float>& out, std::span<const Observation> obs, int n_agents, int obs_dim) {
  if (static_cast<int>(obs.size()) != n_agents) throw ContractError("observation count does not match agent count");
  for (const auto& o : obs) {
    if (static_cast<int>(o.values.size()) > obs_dim) throw ContractError("observation wider than the layout");
    for (double v : o.values) out.push_back(static_cast<float>(v));
    for (std::size_t k = o.values.size(); k < static_cast<std::size_t>(obs_dim); ++k) out.push_back(0.0f);
  }
}

void append_state(std::vector<float>& out, const GlobalState* s, int state_dim) {
  if (state_dim == 0) return;
  if (!s || static_cast<int>(s->values.size()) != state_dim) throw ContractError("episode expects a global state");
  for (double v : s->values) out.push_back(static_cast<float>(v));
}

}  // namespace

void Episode::begin(std::span<const Observation> obs0, const GlobalState* state0) {
  obs.clear();
  state.clear();
  actions.clear();
  rewards.clear();
  done.clear();
  steps = 0;
  append_obs(obs, obs0, n_agents, obs_dim);
  append_state(state, state0, state_dim);
}

void Episode::push(std::span<const int> joint_action, std::span<const double> reward, bool terminal,
                   std::span<const Observation> next_obs, const GlobalState* next_state) {
  if (static_cast<int>(joint_action.size()) != n_agents) throw ContractError("joint action has the wrong arity");
  if (static_cast<int>(reward.size()) != reward_dim) throw ContractError("reward has the wrong width");
  actions.insert(actions.end(), joint_action.begin(), joint_action.end());
  rewards.insert(rewards.end(), reward.begin(), reward.end());
  done.push_back(terminal ? 1 : 0);
  append_obs(obs, next_obs, n_agents, obs_dim);
  append_state(state, next_state, state_dim);
  ++steps;
}

EpisodeBuffer::EpisodeBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw ConfigError("episode buffer capacity must be >= 1");
}

void EpisodeBuffer::add(Episode episode) {
  auto item = std::make_shared<const Episode>(std::move(episode));
  if (items_.size() < capacity_) {
    items_.push_back(std::move(item));
  } else {
    items_[next_] = std::move(item);
  }
  next_ = (next_ + 1) % capacity_;
}

std::vector<std::shared_ptr<const Episode>> EpisodeBuffer::sample(std::size_t count, Rng& rng) const {
  if (items_.size() < count) {
    throw NotReadyError("buffer holds " + std::to_string(items_.size()) + " episodes, batch needs " +
                        std::to_string(count));
  }
  // partial Fisher-Yates over indices
  std::vector<std::size_t> idx(items_.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::shared_ptr<const Episode>> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t j = k + static_cast<std::size_t>(rng.below(idx.size() - k));
    std::swap(idx[k], idx[j]);
    out.push_back(items_[idx[k]]);
  }
  return out;
}

// ---------------------------------------------------------------- mixer

MixingNet::MixingNet(int n_agents, int state_dim, int embed, int hyper_hidden, Rng& rng)
    : n_agents_(n_agents),
      embed_(embed),
      hyper_w1_({state_dim, hyper_hidden, n_agents * embed}, rng),
      hyper_w2_({state_dim, hyper_hidden, embed}, rng),
      hyper_b1_({state_dim, embed}, rng),
      value_({state_dim, embed, 1}, rng) {}

MixingNet MixingNet::identity(int state_dim) {
  MixingNet m;
  m.n_agents_ = 1;
  m.embed_ = 1;
  m.linear_ = true;
  m.frozen_ = true;
  m.hyper_w1_ = nn::DenseNet({state_dim, 1});
  m.hyper_w2_ = nn::DenseNet({state_dim, 1});
  m.hyper_b1_ = nn::DenseNet({state_dim, 1});
  m.value_ = nn::DenseNet({state_dim, 1});
  m.hyper_w1_.bias(0)[0] = 1.0;
  m.hyper_w2_.bias(0)[0] = 1.0;
  return m;
}

Vec MixingNet::forward(const Mat& qs, const Mat& states, Cache* cache) const {
  if (qs.rows() != n_agents_ || qs.cols() != states.cols()) throw ContractError("mixer input shapes disagree");
  Cache local;
  Cache& c = cache ? *cache : local;
  c.a1 = hyper_w1_.forward(states, &c.w1);
  c.a2 = hyper_w2_.forward(states, &c.w2);
  c.z = hyper_b1_.forward(states, &c.b1);
  const Mat v = value_.forward(states, &c.v);
  for (int i = 0; i < n_agents_; ++i) {
    c.z.array() += c.a1.middleRows(static_cast<Eigen::Index>(i) * embed_, embed_).array().abs() *
                   qs.row(i).replicate(embed_, 1).array();
  }
  if (linear_) {
    c.h = c.z;
  } else {
    c.h = c.z.unaryExpr([](double x) { return x > 0.0 ? x : std::expm1(x); });
  }
  c.qs = qs;
  return (c.a2.array().abs() * c.h.array()).colwise().sum().transpose() + v.row(0).transpose().array();
}

Mat MixingNet::backward(const Cache& c, const Vec& dqtot, Vec& grad) const {
  const Eigen::Index b = dqtot.size();
  const Mat g = dqtot.transpose().replicate(embed_, 1);  // [E x B]
  const Mat dv = dqtot.transpose();
  const Mat da2 = (c.a2.unaryExpr(&sign).array() * c.h.array() * g.array()).matrix();
  Mat dz = (c.a2.array().abs() * g.array()).matrix();
  if (!linear_) dz.array() *= c.z.unaryExpr([](double x) { return x > 0.0 ? 1.0 : std::exp(x); }).array();

  Mat da1(static_cast<Eigen::Index>(n_agents_) * embed_, b);
  Mat dqs(n_agents_, b);
  for (int i = 0; i < n_agents_; ++i) {
    const auto a1i = c.a1.middleRows(static_cast<Eigen::Index>(i) * embed_, embed_);
    da1.middleRows(static_cast<Eigen::Index>(i) * embed_, embed_) =
        (a1i.unaryExpr(&sign).array() * dz.array() * c.qs.row(i).replicate(embed_, 1).array()).matrix();
    dqs.row(i) = (a1i.array().abs() * dz.array()).colwise().sum();
  }

  if (grad.size() != static_cast<Eigen::Index>(num_params())) grad = Vec::Zero(static_cast<Eigen::Index>(num_params()));
  Eigen::Index off = 0;
  auto accumulate = [&](const nn::DenseNet& net, const nn::DenseNet::Cache& cache, const Mat& dy) {
    Vec part;
    net.backward(cache, dy, part);
    grad.segment(off, part.size()) += part;
    off += part.size();
  };
  accumulate(hyper_w1_, c.w1, da1);
  accumulate(hyper_w2_, c.w2, da2);
  accumulate(hyper_b1_, c.b1, dz);
  accumulate(value_, c.v, dv);
  return dqs;
}

Mat MixingNet::first_weights(const Vec& state) const {
  const Vec a = hyper_w1_.predict(state).cwiseAbs();
  Mat w(n_agents_, embed_);
  for (int i = 0; i < n_agents_; ++i) {
    for (int k = 0; k < embed_; ++k) w(i, k) = a[static_cast<Eigen::Index>(i) * embed_ + k];
  }
  return w;
}

Vec MixingNet::second_weights(const Vec& state) const { return hyper_w2_.predict(state).cwiseAbs(); }

std::size_t MixingNet::num_params() const {
  return hyper_w1_.num_params() + hyper_w2_.num_params() + hyper_b1_.num_params() + value_.num_params();
}

Vec MixingNet::params() const {
  Vec p(static_cast<Eigen::Index>(num_params()));
  p << hyper_w1_.params(), hyper_w2_.params(), hyper_b1_.params(), value_.params();
  return p;
}

void MixingNet::set_params(const Vec& p) {
  if (p.size() != static_cast<Eigen::Index>(num_params())) throw ContractError("mixer parameter count mismatch");
  Eigen::Index off = 0;
  for (nn::DenseNet* net : {&hyper_w1_, &hyper_w2_, &hyper_b1_, &value_}) {
    const auto n = static_cast<Eigen::Index>(net->num_params());
    net->params() = p.segment(off, n);
    off += n;
  }
}

nlohmann::json MixingNet::to_json() const {
  return {{"n_agents", n_agents_},          {"embed", embed_},
          {"linear", linear_},              {"frozen", frozen_},
          {"hyper_w1", hyper_w1_.to_json()}, {"hyper_w2", hyper_w2_.to_json()},
          {"hyper_b1", hyper_b1_.to_json()}, {"value", value_.to_json()}};
}

MixingNet MixingNet::from_json(const nlohmann::json& doc) {
  try {
    MixingNet m;
    m.n_agents_ = doc.at("n_agents").get<int>();
    m.embed_ = doc.at("embed").get<int>();
    m.linear_ = doc.at("linear").get<bool>();
    m.frozen_ = doc.at("frozen").get<bool>();
    m.hyper_w1_ = nn::DenseNet::from_json(doc.at("hyper_w1"));
    m.hyper_w2_ = nn::DenseNet::from_json(doc.at("hyper_w2"));
    m.hyper_b1_ = nn::DenseNet::from_json(doc.at("hyper_b1"));
    m.value_ = nn::DenseNet::from_json(doc.at("value"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed mixer: ") + e.what());
  }
}

// ---------------------------------------------------------------- value trainer

ValueTrainer::ValueTrainer(InputLayout layout, TrainerConfig config, std::uint64_t seed)
    : layout_(std::move(layout)), config_(config) {
  if (!is_value_based(config_.algorithm)) throw ConfigError(to_string(config_.algorithm) + " is not a value-based algorithm");
  Rng rng(seed);
  agent_ = nn::DenseNet(net_sizes(layout_.agent_input(), config_.hidden_dim, config_.hidden_layers, layout_.n_actions), rng);
  target_agent_ = agent_;
  agent_opt_ = nn::AdamState(agent_.num_params());
  if (config_.algorithm == Algorithm::qmix) {
    if (layout_.state_dim < 1) throw ConfigError("qmix needs a global state");
    mixer_ = MixingNet(layout_.n_agents, layout_.state_dim, config_.mixer_embed, config_.hypernet_hidden, rng);
    target_mixer_ = mixer_;
    mixer_opt_ = nn::AdamState(mixer_.num_params());
  }
}

void ValueTrainer::set_mixer(MixingNet mixer) {
  if (config_.algorithm != Algorithm::qmix) throw ContractError("only qmix has a mixer");
  if (mixer.n_agents() != layout_.n_agents) throw ContractError("mixer agent count mismatch");
  mixer_ = std::move(mixer);
  target_mixer_ = mixer_;
  mixer_opt_ = nn::AdamState(mixer_.num_params());
}

Mat ValueTrainer::q_values(std::span<const Observation> obs) const { return agent_.forward(layout_.encode(obs)); }

std::vector<int> ValueTrainer::select_actions(std::span<const Observation> obs, double epsilon, Rng& rng) const {
  const Mat q = q_values(obs);
  std::vector<int> out(static_cast<std::size_t>(layout_.n_agents));
  for (int i = 0; i < layout_.n_agents; ++i) {
    const int valid = layout_.action_sizes[static_cast<std::size_t>(i)];
    if (rng.uniform() < epsilon) {
      out[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(valid)));
    } else {
      out[static_cast<std::size_t>(i)] = argmax_valid(q, i, valid);
    }
  }
  return out;
}

ValueTrainer::Gradients ValueTrainer::loss_and_grad(EpisodeBatch batch) const {
  const int n = layout_.n_agents;
  const int od = layout_.obs_dim;
  const auto steps = static_cast<Eigen::Index>(total_steps(batch));
  if (steps == 0) throw ContractError("empty training batch");
  const bool qmix = config_.algorithm == Algorithm::qmix;

  Mat x(layout_.agent_input(), steps * n);
  Mat xn(layout_.agent_input(), steps * n);
  Mat s, sn;
  if (qmix) {
    s.resize(layout_.state_dim, steps);
    sn.resize(layout_.state_dim, steps);
  }
  Eigen::Index row = 0;
  for (const auto& ep : batch) {
    if (ep->n_agents != n || ep->obs_dim != od) throw ContractError("episode shape does not match the trainer");
    if (qmix && ep->state_dim != layout_.state_dim) throw ContractError("qmix needs episodes with global state");
    for (int t = 0; t < ep->steps; ++t, ++row) {
      for (int i = 0; i < n; ++i) {
        fill_column(x, row * n + i, ep->obs_at(t, i), od, n, i);
        fill_column(xn, row * n + i, ep->obs_at(t + 1, i), od, n, i);
      }
      if (qmix) {
        for (int k = 0; k < layout_.state_dim; ++k) {
          s(k, row) = ep->state_at(t)[k];
          sn(k, row) = ep->state_at(t + 1)[k];
        }
      }
    }
  }

  nn::DenseNet::Cache cache;
  const Mat q = agent_.forward(x, &cache);
  const Mat qn = target_agent_.forward(xn);

  Mat chosen(n, steps), next_max(n, steps);
  Vec reward(steps), not_done(steps);
  std::vector<int> act(static_cast<std::size_t>(steps * n));
  Mat local_r(n, steps);
  row = 0;
  for (const auto& ep : batch) {
    for (int t = 0; t < ep->steps; ++t, ++row) {
      double r = 0.0;
      for (int i = 0; i < n; ++i) {
        const int a = ep->action(t, i);
        const int valid = layout_.action_sizes[static_cast<std::size_t>(i)];
        if (a < 0 || a >= valid) throw ContractError("stored action outside the agent's action space");
        act[static_cast<std::size_t>(row * n + i)] = a;
        chosen(i, row) = q(a, row * n + i);
        next_max(i, row) = qn(argmax_valid(qn, row * n + i, valid), row * n + i);
        local_r(i, row) = ep->reward(t, i) * config_.reward_scale;
      }
      if (ep->reward_dim == 1) {
        r = ep->reward(t, 0);
      } else {
        for (int i = 0; i < n; ++i) r += ep->reward(t, i);
      }
      reward[row] = r * config_.reward_scale;
      not_done[row] = ep->done[static_cast<std::size_t>(t)] ? 0.0 : 1.0;
    }
  }

  Gradients out;
  const double inv = 1.0 / static_cast<double>(steps);
  Mat dchosen(n, steps);
  switch (config_.algorithm) {
    case Algorithm::iql: {
      const Mat y = local_r + config_.gamma * next_max.cwiseProduct(not_done.transpose().replicate(n, 1));
      const Mat diff = chosen - y;
      out.loss = diff.squaredNorm() * inv;
      dchosen = 2.0 * inv * diff;
      break;
    }
    case Algorithm::vdn: {
      const Vec qtot = chosen.colwise().sum().transpose();
      const Vec y = reward + config_.gamma * not_done.cwiseProduct(next_max.colwise().sum().transpose());
      const Vec diff = qtot - y;
      out.loss = diff.squaredNorm() * inv;
      dchosen = (2.0 * inv * diff).transpose().replicate(n, 1);
      break;
    }
    case Algorithm::qmix: {
      MixingNet::Cache mc;
      const Vec qtot = mixer_.forward(chosen, s, &mc);
      const Vec y = reward + config_.gamma * not_done.cwiseProduct(target_mixer_.forward(next_max, sn));
      const Vec diff = qtot - y;
      out.loss = diff.squaredNorm() * inv;
      Vec gm;
      dchosen = mixer_.backward(mc, 2.0 * inv * diff, gm);
      if (!mixer_.frozen()) out.mixer = std::move(gm);
      break;
    }
    default: throw ContractError("not a value-based algorithm");
  }

  Mat dq = Mat::Zero(layout_.n_actions, steps * n);
  for (Eigen::Index c = 0; c < steps * n; ++c) dq(act[static_cast<std::size_t>(c)], c) = dchosen(c % n, c / n);
  agent_.backward(cache, dq, out.agent);
  return out;
}

double ValueTrainer::td_update(EpisodeBatch batch) {
  Gradients g = loss_and_grad(batch);
  if (g.mixer.size() > 0) {
    clip_joint({&g.agent, &g.mixer}, config_.grad_clip);
  } else {
    clip_joint({&g.agent}, config_.grad_clip);
  }
  nn::adam_step(agent_.params(), g.agent, agent_opt_, config_.lr);
  if (g.mixer.size() > 0) {
    Vec p = mixer_.params();
    nn::adam_step(p, g.mixer, mixer_opt_, config_.lr);
    mixer_.set_params(p);
  }
  ++updates_;
  return g.loss;
}

double ValueTrainer::train(const EpisodeBuffer& buffer, Rng& rng) {
  const auto batch = buffer.sample(static_cast<std::size_t>(config_.batch_episodes), rng);
  return td_update(batch);
}

bool ValueTrainer::target_sync(std::int64_t episodes) {
  if (episodes - last_sync_ < config_.target_update_episodes) return false;
  sync_target();
  last_sync_ = episodes;
  return true;
}

void ValueTrainer::sync_target() {
  target_agent_ = agent_;
  target_mixer_ = mixer_;
}

nlohmann::json ValueTrainer::to_json() const {
  nlohmann::json j{{"config", config_.to_json()},
                   {"agent", agent_.to_json()},
                   {"target_agent", target_agent_.to_json()},
                   {"agent_opt", agent_opt_.to_json()},
                   {"updates", updates_},
                   {"last_sync", last_sync_}};
  if (config_.algorithm == Algorithm::qmix) {
    j["mixer"] = mixer_.to_json();
    j["target_mixer"] = target_mixer_.to_json();
    j["mixer_opt"] = mixer_opt_.to_json();
  }
  return j;
}

void ValueTrainer::load_json(const nlohmann::json& doc) {
  try {
    auto agent = nn::DenseNet::from_json(doc.at("agent"));
    if (agent.sizes() != agent_.sizes()) throw ParseError("checkpoint agent shape does not match this environment");
    agent_ = std::move(agent);
    target_agent_ = nn::DenseNet::from_json(doc.at("target_agent"));
    agent_opt_ = nn::AdamState::from_json(doc.at("agent_opt"));
    updates_ = doc.at("updates").get<std::int64_t>();
    last_sync_ = doc.at("last_sync").get<std::int64_t>();
    if (config_.algorithm == Algorithm::qmix) {
      mixer_ = MixingNet::from_json(doc.at("mixer"));
      target_mixer_ = MixingNet::from_json(doc.at("target_mixer"));
      mixer_opt_ = nn::AdamState::from_json(doc.at("mixer_opt"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------- actor-critic

double policy_entropy(const Vec& logits, int valid) {
  const Vec lp = nn::log_softmax(logits.head(valid));
  return -(lp.array().exp() * lp.array()).sum();
}

Vec a2c_logit_grad(const Vec& logits, int action, double advantage, double entropy_coef, int valid) {
  const Vec lp = nn::log_softmax(logits.head(valid));
  const Vec p = lp.array().exp();
  const double h = -(p.array() * lp.array()).sum();
  Vec g = Vec::Zero(logits.size());
  for (int j = 0; j < valid; ++j) {
    const double onehot = j == action ? 1.0 : 0.0;
    g[j] = -advantage * (onehot - p[j]) + entropy_coef * p[j] * (lp[j] + h);
  }
  return g;
}

ActorCriticTrainer::ActorCriticTrainer(InputLayout layout, TrainerConfig config, std::uint64_t seed)
    : layout_(std::move(layout)), config_(config) {
  if (is_value_based(config_.algorithm)) throw ConfigError(to_string(config_.algorithm) + " is not an actor-critic algorithm");
  if (config_.algorithm == Algorithm::maa2c && layout_.state_dim < 1) throw ConfigError("maa2c needs a global state");
  Rng rng(seed);
  actor_ = nn::DenseNet(net_sizes(layout_.agent_input(), config_.hidden_dim, config_.hidden_layers, layout_.n_actions), rng);
  critic_ = nn::DenseNet(net_sizes(layout_.critic_input(config_.algorithm), config_.hidden_dim, config_.hidden_layers, 1), rng);
  actor_opt_ = nn::AdamState(actor_.num_params());
  critic_opt_ = nn::AdamState(critic_.num_params());
}

Mat ActorCriticTrainer::logits(std::span<const Observation> obs) const { return actor_.forward(layout_.encode(obs)); }

Mat ActorCriticTrainer::policy(std::span<const Observation> obs) const {
  const Mat z = logits(obs);
  Mat p = Mat::Zero(z.rows(), z.cols());
  for (int i = 0; i < layout_.n_agents; ++i) {
    const int valid = layout_.action_sizes[static_cast<std::size_t>(i)];
    p.col(i).head(valid) = nn::softmax(z.col(i).head(valid));
  }
  return p;
}

std::vector<int> ActorCriticTrainer::select_actions(std::span<const Observation> obs, Rng& rng, bool greedy) const {
  const Mat p = policy(obs);
  std::vector<int> out(static_cast<std::size_t>(layout_.n_agents));
  for (int i = 0; i < layout_.n_agents; ++i) {
    const int valid = layout_.action_sizes[static_cast<std::size_t>(i)];
    if (greedy) {
      out[static_cast<std::size_t>(i)] = argmax_valid(p, i, valid);
    } else {
      const Vec col = p.col(i).head(valid);
      out[static_cast<std::size_t>(i)] =
          static_cast<int>(rng.categorical(std::span<const double>(col.data(), static_cast<std::size_t>(valid))));
    }
  }
  return out;
}

Mat ActorCriticTrainer::critic_inputs(const Episode& ep, int t) const {
  const int n = layout_.n_agents;
  Mat c(layout_.critic_input(config_.algorithm), n);
  for (int i = 0; i < n; ++i) {
    if (config_.algorithm == Algorithm::maa2c) {
      fill_column(c, i, ep.state_at(t), layout_.state_dim, n, i);
    } else {
      fill_column(c, i, ep.obs_at(t, i), layout_.obs_dim, n, i);
    }
  }
  return c;
}

ActorCriticTrainer::Gradients ActorCriticTrainer::losses_and_grads(std::span<const Episode> batch) const {
  const int n = layout_.n_agents;
  Eigen::Index steps = 0;
  for (const auto& ep : batch) {
    if (ep.n_agents != n || ep.obs_dim != layout_.obs_dim) throw ContractError("episode shape does not match the trainer");
    if (config_.algorithm == Algorithm::maa2c && ep.state_dim != layout_.state_dim) {
      throw ContractError("maa2c needs episodes with global state");
    }
    steps += ep.steps;
  }
  if (steps == 0) throw ContractError("empty training batch");
  const Eigen::Index m = steps * n;
  const auto episodes = static_cast<Eigen::Index>(batch.size());

  // columns [0, m): visited (t, agent); [m, m + episodes*n): bootstrap inputs at the final time point
  Mat x(layout_.agent_input(), m);
  Mat c(layout_.critic_input(config_.algorithm), m + episodes * n);
  Eigen::Index row = 0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const Episode& ep = batch[e];
    for (int t = 0; t < ep.steps; ++t, ++row) {
      for (int i = 0; i < n; ++i) fill_column(x, row * n + i, ep.obs_at(t, i), layout_.obs_dim, n, i);
      c.middleCols(row * n, n) = critic_inputs(ep, t);
    }
    c.middleCols(m + static_cast<Eigen::Index>(e) * n, n) = critic_inputs(ep, ep.steps);
  }

  nn::DenseNet::Cache acache, ccache;
  const Mat z = actor_.forward(x, &acache);
  const Mat v = critic_.forward(c, &ccache);

  Gradients out;
  Mat dz = Mat::Zero(z.rows(), m);
  Mat dv = Mat::Zero(1, v.cols());
  const double inv = 1.0 / static_cast<double>(m);
  double pg = 0.0, vl = 0.0, ent = 0.0;
  row = 0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const Episode& ep = batch[e];
    for (int i = 0; i < n; ++i) {
      const int valid = layout_.action_sizes[static_cast<std::size_t>(i)];
      double ret = v(0, m + static_cast<Eigen::Index>(e) * n + i);  // bootstrap value, treated as a constant
      for (int t = ep.steps - 1; t >= 0; --t) {
        const Eigen::Index col = (row + t) * n + i;
        const double not_done = ep.done[static_cast<std::size_t>(t)] ? 0.0 : 1.0;
        ret = ep.reward(t, i) * config_.reward_scale + config_.gamma * not_done * ret;
        const double adv = ret - v(0, col);
        const int a = ep.action(t, i);
        if (a < 0 || a >= valid) throw ContractError("stored action outside the agent's action space");
        const Vec zc = z.col(col);
        const Vec lp = nn::log_softmax(zc.head(valid));
        const double h = -(lp.array().exp() * lp.array()).sum();
        pg += -adv * lp[a];
        ent += h;
        vl += adv * adv;
        dz.col(col) = a2c_logit_grad(zc, a, adv, config_.entropy_coef, valid) * inv;
        dv(0, col) = -2.0 * adv * inv;
      }
    }
    row += ep.steps;
  }
  out.stats.entropy = ent * inv;
  out.stats.policy_loss = pg * inv - config_.entropy_coef * out.stats.entropy;
  out.stats.value_loss = vl * inv;
  actor_.backward(acache, dz, out.actor);
  critic_.backward(ccache, dv, out.critic);
  return out;
}

ActorCriticTrainer::Stats ActorCriticTrainer::a2c_update(std::span<const Episode> batch) {
  for (const auto& ep : batch) {
    if (ep.policy_version != version_) {
      throw ContractError("stale trajectory: generated under policy version " + std::to_string(ep.policy_version) +
                          ", current version is " + std::to_string(version_));
    }
  }
  Gradients g = losses_and_grads(batch);
  clip_joint({&g.actor}, config_.grad_clip);
  clip_joint({&g.critic}, config_.grad_clip);
  nn::adam_step(actor_.params(), g.actor, actor_opt_, config_.lr);
  nn::adam_step(critic_.params(), g.critic, critic_opt_, config_.lr);
  ++version_;
  return g.stats;
}

nlohmann::json ActorCriticTrainer::to_json() const {
  return {{"config", config_.to_json()},         {"actor", actor_.to_json()},
          {"critic", critic_.to_json()},         {"actor_opt", actor_opt_.to_json()},
          {"critic_opt", critic_opt_.to_json()}, {"policy_version", version_}};
}

void ActorCriticTrainer::load_json(const nlohmann::json& doc) {
  try {
    auto actor = nn::DenseNet::from_json(doc.at("actor"));
    auto critic = nn::DenseNet::from_json(doc.at("critic"));
    if (actor.sizes() != actor_.sizes() || critic.sizes() != critic_.sizes()) {
      throw ParseError("checkpoint network shape does not match this environment");
    }
    actor_ = std::move(actor);
    critic_ = std::move(critic);
    actor_opt_ = nn::AdamState::from_json(doc.at("actor_opt"));
    critic_opt_ = nn::AdamState::from_json(doc.at("critic_opt"));
    version_ = doc.at("policy_version").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace tsclab
