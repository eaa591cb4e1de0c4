#pragma once

// Synthetic episodes, the one-step bandit, and finite-difference checks for
// every trainer architecture. Shared by the unit and acceptance suites.

#include <cmath>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "tsclab/marl.hpp"

namespace marlfix {

using tsclab::Episode;
using tsclab::GlobalState;
using tsclab::InputLayout;
using tsclab::Observation;
using tsclab::Rng;
using tsclab::nn::Mat;
using tsclab::nn::Vec;

inline InputLayout layout(int n_agents, int obs_dim, int n_actions, int state_dim) {
  InputLayout l;
  l.n_agents = n_agents;
  l.obs_dim = obs_dim;
  l.n_actions = n_actions;
  l.state_dim = state_dim;
  l.obs_sizes.assign(static_cast<std::size_t>(n_agents), obs_dim);
  l.action_sizes.assign(static_cast<std::size_t>(n_agents), n_actions);
  return l;
}

inline std::vector<Observation> random_obs(const InputLayout& l, Rng& rng) {
  std::vector<Observation> obs(static_cast<std::size_t>(l.n_agents));
  for (int i = 0; i < l.n_agents; ++i) {
    obs[static_cast<std::size_t>(i)].agent = i;
    for (int k = 0; k < l.obs_sizes[static_cast<std::size_t>(i)]; ++k) {
      obs[static_cast<std::size_t>(i)].values.push_back(rng.uniform());
    }
  }
  return obs;
}

inline GlobalState random_state(const InputLayout& l, Rng& rng) {
  GlobalState s;
  for (int k = 0; k < l.state_dim; ++k) s.values.push_back(rng.uniform());
  return s;
}

/// Random episode with uniform actions and rewards in [-1, 0].
inline Episode random_episode(const InputLayout& l, int steps, Rng& rng, bool with_state, bool terminal,
                              int reward_dim = 1) {
  Episode ep(l.n_agents, l.obs_dim, with_state ? l.state_dim : 0, reward_dim);
  GlobalState s = random_state(l, rng);
  ep.begin(random_obs(l, rng), with_state ? &s : nullptr);
  for (int t = 0; t < steps; ++t) {
    std::vector<int> a(static_cast<std::size_t>(l.n_agents));
    for (int i = 0; i < l.n_agents; ++i) {
      a[static_cast<std::size_t>(i)] =
          static_cast<int>(rng.below(static_cast<std::uint64_t>(l.action_sizes[static_cast<std::size_t>(i)])));
    }
    std::vector<double> r(static_cast<std::size_t>(reward_dim));
    for (auto& x : r) x = -rng.uniform();
    s = random_state(l, rng);
    ep.push(a, r, terminal && t + 1 == steps, random_obs(l, rng), with_state ? &s : nullptr);
  }
  return ep;
}

inline std::vector<std::shared_ptr<const Episode>> random_batch(const InputLayout& l, int episodes, int steps, Rng& rng,
                                                               bool with_state) {
  std::vector<std::shared_ptr<const Episode>> out;
  for (int e = 0; e < episodes; ++e) {
    out.push_back(std::make_shared<const Episode>(random_episode(l, steps, rng, with_state, rng.uniform() < 0.5)));
  }
  return out;
}

/// One agent, one constant observation, two actions; action 0 pays 1.
struct Bandit {
  InputLayout lay = layout(1, 1, 2, 0);

  Episode play(const tsclab::ActorCriticTrainer& trainer, Rng& rng) const {
    std::vector<Observation> obs{Observation{0, {1.0}}};
    Episode ep(1, 1, 0, 1);
    ep.policy_version = trainer.policy_version();
    ep.begin(obs, nullptr);
    const auto a = trainer.select_actions(obs, rng);
    const double r = a[0] == 0 ? 1.0 : 0.0;
    ep.push(a, std::span<const double>(&r, 1), true, obs, nullptr);
    return ep;
  }

  double best_prob(const tsclab::ActorCriticTrainer& trainer) const {
    std::vector<Observation> obs{Observation{0, {1.0}}};
    return trainer.policy(obs)(0, 0);
  }
};

/// Inputs the trainer builds for a batch: padded observation + agent one-hot per (step, agent).
inline Mat agent_inputs(const InputLayout& l, tsclab::EpisodeBatch batch, bool next) {
  std::size_t steps = 0;
  for (const auto& ep : batch) steps += static_cast<std::size_t>(ep->steps);
  Mat x = Mat::Zero(l.agent_input(), static_cast<Eigen::Index>(steps) * l.n_agents);
  Eigen::Index col = 0;
  for (const auto& ep : batch) {
    for (int t = 0; t < ep->steps; ++t) {
      for (int i = 0; i < l.n_agents; ++i, ++col) {
        const float* o = ep->obs_at(next ? t + 1 : t, i);
        for (int k = 0; k < l.obs_dim; ++k) x(k, col) = o[k];
        x(l.obs_dim + i, col) = 1.0;
      }
    }
  }
  return x;
}

inline Mat states(tsclab::EpisodeBatch batch) {
  std::size_t steps = 0;
  for (const auto& ep : batch) steps += static_cast<std::size_t>(ep->steps);
  Mat s(batch.front()->state_dim, static_cast<Eigen::Index>(steps));
  Eigen::Index col = 0;
  for (const auto& ep : batch) {
    for (int t = 0; t < ep->steps; ++t, ++col) {
      for (int k = 0; k < ep->state_dim; ++k) s(k, col) = ep->state_at(t)[k];
    }
  }
  return s;
}

inline void append(std::vector<bool>& out, const std::vector<bool>& more) { out.insert(out.end(), more.begin(), more.end()); }

inline std::vector<bool> sign_pattern(const Mat& m) {
  std::vector<bool> out;
  for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m.data()[i] > 0.0);
  return out;
}

/// Mixer switch points: hypernet ReLUs, abs signs and the ELU branch of each hidden unit.
inline std::vector<bool> mixer_pattern(const tsclab::MixingNet& m, const Mat& qs, const Mat& s) {
  tsclab::MixingNet copy = m;
  tsclab::MixingNet::Cache c;
  copy.forward(qs, s, &c);
  std::vector<bool> out;
  for (const auto* cache : {&c.w1, &c.w2, &c.v}) {
    for (std::size_t k = 1; k + 1 < cache->act.size(); ++k) append(out, sign_pattern(cache->act[k]));
  }
  append(out, sign_pattern(c.a1));
  append(out, sign_pattern(c.a2));
  append(out, sign_pattern(c.z));
  return out;
}

struct ArchResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;

  void add(const gradcheck::Result& r) {
    max_rel_error = std::max(max_rel_error, r.max_rel_error);
    checked += r.checked;
    skipped += r.skipped;
  }
};

inline tsclab::TrainerConfig small_config(tsclab::Algorithm algo, Rng& rng) {
  tsclab::TrainerConfig c;
  c.algorithm = algo;
  c.hidden_dim = 2 + static_cast<int>(rng.below(6));
  c.hidden_layers = 1 + static_cast<int>(rng.below(2));
  c.mixer_embed = 1 + static_cast<int>(rng.below(4));
  c.hypernet_hidden = 2 + static_cast<int>(rng.below(4));
  c.gamma = 0.9;
  return c;
}

inline InputLayout small_layout(Rng& rng) {
  return layout(1 + static_cast<int>(rng.below(3)), 1 + static_cast<int>(rng.below(4)),
                2 + static_cast<int>(rng.below(2)), 1 + static_cast<int>(rng.below(4)));
}

/// TD-loss gradient of a value trainer (agent net and, for QMIX, mixer) against finite differences.
inline ArchResult check_value_trainer(tsclab::Algorithm algo, int trials, Rng& rng) {
  ArchResult res{to_string(algo)};
  for (int trial = 0; trial < trials; ++trial) {
    const InputLayout l = small_layout(rng);
    const tsclab::ValueTrainer base(l, small_config(algo, rng), rng.next_u64());
    const auto batch = random_batch(l, 2, 3, rng, algo == tsclab::Algorithm::qmix);
    const auto g = base.loss_and_grad(batch);
    const Mat x = agent_inputs(l, batch, false);

    auto agent_loss = [&](const Vec& p) {
      tsclab::ValueTrainer t = base;
      t.agent().params() = p;
      return t.loss_and_grad(batch).loss;
    };
    // the target net is a constant, so a perturbed online net only moves chosen Q-values
    res.add(gradcheck::compare(agent_loss, base.agent().params(), g.agent, 1e-5,
                               [&](const Vec& p) { return gradcheck::relu_pattern(base.agent(), p, x); }));

    if (algo == tsclab::Algorithm::qmix) {
      const Mat s = states(batch);
      const Mat q = base.agent().forward(x);
      Mat qs(l.n_agents, x.cols() / l.n_agents);
      Eigen::Index col = 0;
      for (const auto& ep : batch) {
        for (int t = 0; t < ep->steps; ++t, ++col) {
          for (int i = 0; i < l.n_agents; ++i) qs(i, col) = q(ep->action(t, i), col * l.n_agents + i);
        }
      }
      // gamma = 0 removes the target mixer from the loss, so set_mixer (which also
      // replaces the target) perturbs only the online mixer
      tsclab::TrainerConfig c0 = base.config();
      c0.gamma = 0.0;
      tsclab::ValueTrainer t0(l, c0, 0);
      t0.agent() = base.agent();
      t0.set_mixer(base.mixer());
      const auto g0 = t0.loss_and_grad(batch);
      auto mixer_loss0 = [&](const Vec& p) {
        tsclab::MixingNet m = base.mixer();
        m.set_params(p);
        tsclab::ValueTrainer t = t0;
        t.set_mixer(m);
        return t.loss_and_grad(batch).loss;
      };
      res.add(gradcheck::compare(mixer_loss0, base.mixer().params(), g0.mixer, 1e-5, [&](const Vec& p) {
        tsclab::MixingNet m = base.mixer();
        m.set_params(p);
        return mixer_pattern(m, qs, s);
      }));
    }
  }
  return res;
}

/// Mixer output against finite differences in both its parameters and its Q inputs.
inline ArchResult check_mixer(int trials, Rng& rng) {
  ArchResult res{"qmix mixer"};
  for (int trial = 0; trial < trials; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(4));
    const int sd = 1 + static_cast<int>(rng.below(5));
    const int e = 1 + static_cast<int>(rng.below(5));
    const tsclab::MixingNet mix(n, sd, e, 2 + static_cast<int>(rng.below(5)), rng);
    const int b = 3;
    const Mat qs = Mat::NullaryExpr(n, b, [&] { return rng.uniform(-2.0, 2.0); });
    const Mat s = Mat::NullaryExpr(sd, b, [&] { return rng.uniform(); });
    const Vec w = Vec::NullaryExpr(b, [&] { return rng.uniform(-1.0, 1.0); });
    tsclab::MixingNet::Cache c;
    mix.forward(qs, s, &c);
    Vec grad;
    const Mat dq = mix.backward(c, w, grad);

    auto by_params = [&](const Vec& p) {
      tsclab::MixingNet m = mix;
      m.set_params(p);
      return m.forward(qs, s).dot(w);
    };
    res.add(gradcheck::compare(by_params, mix.params(), grad, 1e-5, [&](const Vec& p) {
      tsclab::MixingNet m = mix;
      m.set_params(p);
      return mixer_pattern(m, qs, s);
    }));
    auto by_q = [&](const Vec& flat) { return mix.forward(Eigen::Map<const Mat>(flat.data(), n, b), s).dot(w); };
    res.add(gradcheck::compare(by_q, Eigen::Map<const Vec>(qs.data(), qs.size()), Eigen::Map<const Vec>(dq.data(), dq.size()),
                               1e-5, [&](const Vec& flat) { return mixer_pattern(mix, Eigen::Map<const Mat>(flat.data(), n, b), s); }));
  }
  return res;
}

/// Actor (policy loss) and critic (value loss) gradients of an actor-critic trainer.
/// Episodes end in true terminals so the critic's loss has no bootstrap term.
inline ArchResult check_actor_critic(tsclab::Algorithm algo, int trials, Rng& rng) {
  ArchResult res{to_string(algo)};
  for (int trial = 0; trial < trials; ++trial) {
    const InputLayout l = small_layout(rng);
    const bool with_state = algo == tsclab::Algorithm::maa2c;
    const tsclab::ActorCriticTrainer base(l, small_config(algo, rng), rng.next_u64());
    std::vector<Episode> batch;
    for (int e = 0; e < 2; ++e) batch.push_back(random_episode(l, 3, rng, with_state, true));
    const auto g = base.losses_and_grads(batch);

    std::vector<std::shared_ptr<const Episode>> ptrs;
    for (const auto& ep : batch) ptrs.push_back(std::make_shared<const Episode>(ep));
    const Mat x = agent_inputs(l, ptrs, false);

    auto actor_loss = [&](const Vec& p) {
      tsclab::ActorCriticTrainer t = base;
      t.actor().params() = p;
      return t.losses_and_grads(batch).stats.policy_loss;
    };
    res.add(gradcheck::compare(actor_loss, base.actor().params(), g.actor, 1e-5,
                               [&](const Vec& p) { return gradcheck::relu_pattern(base.actor(), p, x); }));

    Mat c;
    {
      Eigen::Index total = 0;
      for (const auto& ep : batch) total += static_cast<Eigen::Index>(ep.steps + 1) * l.n_agents;
      c.resize(l.critic_input(algo), total);
      Eigen::Index col = 0;
      for (const auto& ep : batch) {
        for (int t = 0; t <= ep.steps; ++t) {
          for (int i = 0; i < l.n_agents; ++i, ++col) {
            c.col(col).setZero();
            const float* src = with_state ? ep.state_at(t) : ep.obs_at(t, i);
            const int dim = with_state ? l.state_dim : l.obs_dim;
            for (int k = 0; k < dim; ++k) c(k, col) = src[k];
            c(dim + i, col) = 1.0;
          }
        }
      }
    }
    auto critic_loss = [&](const Vec& p) {
      tsclab::ActorCriticTrainer t = base;
      t.critic().params() = p;
      return t.losses_and_grads(batch).stats.value_loss;
    };
    res.add(gradcheck::compare(critic_loss, base.critic().params(), g.critic, 1e-5,
                               [&](const Vec& p) { return gradcheck::relu_pattern(base.critic(), p, c); }));
  }
  return res;
}

}  // namespace marlfix
