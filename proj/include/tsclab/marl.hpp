#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsclab/env.hpp"
#include "tsclab/rng.hpp"
#include "tsclab/tinynn.hpp"

namespace tsclab {

enum class Algorithm { iql, vdn, qmix, ia2c, maa2c };

std::string to_string(Algorithm algo);
Algorithm algorithm_from_string(std::string_view name);
inline bool is_value_based(Algorithm a) { return a == Algorithm::iql || a == Algorithm::vdn || a == Algorithm::qmix; }
inline bool needs_state(Algorithm a) { return a == Algorithm::qmix || a == Algorithm::maa2c; }

/// Linear anneal from start to finish over anneal_steps env steps, constant afterwards.
double epsilon_schedule(std::int64_t env_steps, double start = 1.0, double finish = 0.05,
                        std::int64_t anneal_steps = 50000);

struct TrainerConfig {
  Algorithm algorithm = Algorithm::iql;
  double gamma = 0.99;
  double lr = 0.0005;
  int hidden_dim = 64;
  int hidden_layers = 2;
  int batch_episodes = 32;
  int buffer_episodes = 5000;
  int target_update_episodes = 200;
  double epsilon_start = 1.0;
  double epsilon_finish = 0.05;
  std::int64_t epsilon_anneal_steps = 50000;
  int mixer_embed = 32;
  int hypernet_hidden = 64;
  double entropy_coef = 0.01;
  double grad_clip = 10.0;  // L2 norm over all trained parameters; <= 0 disables
  double reward_scale = 1.0;
  bool local_reward = false;

  static TrainerConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

/// Shapes shared by every agent under parameter sharing: observations are
/// zero-padded to obs_dim and actions beyond an agent's own count are masked.
struct InputLayout {
  int n_agents = 0;
  int obs_dim = 0;
  int n_actions = 0;
  int state_dim = 0;
  std::vector<int> obs_sizes;
  std::vector<int> action_sizes;

  static InputLayout from_spec(const EnvSpec& spec);
  int agent_input() const { return obs_dim + n_agents; }
  int critic_input(Algorithm a) const { return (a == Algorithm::maa2c ? state_dim : obs_dim) + n_agents; }

  /// Agent inputs (padded observation then agent one-hot), one column per agent.
  nn::Mat encode(std::span<const Observation> obs) const;
};

/// One complete episode. Observations and states are stored for steps+1
/// time points so the last transition can bootstrap.
struct Episode {
  int n_agents = 0;
  int obs_dim = 0;
  int state_dim = 0;   // 0 when the global state was not recorded
  int reward_dim = 1;  // 1 for the shared reward, n_agents for local rewards
  int steps = 0;
  std::vector<float> obs;          // [(steps+1) x n_agents x obs_dim]
  std::vector<float> state;        // [(steps+1) x state_dim]
  std::vector<int> actions;        // [steps x n_agents]
  std::vector<double> rewards;     // [steps x reward_dim]
  std::vector<std::uint8_t> done;  // [steps]; 1 only for true terminals
  std::uint64_t policy_version = 0;

  Episode() = default;
  Episode(int n_agents, int obs_dim, int state_dim, int reward_dim);

  void begin(std::span<const Observation> obs0, const GlobalState* state0);
  void push(std::span<const int> joint_action, std::span<const double> reward, bool terminal,
            std::span<const Observation> next_obs, const GlobalState* next_state);

  const float* obs_at(int t, int agent) const {
    return obs.data() + (static_cast<std::size_t>(t) * n_agents + agent) * obs_dim;
  }
  const float* state_at(int t) const { return state.data() + static_cast<std::size_t>(t) * state_dim; }
  int action(int t, int agent) const { return actions[static_cast<std::size_t>(t) * n_agents + agent]; }
  double reward(int t, int agent) const {
    return rewards[static_cast<std::size_t>(t) * reward_dim + (reward_dim == 1 ? 0 : agent)];
  }
};

/// Ring buffer of complete episodes; the oldest is overwritten once full.
class EpisodeBuffer {
 public:
  explicit EpisodeBuffer(std::size_t capacity = 5000);

  void add(Episode episode);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  /// `count` distinct episodes drawn uniformly; throws NotReadyError when fewer are stored.
  std::vector<std::shared_ptr<const Episode>> sample(std::size_t count, Rng& rng) const;
  const Episode& at(std::size_t i) const { return *items_.at(i); }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<std::shared_ptr<const Episode>> items_;
};

using EpisodeBatch = std::span<const std::shared_ptr<const Episode>>;

/// QMIX mixer: hypernetworks turn the global state into non-negative mixing
/// weights (absolute value) and free biases; two mixing layers with ELU between.
class MixingNet {
 public:
  struct Cache {
    nn::DenseNet::Cache w1, w2, b1, v;
    nn::Mat a1;  // raw hyper_w1 output [n*E x B]
    nn::Mat a2;  // raw hyper_w2 output [E x B]
    nn::Mat z;   // hidden pre-activation [E x B]
    nn::Mat h;   // hidden activation [E x B]
    nn::Mat qs;  // [n x B]
  };

  MixingNet() = default;
  MixingNet(int n_agents, int state_dim, int embed, int hyper_hidden, Rng& rng);
  /// Single agent, Q_tot = Q_1 exactly; frozen so an optimizer leaves it alone.
  static MixingNet identity(int state_dim);

  int n_agents() const { return n_agents_; }
  int embed() const { return embed_; }
  bool frozen() const { return frozen_; }

  /// qs [n x B], states [S x B] -> Q_tot [B].
  nn::Vec forward(const nn::Mat& qs, const nn::Mat& states, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients of sum(dqtot .* Q_tot) into grad; returns d/dqs.
  nn::Mat backward(const Cache& cache, const nn::Vec& dqtot, nn::Vec& grad) const;

  /// Effective (post-abs) first and second layer weights for one state.
  nn::Mat first_weights(const nn::Vec& state) const;   // [n x E]
  nn::Vec second_weights(const nn::Vec& state) const;  // [E]

  nn::Vec params() const;
  void set_params(const nn::Vec& p);
  std::size_t num_params() const;

  nn::DenseNet& hyper_w1() { return hyper_w1_; }
  nn::DenseNet& hyper_w2() { return hyper_w2_; }
  nn::DenseNet& hyper_b1() { return hyper_b1_; }
  nn::DenseNet& value() { return value_; }

  nlohmann::json to_json() const;
  static MixingNet from_json(const nlohmann::json& doc);
  bool operator==(const MixingNet&) const = default;

 private:
  int n_agents_ = 0;
  int embed_ = 0;
  bool linear_ = false;
  bool frozen_ = false;
  nn::DenseNet hyper_w1_, hyper_w2_, hyper_b1_, value_;
};

/// IQL, VDN and QMIX: shared agent Q-network, episode replay, hard target updates.
class ValueTrainer {
 public:
  struct Gradients {
    double loss = 0.0;
    nn::Vec agent;
    nn::Vec mixer;  // empty unless QMIX with a trainable mixer
  };

  ValueTrainer(InputLayout layout, TrainerConfig config, std::uint64_t seed);

  const InputLayout& layout() const { return layout_; }
  const TrainerConfig& config() const { return config_; }

  /// Q-values [n_actions x n_agents]; reads observations only.
  nn::Mat q_values(std::span<const Observation> obs) const;
  /// Per-agent epsilon-greedy over valid actions; greedy ties go to the lowest index.
  std::vector<int> select_actions(std::span<const Observation> obs, double epsilon, Rng& rng) const;

  Gradients loss_and_grad(EpisodeBatch batch) const;
  /// One Adam step on the TD loss; returns the loss before the step.
  double td_update(EpisodeBatch batch);
  /// Samples a batch from the buffer and updates; throws NotReadyError if it is too small.
  double train(const EpisodeBuffer& buffer, Rng& rng);

  /// Hard copy online -> target once target_update_episodes have passed since the last copy.
  bool target_sync(std::int64_t episodes);
  void sync_target();

  const nn::DenseNet& agent() const { return agent_; }
  nn::DenseNet& agent() { return agent_; }
  const nn::DenseNet& target_agent() const { return target_agent_; }
  const MixingNet& mixer() const { return mixer_; }
  const MixingNet& target_mixer() const { return target_mixer_; }
  /// Replaces both online and target mixer (QMIX only).
  void set_mixer(MixingNet mixer);
  std::int64_t updates() const { return updates_; }
  std::int64_t last_sync() const { return last_sync_; }

  nlohmann::json to_json() const;
  void load_json(const nlohmann::json& doc);

 private:
  InputLayout layout_;
  TrainerConfig config_;
  nn::DenseNet agent_, target_agent_;
  MixingNet mixer_, target_mixer_;
  nn::AdamState agent_opt_, mixer_opt_;
  std::int64_t updates_ = 0;
  std::int64_t last_sync_ = 0;
};

/// Per-sample logit gradient of -A*log pi(a) - c*H(pi) over valid actions
/// (the first `valid` rows); invalid rows get zero.
nn::Vec a2c_logit_grad(const nn::Vec& logits, int action, double advantage, double entropy_coef, int valid);
/// Entropy of the softmax over the first `valid` logits.
double policy_entropy(const nn::Vec& logits, int valid);

/// IA2C (critic on own observation) and MAA2C (critic on the global state).
class ActorCriticTrainer {
 public:
  struct Stats {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
  };
  struct Gradients {
    Stats stats;
    nn::Vec actor;
    nn::Vec critic;
  };

  ActorCriticTrainer(InputLayout layout, TrainerConfig config, std::uint64_t seed);

  const InputLayout& layout() const { return layout_; }
  const TrainerConfig& config() const { return config_; }

  /// Action probabilities [n_actions x n_agents], zero on masked actions.
  nn::Mat policy(std::span<const Observation> obs) const;
  /// Samples from the policy, or takes its argmax when greedy.
  std::vector<int> select_actions(std::span<const Observation> obs, Rng& rng, bool greedy = false) const;

  Gradients losses_and_grads(std::span<const Episode> batch) const;
  /// One Adam step each on actor and critic. Throws ContractError when any
  /// episode was generated under a different policy version.
  Stats a2c_update(std::span<const Episode> batch);

  std::uint64_t policy_version() const { return version_; }
  const nn::DenseNet& actor() const { return actor_; }
  nn::DenseNet& actor() { return actor_; }
  const nn::DenseNet& critic() const { return critic_; }
  nn::DenseNet& critic() { return critic_; }

  nlohmann::json to_json() const;
  void load_json(const nlohmann::json& doc);

 private:
  nn::Mat logits(std::span<const Observation> obs) const;
  nn::Mat critic_inputs(const Episode& ep, int t) const;

  InputLayout layout_;
  TrainerConfig config_;
  nn::DenseNet actor_, critic_;
  nn::AdamState actor_opt_, critic_opt_;
  std::uint64_t version_ = 0;
};

}  // namespace tsclab
