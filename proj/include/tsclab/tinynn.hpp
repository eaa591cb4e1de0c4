#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tsclab/rng.hpp"

namespace tsclab::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Fully connected net, ReLU between layers, identity output.
///
/// Parameters live in one flat vector (per layer: W column-major, then b) so
/// optimizers, target copies and checkpoints treat a net as a single array.
/// Batches are column-major: one sample per column.
class DenseNet {
 public:
  struct Cache {
    std::vector<Mat> act;  // act[0] = input, act[k] = output of layer k (post-ReLU for hidden layers)
  };

  DenseNet() = default;
  /// All-zero parameters.
  explicit DenseNet(std::vector<int> sizes);
  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
  DenseNet(std::vector<int> sizes, Rng& rng);

  const std::vector<int>& sizes() const { return sizes_; }
  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  int num_layers() const { return static_cast<int>(sizes_.size()) - 1; }
  std::size_t num_params() const { return static_cast<std::size_t>(params_.size()); }

  Vec& params() { return params_; }
  const Vec& params() const { return params_; }

  Eigen::Map<const Mat> weight(int layer) const;
  Eigen::Map<const Vec> bias(int layer) const;
  Eigen::Map<Mat> weight(int layer);
  Eigen::Map<Vec> bias(int layer);

  /// Throws std::invalid_argument when x.rows() != input_size().
  Mat forward(const Mat& x, Cache* cache = nullptr) const;
  Vec predict(const Vec& x) const;

  /// Accumulates parameter gradients of sum(dy .* y) into grad; returns d/dx.
  Mat backward(const Cache& cache, const Mat& dy, Vec& grad) const;

  nlohmann::json to_json() const;
  static DenseNet from_json(const nlohmann::json& doc);

  bool operator==(const DenseNet& other) const { return sizes_ == other.sizes_ && params_ == other.params_; }

 private:
  std::size_t offset(int layer) const { return offsets_[static_cast<std::size_t>(layer)]; }
  void layout();

  std::vector<int> sizes_;
  std::vector<std::size_t> offsets_;
  Vec params_;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vec m;
  Vec v;
  std::int64_t t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(Vec::Zero(static_cast<Eigen::Index>(n))), v(Vec::Zero(static_cast<Eigen::Index>(n))) {}

  nlohmann::json to_json() const;
  static AdamState from_json(const nlohmann::json& doc);
};

/// One bias-corrected Adam update.
void adam_step(Vec& params, const Vec& grad, AdamState& state, double lr);

/// Rescales grad in place so its L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(Vec& grad, double max_norm);

/// Column-wise softmax and log-softmax, stabilised by the column max.
Mat softmax(const Mat& logits);
Mat log_softmax(const Mat& logits);

nlohmann::json vec_to_json(const Vec& v);
Vec vec_from_json(const nlohmann::json& doc);

}  // namespace tsclab::nn
