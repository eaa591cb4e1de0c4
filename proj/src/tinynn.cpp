#include "tsclab/tinynn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "tsclab/errors.hpp"

namespace tsclab::nn {

DenseNet::DenseNet(std::vector<int> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) throw std::invalid_argument("DenseNet needs at least an input and an output size");
  for (int s : sizes_) {
    if (s < 1) throw std::invalid_argument("DenseNet layer sizes must be positive");
  }
  layout();
}

DenseNet::DenseNet(std::vector<int> sizes, Rng& rng) : DenseNet(std::move(sizes)) {
  for (int k = 0; k < num_layers(); ++k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[static_cast<std::size_t>(k)]));
    const std::size_t n = static_cast<std::size_t>(sizes_[static_cast<std::size_t>(k)] + 1) *
                          static_cast<std::size_t>(sizes_[static_cast<std::size_t>(k) + 1]);
    for (std::size_t i = 0; i < n; ++i) params_[static_cast<Eigen::Index>(offset(k) + i)] = rng.uniform(-bound, bound);
  }
}

void DenseNet::layout() {
  offsets_.assign(sizes_.size(), 0);
  std::size_t total = 0;
  for (int k = 0; k < num_layers(); ++k) {
    offsets_[static_cast<std::size_t>(k)] = total;
    total += static_cast<std::size_t>(sizes_[static_cast<std::size_t>(k)] + 1) *
             static_cast<std::size_t>(sizes_[static_cast<std::size_t>(k) + 1]);
  }
  offsets_.back() = total;
  params_ = Vec::Zero(static_cast<Eigen::Index>(total));
}

Eigen::Map<const Mat> DenseNet::weight(int layer) const {
  const auto k = static_cast<std::size_t>(layer);
  return {params_.data() + offset(layer), sizes_[k + 1], sizes_[k]};
}

Eigen::Map<const Vec> DenseNet::bias(int layer) const {
  const auto k = static_cast<std::size_t>(layer);
  return {params_.data() + offset(layer) + static_cast<std::size_t>(sizes_[k + 1] * sizes_[k]), sizes_[k + 1]};
}

Eigen::Map<Mat> DenseNet::weight(int layer) {
  const auto k = static_cast<std::size_t>(layer);
  return {params_.data() + offset(layer), sizes_[k + 1], sizes_[k]};
}

Eigen::Map<Vec> DenseNet::bias(int layer) {
  const auto k = static_cast<std::size_t>(layer);
  return {params_.data() + offset(layer) + static_cast<std::size_t>(sizes_[k + 1] * sizes_[k]), sizes_[k + 1]};
}

Mat DenseNet::forward(const Mat& x, Cache* cache) const {
  if (x.rows() != input_size()) {
    throw std::invalid_argument("DenseNet input has " + std::to_string(x.rows()) + " rows, expected " +
                                std::to_string(input_size()));
  }
  if (cache) {
    cache->act.resize(static_cast<std::size_t>(num_layers()) + 1);
    cache->act[0] = x;
  }
  Mat h = x;
  for (int k = 0; k < num_layers(); ++k) {
    Mat z = weight(k) * h;
    z.colwise() += bias(k);
    if (k + 1 < num_layers()) z = z.cwiseMax(0.0);
    h = std::move(z);
    if (cache) cache->act[static_cast<std::size_t>(k) + 1] = h;
  }
  return h;
}

Vec DenseNet::predict(const Vec& x) const { return forward(Mat(x), nullptr).col(0); }

Mat DenseNet::backward(const Cache& cache, const Mat& dy, Vec& grad) const {
  if (grad.size() != params_.size()) grad = Vec::Zero(params_.size());
  Mat delta = dy;
  for (int k = num_layers() - 1; k >= 0; --k) {
    const auto kk = static_cast<std::size_t>(k);
    if (k + 1 < num_layers()) {
      // ReLU: pass gradient where the output was positive
      delta = delta.cwiseProduct((cache.act[kk + 1].array() > 0.0).cast<double>().matrix());
    }
    const Mat& input = cache.act[kk];
    Eigen::Map<Mat> gw(grad.data() + offset(k), sizes_[kk + 1], sizes_[kk]);
    Eigen::Map<Vec> gb(grad.data() + offset(k) + static_cast<std::size_t>(sizes_[kk + 1] * sizes_[kk]), sizes_[kk + 1]);
    gw.noalias() += delta * input.transpose();
    gb += delta.rowwise().sum();
    delta = weight(k).transpose() * delta;
  }
  return delta;
}

nlohmann::json vec_to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec vec_from_json(const nlohmann::json& doc) {
  const auto values = doc.get<std::vector<double>>();
  return Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size()));
}

nlohmann::json DenseNet::to_json() const { return {{"sizes", sizes_}, {"params", vec_to_json(params_)}}; }

DenseNet DenseNet::from_json(const nlohmann::json& doc) {
  try {
    DenseNet net(doc.at("sizes").get<std::vector<int>>());
    Vec p = vec_from_json(doc.at("params"));
    if (p.size() != net.params_.size()) throw ParseError("network parameter count does not match its sizes");
    net.params_ = std::move(p);
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed network: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("malformed network: ") + e.what());
  }
}

nlohmann::json AdamState::to_json() const {
  return {{"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"t", t}, {"m", vec_to_json(m)}, {"v", vec_to_json(v)}};
}

AdamState AdamState::from_json(const nlohmann::json& doc) {
  try {
    AdamState s;
    s.beta1 = doc.at("beta1").get<double>();
    s.beta2 = doc.at("beta2").get<double>();
    s.eps = doc.at("eps").get<double>();
    s.t = doc.at("t").get<std::int64_t>();
    s.m = vec_from_json(doc.at("m"));
    s.v = vec_from_json(doc.at("v"));
    if (s.m.size() != s.v.size()) throw ParseError("optimizer moments differ in length");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed optimizer state: ") + e.what());
  }
}

void adam_step(Vec& params, const Vec& grad, AdamState& s, double lr) {
  if (s.m.size() != params.size()) {
    s.m = Vec::Zero(params.size());
    s.v = Vec::Zero(params.size());
  }
  if (grad.size() != params.size()) throw std::invalid_argument("adam_step: gradient and parameter sizes differ");
  s.t += 1;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  params.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

double clip_grad_norm(Vec& grad, double max_norm) {
  const double norm = grad.norm();
  if (max_norm > 0.0 && norm > max_norm) grad *= max_norm / norm;
  return norm;
}

Mat softmax(const Mat& logits) {
  Mat out = log_softmax(logits);
  return out.array().exp().matrix();
}

Mat log_softmax(const Mat& logits) {
  Mat out = logits;
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    const double mx = out.col(c).maxCoeff();
    const double lse = mx + std::log((out.col(c).array() - mx).exp().sum());
    out.col(c).array() -= lse;
  }
  return out;
}

}  // namespace tsclab::nn
