#pragma once

// Central finite-difference oracle for analytic gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "tsclab/tinynn.hpp"

namespace gradcheck {

struct Result {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose +-h probe crossed a ReLU/abs kink
};

/// Pattern of every non-smooth switch (ReLU on/off, abs sign) the loss passes through.
using KinkPattern = std::function<std::vector<bool>(const tsclab::nn::Vec&)>;

/// Compares `analytic` with (f(p+h e_i) - f(p-h e_i)) / 2h over every coordinate.
/// Relative error uses max(|a|, |n|, floor) as denominator so exact zeros compare cleanly.
inline Result compare(const std::function<double(const tsclab::nn::Vec&)>& f, const tsclab::nn::Vec& params,
                      const tsclab::nn::Vec& analytic, double h = 1e-5, const KinkPattern& kinks = {},
                      double floor = 1e-6) {
  Result r;
  const std::vector<bool> base = kinks ? kinks(params) : std::vector<bool>{};
  tsclab::nn::Vec p = params;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double up = f(p);
    const bool up_kink = kinks && kinks(p) != base;
    p[i] = orig - h;
    const double down = f(p);
    const bool down_kink = kinks && kinks(p) != base;
    p[i] = orig;
    if (up_kink || down_kink) {
      ++r.skipped;
      continue;
    }
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / denom);
    ++r.checked;
  }
  return r;
}

/// ReLU on/off pattern of every hidden unit of `net` (with params p) on batch x.
inline std::vector<bool> relu_pattern(const tsclab::nn::DenseNet& shape, const tsclab::nn::Vec& p,
                                      const tsclab::nn::Mat& x) {
  tsclab::nn::DenseNet net = shape;
  net.params() = p;
  tsclab::nn::DenseNet::Cache cache;
  net.forward(x, &cache);
  std::vector<bool> out;
  for (std::size_t k = 1; k + 1 < cache.act.size(); ++k) {
    for (Eigen::Index i = 0; i < cache.act[k].size(); ++i) out.push_back(cache.act[k].data()[i] > 0.0);
  }
  return out;
}

}  // namespace gradcheck
