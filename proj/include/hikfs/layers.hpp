#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "hikfs/ndgrad.hpp"
#include "hikfs/random.hpp"

namespace hikfs {

/// Weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline nd::Tensor uniform_init(nd::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(nd::numel_of(shape));
  for (double& v : values) v = dist(rng);
  return nd::Tensor(std::move(shape), std::move(values), true);
}

inline std::size_t default_groups(std::size_t channels) { return std::min<std::size_t>(8, channels); }

/// Affine map x[n, in] * weight[in, out] + bias[out].
struct Linear {
  nd::Tensor weight;
  nd::Tensor bias;

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    return {uniform_init({in, out}, in, rng), nd::Tensor::zeros({out}, true)};
  }

  static Linear identity(std::size_t n) {
    std::vector<double> w(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
    return {nd::Tensor({n, n}, std::move(w), true), nd::Tensor::zeros({n}, true)};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  nd::Tensor forward(const nd::Tensor& x) const { return nd::add_bias(nd::matmul(x, weight), bias); }

  void append_to(std::vector<nd::NamedTensor>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Residual transform used for the attention similarity: two fully
/// connected layers followed by group normalization, added back onto the
/// input. gamma starts at zero, so a fresh transform is the identity.
struct AttentionTransform {
  Linear fc1;
  Linear fc2;
  nd::Tensor gamma;
  nd::Tensor beta;
  std::size_t groups = 1;

  static AttentionTransform init(std::size_t d, Rng& rng) {
    AttentionTransform t;
    t.fc1 = Linear::init(d, d, rng);
    t.fc2 = Linear::init(d, d, rng);
    t.gamma = nd::Tensor::zeros({d}, true);
    t.beta = nd::Tensor::zeros({d}, true);
    t.groups = default_groups(d);
    return t;
  }

  nd::Tensor forward(const nd::Tensor& x) const {
    auto hidden = fc2.forward(nd::relu(fc1.forward(x)));
    return nd::add(x, nd::group_norm(hidden, groups, gamma, beta));
  }

  void append_to(std::vector<nd::NamedTensor>& out, const std::string& prefix) const {
    fc1.append_to(out, prefix + ".fc1");
    fc2.append_to(out, prefix + ".fc2");
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

}  // namespace hikfs
