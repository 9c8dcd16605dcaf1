#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hikfs/ndgrad.hpp"

namespace hikfs::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "<leaf>[<index>]"
};

/// Relative error with a floor on the magnitude so entries whose true
/// gradient is essentially zero are judged on absolute error.
inline double rel_error(double analytic, double numeric, double floor = 1e-2) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the tape gradient of `loss_fn` with central differences at step
/// h for every element of every leaf.
inline GradCheck check_gradients(const std::function<nd::Tensor()>& loss_fn, std::vector<nd::NamedTensor> leaves,
                                 double h = 1e-5) {
  for (auto& [name, t] : leaves) t.zero_grad();
  auto loss = loss_fn();
  nd::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : leaves) {
    auto g = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end()) : std::vector<double>(t.numel(), 0.0);
    analytic.push_back(std::move(g));
  }
  GradCheck out;
  nd::NoGradGuard guard;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    nd::Tensor t = leaves[l].tensor;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      const double err = rel_error(analytic[l][i], (up - down) / (2.0 * h));
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = leaves[l].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (auto& [name, t] : leaves) t.zero_grad();
  return out;
}

/// Leaf tensor with entries uniform in [lo, hi].
inline nd::Tensor random_leaf(nd::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(nd::numel_of(shape));
  for (double& x : v) x = dist(rng);
  return nd::Tensor(std::move(shape), std::move(v), true);
}

/// Entries of random sign with magnitude in [0.1, 1], away from ReLU kinks.
inline nd::Tensor random_signed_leaf(nd::Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(nd::numel_of(shape));
  for (double& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return nd::Tensor(std::move(shape), std::move(v), true);
}

/// Fixed random weighting that turns any tensor into a scalar loss.
inline nd::Tensor weighted_sum(const nd::Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(t.numel());
  for (double& x : w) x = dist(rng);
  return nd::sum(nd::mul(t, nd::Tensor(t.shape(), std::move(w))));
}

}  // namespace hikfs::testing
