#pragma once

// Central finite-difference checks for the double-precision autodiff graph.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rmsynth/nn/tensor.hpp"

namespace testutil {

using rmsynth::nn::Tensor;

struct GradCheckResult {
  double max_rel_err = 0;
  std::size_t checked = 0;
};

inline double rel_err(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Compares d f / d inputs from backward() against central differences on
/// up to `max_coords` coordinates per input (all when 0). `floor` keeps the
/// relative error meaningful where the true derivative is ~0.
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                  std::size_t max_coords = 0, double h = 1e-6, double floor = 1e-6,
                                  std::uint64_t seed = 7) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.size(), 0.0);
  }
  GradCheckResult r;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_coords && idx.size() > max_coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_coords);
    }
    for (std::size_t i : idx) {
      const double x0 = data[i];
      data[i] = x0 + h;
      const double fp = f().item();
      data[i] = x0 - h;
      const double fm = f().item();
      data[i] = x0;
      const double num = (fp - fm) / (2 * h);
      r.max_rel_err = std::max(r.max_rel_err, rel_err(analytic[k][i], num, floor));
      ++r.checked;
    }
  }
  return r;
}

inline Tensor<double> random_tensor(rmsynth::nn::Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(rmsynth::nn::numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

/// Fixed random projection so a tensor-valued op can be checked through a
/// scalar: sum_i w_i * y_i.
inline Tensor<double> project(const Tensor<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<double> w(y.size());
  for (auto& x : w) x = d(rng);
  const Tensor<double> wt(y.shape(), std::move(w));
  double acc = 0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += wt.data()[i] * y.data()[i];
  return rmsynth::nn::make_result<double>({1}, {acc}, {y, wt}, [](rmsynth::nn::Node<double>& n) {
    if (auto* g = rmsynth::nn::parent_grad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[0] * n.parents[1]->value[i];
  });
}

}  // namespace testutil
