#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "rmsynth/nn/tensor.hpp"

namespace rmsynth {

struct AdamHyper {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers mirror the parameter list; moments are kept in f32 so a
/// checkpoint captures them exactly.
struct AdamState {
  std::vector<std::vector<float>> m, v;
  long long step = 0;

  template <class T>
  static AdamState for_params(const nn::ParamList<T>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor.size(), 0.f);
      s.v.emplace_back(p.tensor.size(), 0.f);
    }
    return s;
  }
};

namespace detail {
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::vector<float>& m, std::vector<float>& v,
                 const AdamHyper& h, double bc1, double bc2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
    const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double mhat = mi / bc1, vhat = vi / bc2;
    param[i] = static_cast<T>(param[i] - h.lr * mhat / (std::sqrt(vhat) + h.eps));
  }
}
}  // namespace detail

/// One bias-corrected ADAM update of every parameter from its accumulated
/// gradient (a parameter without a gradient is treated as g = 0).
template <class T>
void adam_step(nn::ParamList<T>& params, AdamState& state, const AdamHyper& h) {
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k)
    if (state.m[k].size() != params[k].tensor.size() || state.v[k].size() != params[k].tensor.size())
      throw std::invalid_argument("adam_step: moment shape mismatch for " + params[k].name);
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& t = params[k].tensor;
    std::span<const T> g = t.has_grad() ? t.grad() : std::span<const T>();
    detail::adam_update<T>(t.mutable_data(), g, state.m[k], state.v[k], h, bc1, bc2);
  }
}

/// Flat-buffer form for a single parameter block.
template <class T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState& state, const AdamHyper& h) {
  if (state.m.size() != 1) state = AdamState{{std::vector<float>(param.size(), 0.f)}, {std::vector<float>(param.size(), 0.f)}, state.step};
  if (grad.size() != param.size() || state.m[0].size() != param.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  detail::adam_update<T>(param, grad, state.m[0], state.v[0], h, bc1, bc2);
}

}  // namespace rmsynth
