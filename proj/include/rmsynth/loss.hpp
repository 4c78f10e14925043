#pragma once

// Training objectives: l1 on the DVF, l1 on the warped image, the
// conditional adversarial terms, and their weighted combinations.

#include <array>
#include <optional>
#include <string_view>

#include "rmsynth/nn/networks.hpp"
#include "rmsynth/nn/ops.hpp"

namespace rmsynth {

enum class LossVariant { L1_Y, L1_PHI, L1_Y_PLUS_GAN_Y, GAN_Y_MAG, L1_PHI_PLUS_GAN_Y, L1_PHI_PLUS_GAN_Y_MAG };

inline constexpr std::array<LossVariant, 6> kAllVariants{
    LossVariant::L1_Y,      LossVariant::L1_PHI,          LossVariant::L1_Y_PLUS_GAN_Y,
    LossVariant::GAN_Y_MAG, LossVariant::L1_PHI_PLUS_GAN_Y, LossVariant::L1_PHI_PLUS_GAN_Y_MAG};

inline std::string_view variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::L1_Y: return "L1_Y";
    case LossVariant::L1_PHI: return "L1_PHI";
    case LossVariant::L1_Y_PLUS_GAN_Y: return "L1_Y_PLUS_GAN_Y";
    case LossVariant::GAN_Y_MAG: return "GAN_Y_MAG";
    case LossVariant::L1_PHI_PLUS_GAN_Y: return "L1_PHI_PLUS_GAN_Y";
    case LossVariant::L1_PHI_PLUS_GAN_Y_MAG: return "L1_PHI_PLUS_GAN_Y_MAG";
  }
  return "?";
}

inline LossVariant parse_variant(std::string_view s) {
  for (auto v : kAllVariants)
    if (variant_name(v) == s) return v;
  throw std::invalid_argument("unknown loss variant '" + std::string(s) + "'");
}

inline bool uses_l1_phi(LossVariant v) {
  return v == LossVariant::L1_PHI || v == LossVariant::L1_PHI_PLUS_GAN_Y || v == LossVariant::L1_PHI_PLUS_GAN_Y_MAG;
}
inline bool uses_l1_image(LossVariant v) { return v == LossVariant::L1_Y || v == LossVariant::L1_Y_PLUS_GAN_Y; }
inline bool uses_l1(LossVariant v) { return uses_l1_phi(v) || uses_l1_image(v); }
inline bool uses_gan(LossVariant v) { return v != LossVariant::L1_Y && v != LossVariant::L1_PHI; }
inline bool gan_sees_magnitude(LossVariant v) {
  return v == LossVariant::GAN_Y_MAG || v == LossVariant::L1_PHI_PLUS_GAN_Y_MAG;
}

struct LossWeights {
  double lambda1 = 100.0;
  double lambda2 = 1.0;

  void validate() const {
    if (!(lambda1 >= 0) || !(lambda2 >= 0)) throw std::invalid_argument("loss weights must be >= 0");
    if (lambda1 == 0 && lambda2 == 0) throw std::invalid_argument("loss weights must not both be zero");
  }
};

/// Rejects variants whose active terms carry zero weight.
inline void validate_variant(LossVariant v, const LossWeights& w) {
  w.validate();
  if (uses_l1(v) && w.lambda1 == 0)
    throw std::invalid_argument(std::string(variant_name(v)) + " needs lambda1 > 0");
  if (uses_gan(v) && w.lambda2 == 0)
    throw std::invalid_argument(std::string(variant_name(v)) + " needs lambda2 > 0");
}

struct LossReport {
  double total = 0, l1_term = 0, gan_g_term = 0, gan_d_term = 0;

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

template <class T>
nn::Tensor<T> l1_dvf(const nn::Tensor<T>& predicted, const nn::Tensor<T>& target) {
  if (predicted.shape().size() != 4 || predicted.dim(0) != 3)
    throw std::invalid_argument("l1_dvf: expected (3,Z,Y,X) fields");
  return nn::l1_mean(predicted, target);
}

template <class T>
nn::Tensor<T> l1_image(const nn::Tensor<T>& predicted, const nn::Tensor<T>& target) {
  if (predicted.shape().size() != 4 || predicted.dim(0) != 1)
    throw std::invalid_argument("l1_image: expected (1,Z,Y,X) images");
  return nn::l1_mean(predicted, target);
}

template <class T>
struct GanLosses {
  nn::Tensor<T> d_loss, g_loss;
};

/// Logit-space BCE. d = -mean log s(real) - mean log(1 - s(fake));
/// g = -mean log s(fake) (non-saturating).
template <class T>
GanLosses<T> gan_losses(const nn::Tensor<T>& real_logits, const nn::Tensor<T>& fake_logits) {
  if (real_logits.shape() != fake_logits.shape()) throw std::invalid_argument("gan_losses: logit grid mismatch");
  return {nn::add(nn::bce_with_logits(real_logits, T(1)), nn::bce_with_logits(fake_logits, T(0))),
          nn::bce_with_logits(fake_logits, T(1))};
}

/// lambda1 * l1 + lambda2 * gan; zero weights are allowed here and leave the
/// corresponding term with identically zero gradient.
template <class T>
nn::Tensor<T> weighted_objective(const nn::Tensor<T>& l1, const nn::Tensor<T>& gan, double lambda1, double lambda2) {
  return nn::add(nn::scale(l1, static_cast<T>(lambda1)), nn::scale(gan, static_cast<T>(lambda2)));
}

/// Tensors of one training pair on a shared grid. `phi_pred` and `y_pred`
/// carry the generator's graph.
template <class T>
struct LossBundle {
  nn::Tensor<T> x, y_true, phi_true, phi_pred, y_pred;
};

template <class T>
struct CompoundLoss {
  nn::Tensor<T> generator_objective;        // differentiable w.r.t. G
  std::optional<nn::Tensor<T>> d_objective;  // on detached fakes; present iff GAN active and requested
  LossReport report;
};

/// Discriminator loss on (X, Y_k, |phi_k|) versus detached (X, Y*, |phi*|).
template <class T>
nn::Tensor<T> discriminator_objective(LossVariant v, const LossBundle<T>& b, const nn::Discriminator<T>& disc) {
  const bool mag = gan_sees_magnitude(v);
  if ((disc.config().in_channels == 3) != mag)
    throw std::invalid_argument("discriminator channels do not match the loss variant");
  nn::Tensor<T> real_mag, fake_mag;
  if (mag) {
    real_mag = nn::magnitude(b.phi_true.detach());
    fake_mag = nn::magnitude(b.phi_pred.detach());
  }
  const auto real_logits = disc.forward(b.x, b.y_true, real_mag);
  const auto fake_logits = disc.forward(b.x, b.y_pred.detach(), fake_mag);
  return gan_losses(real_logits, fake_logits).d_loss;
}

/// Assembles exactly the terms the variant names. `disc` may be null for
/// l1-only variants. With include_d_term the discriminator loss is evaluated
/// too (reported, and returned for a D update).
template <class T>
CompoundLoss<T> compound_loss(LossVariant v, const LossWeights& w, const LossBundle<T>& b,
                              const nn::Discriminator<T>* disc, bool include_d_term = true) {
  validate_variant(v, w);
  const auto& phi_shape = b.phi_pred.shape();
  if (b.phi_true.shape() != phi_shape || b.y_pred.shape() != b.x.shape() || b.y_true.shape() != b.x.shape() ||
      phi_shape.size() != 4 || !std::equal(phi_shape.begin() + 1, phi_shape.end(), b.x.shape().begin() + 1))
    throw std::invalid_argument("compound_loss: bundle tensors are not on one grid");

  CompoundLoss<T> out;
  std::optional<nn::Tensor<T>> l1, g;
  if (uses_l1_phi(v)) l1 = l1_dvf(b.phi_pred, b.phi_true);
  if (uses_l1_image(v)) l1 = l1_image(b.y_pred, b.y_true);
  if (uses_gan(v)) {
    if (!disc) throw std::invalid_argument("compound_loss: variant needs a discriminator");
    if (include_d_term) {
      out.d_objective = discriminator_objective(v, b, *disc);
      out.report.gan_d_term = out.d_objective->item();
    }
    const nn::Tensor<T> fake_mag = gan_sees_magnitude(v) ? nn::magnitude(b.phi_pred) : nn::Tensor<T>{};
    g = nn::bce_with_logits(disc->forward(b.x, b.y_pred, fake_mag), T(1));
    out.report.gan_g_term = g->item();
  }
  if (l1) out.report.l1_term = l1->item();
  if (l1 && g) {
    out.generator_objective = weighted_objective(*l1, *g, w.lambda1, w.lambda2);
  } else if (l1) {
    out.generator_objective = nn::scale(*l1, static_cast<T>(w.lambda1));
  } else {
    out.generator_objective = nn::scale(*g, static_cast<T>(w.lambda2));
  }
  out.report.total = out.generator_objective.item();
  return out;
}

}  // namespace rmsynth
