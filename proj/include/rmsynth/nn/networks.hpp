#pragma once

// The DVF generator (3-d U-Net with amplitude conditioning at the bottleneck)
// and the patch discriminator.

#include <cstdint>
#include <random>

#include "rmsynth/nn/conv.hpp"
#include "rmsynth/nn/ops.hpp"

namespace rmsynth::nn {

struct GeneratorConfig {
  int depth = 3;
  int base_channels = 8;
  double leaky_slope = 0.2;
  double norm_eps = 1e-5;
  double output_scale_mm = 10.0;  // fixed multiplier on gain * head
  double input_center = -500.0;   // intensity normalization applied on entry
  double input_scale = 500.0;

  int channels(int level) const { return base_channels << level; }

  void validate() const {
    if (depth < 2) throw std::invalid_argument("GeneratorConfig: depth must be >= 2");
    if (base_channels < 1) throw std::invalid_argument("GeneratorConfig: base_channels must be >= 1");
    if (!(input_scale > 0) || !(output_scale_mm > 0)) throw std::invalid_argument("GeneratorConfig: scales must be > 0");
  }

  void validate_input(const Shape& spatial) const {
    validate();
    const int f = 1 << depth;
    for (int d : spatial) {
      if (d % f != 0)
        throw std::invalid_argument("generator: input dims must be divisible by 2^depth = " + std::to_string(f));
      if (d / f < 2) throw std::invalid_argument("generator: bottleneck would be smaller than 2 voxels");
    }
  }
};

struct DiscriminatorConfig {
  int levels = 2;
  int base_channels = 8;
  int in_channels = 3;  // reference X, candidate Y, optional |phi|
  double leaky_slope = 0.2;
  double input_center = -500.0;
  double input_scale = 500.0;
  double magnitude_scale_mm = 10.0;

  void validate() const {
    if (levels < 2) throw std::invalid_argument("DiscriminatorConfig: levels must be >= 2");
    if (in_channels != 2 && in_channels != 3) throw std::invalid_argument("DiscriminatorConfig: in_channels must be 2 or 3");
    if (base_channels < 1) throw std::invalid_argument("DiscriminatorConfig: base_channels must be >= 1");
  }

  Shape output_shape(const Shape& spatial) const {
    Shape s{1};
    for (int d : spatial) {
      int o = d;
      for (int l = 0; l < levels; ++l) o = conv_out_size(o, 3, 2, 1);
      s.push_back(conv_out_size(o, 3, 1, 1));
    }
    return s;
  }
};

namespace detail {

template <class T>
Tensor<T> random_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
Tensor<T> conv_weight(int cout, int cin, int k, double gain, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(cin) * k * k * k;
  return random_tensor<T>({cout, cin, k, k, k}, gain / std::sqrt(fan_in), rng);
}

template <class T>
Tensor<T> normalize_intensity(const Tensor<T>& x, double center, double scale) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>((x.data()[i] - center) / scale);
  return make_result<T>(x.shape(), std::move(v), {x}, [scale](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += static_cast<T>(n.grad[i] / scale);
  });
}

}  // namespace detail

/// Amplitude -> (gamma, beta): dense 1 -> 2C, a length-3 1-d convolution over
/// the 2C sequence, then split. Initialized so gamma = 1 and beta = 0.
template <class T>
struct Conditioning {
  Tensor<T> fc_w, fc_b, conv_w, conv_b;

  static Conditioning identity(int channels) {
    std::vector<T> bias(2 * channels, T(0));
    std::fill(bias.begin(), bias.begin() + channels, T(1));
    return {Tensor<T>::zeros({2 * channels, 1}, true), Tensor<T>({2 * channels}, std::move(bias), true),
            Tensor<T>({3}, {T(0), T(1), T(0)}, true), Tensor<T>::zeros({1}, true)};
  }

  static Conditioning random(int channels, std::mt19937_64& rng) {
    return {detail::random_tensor<T>({2 * channels, 1}, 1.0, rng), detail::random_tensor<T>({2 * channels}, 0.5, rng),
            detail::random_tensor<T>({3}, 0.7, rng), detail::random_tensor<T>({1}, 0.1, rng)};
  }

  int channels() const { return fc_b.dim(0) / 2; }

  std::pair<Tensor<T>, Tensor<T>> forward(T alpha) const {
    const int C = channels();
    const auto a = Tensor<T>::scalar(alpha);
    const auto seq = conv1d_same(linear(a, fc_w, fc_b), conv_w, conv_b);
    return {slice(seq, 0, C), slice(seq, C, C)};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + "fc.w", fc_w});
    out.push_back({prefix + "fc.b", fc_b});
    out.push_back({prefix + "conv.w", conv_w});
    out.push_back({prefix + "conv.b", conv_b});
  }
};

/// AdaIN(x, alpha) = gamma(alpha) * instance_norm(x) + beta(alpha)
template <class T>
Tensor<T> adain(const Tensor<T>& x, T alpha, const Conditioning<T>& cond, T eps = T(1e-5)) {
  const auto [gamma, beta] = cond.forward(alpha);
  return channel_affine(instance_norm(x, eps), gamma, beta);
}

template <class T>
struct ConvLayer {
  Tensor<T> w, b;
};

template <class T>
class Generator {
 public:
  Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const double g = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
    enc_.push_back({detail::conv_weight<T>(cfg.channels(0), 1, 3, g, rng), Tensor<T>::zeros({cfg.channels(0)}, true)});
    for (int l = 1; l <= cfg.depth; ++l)
      enc_.push_back({detail::conv_weight<T>(cfg.channels(l), cfg.channels(l - 1), 3, g, rng),
                      Tensor<T>::zeros({cfg.channels(l)}, true)});
    for (int l = 1; l <= cfg.depth; ++l) {
      const int cin = cfg.channels(l) + cfg.channels(l - 1);
      dec_.push_back({detail::conv_weight<T>(cfg.channels(l - 1), cin, 3, g, rng),
                      Tensor<T>::zeros({cfg.channels(l - 1)}, true)});
    }
    // Near-zero head, unit gain: the initial DVF is a few hundredths of a mm.
    // An exactly zero head leaves the decoder without gradient until the
    // head has grown, which stalls adversarial training for many epochs.
    head_ = {detail::random_tensor<T>({3, cfg.channels(0), 3, 3, 3}, T(1e-3), rng), Tensor<T>::zeros({3}, true)};
    gain_ = Tensor<T>::full({1}, T(1), true);
    cond_ = Conditioning<T>::identity(cfg.channels(cfg.depth));
  }

  const GeneratorConfig& config() const { return cfg_; }

  /// x: (1, Z, Y, X) image; alpha: network-space amplitude. Returns the
  /// (3, Z, Y, X) displacement field in mm, components ordered x, y, z.
  Tensor<T> forward(const Tensor<T>& x, T alpha) const {
    detail::require(x.shape().size() == 4 && x.dim(0) == 1, "generator: expected a (1,Z,Y,X) input");
    cfg_.validate_input({x.dim(1), x.dim(2), x.dim(3)});
    const T slope = static_cast<T>(cfg_.leaky_slope), eps = static_cast<T>(cfg_.norm_eps);
    std::vector<Tensor<T>> skips;
    auto h = detail::normalize_intensity(x, cfg_.input_center, cfg_.input_scale);
    h = instance_norm(leaky_relu(conv3d(h, enc_[0].w, enc_[0].b, 1, 1), slope), eps);
    skips.push_back(h);
    for (int l = 1; l <= cfg_.depth; ++l) {
      h = leaky_relu(conv3d(h, enc_[l].w, enc_[l].b, 2, 1), slope);
      h = l < cfg_.depth ? instance_norm(h, eps) : adain(h, alpha, cond_, eps);
      if (l < cfg_.depth) skips.push_back(h);
    }
    for (int l = cfg_.depth; l >= 1; --l) {
      const auto& layer = dec_[l - 1];
      h = leaky_relu(conv3d(concat_channels(upsample2(h), skips[l - 1]), layer.w, layer.b, 1, 1), slope);
    }
    const auto raw = conv3d(h, head_.w, head_.b, 1, 1);
    return scale(mul_scalar(raw, gain_), static_cast<T>(cfg_.output_scale_mm));
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      out.push_back({"enc" + std::to_string(l) + ".w", enc_[l].w});
      out.push_back({"enc" + std::to_string(l) + ".b", enc_[l].b});
    }
    cond_.collect(out, "cond.");
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      out.push_back({"dec" + std::to_string(l + 1) + ".w", dec_[l].w});
      out.push_back({"dec" + std::to_string(l + 1) + ".b", dec_[l].b});
    }
    out.push_back({"head.w", head_.w});
    out.push_back({"head.b", head_.b});
    out.push_back({"gain", gain_});
    return out;
  }

  Conditioning<T>& conditioning() { return cond_; }
  ConvLayer<T>& head() { return head_; }
  Tensor<T>& gain() { return gain_; }

 private:
  GeneratorConfig cfg_;
  std::vector<ConvLayer<T>> enc_, dec_;
  ConvLayer<T> head_;
  Tensor<T> gain_;
  Conditioning<T> cond_;
};

template <class T>
class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const double g = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
    int cin = cfg.in_channels;
    for (int l = 0; l < cfg.levels; ++l) {
      const int cout = cfg.base_channels << l;
      layers_.push_back({detail::conv_weight<T>(cout, cin, 3, g, rng), Tensor<T>::zeros({cout}, true)});
      cin = cout;
    }
    layers_.push_back({detail::conv_weight<T>(1, cin, 3, 1.0, rng), Tensor<T>::zeros({1}, true)});
  }

  const DiscriminatorConfig& config() const { return cfg_; }

  /// Patch logits for (reference, candidate[, |phi|]); each input (1, Z, Y, X).
  Tensor<T> forward(const Tensor<T>& reference, const Tensor<T>& candidate, const Tensor<T>& mag = {}) const {
    const bool with_mag = cfg_.in_channels == 3;
    if (with_mag != mag.defined())
      throw std::invalid_argument("discriminator: magnitude channel presence does not match in_channels");
    auto check = [&](const Tensor<T>& t) {
      detail::require(t.shape().size() == 4 && t.dim(0) == 1 &&
                          std::equal(t.shape().begin(), t.shape().end(), reference.shape().begin()),
                      "discriminator: inputs must be single-channel volumes on one grid");
    };
    check(reference);
    check(candidate);
    std::vector<Tensor<T>> parts{detail::normalize_intensity(reference, cfg_.input_center, cfg_.input_scale),
                                 detail::normalize_intensity(candidate, cfg_.input_center, cfg_.input_scale)};
    if (with_mag) {
      check(mag);
      parts.push_back(scale(mag, static_cast<T>(1.0 / cfg_.magnitude_scale_mm)));
    }
    auto h = concat_channels(parts);
    const T slope = static_cast<T>(cfg_.leaky_slope);
    for (int l = 0; l < cfg_.levels; ++l) h = leaky_relu(conv3d(h, layers_[l].w, layers_[l].b, 2, 1), slope);
    return conv3d(h, layers_.back().w, layers_.back().b, 1, 1);
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      out.push_back({"d" + std::to_string(l) + ".w", layers_[l].w});
      out.push_back({"d" + std::to_string(l) + ".b", layers_[l].b});
    }
    return out;
  }

 private:
  DiscriminatorConfig cfg_;
  std::vector<ConvLayer<T>> layers_;
};

}  // namespace rmsynth::nn
