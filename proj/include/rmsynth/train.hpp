#pragma once

// Alternating discriminator / generator optimisation over phantom gates,
// config parsing and checkpoint round-trips.

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "rmsynth/adam.hpp"
#include "rmsynth/loss.hpp"
#include "rmsynth/nn/checkpoint.hpp"
#include "rmsynth/phantom.hpp"
#include "rmsynth/warp.hpp"

namespace rmsynth {

enum class AlphaMode { Fraction, Millimetre };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 1;
  LossWeights weights;
  AdamHyper adam;
  std::uint64_t seed = 1;
  LossVariant variant = LossVariant::L1_PHI_PLUS_GAN_Y_MAG;
  AlphaMode alpha_mode = AlphaMode::Fraction;
  int checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  nn::GeneratorConfig gen;
  nn::DiscriminatorConfig disc;
  std::vector<int> train_gates;    // empty: every gate not held out
  std::vector<int> heldout_gates;  // evaluation only

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size != 1) throw ConfigError("batch_size must be 1");
    if (!(adam.lr >= 0) || !std::isfinite(adam.lr)) throw ConfigError("lr must be finite and >= 0");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1))
      throw ConfigError("beta1 and beta2 must lie in [0, 1)");
    if (!(adam.eps > 0)) throw ConfigError("adam_eps must be > 0");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    try {
      validate_variant(variant, weights);
      gen.validate();
      discriminator_config().validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    for (int g : train_gates)
      if (std::find(heldout_gates.begin(), heldout_gates.end(), g) != heldout_gates.end())
        throw ConfigError("gate " + std::to_string(g) + " is both a training and a held-out gate");
  }

  /// The discriminator's input channels follow the variant.
  nn::DiscriminatorConfig discriminator_config() const {
    auto d = disc;
    d.in_channels = gan_sees_magnitude(variant) ? 3 : 2;
    return d;
  }

  std::string to_text() const;
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("bad value for '" + key + "': '" + v + "'");
  return out;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string TrainConfig::to_text() const {
  std::ostringstream o;
  o << "epochs=" << epochs << '\n'
    << "batch_size=" << batch_size << '\n'
    << "lambda1=" << detail::fmt_double(weights.lambda1) << '\n'
    << "lambda2=" << detail::fmt_double(weights.lambda2) << '\n'
    << "lr=" << detail::fmt_double(adam.lr) << '\n'
    << "beta1=" << detail::fmt_double(adam.beta1) << '\n'
    << "beta2=" << detail::fmt_double(adam.beta2) << '\n'
    << "adam_eps=" << detail::fmt_double(adam.eps) << '\n'
    << "seed=" << seed << '\n'
    << "variant=" << variant_name(variant) << '\n'
    << "alpha_mode=" << (alpha_mode == AlphaMode::Fraction ? "fraction" : "mm") << '\n'
    << "checkpoint_every=" << checkpoint_every << '\n'
    << "gen_depth=" << gen.depth << '\n'
    << "gen_base_channels=" << gen.base_channels << '\n'
    << "gen_output_scale_mm=" << detail::fmt_double(gen.output_scale_mm) << '\n'
    << "disc_levels=" << disc.levels << '\n'
    << "disc_base_channels=" << disc.base_channels << '\n'
    << "train_gates=" << detail::join_ints(train_gates) << '\n'
    << "heldout_gates=" << detail::join_ints(heldout_gates) << '\n';
  return o.str();
}

inline TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  using detail::parse_number;
  const std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters{
      {"epochs", [&](auto& k, auto& v) { c.epochs = parse_number<int>(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { c.batch_size = parse_number<int>(k, v); }},
      {"lambda1", [&](auto& k, auto& v) { c.weights.lambda1 = parse_number<double>(k, v); }},
      {"lambda2", [&](auto& k, auto& v) { c.weights.lambda2 = parse_number<double>(k, v); }},
      {"lr", [&](auto& k, auto& v) { c.adam.lr = parse_number<double>(k, v); }},
      {"beta1", [&](auto& k, auto& v) { c.adam.beta1 = parse_number<double>(k, v); }},
      {"beta2", [&](auto& k, auto& v) { c.adam.beta2 = parse_number<double>(k, v); }},
      {"adam_eps", [&](auto& k, auto& v) { c.adam.eps = parse_number<double>(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(k, v); }},
      {"variant",
       [&](auto&, auto& v) {
         try {
           c.variant = parse_variant(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       }},
      {"alpha_mode",
       [&](auto&, auto& v) {
         if (v == "fraction") c.alpha_mode = AlphaMode::Fraction;
         else if (v == "mm") c.alpha_mode = AlphaMode::Millimetre;
         else throw ConfigError("alpha_mode must be 'fraction' or 'mm'");
       }},
      {"checkpoint_every", [&](auto& k, auto& v) { c.checkpoint_every = parse_number<int>(k, v); }},
      {"gen_depth", [&](auto& k, auto& v) { c.gen.depth = parse_number<int>(k, v); }},
      {"gen_base_channels", [&](auto& k, auto& v) { c.gen.base_channels = parse_number<int>(k, v); }},
      {"gen_output_scale_mm", [&](auto& k, auto& v) { c.gen.output_scale_mm = parse_number<double>(k, v); }},
      {"disc_levels", [&](auto& k, auto& v) { c.disc.levels = parse_number<int>(k, v); }},
      {"disc_base_channels", [&](auto& k, auto& v) { c.disc.base_channels = parse_number<int>(k, v); }},
      {"train_gates", [&](auto& k, auto& v) { c.train_gates = detail::parse_int_list(k, v); }},
      {"heldout_gates", [&](auto& k, auto& v) { c.heldout_gates = detail::parse_int_list(k, v); }},
  };
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const auto key = detail::trim(std::string_view(line).substr(0, eq));
    const auto val = detail::trim(std::string_view(line).substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second(key, val);
  }
  c.validate();
  return c;
}

inline TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config: " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Volume <-> tensor conversion. Tensors are (C, Z, Y, X) with x fastest, the
// same memory order as the volumes.

template <class T = float>
nn::Tensor<T> to_tensor(const ScalarVolume& v) {
  const auto& d = v.dims();
  return nn::Tensor<T>({1, d[2], d[1], d[0]}, std::vector<T>(v.data().begin(), v.data().end()));
}

template <class T = float>
nn::Tensor<T> to_tensor(const VectorField& phi) {
  const auto& d = phi.dims();
  const std::size_t m = phi.size();
  std::vector<T> out(3 * m);
  for (std::size_t i = 0; i < m; ++i)
    for (int c = 0; c < 3; ++c) out[c * m + i] = static_cast<T>(phi[i][c]);
  return nn::Tensor<T>({3, d[2], d[1], d[0]}, std::move(out));
}

template <class T>
ScalarVolume to_volume(const nn::Tensor<T>& t, const GridMeta& meta) {
  if (t.shape() != nn::Shape{1, meta.dims[2], meta.dims[1], meta.dims[0]})
    throw std::invalid_argument("to_volume: tensor shape does not match grid");
  return ScalarVolume(meta, std::vector<float>(t.data().begin(), t.data().end()));
}

template <class T>
VectorField to_field(const nn::Tensor<T>& t, const GridMeta& meta) {
  if (t.shape() != nn::Shape{3, meta.dims[2], meta.dims[1], meta.dims[0]})
    throw std::invalid_argument("to_field: tensor shape does not match grid");
  const std::size_t m = meta.voxel_count();
  std::vector<Vec3f> out(m);
  const auto d = t.data();
  for (std::size_t i = 0; i < m; ++i) out[i] = {static_cast<float>(d[i]), static_cast<float>(d[m + i]), static_cast<float>(d[2 * m + i])};
  return VectorField(meta, std::move(out));
}

/// Maps physical amplitudes (mm) to the network's conditioning input.
struct AlphaScale {
  AlphaMode mode = AlphaMode::Fraction;
  double reference_mm = 1.0;

  double to_network(double alpha_mm) const { return mode == AlphaMode::Fraction ? alpha_mm / reference_mm : alpha_mm; }
};

struct EpochLog {
  int epoch = 0;
  LossReport mean;

  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

inline constexpr const char* kLossCsvHeader = "epoch,total,l1_term,gan_g_term,gan_d_term";

inline std::string loss_csv_row(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g", e.epoch, e.mean.total, e.mean.l1_term, e.mean.gan_g_term,
                e.mean.gan_d_term);
  return buf;
}

inline std::string loss_csv(const std::vector<EpochLog>& log) {
  std::string s = std::string(kLossCsvHeader) + "\n";
  for (const auto& e : log) s += loss_csv_row(e) + "\n";
  return s;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Fisher-Yates driven by splitmix so the order depends only on (seed, epoch)
// and not on the standard library's distribution implementation.
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::uint64_t s = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(epoch) + 0x5eedull));
  for (std::size_t i = n; i > 1; --i) {
    s = splitmix64(s);
    std::swap(p[i - 1], p[s % i]);
  }
  return p;
}

}  // namespace detail

/// One training sample: gate k of a phantom instance, paired with that
/// instance's EOE image.
struct TrainingSample {
  std::size_t instance = 0;
  std::size_t gate = 0;
  double alpha_mm = 0;
};

/// Resolves the training gates of every instance. Gates default to all gates
/// that are not held out.
inline std::vector<TrainingSample> training_samples(std::span<const PhantomDataset> data, const TrainConfig& cfg) {
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto n = static_cast<int>(data[i].n_gates());
    std::vector<int> gates = cfg.train_gates;
    if (gates.empty())
      for (int g = 0; g < n; ++g)
        if (std::find(cfg.heldout_gates.begin(), cfg.heldout_gates.end(), g) == cfg.heldout_gates.end())
          gates.push_back(g);
    for (int g : gates) {
      if (g < 0 || g >= n) throw ConfigError("training gate " + std::to_string(g) + " out of range");
      out.push_back({i, static_cast<std::size_t>(g), data[i].amplitudes[g]});
    }
  }
  if (out.empty()) throw ConfigError("no training samples");
  return out;
}

/// Owns the networks, optimiser states and schedule. Stepping an epoch at a
/// time keeps checkpointing and resumption exact.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::span<const PhantomDataset> data)
      : cfg_(cfg),
        data_(data),
        gen_(cfg.gen, detail::splitmix64(cfg.seed)),
        disc_(cfg.discriminator_config(), detail::splitmix64(cfg.seed + 1)) {
    cfg_.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    const auto& meta = data[0].phases.at(0).meta();
    for (const auto& ds : data) {
      if (ds.phases.size() != ds.n_gates() || ds.dvfs.size() != ds.n_gates())
        throw std::invalid_argument("train: dataset gate counts disagree");
      for (std::size_t k = 0; k < ds.n_gates(); ++k) {
        require_same_grid(meta, ds.phases[k].meta(), "train");
        require_same_grid(meta, ds.dvfs[k].meta(), "train");
      }
    }
    cfg_.gen.validate_input({meta.dims[2], meta.dims[1], meta.dims[0]});
    spacing_ = meta.spacing;
    samples_ = training_samples(data, cfg_);
    double ref = 0;
    for (const auto& s : samples_) ref = std::max(ref, s.alpha_mm);
    alpha_ = {cfg_.alpha_mode, ref > 0 ? ref : 1.0};
    for (const auto& ds : data) eoe_.push_back(to_tensor(ds.phases[0]));
    g_params_ = gen_.parameters();
    d_params_ = disc_.parameters();
    g_state_ = AdamState::for_params(g_params_);
    d_state_ = AdamState::for_params(d_params_);
  }

  const TrainConfig& config() const { return cfg_; }
  int epochs_done() const { return epoch_; }
  bool finished() const { return epoch_ >= cfg_.epochs; }
  const std::vector<EpochLog>& log() const { return log_; }
  const AlphaScale& alpha_scale() const { return alpha_; }
  nn::Generator<float>& generator() { return gen_; }
  nn::Discriminator<float>& discriminator() { return disc_; }
  const std::vector<TrainingSample>& samples() const { return samples_; }

  /// One D update then one G update on a single sample.
  LossReport step(const TrainingSample& s) {
    const auto& ds = data_[s.instance];
    LossBundle<float> b;
    b.x = eoe_[s.instance];
    b.y_true = to_tensor(ds.phases[s.gate]);
    b.phi_true = to_tensor(ds.dvfs[s.gate]);
    b.phi_pred = gen_.forward(b.x, static_cast<float>(alpha_.to_network(s.alpha_mm)));
    b.y_pred = nn::warp(b.x, b.phi_pred, spacing_);

    double d_term = 0;
    if (uses_gan(cfg_.variant)) {
      nn::zero_grads(d_params_);
      const auto d_obj = discriminator_objective(cfg_.variant, b, disc_);
      d_obj.backward();
      adam_step(d_params_, d_state_, cfg_.adam);
      d_term = d_obj.item();
      nn::set_trainable(d_params_, false);
    }
    nn::zero_grads(g_params_);
    auto cl = compound_loss(cfg_.variant, cfg_.weights, b, uses_gan(cfg_.variant) ? &disc_ : nullptr, false);
    cl.generator_objective.backward();
    adam_step(g_params_, g_state_, cfg_.adam);
    nn::set_trainable(d_params_, true);
    cl.report.gan_d_term = d_term;
    return cl.report;
  }

  const EpochLog& run_epoch() {
    if (finished()) throw std::logic_error("train: all epochs already done");
    const int e = epoch_ + 1;
    LossReport acc;
    for (std::size_t idx : detail::epoch_permutation(samples_.size(), cfg_.seed, e)) {
      const auto r = step(samples_[idx]);
      acc.total += r.total;
      acc.l1_term += r.l1_term;
      acc.gan_g_term += r.gan_g_term;
      acc.gan_d_term += r.gan_d_term;
    }
    const double n = static_cast<double>(samples_.size());
    log_.push_back({e, {acc.total / n, acc.l1_term / n, acc.gan_g_term / n, acc.gan_d_term / n}});
    epoch_ = e;
    return log_.back();
  }

  nn::Checkpoint checkpoint() const {
    nn::Checkpoint ck;
    ck.meta["format"] = "rmsynth-train";
    ck.meta["config"] = cfg_.to_text();
    ck.meta["epoch"] = std::to_string(epoch_);
    ck.meta["alpha_reference_mm"] = detail::fmt_double(alpha_.reference_mm);
    ck.meta["spacing"] = detail::fmt_double(spacing_[0]) + "," + detail::fmt_double(spacing_[1]) + "," +
                         detail::fmt_double(spacing_[2]);
    ck.meta["adam_g_step"] = std::to_string(g_state_.step);
    ck.meta["adam_d_step"] = std::to_string(d_state_.step);
    ck.meta["loss_log"] = loss_csv(log_);
    nn::store_params(ck, g_params_, "G.");
    nn::store_params(ck, d_params_, "D.");
    store_moments(ck, g_params_, g_state_, "adam.G.");
    store_moments(ck, d_params_, d_state_, "adam.D.");
    return ck;
  }

  /// Continues a run from a checkpoint written by checkpoint(). The stored
  /// config must match this trainer's config apart from the epoch budget.
  void restore(const nn::Checkpoint& ck) {
    auto stored = TrainConfig::parse(ck.meta_at("config"));
    stored.epochs = cfg_.epochs;
    stored.checkpoint_every = cfg_.checkpoint_every;
    if (stored.to_text() != cfg_.to_text())
      throw nn::CheckpointError("checkpoint: config differs from the run being resumed");
    nn::restore_params(ck, g_params_, "G.");
    nn::restore_params(ck, d_params_, "D.");
    restore_moments(ck, g_params_, g_state_, "adam.G.");
    restore_moments(ck, d_params_, d_state_, "adam.D.");
    g_state_.step = std::stoll(ck.meta_at("adam_g_step"));
    d_state_.step = std::stoll(ck.meta_at("adam_d_step"));
    epoch_ = std::stoi(ck.meta_at("epoch"));
    log_ = parse_loss_log(ck.meta_at("loss_log"));
    if (static_cast<int>(log_.size()) != epoch_) throw nn::CheckpointError("checkpoint: loss log length mismatch");
  }

  static std::vector<EpochLog> parse_loss_log(const std::string& csv) {
    std::vector<EpochLog> out;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      EpochLog e;
      if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &e.epoch, &e.mean.total, &e.mean.l1_term,
                      &e.mean.gan_g_term, &e.mean.gan_d_term) != 5)
        throw nn::CheckpointError("checkpoint: malformed loss log");
      out.push_back(e);
    }
    return out;
  }

 private:
  static void store_moments(nn::Checkpoint& ck, const nn::ParamList<float>& params, const AdamState& st,
                            const std::string& prefix) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      ck.tensors.push_back({prefix + "m." + params[k].name, params[k].tensor.shape(), st.m[k]});
      ck.tensors.push_back({prefix + "v." + params[k].name, params[k].tensor.shape(), st.v[k]});
    }
  }

  static void restore_moments(const nn::Checkpoint& ck, const nn::ParamList<float>& params, AdamState& st,
                              const std::string& prefix) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (auto [tag, buf] : {std::pair{"m.", &st.m[k]}, std::pair{"v.", &st.v[k]}}) {
        const auto* t = ck.find(prefix + tag + params[k].name);
        if (!t || t->data.size() != buf->size())
          throw nn::CheckpointError("checkpoint: missing or mismatched moments for '" + params[k].name + "'");
        *buf = t->data;
      }
    }
  }

  TrainConfig cfg_;
  std::span<const PhantomDataset> data_;
  nn::Generator<float> gen_;
  nn::Discriminator<float> disc_;
  nn::ParamList<float> g_params_, d_params_;
  AdamState g_state_, d_state_;
  Vec3f spacing_{};
  AlphaScale alpha_;
  std::vector<TrainingSample> samples_;
  std::vector<nn::Tensor<float>> eoe_;
  std::vector<EpochLog> log_;
  int epoch_ = 0;
};

struct TrainResult {
  nn::Generator<float> generator;
  nn::Discriminator<float> discriminator;
  std::vector<EpochLog> log;
  AlphaScale alpha;
};

/// Runs every epoch. `on_epoch` (optional) sees the trainer after each epoch,
/// e.g. to write cadence checkpoints.
inline TrainResult train(std::span<const PhantomDataset> data, const TrainConfig& cfg,
                         const std::function<void(const Trainer&)>& on_epoch = {}) {
  Trainer t(cfg, data);
  while (!t.finished()) {
    t.run_epoch();
    if (on_epoch) on_epoch(t);
  }
  return {t.generator(), t.discriminator(), t.log(), t.alpha_scale()};
}

/// Generator plus amplitude mapping, as needed for synthesis.
struct SynthesisModel {
  nn::Generator<float> generator;
  AlphaScale alpha;
};

inline SynthesisModel load_synthesis_model(const nn::Checkpoint& ck) {
  const auto cfg = TrainConfig::parse(ck.meta_at("config"));
  SynthesisModel m{nn::Generator<float>(cfg.gen, 0), {cfg.alpha_mode, std::stod(ck.meta_at("alpha_reference_mm"))}};
  auto params = m.generator.parameters();
  nn::restore_params(ck, params, "G.");
  return m;
}

struct SynthesizedPhase {
  double alpha_mm = 0;
  VectorField dvf;
  ScalarVolume image;
};

/// phi* = G(X, alpha) and Y* = X warped by phi*, for each alpha in order.
inline std::vector<SynthesizedPhase> synthesize(const nn::Generator<float>& g, const AlphaScale& scale,
                                                const ScalarVolume& x, std::span<const double> alphas_mm) {
  const auto xt = to_tensor(x);
  std::vector<SynthesizedPhase> out;
  for (double a : alphas_mm) {
    if (!std::isfinite(a)) throw std::invalid_argument("synthesize: amplitude must be finite");
    auto phi = to_field(g.forward(xt, static_cast<float>(scale.to_network(a))), x.meta());
    auto y = warp_volume(x, phi);
    out.push_back({a, std::move(phi), std::move(y)});
  }
  return out;
}

}  // namespace rmsynth
