#pragma once

// Batch commands behind the rmsynth executable. Each command reads and
// writes plain directories and leaves a manifest.txt next to its outputs.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rmsynth/metrics.hpp"
#include "rmsynth/phantom.hpp"
#include "rmsynth/train.hpp"
#include "rmsynth/volf.hpp"
#include "rmsynth/warp.hpp"

#ifndef RMSYNTH_VERSION
#define RMSYNTH_VERSION "0.1.0"
#endif

namespace rmsynth::cli {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = RMSYNTH_VERSION;

/// Any failure a command reports to the user (missing files, bad inputs).
class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Logger = std::function<void(const std::string&)>;

struct RunManifest {
  std::string command;
  std::string config;  // snapshot of the effective configuration
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;  // relative to the output directory
  double wall_clock_s = 0;
  std::string tool_version = kToolVersion;

  std::string to_text() const {
    std::ostringstream o;
    o << "command=" << command << '\n'
      << "tool_version=" << tool_version << '\n'
      << "seed=" << seed << '\n'
      << "wall_clock_seconds=" << format_number(wall_clock_s) << '\n'
      << "[config]\n"
      << config;
    if (!config.empty() && config.back() != '\n') o << '\n';
    o << "[artifacts]\n";
    for (const auto& a : artifacts) o << a << '\n';
    return o.str();
  }
};

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CommandError("cannot open for writing: " + path.string());
  f << text;
  if (!f) throw CommandError("write failed: " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CommandError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CommandError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline std::string indexed(const char* stem, std::size_t k) { return std::string(stem) + "_" + std::to_string(k) + ".volf"; }

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline void finish(RunManifest& m, const fs::path& out, const Stopwatch& sw) {
  m.wall_clock_s = sw.seconds();
  write_text(out / "manifest.txt", m.to_text());
}

template <class T>
Grid<T> load_required(const fs::path& path) {
  if (!fs::exists(path)) throw CommandError("missing file: " + path.string());
  return load_as<T>(path);
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::string phantom_params_text(const PhantomParams& p) {
  std::ostringstream o;
  auto d = [](double v) { return rmsynth::detail::fmt_double(v); };
  o << "size=" << p.grid.dims[0] << '\n'
    << "spacing_mm=" << d(p.grid.spacing[0]) << '\n'
    << "seed=" << p.seed << '\n'
    << "body_semi_axes=" << d(p.body_semi_axes[0]) << ',' << d(p.body_semi_axes[1]) << '\n';
  for (int l = 0; l < 2; ++l) {
    const auto& e = p.lungs[l];
    o << "lung" << l << "_center=" << d(e.center[0]) << ',' << d(e.center[1]) << ',' << d(e.center[2]) << '\n'
      << "lung" << l << "_semi_axes=" << d(e.semi_axes[0]) << ',' << d(e.semi_axes[1]) << ',' << d(e.semi_axes[2])
      << '\n';
  }
  o << "diaphragm_z=" << d(p.diaphragm_z) << '\n'
    << "tumor_center=" << d(p.tumor_center[0]) << ',' << d(p.tumor_center[1]) << ',' << d(p.tumor_center[2]) << '\n'
    << "tumor_radius=" << d(p.tumor_radius) << '\n'
    << "d_max=" << d(p.d_max) << '\n'
    << "c_ap=" << d(p.c_ap) << '\n';
  return o.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset directories: <root>/instance_<i>/{phase,dvf,lungs,tumor,body}_<k>.volf
// plus amplitudes.txt ("<k> <alpha_mm>" per line) and params.txt.

inline std::vector<double> read_amplitudes(const fs::path& file) {
  std::istringstream in(detail::read_text(file));
  std::vector<double> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::size_t k = 0;
    double a = 0;
    if (std::sscanf(line.c_str(), "%zu %lf", &k, &a) != 2 || k != out.size())
      throw CommandError("malformed amplitude list: " + file.string());
    out.push_back(a);
  }
  if (out.empty()) throw CommandError("empty amplitude list: " + file.string());
  return out;
}

inline std::string amplitudes_text(const std::vector<double>& a) {
  std::string s = "# phase_index amplitude_mm\n";
  for (std::size_t k = 0; k < a.size(); ++k) s += std::to_string(k) + " " + rmsynth::detail::fmt_double(a[k]) + "\n";
  return s;
}

/// Writes one instance and returns the file names written (relative to dir).
inline std::vector<std::string> write_instance(const PhantomDataset& ds, const fs::path& dir) {
  detail::ensure_dir(dir);
  std::vector<std::string> names;
  auto put = [&](const auto& vol, const std::string& name) {
    save_volume(vol, dir / name);
    names.push_back(name);
  };
  for (std::size_t k = 0; k < ds.n_gates(); ++k) {
    put(ds.phases[k], detail::indexed("phase", k));
    put(ds.dvfs[k], detail::indexed("dvf", k));
    put(ds.masks[k].lungs, detail::indexed("lungs", k));
    put(ds.masks[k].tumor, detail::indexed("tumor", k));
    put(ds.masks[k].body, detail::indexed("body", k));
  }
  detail::write_text(dir / "amplitudes.txt", amplitudes_text(ds.amplitudes));
  detail::write_text(dir / "params.txt", detail::phantom_params_text(ds.params));
  names.push_back("amplitudes.txt");
  names.push_back("params.txt");
  return names;
}

inline PhantomDataset load_instance(const fs::path& dir) {
  PhantomDataset ds;
  ds.amplitudes = read_amplitudes(dir / "amplitudes.txt");
  for (std::size_t k = 0; k < ds.n_gates(); ++k) {
    ds.phases.push_back(detail::load_required<float>(dir / detail::indexed("phase", k)));
    ds.dvfs.push_back(detail::load_required<Vec3f>(dir / detail::indexed("dvf", k)));
    PhaseMasks m{detail::load_required<std::uint8_t>(dir / detail::indexed("tumor", k)),
                 detail::load_required<std::uint8_t>(dir / detail::indexed("lungs", k)),
                 detail::load_required<std::uint8_t>(dir / detail::indexed("body", k))};
    ds.masks.push_back(std::move(m));
    const auto& meta = ds.phases[0].meta();
    for (const GridMeta* g : {&ds.phases[k].meta(), &ds.dvfs[k].meta(), &ds.masks[k].tumor.meta(),
                              &ds.masks[k].lungs.meta(), &ds.masks[k].body.meta()})
      if (!(*g == meta)) throw CommandError("grid mismatch inside " + dir.string() + " at phase " + std::to_string(k));
  }
  ds.params.grid = ds.phases[0].meta();
  return ds;
}

/// A directory holding amplitudes.txt is one instance; otherwise its
/// instance_0, instance_1, ... subdirectories are read in order.
inline std::vector<PhantomDataset> load_datasets(const fs::path& root) {
  if (!fs::is_directory(root)) throw CommandError("dataset directory not found: " + root.string());
  std::vector<PhantomDataset> out;
  if (fs::exists(root / "amplitudes.txt")) {
    out.push_back(load_instance(root));
    return out;
  }
  for (int i = 0; fs::is_directory(root / ("instance_" + std::to_string(i))); ++i)
    out.push_back(load_instance(root / ("instance_" + std::to_string(i))));
  if (out.empty()) throw CommandError("no phantom instances under " + root.string());
  return out;
}

// ---------------------------------------------------------------------------
// phantom-gen

struct PhantomGenOptions {
  int size = 32;
  int gates = 10;
  std::uint64_t seed = 1;
  int instances = 1;
  fs::path out;
};

/// Instance i is sampled with seed + i.
inline RunManifest cmd_phantom_gen(const PhantomGenOptions& o, const Logger& log = {}) {
  detail::Stopwatch sw;
  if (o.size < 8) throw CommandError("--size must be >= 8");
  if (o.gates < 2) throw CommandError("--gates must be >= 2");
  if (o.instances < 1) throw CommandError("--instances must be >= 1");
  detail::ensure_dir(o.out);
  RunManifest m;
  m.command = "phantom-gen";
  m.seed = o.seed;
  m.config = "size=" + std::to_string(o.size) + "\ngates=" + std::to_string(o.gates) +
             "\ninstances=" + std::to_string(o.instances) + "\n";
  for (int i = 0; i < o.instances; ++i) {
    const auto p = PhantomParams::sample(o.size, o.seed + static_cast<std::uint64_t>(i));
    const auto ds = generate_dataset(p, o.gates);
    const std::string sub = "instance_" + std::to_string(i);
    for (const auto& n : write_instance(ds, o.out / sub)) m.artifacts.push_back(sub + "/" + n);
    if (log) log("wrote " + sub + " (" + std::to_string(o.gates) + " phases, d_max " + format_number(p.d_max) + " mm)");
  }
  detail::finish(m, o.out, sw);
  return m;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  fs::path config, data, out, resume;
  std::optional<std::uint64_t> seed;  // overrides the config's seed
};

inline TrainConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed) {
  auto cfg = TrainConfig::load(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

inline std::string checkpoint_name(int epoch) { return "checkpoint_epoch_" + std::to_string(epoch) + ".rmck"; }
inline constexpr const char* kFinalCheckpoint = "checkpoint_final.rmck";

inline RunManifest cmd_train(const TrainOptions& o, const Logger& log = {}) {
  detail::Stopwatch sw;
  const auto cfg = load_config(o.config, o.seed);
  const auto data = load_datasets(o.data);
  detail::ensure_dir(o.out);
  Trainer t(cfg, data);
  if (!o.resume.empty()) {
    t.restore(nn::load_checkpoint(o.resume));
    if (log) log("resumed at epoch " + std::to_string(t.epochs_done()));
  }
  RunManifest m;
  m.command = "train";
  m.seed = cfg.seed;
  m.config = cfg.to_text();
  while (!t.finished()) {
    const auto& e = t.run_epoch();
    if (log) log(loss_csv_row(e));
    if (cfg.checkpoint_every > 0 && e.epoch % cfg.checkpoint_every == 0 && e.epoch < cfg.epochs) {
      nn::save_checkpoint(t.checkpoint(), o.out / checkpoint_name(e.epoch));
      m.artifacts.push_back(checkpoint_name(e.epoch));
    }
  }
  nn::save_checkpoint(t.checkpoint(), o.out / kFinalCheckpoint);
  detail::write_text(o.out / "loss_log.csv", loss_csv(t.log()));
  m.artifacts.push_back(kFinalCheckpoint);
  m.artifacts.push_back("loss_log.csv");
  detail::finish(m, o.out, sw);
  return m;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  fs::path checkpoint, input, out;
  fs::path masks;  // optional directory with lungs_0.volf / tumor_0.volf to carry along
  std::vector<double> alphas;
  bool slices = false;
};

/// 8-bit binary PGM. Rows run top to bottom.
inline std::string pgm(int width, int height, const std::vector<std::uint8_t>& pixels) {
  std::string s = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  s.append(pixels.begin(), pixels.end());
  return s;
}

inline std::uint8_t window_gray(float hu, double lo = -1000.0, double hi = 400.0) {
  const double t = std::clamp((hu - lo) / (hi - lo), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(255.0 * t));
}

/// Mid-coronal (x by z) and mid-sagittal (y by z) planes with superior up.
inline std::pair<std::string, std::string> mid_slices(const ScalarVolume& v) {
  const auto& d = v.dims();
  std::vector<std::uint8_t> cor, sag;
  for (int k = d[2] - 1; k >= 0; --k) {
    for (int i = 0; i < d[0]; ++i) cor.push_back(window_gray(v(i, d[1] / 2, k)));
    for (int j = 0; j < d[1]; ++j) sag.push_back(window_gray(v(d[0] / 2, j, k)));
  }
  return {pgm(d[0], d[2], cor), pgm(d[1], d[2], sag)};
}

inline RunManifest cmd_synth(const SynthOptions& o, const Logger& log = {}) {
  detail::Stopwatch sw;
  if (o.alphas.empty()) throw CommandError("--alphas needs at least one value");
  if (!fs::exists(o.checkpoint)) throw CommandError("missing file: " + o.checkpoint.string());
  const auto ck = nn::load_checkpoint(o.checkpoint);
  const auto model = load_synthesis_model(ck);
  const auto x = detail::load_required<float>(o.input);
  const auto d = x.dims();
  try {
    model.generator.config().validate_input({d[2], d[1], d[0]});
  } catch (const std::invalid_argument& e) {
    throw CommandError("input is incompatible with the checkpoint: " + std::string(e.what()));
  }
  {
    float sp[3];
    if (std::sscanf(ck.meta_at("spacing").c_str(), "%f,%f,%f", &sp[0], &sp[1], &sp[2]) == 3)
      for (int a = 0; a < 3; ++a)
        if (std::abs(sp[a] - x.meta().spacing[a]) > 1e-4f * sp[a])
          throw CommandError("input spacing differs from the training spacing stored in the checkpoint");
  }
  std::optional<Mask> lungs, tumor;
  if (!o.masks.empty()) {
    lungs = detail::load_required<std::uint8_t>(o.masks / detail::indexed("lungs", 0));
    tumor = detail::load_required<std::uint8_t>(o.masks / detail::indexed("tumor", 0));
    if (!(lungs->meta() == x.meta()) || !(tumor->meta() == x.meta()))
      throw CommandError("masks are not on the input grid");
  }
  detail::ensure_dir(o.out);
  RunManifest m;
  m.command = "synth";
  m.config = "checkpoint=" + o.checkpoint.string() + "\ninput=" + o.input.string() + "\n";
  const auto phases = synthesize(model.generator, model.alpha, x, o.alphas);
  for (std::size_t j = 0; j < phases.size(); ++j) {
    const auto& s = phases[j];
    auto put = [&](const auto& vol, const std::string& name) {
      save_volume(vol, o.out / name);
      m.artifacts.push_back(name);
    };
    put(s.image, detail::indexed("phase", j));
    put(s.dvf, detail::indexed("dvf", j));
    if (lungs) {
      put(warp_mask(*lungs, s.dvf), detail::indexed("lungs", j));
      put(warp_mask(*tumor, s.dvf), detail::indexed("tumor", j));
    }
    if (o.slices) {
      const auto [cor, sag] = mid_slices(s.image);
      for (auto [name, img] : {std::pair{"coronal_" + std::to_string(j) + ".pgm", &cor},
                               std::pair{"sagittal_" + std::to_string(j) + ".pgm", &sag}}) {
        detail::write_text(o.out / name, *img);
        m.artifacts.push_back(name);
      }
    }
    if (log) log("alpha " + format_number(s.alpha_mm) + " mm -> " + detail::indexed("phase", j));
  }
  detail::write_text(o.out / "amplitudes.txt", amplitudes_text(o.alphas));
  m.artifacts.push_back("amplitudes.txt");
  detail::finish(m, o.out, sw);
  return m;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  fs::path truth, candidate, out;
};

inline MetricReport summarize(const std::vector<MetricReport>& rows, bool sd) {
  auto pick = [&](double MetricReport::*f) {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.*f);
    return sd ? detail::sd_of(v) : detail::mean_of(v);
  };
  MetricReport s;
  s.alpha_mm = pick(&MetricReport::alpha_mm);
  s.mae = pick(&MetricReport::mae);
  s.ssim = pick(&MetricReport::ssim);
  s.vv_percent = pick(&MetricReport::vv_percent);
  s.dsc_lungs = pick(&MetricReport::dsc_lungs);
  s.dsc_tumor = pick(&MetricReport::dsc_tumor);
  s.com_lungs_mm = pick(&MetricReport::com_lungs_mm);
  s.com_tumor_mm = pick(&MetricReport::com_tumor_mm);
  s.tv = pick(&MetricReport::tv);
  s.jac_mean = pick(&MetricReport::jac_mean);
  s.jac_neg_fraction = pick(&MetricReport::jac_neg_fraction);
  return s;
}

inline std::size_t count_phase_files(const fs::path& dir) {
  std::size_t n = 0;
  while (fs::exists(dir / detail::indexed("phase", n))) ++n;
  return n;
}

/// Per-phase rows followed by "mean" and "sd" rows. A candidate without
/// dvf_<k>.volf is scored with a zero field.
inline std::vector<MetricReport> evaluate_dirs(const fs::path& truth, const fs::path& candidate) {
  if (!fs::is_directory(truth)) throw CommandError("truth directory not found: " + truth.string());
  if (!fs::is_directory(candidate)) throw CommandError("candidate directory not found: " + candidate.string());
  const auto amps = read_amplitudes(truth / "amplitudes.txt");
  const auto nc = count_phase_files(candidate);
  if (nc != 0 && nc != amps.size())
    throw CommandError("phase count mismatch: truth has " + std::to_string(amps.size()) + ", candidate has " +
                       std::to_string(nc));
  std::vector<MetricReport> rows;
  for (std::size_t k = 0; k < amps.size(); ++k) {
    auto load = [&](const fs::path& dir) {
      return PhaseWithMasks{detail::load_required<float>(dir / detail::indexed("phase", k)),
                            detail::load_required<std::uint8_t>(dir / detail::indexed("lungs", k)),
                            detail::load_required<std::uint8_t>(dir / detail::indexed("tumor", k))};
    };
    const auto t = load(truth), c = load(candidate);
    if (!(t.image.meta() == c.image.meta()) || !(c.lungs.meta() == c.image.meta()) || !(c.tumor.meta() == c.image.meta()))
      throw CommandError("grid mismatch at phase " + std::to_string(k));
    const auto dvf_path = candidate / detail::indexed("dvf", k);
    const auto phi = fs::exists(dvf_path) ? load_as<Vec3f>(dvf_path) : zero_field(t.image.meta());
    if (!(phi.meta() == t.image.meta())) throw CommandError("grid mismatch in " + dvf_path.string());
    auto r = evaluate_pair(t, c, phi);
    r.phase_index = static_cast<int>(k);
    r.alpha_mm = amps[k];
    rows.push_back(r);
  }
  return rows;
}

inline std::string metrics_csv(const std::vector<MetricReport>& rows) {
  std::string s = std::string(kMetricCsvHeader) + "\n";
  for (const auto& r : rows) s += metric_csv_row(r) + "\n";
  s += metric_csv_row("mean", summarize(rows, false)) + "\n";
  s += metric_csv_row("sd", summarize(rows, true)) + "\n";
  return s;
}

inline RunManifest cmd_eval(const EvalOptions& o, const Logger& log = {}) {
  detail::Stopwatch sw;
  const auto rows = evaluate_dirs(o.truth, o.candidate);
  detail::ensure_dir(o.out);
  detail::write_text(o.out / "metrics.csv", metrics_csv(rows));
  if (log) log("evaluated " + std::to_string(rows.size()) + " phases");
  RunManifest m;
  m.command = "eval";
  m.config = "truth=" + o.truth.string() + "\ncandidate=" + o.candidate.string() + "\n";
  m.artifacts = {"metrics.csv"};
  detail::finish(m, o.out, sw);
  return m;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOptions {
  fs::path config, data, out;
  std::optional<std::uint64_t> seed;
};

struct AblationRow {
  std::string name;
  MetricReport mean;  // averaged over every held-out (instance, gate) pair
};

inline constexpr const char* kAblationCsvHeader =
    "variant,mae,ssim,tv,jac_mean,jac_neg_fraction,vv_percent,dsc_lungs,dsc_tumor,com_tumor_mm";

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = std::string(kAblationCsvHeader) + "\n";
  for (const auto& r : rows) {
    s += r.name;
    const auto& m = r.mean;
    for (double v : {m.mae, m.ssim, m.tv, m.jac_mean, m.jac_neg_fraction, m.vv_percent, m.dsc_lungs, m.dsc_tumor,
                     m.com_tumor_mm})
      s += "," + format_number(v);
    s += "\n";
  }
  return s;
}

/// Scores a field source on every held-out pair. `field` returns the DVF used
/// to warp the EOE image and masks for (instance, gate).
inline std::vector<MetricReport> heldout_reports(const std::vector<PhantomDataset>& data, const std::vector<int>& gates,
                                                 const std::function<VectorField(std::size_t, int)>& field) {
  std::vector<MetricReport> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ds = data[i];
    for (int g : gates) {
      const auto phi = field(i, g);
      const PhaseWithMasks truth{ds.phases[g], ds.masks[g].lungs, ds.masks[g].tumor};
      const PhaseWithMasks cand{warp_volume(ds.phases[0], phi), warp_mask(ds.masks[0].lungs, phi),
                                warp_mask(ds.masks[0].tumor, phi)};
      auto r = evaluate_pair(truth, cand, phi);
      r.phase_index = g;
      r.alpha_mm = ds.amplitudes[g];
      out.push_back(r);
    }
  }
  return out;
}

/// Trains every loss variant from one base config and scores each on the
/// held-out gates, followed by a no-synthesis row and an oracle-DVF row.
inline std::vector<AblationRow> cmd_ablate(const AblateOptions& o, const Logger& log = {}) {
  detail::Stopwatch sw;
  const auto base = load_config(o.config, o.seed);
  if (base.heldout_gates.empty()) throw CommandError("ablation needs heldout_gates in the config");
  const auto data = load_datasets(o.data);
  for (const auto& ds : data)
    for (int g : base.heldout_gates)
      if (g < 1 || g >= static_cast<int>(ds.n_gates()))
        throw CommandError("held-out gate " + std::to_string(g) + " out of range");
  detail::ensure_dir(o.out);
  RunManifest m;
  m.command = "ablate";
  m.seed = base.seed;
  m.config = base.to_text();
  std::vector<AblationRow> rows;
  std::string samples = "variant,instance," + std::string(kMetricCsvHeader) + "\n";
  auto record = [&](const std::string& name, const std::vector<MetricReport>& reps) {
    for (std::size_t n = 0; n < reps.size(); ++n)
      samples += name + "," + std::to_string(n / base.heldout_gates.size()) + "," + metric_csv_row(reps[n]) + "\n";
    rows.push_back({name, summarize(reps, false)});
  };
  for (auto v : kAllVariants) {
    auto cfg = base;
    cfg.variant = v;
    cfg.checkpoint_every = 0;
    const std::string name(variant_name(v));
    if (log) log("training " + name);
    Trainer t(cfg, data);
    while (!t.finished()) t.run_epoch();
    detail::ensure_dir(o.out / name);
    nn::save_checkpoint(t.checkpoint(), o.out / name / kFinalCheckpoint);
    detail::write_text(o.out / name / "loss_log.csv", loss_csv(t.log()));
    m.artifacts.push_back(name + "/" + kFinalCheckpoint);
    m.artifacts.push_back(name + "/loss_log.csv");
    record(name, heldout_reports(data, base.heldout_gates, [&](std::size_t i, int g) {
             const double a = data[i].amplitudes[g];
             return synthesize(t.generator(), t.alpha_scale(), data[i].phases[0], std::span<const double>(&a, 1))[0].dvf;
           }));
    if (log) log(name + ": " + ablation_csv({rows.back()}).substr(std::string(kAblationCsvHeader).size() + 1));
  }
  record("no_synthesis", heldout_reports(data, base.heldout_gates,
                                         [&](std::size_t i, int) { return zero_field(data[i].phases[0].meta()); }));
  record("reference", heldout_reports(data, base.heldout_gates, [&](std::size_t i, int g) { return data[i].dvfs[g]; }));
  detail::write_text(o.out / "ablation.csv", ablation_csv(rows));
  detail::write_text(o.out / "ablation_samples.csv", samples);
  m.artifacts.push_back("ablation.csv");
  m.artifacts.push_back("ablation_samples.csv");
  detail::finish(m, o.out, sw);
  return rows;
}

}  // namespace rmsynth::cli
