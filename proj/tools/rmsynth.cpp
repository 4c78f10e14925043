// rmsynth: phantom generation, training, synthesis, evaluation and loss
// ablation from the command line.

#include <malloc.h>

#include <CLI11.hpp>
#include <iostream>

#include "rmsynth/commands.hpp"

using namespace rmsynth;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
  // Large graph buffers are reused every step; keeping them on the heap
  // instead of fresh mmaps saves most of the kernel time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Respiratory motion synthesis from a static CT volume"};
  app.set_version_flag("--version", std::string(cli::kToolVersion));
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  cli::PhantomGenOptions pg;
  auto* c_pg = app.add_subcommand("phantom-gen", "Generate a 4D phantom dataset");
  c_pg->add_option("--size", pg.size, "Cubic grid size in voxels")->check(CLI::Range(8, 1024));
  c_pg->add_option("--gates", pg.gates, "Respiratory phases per instance")->check(CLI::Range(2, 1000));
  c_pg->add_option("--seed", pg.seed, "Phantom seed (instance i uses seed + i)");
  c_pg->add_option("--instances", pg.instances, "Number of phantom instances")->check(CLI::Range(1, 1000));
  c_pg->add_option("--out", pg.out, "Output directory")->required();

  cli::TrainOptions tr;
  std::uint64_t tr_seed = 0;
  auto* c_tr = app.add_subcommand("train", "Train the generator and discriminator");
  c_tr->add_option("--config", tr.config, "Training config (key=value)")->required()->check(CLI::ExistingFile);
  c_tr->add_option("--data", tr.data, "Dataset directory")->required();
  c_tr->add_option("--out", tr.out, "Output directory")->required();
  c_tr->add_option("--resume", tr.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  auto* tr_seed_opt = c_tr->add_option("--seed", tr_seed, "Override the config seed");

  cli::SynthOptions sy;
  auto* c_sy = app.add_subcommand("synth", "Synthesize phases from a static volume");
  c_sy->add_option("--checkpoint", sy.checkpoint, "Trained checkpoint")->required();
  c_sy->add_option("--input", sy.input, "Static input volume (VOLF)")->required();
  c_sy->add_option("--alphas", sy.alphas, "Amplitudes in mm")->required()->delimiter(',');
  c_sy->add_option("--masks", sy.masks, "Directory with lungs_0.volf and tumor_0.volf to warp along");
  c_sy->add_option("--out", sy.out, "Output directory")->required();
  c_sy->add_flag("--slices", sy.slices, "Also write mid-coronal and mid-sagittal PGM slices");

  cli::EvalOptions ev;
  auto* c_ev = app.add_subcommand("eval", "Score candidate phases against ground truth");
  c_ev->add_option("--truth", ev.truth, "Ground-truth instance directory")->required();
  c_ev->add_option("--candidate", ev.candidate, "Candidate directory")->required();
  c_ev->add_option("--out", ev.out, "Output directory")->required();

  cli::AblateOptions ab;
  std::uint64_t ab_seed = 0;
  auto* c_ab = app.add_subcommand("ablate", "Train and score every loss variant");
  c_ab->add_option("--config", ab.config, "Base training config")->required()->check(CLI::ExistingFile);
  c_ab->add_option("--data", ab.data, "Dataset directory")->required();
  c_ab->add_option("--out", ab.out, "Output directory")->required();
  auto* ab_seed_opt = c_ab->add_option("--seed", ab_seed, "Override the config seed");

  CLI11_PARSE(app, argc, argv);

  const cli::Logger log = [&](const std::string& s) {
    if (!quiet) std::cout << s << std::endl;
  };
  try {
    if (*c_pg) cli::cmd_phantom_gen(pg, log);
    if (*c_tr) {
      if (*tr_seed_opt) tr.seed = tr_seed;
      cli::cmd_train(tr, log);
    }
    if (*c_sy) cli::cmd_synth(sy, log);
    if (*c_ev) cli::cmd_eval(ev, log);
    if (*c_ab) {
      if (*ab_seed_opt) ab.seed = ab_seed;
      cli::cmd_ablate(ab, log);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
