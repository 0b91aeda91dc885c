// Experiment driver: generates synthetic cohorts, tunes feature extraction
// models against planted ROI responses, and emits every evaluation artifact
// (encoding scores, transfer matrices, probes, landscapes, MI tables,
// salience maps, reports).

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>

#include "neuroenc/experiment.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
};

std::string default_out_root() {
  if (const char* env = std::getenv("NEUROENC_OUT")) return env;
  return "runs";
}

neuroenc::Experiment make_experiment(const CommonOpts& opts) {
  auto cfg = neuroenc::ExperimentConfig::load(opts.config_path);
  if (opts.seed_set) {
    cfg.seed = opts.seed;
    cfg.finalize_seeds();
  }
  std::string out = opts.out_dir;
  if (out.empty()) out = default_out_root() + "/" + cfg.name + "_" + cfg.hash();
  neuroenc::Experiment exp(cfg, out);
  exp.set_jobs(opts.jobs);
  return exp;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "experiment config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", opts.out_dir,
                  "output directory (default: $NEUROENC_OUT/<name>_<hash>)");
  cmd->add_option("--seed", opts.seed, "override the config's global seed")
      ->each([&opts](const std::string&) { opts.seed_set = true; });
  cmd->add_option("--jobs", opts.jobs, "parallel tuning jobs")
      ->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic-cohort contrastive encoding experiments"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string tune_method = "all";
  std::string run_stage;

  auto* synth = app.add_subcommand("synth", "generate synthetic cohorts");
  auto* pretrain = app.add_subcommand("pretrain", "classification pretraining");
  auto* cv = app.add_subcommand("cv", "layer/penalty cross-validation");
  auto* tune = app.add_subcommand("tune", "fine-tune feature extraction models");
  tune->add_option("--method", tune_method, "cl | reg | pooled | all")
      ->check(CLI::IsMember({"cl", "reg", "pooled", "all"}));
  auto* encode = app.add_subcommand("encode", "fit and score encoding pipelines");
  auto* transfer = app.add_subcommand("transfer", "cross-subject transfer matrices");
  auto* external = app.add_subcommand("external", "external-cohort validation");
  auto* probe = app.add_subcommand("probe", "downstream linear probes");
  auto* landscape = app.add_subcommand("landscape", "model dissimilarity landscape");
  auto* mi = app.add_subcommand("mi", "mutual-information lower bounds");
  auto* saliency = app.add_subcommand("saliency", "salience lateralization probe");
  auto* report = app.add_subcommand("report", "aggregate tables and significance");
  auto* run = app.add_subcommand("run", "run the full pipeline");
  run->add_option("--stage", run_stage, "stop after this stage");

  for (auto* cmd : {synth, pretrain, cv, tune, encode, transfer, external, probe,
                    landscape, mi, saliency, report, run})
    add_common(cmd, opts);

  CLI11_PARSE(app, argc, argv);

  try {
    auto exp = make_experiment(opts);
    if (synth->parsed()) exp.run_stage("synth");
    if (pretrain->parsed()) exp.run_stage("pretrain");
    if (cv->parsed()) exp.run_stage("cv");
    if (tune->parsed()) {
      if (tune_method == "cl") exp.tune_cl();
      else if (tune_method == "reg") exp.tune_reg();
      else if (tune_method == "pooled") exp.tune_pooled();
      else exp.run_stage("tune");
    }
    if (encode->parsed()) exp.run_stage("encode");
    if (transfer->parsed()) exp.run_stage("transfer");
    if (external->parsed()) exp.run_stage("external");
    if (probe->parsed()) exp.run_stage("probe");
    if (landscape->parsed()) exp.run_stage("landscape");
    if (mi->parsed()) exp.run_stage("mi");
    if (saliency->parsed()) exp.run_stage("saliency");
    if (report->parsed()) exp.run_stage("report");
    if (run->parsed()) exp.run_all(run_stage);
    std::cout << "done (config " << exp.config_hash() << ", artifacts in "
              << exp.root().string() << ")\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
