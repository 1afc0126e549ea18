#include <iostream>

#include <CLI11.hpp>

#include "fedtail/cli.hpp"

namespace {

void add_common(CLI::App* cmd, fedtail::cli::Options& o, bool config_required) {
  auto* config = cmd->add_option("--config", o.config, "JSON experiment config");
  if (config_required) config->required();
  cmd->add_option("--set", o.sets, "Override a config value, e.g. fedtail.rho=0.05 (repeatable)");
  cmd->add_option("--seed", o.seed, "Base seed");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  fedtail::cli::init_logging();
  fedtail::cli::Options opts;

  CLI::App app{"FedTAIL federated domain-generalization lab"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Leave-one-domain-out training over seeds");
  add_common(run, opts, true);
  run->add_option("--checkpoint-every", opts.checkpoint_every, "Write global+teacher params every N rounds");
  run->add_option("--threads", opts.threads, "Client worker threads (0 = all cores)");

  auto* abl = app.add_subcommand("ablation", "Five-row loss-term ladder");
  add_common(abl, opts, true);
  abl->add_option("--checkpoint-every", opts.checkpoint_every, "Write global+teacher params every N rounds");
  abl->add_option("--threads", opts.threads, "Client worker threads (0 = all cores)");

  auto* emb = app.add_subcommand("export-embeddings", "Feature embeddings of validation data");
  add_common(emb, opts, true);
  emb->add_option("--checkpoint", opts.checkpoint, "Params file written by --checkpoint-every")->required();

  auto* gen = app.add_subcommand("gen-data", "Write synthetic domains as .data files");
  add_common(gen, opts, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fedtail::cli::kConfigError;
  }

  if (run->parsed()) return fedtail::cli::run(opts);
  if (abl->parsed()) return fedtail::cli::ablation(opts);
  if (emb->parsed()) return fedtail::cli::export_embeddings(opts);
  return fedtail::cli::gen_data(opts);
}
