// rtn: generate datasets, train and evaluate classifiers, inspect artifacts.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid input.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "rtn/experiment.hpp"

namespace {

using rtn::exp::ExperimentConfig;
namespace fs = std::filesystem;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string model;
  std::optional<std::size_t> epochs;
  std::string resume;
  std::string compare;
  std::string dataset;
  std::string checkpoint;
  std::string path;
};

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : rtn::exp::load_config(f.config);
  if (f.seed) cfg.set_seed(*f.seed);
  if (!f.model.empty()) cfg.model.kind = rtn::nn::parse_model_kind(f.model);
  if (f.epochs) cfg.train.max_epochs = *f.epochs;
  return cfg;
}

fs::path output_dir(const Flags& f, const ExperimentConfig& cfg) {
  if (!f.out.empty()) return f.out;
  if (cfg.out) return *cfg.out;
  throw rtn::InvalidInput("no output directory: pass --out or set \"out\" in the config");
}

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON)");
  cmd->add_option("--seed", f.seed, "experiment seed, overrides the config");
  cmd->add_option("--out", f.out, "output directory, overrides the config");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radio transformer network experiments"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("generate", "synthesize a labelled dataset container");
  add_common(gen, f);

  auto* tr = app.add_subcommand("train", "train a classifier on a dataset container");
  add_common(tr, f);
  tr->add_option("dataset", f.dataset, "dataset container directory")->required();
  tr->add_option("--model", f.model, "baseline or rtn")->check(CLI::IsMember({"baseline", "rtn"}));
  tr->add_option("--epochs", f.epochs, "maximum number of epochs");
  tr->add_option("--resume", f.resume, "resume from a checkpoint_last directory");

  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on the held-out test split");
  add_common(ev, f);
  ev->add_option("checkpoint", f.checkpoint, "checkpoint directory")->required();
  ev->add_option("dataset", f.dataset, "dataset container directory")->required();
  ev->add_option("--compare", f.compare, "second checkpoint to compare against");

  auto* in = app.add_subcommand("inspect", "describe a dataset container or checkpoint");
  in->add_option("path", f.path, "container or checkpoint directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      const auto cfg = resolve(f);
      rtn::exp::cmd_generate(cfg, output_dir(f, cfg), std::cout);
    } else if (*tr) {
      const auto cfg = resolve(f);
      rtn::exp::cmd_train(cfg, f.dataset, output_dir(f, cfg), opt_path(f.resume), std::cout);
    } else if (*ev) {
      const auto cfg = resolve(f);
      rtn::exp::cmd_evaluate(cfg, f.checkpoint, f.dataset, output_dir(f, cfg), opt_path(f.compare), std::cout);
    } else if (*in) {
      rtn::exp::cmd_inspect(f.path, std::cout);
    }
  } catch (const rtn::InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
