// SPDX-License-Identifier: Apache-2.0
//
// slpt: train, evaluate, sweep and export attention maps.
//
//   slpt train  [--config FILE] [--seed N] [--out DIR] [--dataset synthetic|PATH] ...
//   slpt eval   --out DIR [--checkpoint FILE] ...
//   slpt export-attention --out DIR ...
//   slpt sweep  --axis stages|patch_k|layers|blocks|encoding ...
//
// Settings come from the config file (key=value lines) and are overridden
// by flags; any other setting can be passed as --set key=value.

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "slpt/run.hpp"

namespace {

struct Flags {
  std::string config;
  std::map<std::string, std::string> values;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key=value config file");
  const std::vector<std::pair<std::string, std::string>> keyed{
      {"seed", "random seed"},
      {"out", "output directory"},
      {"dataset", "'synthetic' or an annotation path"},
      {"format", "pts68, wflw98-csv or cofw29"},
      {"stages", "coarse-to-fine stages"},
      {"layers", "inherent relation layers"},
      {"patch-k", "resized patch size K"},
      {"heads", "attention heads"},
      {"dim", "embedding width C_I"},
      {"epochs", "training epochs"},
      {"lr", "initial learning rate"},
      {"milestones", "comma-separated epochs at which lr decays"},
      {"threshold", "failure threshold as a fraction of the inter-ocular distance"},
      {"checkpoint", "checkpoint to evaluate"},
  };
  for (const auto& [name, help] : keyed) {
    std::string key = name;
    for (char& c : key) c = c == '-' ? '_' : c;
    cmd->add_option_function<std::string>("--" + name, [&f, key](const std::string& v) { f.values[key] = v; }, help);
  }
  cmd->add_option("--set", f.sets, "extra key=value override (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse local patch transformer for facial landmarks"};
  app.require_subcommand(1);
  Flags flags;
  std::string axis;
  std::size_t jobs = 1;
  const char* commands[] = {"train", "eval", "export-attention", "sweep"};
  const char* help[] = {"train a model and write checkpoints and an epoch log",
                        "evaluate a checkpoint on the held-out set",
                        "write mean attention matrices and connection lists",
                        "train and compare settings along one axis"};
  for (int i = 0; i < 4; ++i) {
    auto* cmd = app.add_subcommand(commands[i], help[i]);
    add_common(cmd, flags);
    if (std::string(commands[i]) == "sweep") {
      cmd->add_option("--axis", axis, "stages, patch_k, layers, blocks or encoding")->required();
      cmd->add_option("--jobs", jobs, "settings trained concurrently");
    }
  }
  CLI11_PARSE(app, argc, argv);

  try {
    slpt::RunConfig cfg;
    if (!flags.config.empty()) cfg.apply(slpt::KeyValues::read_file(flags.config));
    slpt::KeyValues overrides;
    for (const auto& s : flags.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw slpt::InputError("--set expects key=value, got '" + s + "'");
      overrides.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : flags.values) overrides.set(k, v);
    overrides.set("command", app.get_subcommands().front()->get_name());
    if (!axis.empty()) overrides.set("axis", axis);
    if (jobs != 1) overrides.set("jobs", std::to_string(jobs));
    cfg.apply(overrides);
    cfg.validate();
    return slpt::run_command(cfg, std::cout);
  } catch (const slpt::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
