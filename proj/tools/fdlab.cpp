#include <CLI11.hpp>

#include <iostream>

#include "flowdistill/pipeline.hpp"
#include "flowdistill/runtime.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kConfigError = 2;
constexpr int kMissingArtifact = 3;

}  // namespace

int main(int argc, char** argv) {
  fd::tune_runtime();
  CLI::App app{"flowdistill experiment runner"};
  app.require_subcommand(1, 0);  // several run in the order given
  app.set_version_flag("--version", fd::tool_version());

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  bool force = false;
  bool quiet = false;
  app.add_option("--config", config_path, "experiment JSON config")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
  app.add_option("--out", out, "override the output directory");
  app.add_flag("--force", force, "overwrite existing command outputs");
  app.add_flag("-q,--quiet", quiet, "no progress lines");

  const std::vector<std::pair<std::string, std::string>> subs{
      {"gen-data", "generate the demo corpus"},
      {"train-teacher", "train encoder and flow-matching teacher"},
      {"sample-teacher", "sample K-trajectory teacher sets for distillation"},
      {"distill", "train the one-step student with set-level IMLE"},
      {"eval", "coverage, fidelity and collapse on held-out observations"},
      {"simulate", "closed-loop episodes under the latency model"},
      {"speed", "wall-clock per action chunk"},
      {"ablate", "K and execute-step sweeps"},
      {"print-config", "print the effective configuration"},
  };
  for (const auto& [name, help] : subs) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  std::vector<std::string> commands;
  for (const auto* sub : app.get_subcommands()) commands.push_back(sub->get_name());
  try {
    fd::ExperimentConfig cfg = config_path.empty() ? fd::default_config() : fd::load_config(config_path);
    if (*seed_opt) cfg.seed = seed;
    if (!out.empty()) cfg.output = out;
    fd::validate(cfg);
    fd::RunOptions opt;
    opt.force = force;
    opt.log = quiet ? nullptr : &std::cerr;
    fd::Pipeline pipeline(cfg, opt);
    for (const auto& command : commands) {
      if (command == "print-config") {
        std::cout << fd::config_to_json(cfg);
        continue;
      }
      const fd::ManifestRecord r = pipeline.run(command);
      for (const auto& a : r.artifacts) std::cout << a.sha1 << "  " << (cfg.output / a.path).string() << '\n';
    }
    return kOk;
  } catch (const fd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const fd::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return kMissingArtifact;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
