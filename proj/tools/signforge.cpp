#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "signforge/config.hpp"
#include "signforge/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"signforge: synthetic physical-attack pipeline for a toy grid detector"};
  std::string command, config_path, out_dir;
  std::uint64_t seed = 0;
  bool seed_given = false;
  app.add_option("command", command, "one of: gen-data, train, attack-disappear, "
                                     "attack-create, eval, transfer, render")
      ->required()
      ->check(CLI::IsMember({"gen-data", "train", "attack-disappear", "attack-create",
                             "eval", "transfer", "render"}));
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "override the config seed")
      ->each([&](const std::string&) { seed_given = true; });
  app.add_option("--out", out_dir, "override the output directory");
  CLI11_PARSE(app, argc, argv);

  try {
    signforge::cli::RunConfig cfg;
    if (!config_path.empty()) cfg = signforge::cli::parse_config_file(config_path);
    if (seed_given) cfg.seed = seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    signforge::cli::run(command, cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "signforge " << command << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
