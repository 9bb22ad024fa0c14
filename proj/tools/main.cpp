#include <iostream>

#include "CLI11.hpp"
#include "pipeline.hpp"

int main(int argc, char** argv) {
  using namespace regime::cli;
  CLI::App app{"Regime detection for panels of count time series"};
  app.require_subcommand(1);
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> out;
  for (const auto& m : kMethods) {
    auto* sub = app.add_subcommand(m, "run the " + m + " method");
    sub->add_option("--config", config, "JSON configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "output directory");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string method = app.get_subcommands().front()->get_name();
  try {
    Overrides ov;
    ov.seed = seed;
    ov.threads = threads;
    if (out) ov.out = *out;
    const PipelineConfig cfg = load_config(config, method, ov);
    const RunManifest man = run(cfg);
    std::cout << method << ": wrote " << man.checksums.size() + 1 << " files to " << cfg.out.string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "regime " << method << ": " << e.what() << '\n';
    return exit_code_for(e);
  }
}
