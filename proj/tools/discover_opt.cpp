#include "discover/cli.hpp"

#include "CLI11.hpp"

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t next = s.find(',', pos);
    if (next == std::string::npos) next = s.size();
    const std::string tok = s.substr(pos, next - pos);
    if (!tok.empty()) seeds.push_back(std::strtoull(tok.c_str(), nullptr, 10));
    pos = next + 1;
  }
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"discover-opt: clustered variance-reduced optimization experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string seeds_str;
  int shards = 0;

  const char* descriptions[][2] = {
      {"train", "run training for the configured optimizer and emit CSV/plots"},
      {"variance", "between-cluster variance measurement for SGD, Momentum and Discover"},
      {"verify-bound", "certify the convergence bound on a quadratic instance"},
      {"sweep", "run the hyperparameter grid from the config's sweep block"},
  };
  for (const auto& d : descriptions) {
    CLI::App* sub = app.add_subcommand(d[0], d[1]);
    sub->add_option("--config", config_path, "path to the JSON run config")->required();
    sub->add_option("--out", out_dir, "output directory (overrides config out_dir)");
    sub->add_option("--seeds", seeds_str, "comma-separated seed list (overrides config)");
    sub->add_option("--shards", shards, "shard count (overrides config; batch size must divide)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << std::endl;
    return discover::kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::endl;
    return discover::kExitConfigError;
  }

  const std::string subcommand = app.get_subcommands().front()->get_name();
  try {
    std::ifstream in(config_path);
    if (!in) throw discover::ConfigError({"config file not found: " + config_path});
    discover::Json raw;
    try {
      raw = discover::Json::parse(in);
    } catch (const discover::Json::exception& e) {
      throw discover::ConfigError({std::string("config is not valid JSON: ") + e.what()});
    }
    discover::RunConfig cfg = discover::parse_config_json(raw);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!seeds_str.empty()) {
      cfg.seeds = parse_seed_list(seeds_str);
      if (cfg.seeds.empty()) throw discover::ConfigError({"--seeds: empty seed list"});
    }
    if (shards > 0) {
      if (cfg.loop.batch_size % shards != 0)
        throw discover::ConfigError({"--shards: batch_size must be divisible by shard count"});
      cfg.loop.n_shards = shards;
    }
    return discover::run_suite(cfg, subcommand, raw);
  } catch (const discover::ConfigError& e) {
    std::cerr << e.what() << std::endl;
    return discover::kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return discover::kExitConfigError;
  }
}
