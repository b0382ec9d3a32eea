#include "tokenflow/harness.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <exception>
#include <optional>
#include <string>
#include <vector>

int main(int argc, char** argv) {
  // stdout carries results only; everything human-facing goes to stderr.
  auto log = spdlog::stderr_color_mt("tokenflow");
  log->set_pattern("[%H:%M:%S] %^%l%$ %v");

  CLI::App app{"Token-budgeted multimodal transformer for beam and link-status prediction"};
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma_prime;
  std::optional<double> budget_flops;
  std::optional<std::string> ablation, out, dataset, checkpoint, task;
  std::optional<long> scenarios, frames, epochs, seeds;
  std::vector<std::string> sets;
  bool verbose = false;

  app.add_option("command", command, "generate | train | eval | benchmark | ablate")
      ->required()
      ->check(CLI::IsMember({"generate", "train", "eval", "benchmark", "ablate"}));
  app.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "master seed");
  app.add_option("--gamma-prime", gamma_prime, "target keep ratio");
  app.add_option("--budget-flops", budget_flops, "FLOPs budget; converted to a target keep ratio");
  app.add_option("--ablation", ablation, "none | freeze_tokenizers | random_routing | uniform_ratio(p)");
  app.add_option("--out", out, "output directory (dataset directory for generate)");
  app.add_option("--dataset", dataset, "dataset directory");
  app.add_option("--checkpoint", checkpoint, "checkpoint path, default <out>/model.ckpt");
  app.add_option("--task", task, "beam | handover");
  app.add_option("--scenarios", scenarios, "scenarios to generate");
  app.add_option("--frames", frames, "frames per scenario");
  app.add_option("--epochs", epochs, "training epochs");
  app.add_option("--seeds", seeds, "train/ablate over this many consecutive seeds");
  app.add_option("--set", sets, "extra key=value override, repeatable");
  app.add_flag("-v,--verbose", verbose, "debug logging");
  CLI11_PARSE(app, argc, argv);
  if (verbose) log->set_level(spdlog::level::debug);

  try {
    tokenflow::RunConfig cfg;
    // Task first so the remaining keys land on the right presets.
    if (task) cfg.set("task", *task);
    if (!config_path.empty()) cfg = tokenflow::load_run_config(config_path, cfg);
    cfg.command = tokenflow::parse_command(command);
    // A conflicting task in the config file loses to the flag.
    if (task && tokenflow::parse_task(*task) != cfg.model.task) cfg.set("task", *task);
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (gamma_prime) cfg.train.gamma_prime = *gamma_prime;
    if (budget_flops) cfg.train.budget_flops = *budget_flops;
    if (ablation) cfg.set("ablation", *ablation);
    if (out) cfg.out = *out;
    if (dataset) cfg.dataset = *dataset;
    if (checkpoint) cfg.checkpoint = *checkpoint;
    if (scenarios) cfg.set("scenarios", std::to_string(*scenarios));
    if (frames) cfg.set("frames", std::to_string(*frames));
    if (epochs) cfg.set("epochs", std::to_string(*epochs));
    if (seeds) cfg.set("seeds", std::to_string(*seeds));
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    log->info("{} (seed {})", command, cfg.seed);
    return tokenflow::run_command(cfg, [&](const std::string& msg) { log->info("{}", msg); });
  } catch (const std::exception& e) {
    log->error("{}", e.what());
    return 1;
  }
}
