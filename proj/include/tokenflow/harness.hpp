#pragma once

#include "tokenflow/dataset.hpp"
#include "tokenflow/flops.hpp"
#include "tokenflow/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tokenflow {

enum class Command { kGenerate, kTrain, kEval, kBenchmark, kAblate };

Command parse_command(const std::string& name);
const char* command_name(Command command);

enum class AblationKind { kNone, kFreezeTokenizers, kRandomRouting, kUniformRatio };

struct Ablation {
  AblationKind kind = AblationKind::kNone;
  double p = 0.3;  // uniform_ratio only
};

/// "none", "freeze_tokenizers", "random_routing", "uniform_ratio(p)" or "uniform_ratio:p".
Ablation parse_ablation(const std::string& text);
std::string ablation_name(const Ablation& ablation);

struct TrainOptions {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double ratio_lr = 5e-3;  // keep ratios move on a much faster scale than weights
  Index batch = 16;
  Index epochs = 15;
  Index train_limit = 0;  // 0 = whole train split
  Index eval_limit = 0;   // 0 = whole val split
  std::optional<double> gamma_prime;
  std::optional<double> budget_flops;  // alternative to gamma_prime
  std::optional<double> lambda;
};

struct RunConfig {
  Command command = Command::kTrain;
  std::filesystem::path dataset = "data";
  std::filesystem::path out = "out";
  std::filesystem::path checkpoint;  // defaults to out/model.ckpt
  std::string preset = "desk";       // model preset: desk, paper, tiny
  ScenarioConfig scenario = ScenarioConfig::desk(Task::kBeam);
  ModelConfig model = ModelConfig::desk(Task::kBeam);
  TrainOptions train;
  std::uint64_t seed = 7;
  Index seeds = 1;
  Ablation ablation;
  Index bench_runs = 30;

  /// Applies one documented key; throws std::invalid_argument on unknown keys
  /// or unparsable values. "task" resets the scenario and model presets.
  void set(const std::string& key, const std::string& value);
};

/// Flat "key = value" lines, '#' starts a comment.
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
std::vector<std::string> run_config_keys();

/// Model config matching a dataset: task, tau, modalities, class and
/// vehicle counts and raster sizes come from the scenario.
ModelConfig model_for_dataset(const ScenarioConfig& scenario, ModelConfig base);

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0.0;
  double task_loss = 0.0;
  double penalty = 0.0;
  std::vector<double> ratios;
  Index skipped_steps = 0;
  double seconds = 0.0;  // timing, excluded from determinism checks
};

struct EvalMetrics {
  Task task = Task::kBeam;
  Index samples = 0;
  double top1 = 0.0, top3 = 0.0, top5 = 0.0;  // beam
  double accuracy = 0.0;                       // handover, per vehicle entry
  double primary() const { return task == Task::kBeam ? top1 : accuracy; }
};

struct TrainResult {
  ModelConfig config;
  ModelParams params;
  std::vector<EpochRecord> epochs;
  EvalMetrics eval;
  double gamma_prime = 1.0;
  double lambda = 0.0;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Mini-batch AdamW over the train split. Throws std::runtime_error on a
/// non-finite loss.
TrainResult train_model(const Dataset& data, ModelConfig config, const TrainOptions& options, const Ablation& ablation,
                        std::uint64_t seed, const ProgressFn& progress = {});

EvalMetrics evaluate(const Dataset& data, const std::vector<Index>& samples, const ModelParams& params,
                     const ModelConfig& config, RoutingMode routing = RoutingMode::kLearned, std::uint64_t seed = 0);

struct BenchRow {
  std::string label;
  std::vector<double> ratios;
  double median_ms = 0.0;
  std::uint64_t flops = 0;
};

/// Median batch-1 forward_infer wall clock over `runs` repetitions, as
/// trained and at forced uniform ratios.
std::vector<BenchRow> benchmark(const Dataset& data, const ModelParams& params, const ModelConfig& config, Index runs,
                                const std::vector<double>& forced = {0.3, 0.5, 0.7, 1.0});

std::vector<double> learned_ratios(const ModelParams& params);

nlohmann::json metrics_json(const TrainResult& result, const Ablation& ablation, std::uint64_t seed);
nlohmann::json eval_json(const EvalMetrics& metrics);
/// Copy without timing fields, for byte-level determinism comparisons.
nlohmann::json strip_timing(nlohmann::json metrics);

std::string keep_ratio_csv(const ModelParams& params, const ModelConfig& config);
std::string bench_csv(const std::vector<BenchRow>& rows);

struct AblationRow {
  std::string mode;
  std::vector<EvalMetrics> runs;  // one per seed
};

std::vector<AblationRow> run_ablations(const Dataset& data, const ModelConfig& config, const TrainOptions& options,
                                       std::uint64_t seed, Index seeds, const ProgressFn& progress = {});
std::string ablation_table(const std::vector<AblationRow>& rows);

/// Runs one command end to end, writing outputs under config.out.
/// Machine-readable results go to stdout; progress goes to `progress`.
int run_command(const RunConfig& config, const ProgressFn& progress = {});

}  // namespace tokenflow
