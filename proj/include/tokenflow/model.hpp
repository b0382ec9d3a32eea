#pragma once

#include "tokenflow/keepratio.hpp"
#include "tokenflow/tokenizers.hpp"

#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tokenflow {

struct ModelParams {
  TokenizerParams tokenizer;
  std::vector<RouterParams> routers;
  std::vector<BlockParams> blocks;
  std::vector<Var> ratios;  // one [1] Var per block
  Var final_ln_g, final_ln_b;
  Var head_w, head_b;
};

enum class ParamGroup { kTokenizer, kRouter, kBlock, kRatio, kHead };

struct NamedParam {
  std::string name;
  Var var;
  ParamGroup group;
};

ModelParams init_model_params(const ModelConfig& config, std::uint64_t seed);
/// Every distinct parameter once, in a fixed order.
std::vector<NamedParam> named_parameters(const ModelParams& params);
Index parameter_count(const ModelParams& params);

enum class RoutingMode { kLearned, kRandom };

/// [n, 1] scores drawn U(0, 1); the routing used by the random ablation.
Var random_scores(Index n, std::mt19937_64* rng);

struct ForwardOptions {
  RoutingMode routing = RoutingMode::kLearned;
  std::mt19937_64* rng = nullptr;  // required for kRandom
  /// Inference only: per-block ratios to use instead of the learned ones.
  std::span<const double> ratio_override;
};

struct ForwardResult {
  Var logits;  // [1, output_size]
  Var r_avg;
  std::vector<DualPassTrace> blocks;
};

ForwardResult forward_train(std::span<const ModalityFrame> frames, const ModelParams& params,
                            const ModelConfig& config, const ForwardOptions& options = {});

/// Single pass per block with K = ceil(r N); records nothing.
Tensor forward_infer(std::span<const ModalityFrame> frames, const ModelParams& params, const ModelConfig& config,
                     const ForwardOptions& options = {}, std::vector<BlockTrace>* traces = nullptr);

struct Target {
  Index beam = -1;  // beam task
  Tensor link;      // handover task, one 0/1 entry per vehicle
};

struct LossParts {
  Var total;
  Var task;
  Var penalty;
};

LossParts total_loss(const Var& logits, const Target& target, std::span<const Var> ratios, const ModelConfig& config);

struct Prediction {
  Index beam = -1;
  std::vector<Index> top1, top3, top5;
  std::vector<int> link;
};

/// Beam: arg-max and top-k sets (k clamped to the class count). Handover:
/// link = 1 iff sigmoid(logit) > 0.5.
Prediction predict(const Tensor& logits, Task task);

/// Single file: "TFCK" | u32 version | u64 json bytes | json manifest | TNSR blobs.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path);

}  // namespace tokenflow
