#pragma once

#include "tokenflow/config.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tokenflow {

// One multiply-add counts as 2 FLOPs. Layer norm, softmax and GELU cost
// kElementwiseFlops per element; bias adds, residual adds, gating and pooling
// comparisons cost 1.
inline constexpr std::uint64_t kElementwiseFlops = 5;

enum class FlopsGroup { kTokenizer, kRouter, kBlock, kHead };

const char* flops_group_name(FlopsGroup group);

struct FlopsEntry {
  std::string name;
  FlopsGroup group = FlopsGroup::kBlock;
  std::uint64_t flops = 0;
  std::uint64_t memory_bytes = 0;
};

enum class BudgetVerdict { kWithin, kOver };

struct FlopsReport {
  std::vector<FlopsEntry> entries;
  std::vector<Index> tokens;  // K per block
  std::optional<double> budget;
  std::optional<BudgetVerdict> verdict;

  std::uint64_t total_flops() const;
  std::uint64_t total_memory() const;
  std::uint64_t group_flops(FlopsGroup group) const;
  /// Sum over entries whose name starts with prefix.
  std::uint64_t flops_of(const std::string& prefix) const;
};

/// Throws std::invalid_argument unless k has one entry per block, each in [1, N].
FlopsReport count_flops(const ModelConfig& config, std::span<const Index> k, Index element_bytes = 4);

/// Activation memory per entry, same names as count_flops.
std::vector<std::pair<std::string, std::uint64_t>> estimate_memory(const ModelConfig& config, std::span<const Index> k,
                                                                   Index element_bytes = 4);

/// K_l = inference_k(r_l, N) for each block.
std::vector<Index> tokens_for_ratios(const ModelConfig& config, std::span<const double> ratios);
/// Every block at r = 1.
std::vector<Index> full_tokens(const ModelConfig& config);

/// Within iff total <= gamma. Records gamma and the verdict on the report.
/// Throws for gamma <= 0.
BudgetVerdict check_budget(FlopsReport& report, double gamma);

void to_json(nlohmann::json& j, const FlopsReport& report);
/// Aligned per-entry table followed by group subtotals.
std::string format_table(const FlopsReport& report);

}  // namespace tokenflow
