#include "tokenflow/flops.hpp"

#include "tokenflow/keepratio.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace tokenflow {

namespace {

using u64 = std::uint64_t;

u64 u(Index v) { return u64(v); }

struct Builder {
  FlopsReport& report;
  u64 element_bytes;
  void add(std::string name, FlopsGroup group, u64 flops, u64 memory_elements) {
    report.entries.push_back({std::move(name), group, flops, memory_elements * element_bytes});
  }
};

Index conv_out(Index n, Index k, Index stride, Index pad) { return (n + 2 * pad - k) / stride + 1; }

struct ConvCost {
  u64 macs = 0;         // already doubled
  u64 elementwise = 0;  // GELU, bias, residual, pooling
  u64 memory = 0;       // elements
};

// Mirrors conv_stack_forward layer by layer.
ConvCost conv_stack_cost(const ConvStackConfig& c, Index d) {
  ConvCost cost;
  Index h = c.height, w = c.width, ch = c.channels;
  auto conv = [&](Index f, Index k, Index stride, Index pad, bool act) {
    const Index ho = conv_out(h, k, stride, pad), wo = conv_out(w, k, stride, pad);
    cost.macs += 2 * u(ho) * u(wo) * u(k * k) * u(ch) * u(f);
    cost.elementwise += u(ho * wo * f) * (1 + (act ? kElementwiseFlops : 0));
    cost.memory += u(h * h * f + w * w * ch);
    h = ho;
    w = wo;
    ch = f;
  };
  auto pool = [&](Index k) {
    if (k <= 1) return;
    h = conv_out(h, k, k, 0);
    w = conv_out(w, k, k, 0);
    cost.elementwise += u(h * w * ch) * u(k * k);
  };
  auto res = [&]() {
    conv(ch, 3, 1, 1, true);
    conv(ch, 3, 1, 1, false);
    cost.elementwise += u(h * w * ch) * (1 + kElementwiseFlops);
  };
  conv(c.c1, 3, c.stem_stride, 1, true);
  pool(c.pool1);
  res();
  conv(c.c2, 3, c.down_stride, 1, true);
  res();
  pool(c.pool2);
  conv(d, 1, 1, 0, false);
  return cost;
}

// Two-layer MLP in -> d -> d with GELU in between, over `rows` rows.
void mlp_cost(Builder& b, const std::string& name, Index rows, Index in, Index d, u64 copies) {
  const u64 macs = 2 * u(rows) * (u(in) * u(d) + u(d) * u(d));
  const u64 elementwise = u(rows) * u(d) * (2 + kElementwiseFlops);
  b.add(name + ".linear", FlopsGroup::kTokenizer, copies * macs, copies * u(rows) * u(in + d + d + d));
  b.add(name + ".elementwise", FlopsGroup::kTokenizer, copies * elementwise, 0);
}

void build(FlopsReport& report, const ModelConfig& cfg, std::span<const Index> k, Index element_bytes) {
  cfg.validate();
  const Index n = cfg.sequence_length();
  if (Index(k.size()) != cfg.layers) {
    throw std::invalid_argument("count_flops: " + std::to_string(k.size()) + " token counts for " +
                                std::to_string(cfg.layers) + " blocks");
  }
  for (std::size_t l = 0; l < k.size(); ++l) {
    if (k[l] < 1 || k[l] > n) {
      throw std::invalid_argument("count_flops: K_" + std::to_string(l) + " = " + std::to_string(k[l]) +
                                  " outside [1, " + std::to_string(n) + "]");
    }
  }
  if (element_bytes < 1) throw std::invalid_argument("count_flops: element size must be positive");
  report.tokens.assign(k.begin(), k.end());
  Builder b{report, u(element_bytes)};
  const Index d = cfg.d;
  const u64 tau = u(cfg.tau);

  for (auto kind : cfg.modalities) {
    const std::string name = "tokenizer." + std::string(modality_name(kind));
    switch (kind) {
      case ModalityKind::kImage:
      case ModalityKind::kPointCloud: {
        const ConvCost c = conv_stack_cost(kind == ModalityKind::kImage ? cfg.image : cfg.lidar, d);
        b.add(name + ".conv", FlopsGroup::kTokenizer, tau * c.macs, tau * c.memory);
        b.add(name + ".elementwise", FlopsGroup::kTokenizer, tau * c.elementwise, 0);
        break;
      }
      case ModalityKind::kRadar: mlp_cost(b, name, cfg.n_rad, 4, d, tau); break;
      case ModalityKind::kGps: mlp_cost(b, name, 1, 2, d, tau); break;
      case ModalityKind::kRssi: mlp_cost(b, name, 1, 1, d, tau); break;
    }
  }
  // position + time + modality embeddings on every non-CLS token
  b.add("tokenizer.embeddings", FlopsGroup::kTokenizer, 3 * u(n - 1) * u(d), 0);

  const Index dr = cfg.router_width();
  for (Index l = 0; l < cfg.layers; ++l) {
    const u64 kl = u(k[std::size_t(l)]);
    const std::string r = "router." + std::to_string(l);
    b.add(r + ".linear", FlopsGroup::kRouter,
          2 * u(n) * (u(d) * u(dr) + u(dr)) + 2 * u(n) * (u(dr) + 1) + kElementwiseFlops * u(n) * u(dr),
          kl * u(d) + u(d));
    b.add(r + ".select", FlopsGroup::kRouter, u64(std::llround(double(n) * std::log2(double(kl)))), 0);

    const std::string p = "block." + std::to_string(l);
    b.add(p + ".qkvo", FlopsGroup::kBlock, 8 * kl * u(d) * u(d), 4 * kl * 2 * u(d));
    b.add(p + ".attention", FlopsGroup::kBlock, 4 * kl * kl * u(d), kl * u(d));
    b.add(p + ".mlp", FlopsGroup::kBlock, 4 * kl * u(d) * u(cfg.d_ff), 2 * kl * u(d + cfg.d_ff));
    const u64 normalizing = kElementwiseFlops * (2 * kl * u(d) + u(cfg.heads) * kl * kl + kl * u(cfg.d_ff));
    const u64 biases = kl * (3 * u(d) + u(cfg.d_ff) + u(d));  // no key bias
    const u64 residual_and_gate = 3 * kl * u(d) + u(n) * u(d);
    b.add(p + ".elementwise", FlopsGroup::kBlock, normalizing + biases + residual_and_gate, 0);
  }
  const Index out = cfg.output_size();
  b.add("head", FlopsGroup::kHead, kElementwiseFlops * u(d) + 2 * u(d) * u(out) + u(out), u(d + out));
}

}  // namespace

const char* flops_group_name(FlopsGroup group) {
  switch (group) {
    case FlopsGroup::kTokenizer: return "tokenizers";
    case FlopsGroup::kRouter: return "routers";
    case FlopsGroup::kBlock: return "encoder_blocks";
    case FlopsGroup::kHead: return "head";
  }
  return "?";
}

std::uint64_t FlopsReport::total_flops() const {
  u64 t = 0;
  for (const auto& e : entries) t += e.flops;
  return t;
}

std::uint64_t FlopsReport::total_memory() const {
  u64 t = 0;
  for (const auto& e : entries) t += e.memory_bytes;
  return t;
}

std::uint64_t FlopsReport::group_flops(FlopsGroup group) const {
  u64 t = 0;
  for (const auto& e : entries)
    if (e.group == group) t += e.flops;
  return t;
}

std::uint64_t FlopsReport::flops_of(const std::string& prefix) const {
  u64 t = 0;
  for (const auto& e : entries)
    if (e.name.compare(0, prefix.size(), prefix) == 0) t += e.flops;
  return t;
}

FlopsReport count_flops(const ModelConfig& config, std::span<const Index> k, Index element_bytes) {
  FlopsReport report;
  build(report, config, k, element_bytes);
  return report;
}

std::vector<std::pair<std::string, std::uint64_t>> estimate_memory(const ModelConfig& config, std::span<const Index> k,
                                                                   Index element_bytes) {
  std::vector<std::pair<std::string, std::uint64_t>> out;
  for (const auto& e : count_flops(config, k, element_bytes).entries) out.emplace_back(e.name, e.memory_bytes);
  return out;
}

std::vector<Index> tokens_for_ratios(const ModelConfig& config, std::span<const double> ratios) {
  if (Index(ratios.size()) != config.layers) {
    throw std::invalid_argument("tokens_for_ratios: " + std::to_string(ratios.size()) + " ratios for " +
                                std::to_string(config.layers) + " blocks");
  }
  std::vector<Index> k;
  for (double r : ratios) k.push_back(inference_k(r, config.sequence_length()));
  return k;
}

std::vector<Index> full_tokens(const ModelConfig& config) {
  return std::vector<Index>(std::size_t(config.layers), config.sequence_length());
}

BudgetVerdict check_budget(FlopsReport& report, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("check_budget: budget must be positive");
  report.budget = gamma;
  report.verdict = double(report.total_flops()) <= gamma ? BudgetVerdict::kWithin : BudgetVerdict::kOver;
  return *report.verdict;
}

void to_json(nlohmann::json& j, const FlopsReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    entries.push_back(
        {{"name", e.name}, {"group", flops_group_name(e.group)}, {"flops", e.flops}, {"memory_bytes", e.memory_bytes}});
  }
  nlohmann::json groups;
  for (auto g : {FlopsGroup::kTokenizer, FlopsGroup::kRouter, FlopsGroup::kBlock, FlopsGroup::kHead}) {
    groups[flops_group_name(g)] = r.group_flops(g);
  }
  j = {{"convention", "multiply-add = 2 FLOPs; normalization/activation = 5 FLOPs per element"},
       {"tokens", r.tokens},
       {"entries", entries},
       {"groups", groups},
       {"total_flops", r.total_flops()},
       {"total_memory_bytes", r.total_memory()}};
  if (r.budget) j["budget"] = *r.budget;
  if (r.verdict) j["verdict"] = *r.verdict == BudgetVerdict::kWithin ? "within" : "over";
}

std::string format_table(const FlopsReport& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-36s %-15s %18s %14s\n", "component", "group", "FLOPs", "memory[B]");
  os << line;
  for (const auto& e : r.entries) {
    std::snprintf(line, sizeof line, "%-36s %-15s %18llu %14llu\n", e.name.c_str(), flops_group_name(e.group),
                  static_cast<unsigned long long>(e.flops), static_cast<unsigned long long>(e.memory_bytes));
    os << line;
  }
  os << '\n';
  const double total = double(r.total_flops());
  for (auto g : {FlopsGroup::kTokenizer, FlopsGroup::kRouter, FlopsGroup::kBlock, FlopsGroup::kHead}) {
    const u64 f = r.group_flops(g);
    std::snprintf(line, sizeof line, "%-36s %-15s %18llu %13.2f%%\n", "subtotal", flops_group_name(g),
                  static_cast<unsigned long long>(f), total > 0 ? 100.0 * double(f) / total : 0.0);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-36s %-15s %18llu %14llu\n", "total", "", static_cast<unsigned long long>(r.total_flops()),
                static_cast<unsigned long long>(r.total_memory()));
  os << line;
  if (r.budget) {
    std::snprintf(line, sizeof line, "budget %.6g -> %s\n", *r.budget,
                  r.verdict == BudgetVerdict::kWithin ? "within" : "over");
    os << line;
  }
  return os.str();
}

}  // namespace tokenflow
