#include "tokenflow/model.hpp"

#include "tokenflow/init.hpp"
#include "tokenflow/ops.hpp"
#include "tokenflow/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace tokenflow {

namespace {

constexpr char kCheckpointMagic[4] = {'T', 'F', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void push_conv_stack(std::vector<NamedParam>& out, const std::string& prefix, const ConvStackParams& c) {
  const auto g = ParamGroup::kTokenizer;
  out.push_back({prefix + ".stem_w", c.stem_w, g});
  out.push_back({prefix + ".stem_b", c.stem_b, g});
  for (const auto& [name, r] : {std::pair{".res1", &c.res1}, std::pair{".res2", &c.res2}}) {
    out.push_back({prefix + name + ".w1", r->w1, g});
    out.push_back({prefix + name + ".b1", r->b1, g});
    out.push_back({prefix + name + ".w2", r->w2, g});
    out.push_back({prefix + name + ".b2", r->b2, g});
  }
  out.push_back({prefix + ".down_w", c.down_w, g});
  out.push_back({prefix + ".down_b", c.down_b, g});
  out.push_back({prefix + ".proj_w", c.proj_w, g});
  out.push_back({prefix + ".proj_b", c.proj_b, g});
}

void push_mlp(std::vector<NamedParam>& out, const std::string& prefix, const MlpParams& m, ParamGroup g) {
  out.push_back({prefix + ".w1", m.w1, g});
  out.push_back({prefix + ".b1", m.b1, g});
  out.push_back({prefix + ".w2", m.w2, g});
  out.push_back({prefix + ".b2", m.b2, g});
}

Var head_forward(const Var& x, const ModelParams& p) {
  const std::vector<Index> cls{0};
  return linear(layer_norm(gather_rows(x, cls), p.final_ln_g, p.final_ln_b), p.head_w, p.head_b);
}

}  // namespace

Var random_scores(Index n, std::mt19937_64* rng) {
  if (!rng) throw std::invalid_argument("random routing needs an rng");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor s({n, 1});
  for (Index i = 0; i < n; ++i) s[i] = u(*rng);
  return Var::constant(std::move(s));
}

ModelParams init_model_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.tokenizer = init_tokenizer_params(config, rng);
  for (Index l = 0; l < config.layers; ++l) {
    p.routers.push_back(init_router_params(config, rng));
    p.blocks.push_back(init_block_params(config, rng));
    p.ratios.push_back(Var::parameter(Tensor::full({1}, 1.0)));
  }
  p.final_ln_g = Var::parameter(Tensor::full({config.d}, 1.0));
  p.final_ln_b = Var::parameter(Tensor({config.d}));
  p.head_w = Var::parameter(truncated_normal({config.d, config.output_size()}, 0.02, rng));
  p.head_b = Var::parameter(Tensor({config.output_size()}));
  return p;
}

std::vector<NamedParam> named_parameters(const ModelParams& p) {
  std::vector<NamedParam> out;
  const auto& t = p.tokenizer;
  if (t.image.stem_w.defined()) push_conv_stack(out, "tokenizer.image", t.image);
  if (t.lidar.stem_w.defined()) push_conv_stack(out, "tokenizer.lidar", t.lidar);
  if (t.radar.w1.defined()) push_mlp(out, "tokenizer.radar", t.radar, ParamGroup::kTokenizer);
  if (t.gps.w1.defined()) push_mlp(out, "tokenizer.gps", t.gps, ParamGroup::kTokenizer);
  if (t.rssi.w1.defined()) push_mlp(out, "tokenizer.rssi", t.rssi, ParamGroup::kTokenizer);
  std::set<const Node*> seen;
  for (const auto& [kind, table] : t.position) {
    if (seen.insert(table.node()).second) {
      out.push_back({"embed.position." + std::string(modality_name(kind)), table, ParamGroup::kTokenizer});
    }
  }
  out.push_back({"embed.time", t.time, ParamGroup::kTokenizer});
  out.push_back({"embed.modality", t.modality, ParamGroup::kTokenizer});
  out.push_back({"embed.cls", t.cls, ParamGroup::kTokenizer});
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const std::string pre = "block" + std::to_string(l);
    const auto& r = p.routers[l];
    push_mlp(out, pre + ".router", MlpParams{r.w1, r.b1, r.w2, r.b2}, ParamGroup::kRouter);
    const auto& b = p.blocks[l];
    const auto g = ParamGroup::kBlock;
    for (const auto& [name, v] : std::initializer_list<std::pair<const char*, const Var*>>{
             {"ln1_g", &b.ln1_g}, {"ln1_b", &b.ln1_b}, {"wq", &b.wq},       {"bq", &b.bq},
             {"wk", &b.wk},       {"wv", &b.wv},       {"bv", &b.bv},       {"wo", &b.wo},
             {"bo", &b.bo},       {"ln2_g", &b.ln2_g}, {"ln2_b", &b.ln2_b}, {"ff1_w", &b.ff1_w},
             {"ff1_b", &b.ff1_b}, {"ff2_w", &b.ff2_w}, {"ff2_b", &b.ff2_b}}) {
      out.push_back({pre + "." + name, *v, g});
    }
    out.push_back({pre + ".keep_ratio", p.ratios[l], ParamGroup::kRatio});
  }
  out.push_back({"head.ln_g", p.final_ln_g, ParamGroup::kHead});
  out.push_back({"head.ln_b", p.final_ln_b, ParamGroup::kHead});
  out.push_back({"head.w", p.head_w, ParamGroup::kHead});
  out.push_back({"head.b", p.head_b, ParamGroup::kHead});
  return out;
}

Index parameter_count(const ModelParams& params) {
  Index n = 0;
  for (const auto& p : named_parameters(params)) n += p.var.numel();
  return n;
}

ForwardResult forward_train(std::span<const ModalityFrame> frames, const ModelParams& params,
                            const ModelConfig& config, const ForwardOptions& options) {
  ForwardResult result;
  Var x = assemble_sequence(frames, params.tokenizer, config).tokens;
  const Index n = x.shape()[0];
  result.blocks.resize(std::size_t(config.layers));
  for (Index l = 0; l < config.layers; ++l) {
    const Var scores = options.routing == RoutingMode::kRandom ? random_scores(n, options.rng)
                                                               : score_tokens(x, params.routers[std::size_t(l)]);
    x = dual_pass_combine(x, scores, params.ratios[std::size_t(l)], params.blocks[std::size_t(l)], config.heads,
                          config.gate, &result.blocks[std::size_t(l)]);
  }
  result.logits = head_forward(x, params);
  std::vector<Var> cols;
  for (const auto& r : params.ratios) cols.push_back(reshape(r, {1, 1}));
  result.r_avg = mean(concat(cols, 0));
  return result;
}

Tensor forward_infer(std::span<const ModalityFrame> frames, const ModelParams& params, const ModelConfig& config,
                     const ForwardOptions& options, std::vector<BlockTrace>* traces) {
  NoGradGuard no_grad;
  if (!options.ratio_override.empty() && Index(options.ratio_override.size()) != config.layers) {
    throw std::invalid_argument("forward_infer: ratio override needs one value per block");
  }
  Var x = assemble_sequence(frames, params.tokenizer, config).tokens;
  const Index n = x.shape()[0];
  if (traces) traces->assign(std::size_t(config.layers), BlockTrace{});
  for (Index l = 0; l < config.layers; ++l) {
    const auto ul = std::size_t(l);
    const double r = options.ratio_override.empty() ? params.ratios[ul].value()[0] : options.ratio_override[ul];
    const Var scores = options.routing == RoutingMode::kRandom ? random_scores(n, options.rng)
                                                               : score_tokens(x, params.routers[ul]);
    std::vector<double> s(scores.value().data(), scores.value().data() + n);
    x = routed_block_forward(x, scores, select_topk(s, inference_k(r, n)), params.blocks[ul], config.heads,
                             config.gate, traces ? &(*traces)[ul] : nullptr);
  }
  return head_forward(x, params).value();
}

LossParts total_loss(const Var& logits, const Target& target, std::span<const Var> ratios, const ModelConfig& config) {
  LossParts parts;
  if (config.task == Task::kBeam) {
    const std::vector<Index> t{target.beam};
    parts.task = cross_entropy(logits, t);
  } else {
    if (target.link.numel() != logits.numel()) {
      throw std::invalid_argument("total_loss: handover target has " + std::to_string(target.link.numel()) +
                                  " entries for " + std::to_string(logits.numel()) + " logits");
    }
    parts.task = bce_with_logits(logits, target.link.reshaped(logits.shape()));
  }
  parts.penalty = budget_penalty(ratios, config.gamma_prime, config.lambda);
  parts.total = add(parts.task, parts.penalty);
  return parts;
}

Prediction predict(const Tensor& logits, Task task) {
  Prediction p;
  if (task == Task::kHandover) {
    for (Index i = 0; i < logits.numel(); ++i) p.link.push_back(1.0 / (1.0 + std::exp(-logits[i])) > 0.5 ? 1 : 0);
    return p;
  }
  std::vector<Index> order(std::size_t(logits.numel()));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return logits[a] > logits[b]; });
  auto take = [&](std::size_t k) {
    return std::vector<Index>(order.begin(), order.begin() + std::ptrdiff_t(std::min(k, order.size())));
  };
  p.beam = order.empty() ? -1 : order.front();
  p.top1 = take(1);
  p.top3 = take(3);
  p.top5 = take(5);
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params) {
  nlohmann::json manifest;
  manifest["config"] = config;
  std::ostringstream blobs;
  auto& entries = manifest["params"] = nlohmann::json::array();
  for (const auto& p : named_parameters(params)) {
    const auto offset = std::uint64_t(blobs.tellp());
    write_tensor(blobs, p.var.value());
    entries.push_back({{"name", p.name}, {"offset", offset}, {"shape", p.var.shape()}});
  }
  const std::string json = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out.write(kCheckpointMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = json.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(json.data(), std::streamsize(json.size()));
  const std::string payload = blobs.str();
  out.write(payload.data(), std::streamsize(payload.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  if (!in.read(magic, 4)) throw FormatError(FormatErrorKind::kTruncated, "checkpoint header");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(FormatErrorKind::kBadMagic, "not a checkpoint");
  if (!in.read(reinterpret_cast<char*>(&version), sizeof version) ||
      !in.read(reinterpret_cast<char*>(&len), sizeof len)) {
    throw FormatError(FormatErrorKind::kTruncated, "checkpoint header");
  }
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch, "checkpoint version " + std::to_string(version));
  }
  std::string json(len, '\0');
  if (!in.read(json.data(), std::streamsize(len))) throw FormatError(FormatErrorKind::kTruncated, "checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformed, std::string("checkpoint manifest: ") + e.what());
  }
  const auto base = std::uint64_t(in.tellg());
  const ModelConfig config = manifest.at("config").get<ModelConfig>();
  ModelParams params = init_model_params(config, 0);
  std::map<std::string, std::uint64_t> offsets;
  for (const auto& e : manifest.at("params")) offsets[e.at("name").get<std::string>()] = e.at("offset");
  const auto named = named_parameters(params);
  if (named.size() != offsets.size()) {
    throw FormatError(FormatErrorKind::kCountMismatch, "checkpoint lists " + std::to_string(offsets.size()) +
                                                           " parameters, model has " + std::to_string(named.size()));
  }
  for (auto p : named) {
    const auto it = offsets.find(p.name);
    if (it == offsets.end()) throw FormatError(FormatErrorKind::kMalformed, "checkpoint lacks " + p.name);
    in.seekg(std::streamoff(base + it->second));
    if (!in) throw FormatError(FormatErrorKind::kOffsetCorrupt, "offset of " + p.name);
    Tensor t = read_tensor(in);
    if (t.shape() != p.var.shape()) {
      throw FormatError(FormatErrorKind::kMalformed, p.name + " has shape " + shape_string(t.shape()) +
                                                         ", expected " + shape_string(p.var.shape()));
    }
    p.var.mutable_value() = std::move(t);
  }
  return {config, std::move(params)};
}

}  // namespace tokenflow
