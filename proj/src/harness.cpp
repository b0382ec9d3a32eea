#include "tokenflow/harness.hpp"

#include "tokenflow/init.hpp"
#include "tokenflow/ops.hpp"
#include "tokenflow/optim.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace tokenflow {

namespace {

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

Index to_index(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d)) throw std::invalid_argument("config: " + key + " expects an integer, got '" + v + "'");
  return Index(d);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string tname(Task t) { return std::string(task_name(t)); }

void note(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

ModelConfig model_preset(const std::string& name, Task task) {
  if (name == "desk") return ModelConfig::desk(task);
  if (name == "paper") return ModelConfig::paper(task);
  if (name == "tiny") {
    ModelConfig c = ModelConfig::tiny();
    c.task = task;
    return c;
  }
  throw std::invalid_argument("config: unknown preset '" + name + "' (desk, paper, tiny)");
}

std::vector<Index> spread(std::vector<Index> indices, Index limit) {
  if (limit <= 0 || limit >= Index(indices.size())) return indices;
  std::vector<Index> out;
  for (Index i = 0; i < limit; ++i) out.push_back(indices[std::size_t(i * Index(indices.size()) / limit)]);
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Command parse_command(const std::string& name) {
  if (name == "generate") return Command::kGenerate;
  if (name == "train") return Command::kTrain;
  if (name == "eval") return Command::kEval;
  if (name == "benchmark") return Command::kBenchmark;
  if (name == "ablate") return Command::kAblate;
  throw std::invalid_argument("unknown command '" + name + "'");
}

const char* command_name(Command c) {
  switch (c) {
    case Command::kGenerate: return "generate";
    case Command::kTrain: return "train";
    case Command::kEval: return "eval";
    case Command::kBenchmark: return "benchmark";
    case Command::kAblate: return "ablate";
  }
  return "?";
}

Ablation parse_ablation(const std::string& text) {
  if (text == "none" || text.empty()) return {};
  if (text == "freeze_tokenizers") return {AblationKind::kFreezeTokenizers};
  if (text == "random_routing") return {AblationKind::kRandomRouting};
  const std::string head = "uniform_ratio";
  if (text.rfind(head, 0) == 0) {
    std::string arg = text.substr(head.size());
    if (!arg.empty() && (arg.front() == '(' || arg.front() == ':')) {
      if (arg.front() == '(') {
        if (arg.back() != ')') throw std::invalid_argument("ablation: missing ')' in '" + text + "'");
        arg.pop_back();
      }
      arg.erase(0, 1);
      const double p = to_double("ablation", trim(arg));
      if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("ablation: uniform ratio must lie in (0, 1]");
      return {AblationKind::kUniformRatio, p};
    }
  }
  throw std::invalid_argument("unknown ablation '" + text +
                              "' (none, freeze_tokenizers, random_routing, uniform_ratio(p))");
}

std::string ablation_name(const Ablation& a) {
  switch (a.kind) {
    case AblationKind::kNone: return "none";
    case AblationKind::kFreezeTokenizers: return "freeze_tokenizers";
    case AblationKind::kRandomRouting: return "random_routing";
    case AblationKind::kUniformRatio: {
      char buf[48];
      std::snprintf(buf, sizeof buf, "uniform_ratio(%g)", a.p);
      return buf;
    }
  }
  return "?";
}

std::vector<std::string> run_config_keys() {
  return {"task",       "preset",      "dataset",      "out",         "checkpoint", "seed",        "seeds",
          "epochs",     "batch",       "lr",           "weight_decay", "ratio_lr",  "lambda",      "gamma_prime",
          "budget_flops", "ablation",  "train_limit",  "eval_limit",  "bench_runs", "scenarios",   "frames",
          "tau",        "vehicles",    "d",            "layers",      "heads",      "d_ff",        "gate"};
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "task") {
    const Task t = parse_task(v);
    const ScenarioConfig old = scenario;
    scenario = ScenarioConfig::desk(t);
    scenario.scenarios = old.scenarios;
    scenario.frames = old.frames;
    scenario.seed = old.seed;
    model = model_preset(preset, t);
  } else if (key == "preset") {
    preset = v;
    model = model_preset(v, model.task);
  } else if (key == "dataset") {
    dataset = v;
  } else if (key == "out") {
    out = v;
  } else if (key == "checkpoint") {
    checkpoint = v;
  } else if (key == "seed") {
    seed = std::uint64_t(to_index(key, v));
    scenario.seed = seed;
  } else if (key == "seeds") {
    seeds = to_index(key, v);
  } else if (key == "epochs") {
    train.epochs = to_index(key, v);
  } else if (key == "batch") {
    train.batch = to_index(key, v);
  } else if (key == "lr") {
    train.lr = to_double(key, v);
  } else if (key == "weight_decay") {
    train.weight_decay = to_double(key, v);
  } else if (key == "ratio_lr") {
    train.ratio_lr = to_double(key, v);
  } else if (key == "lambda") {
    train.lambda = to_double(key, v);
  } else if (key == "gamma_prime") {
    train.gamma_prime = to_double(key, v);
  } else if (key == "budget_flops") {
    train.budget_flops = to_double(key, v);
  } else if (key == "ablation") {
    ablation = parse_ablation(v);
  } else if (key == "train_limit") {
    train.train_limit = to_index(key, v);
  } else if (key == "eval_limit") {
    train.eval_limit = to_index(key, v);
  } else if (key == "bench_runs") {
    bench_runs = to_index(key, v);
  } else if (key == "scenarios") {
    scenario.scenarios = to_index(key, v);
  } else if (key == "frames") {
    scenario.frames = to_index(key, v);
  } else if (key == "tau") {
    scenario.tau = model.tau = to_index(key, v);
  } else if (key == "vehicles") {
    scenario.vehicles = model.num_vehicles = to_index(key, v);
  } else if (key == "d") {
    model.d = to_index(key, v);
  } else if (key == "layers") {
    model.layers = to_index(key, v);
  } else if (key == "heads") {
    model.heads = to_index(key, v);
  } else if (key == "d_ff") {
    model.d_ff = to_index(key, v);
  } else if (key == "gate") {
    if (v != "raw" && v != "sigmoid") throw std::invalid_argument("config: gate expects raw or sigmoid, got '" + v + "'");
    model.gate = v == "raw" ? GateMode::kRaw : GateMode::kSigmoid;
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(number) + ": expected key = value");
    }
    base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

ModelConfig model_for_dataset(const ScenarioConfig& s, ModelConfig m) {
  m.task = s.task;
  m.tau = s.tau;
  m.modalities = s.modalities;
  m.num_classes = s.codebook_size;
  m.num_vehicles = s.vehicles;
  m.image.height = m.image.width = s.image_size;
  m.bev.x_min = s.bev.x_min;
  m.bev.x_max = s.bev.x_max;
  m.bev.y_min = s.bev.y_min;
  m.bev.y_max = s.bev.y_max;
  m.validate();
  return m;
}

std::vector<double> learned_ratios(const ModelParams& params) {
  std::vector<double> r;
  for (const auto& v : params.ratios) r.push_back(v.value()[0]);
  return r;
}

TrainResult train_model(const Dataset& data, ModelConfig config, const TrainOptions& options, const Ablation& ablation,
                        std::uint64_t seed, const ProgressFn& progress) {
  if (data.config.task != config.task) throw std::invalid_argument("train: dataset task does not match model task");
  if (options.batch < 1 || options.epochs < 0) throw std::invalid_argument("train: batch >= 1 and epochs >= 0");
  config.validate();
  const Index n = config.sequence_length();

  double gamma = options.gamma_prime.value_or(config.gamma_prime);
  if (options.budget_flops) {
    const double fmax = double(count_flops(config, full_tokens(config)).total_flops());
    gamma = target_ratio_from_flops(*options.budget_flops, fmax, config.r_min());
  }
  config.gamma_prime = gamma;
  config.lambda = options.lambda.value_or(config.lambda);
  if (ablation.kind == AblationKind::kUniformRatio) config.lambda = 0.0;

  TrainResult result;
  result.params = init_model_params(config, seed);
  ModelParams& params = result.params;
  if (ablation.kind == AblationKind::kUniformRatio) {
    for (auto& r : params.ratios) r.mutable_value()[0] = std::clamp(ablation.p, 1.0 / double(n), 1.0);
  }

  Adam opt({options.lr, 0.9, 0.999, 1e-8, options.weight_decay});
  const auto named = named_parameters(params);
  for (const auto& p : named) {
    const bool frozen = (p.group == ParamGroup::kTokenizer && ablation.kind == AblationKind::kFreezeTokenizers) ||
                        (p.group == ParamGroup::kRouter && ablation.kind == AblationKind::kRandomRouting) ||
                        (p.group == ParamGroup::kRatio && ablation.kind == AblationKind::kUniformRatio);
    Var v = p.var;
    if (frozen) {
      v.set_requires_grad(false);
      continue;
    }
    ParamOptions po;
    if (p.group == ParamGroup::kRatio) {
      po.lr = options.ratio_lr;
      po.weight_decay = 0.0;
      po.clamp_min = config.r_min();
      po.clamp_max = 1.0;
    }
    opt.add(p.name, v, po);
  }

  std::uint64_t state = seed;
  std::mt19937_64 shuffle_rng(splitmix64(state));
  std::mt19937_64 routing_rng(splitmix64(state));
  ForwardOptions fopts;
  if (ablation.kind == AblationKind::kRandomRouting) {
    fopts.routing = RoutingMode::kRandom;
    fopts.rng = &routing_rng;
  }

  std::vector<Index> order = spread(data.indices(Split::kTrain), options.train_limit);
  if (order.empty()) throw std::invalid_argument("train: empty train split");
  for (Index epoch = 0; epoch < options.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    for (std::size_t b = 0; b < order.size(); b += std::size_t(options.batch)) {
      const std::size_t end = std::min(order.size(), b + std::size_t(options.batch));
      for (auto p : named) p.var.zero_grad();
      const double inv = 1.0 / double(end - b);
      for (std::size_t i = b; i < end; ++i) {
        const Index s = order[i];
        Tape tape;
        TapeGuard guard(tape);
        const auto frames = data.window(s);
        const ForwardResult fwd = forward_train(frames, params, config, fopts);
        const LossParts loss = total_loss(fwd.logits, data.target(s), params.ratios, config);
        const double value = loss.total.value()[0];
        if (!std::isfinite(value)) {
          throw std::runtime_error("train: non-finite loss " + std::to_string(value) + " at epoch " +
                                   std::to_string(epoch + 1) + ", sample " + std::to_string(s) + " (task " +
                                   std::to_string(loss.task.value()[0]) + ", penalty " +
                                   std::to_string(loss.penalty.value()[0]) + ")");
        }
        rec.train_loss += value;
        rec.task_loss += loss.task.value()[0];
        rec.penalty += loss.penalty.value()[0];
        tape.backward(scale(loss.total, inv));
      }
      if (!opt.step().applied) ++rec.skipped_steps;
    }
    const double count = double(order.size());
    rec.train_loss /= count;
    rec.task_loss /= count;
    rec.penalty /= count;
    rec.ratios = learned_ratios(params);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ostringstream msg;
    msg << "epoch " << rec.epoch << " loss " << rec.train_loss << " task " << rec.task_loss << " penalty "
        << rec.penalty << " r_avg "
        << std::accumulate(rec.ratios.begin(), rec.ratios.end(), 0.0) / double(rec.ratios.size()) << " ("
        << rec.seconds << " s)";
    note(progress, msg.str());
    result.epochs.push_back(std::move(rec));
  }
  for (auto p : named) p.var.zero_grad();

  result.config = config;
  result.gamma_prime = gamma;
  result.lambda = config.lambda;
  result.eval = evaluate(data, spread(data.indices(Split::kVal), options.eval_limit), params, config, fopts.routing,
                         seed ^ 0x5eedULL);
  return result;
}

EvalMetrics evaluate(const Dataset& data, const std::vector<Index>& samples, const ModelParams& params,
                     const ModelConfig& config, RoutingMode routing, std::uint64_t seed) {
  EvalMetrics m;
  m.task = config.task;
  m.samples = Index(samples.size());
  if (samples.empty()) return m;
  std::mt19937_64 rng(seed);
  ForwardOptions fopts;
  fopts.routing = routing;
  fopts.rng = &rng;
  double entries = 0.0;
  for (Index s : samples) {
    const Tensor logits = forward_infer(data.window(s), params, config, fopts);
    const Prediction p = predict(logits, config.task);
    const Target t = data.target(s);
    if (config.task == Task::kBeam) {
      auto hit = [&](const std::vector<Index>& set) { return std::find(set.begin(), set.end(), t.beam) != set.end(); };
      m.top1 += hit(p.top1);
      m.top3 += hit(p.top3);
      m.top5 += hit(p.top5);
    } else {
      for (std::size_t v = 0; v < p.link.size(); ++v) m.accuracy += (p.link[v] == int(t.link[Index(v)]));
      entries += double(p.link.size());
    }
  }
  const double count = double(samples.size());
  m.top1 /= count;
  m.top3 /= count;
  m.top5 /= count;
  if (entries > 0) m.accuracy /= entries;
  return m;
}

std::vector<BenchRow> benchmark(const Dataset& data, const ModelParams& params, const ModelConfig& config, Index runs,
                                const std::vector<double>& forced) {
  if (runs < 1) throw std::invalid_argument("benchmark: runs must be positive");
  const auto val = data.indices(Split::kVal);
  const auto frames = data.window(val.empty() ? 0 : val.front());
  std::vector<std::pair<std::string, std::vector<double>>> cases{{"as_trained", learned_ratios(params)}};
  for (double r : forced) {
    char label[32];
    std::snprintf(label, sizeof label, "r=%g", r);
    cases.emplace_back(label, std::vector<double>(std::size_t(config.layers), r));
  }
  std::vector<BenchRow> rows;
  for (const auto& [label, ratios] : cases) {
    ForwardOptions o;
    o.ratio_override = ratios;
    for (int w = 0; w < 2; ++w) forward_infer(frames, params, config, o);
    std::vector<double> ms;
    for (Index i = 0; i < runs; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      forward_infer(frames, params, config, o);
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    rows.push_back({label, ratios, median(ms), count_flops(config, tokens_for_ratios(config, ratios)).total_flops()});
  }
  return rows;
}

nlohmann::json eval_json(const EvalMetrics& m) {
  nlohmann::json j = {{"task", tname(m.task)}, {"samples", m.samples}};
  if (m.task == Task::kBeam) {
    j["top1"] = m.top1;
    j["top3"] = m.top3;
    j["top5"] = m.top5;
  } else {
    j["accuracy"] = m.accuracy;
  }
  return j;
}

nlohmann::json metrics_json(const TrainResult& r, const Ablation& ablation, std::uint64_t seed) {
  nlohmann::json epochs = nlohmann::json::array(), timing = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"task_loss", e.task_loss},
                      {"penalty", e.penalty},
                      {"ratios", e.ratios},
                      {"skipped_steps", e.skipped_steps}});
    timing.push_back(e.seconds);
  }
  const auto ratios = learned_ratios(r.params);
  FlopsReport flops = count_flops(r.config, tokens_for_ratios(r.config, ratios));
  return {{"task", tname(r.config.task)},
          {"seed", seed},
          {"ablation", ablation_name(ablation)},
          {"gamma_prime", r.gamma_prime},
          {"lambda", r.lambda},
          {"epochs", epochs},
          {"final", eval_json(r.eval)},
          {"ratios", ratios},
          {"r_avg", std::accumulate(ratios.begin(), ratios.end(), 0.0) / double(ratios.size())},
          {"flops", flops},
          {"timing", {{"epoch_seconds", timing}}}};
}

nlohmann::json strip_timing(nlohmann::json metrics) {
  metrics.erase("timing");
  return metrics;
}

std::string keep_ratio_csv(const ModelParams& params, const ModelConfig& config) {
  std::ostringstream os;
  os << "layer,ratio,tokens\n";
  os.precision(17);
  const Index n = config.sequence_length();
  for (std::size_t l = 0; l < params.ratios.size(); ++l) {
    const double r = params.ratios[l].value()[0];
    os << l << ',' << r << ',' << inference_k(r, n) << '\n';
  }
  return os.str();
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "label,r_avg,median_ms,flops\n";
  for (const auto& r : rows) {
    const double avg = std::accumulate(r.ratios.begin(), r.ratios.end(), 0.0) / double(r.ratios.size());
    os << r.label << ',' << avg << ',' << r.median_ms << ',' << r.flops << '\n';
  }
  return os.str();
}

std::vector<AblationRow> run_ablations(const Dataset& data, const ModelConfig& config, const TrainOptions& options,
                                       std::uint64_t seed, Index seeds, const ProgressFn& progress) {
  const double gamma = options.gamma_prime.value_or(config.gamma_prime);
  const Ablation uniform{AblationKind::kUniformRatio, gamma};
  const std::vector<std::pair<std::string, Ablation>> modes{
      {"proposed", {}},
      {"freeze_tokenizers", {AblationKind::kFreezeTokenizers}},
      {"random_routing", {AblationKind::kRandomRouting}},
      {ablation_name(uniform), uniform}};
  std::vector<AblationRow> rows;
  for (const auto& [name, ab] : modes) {
    AblationRow row{name, {}};
    for (Index k = 0; k < seeds; ++k) {
      note(progress, "ablation " + name + " seed " + std::to_string(seed + std::uint64_t(k)));
      row.runs.push_back(train_model(data, config, options, ab, seed + std::uint64_t(k), progress).eval);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  auto stats = [](const std::vector<EvalMetrics>& runs, double EvalMetrics::*field) {
    double mean = 0.0, sq = 0.0;
    for (const auto& r : runs) mean += r.*field;
    mean /= double(runs.size());
    for (const auto& r : runs) sq += (r.*field - mean) * (r.*field - mean);
    return std::pair{mean, runs.size() > 1 ? std::sqrt(sq / double(runs.size() - 1)) : 0.0};
  };
  std::ostringstream os;
  char line[200];
  const bool beam = !rows.empty() && !rows.front().runs.empty() && rows.front().runs.front().task == Task::kBeam;
  if (beam) {
    std::snprintf(line, sizeof line, "%-20s %16s %16s %16s\n", "mode", "top1", "top3", "top5");
  } else {
    std::snprintf(line, sizeof line, "%-20s %16s\n", "mode", "accuracy");
  }
  os << line;
  for (const auto& r : rows) {
    if (beam) {
      const auto [a, as] = stats(r.runs, &EvalMetrics::top1);
      const auto [b, bs] = stats(r.runs, &EvalMetrics::top3);
      const auto [c, cs] = stats(r.runs, &EvalMetrics::top5);
      std::snprintf(line, sizeof line, "%-20s %8.2f +- %5.2f %8.2f +- %5.2f %8.2f +- %5.2f\n", r.mode.c_str(), 100 * a,
                    100 * as, 100 * b, 100 * bs, 100 * c, 100 * cs);
    } else {
      const auto [a, as] = stats(r.runs, &EvalMetrics::accuracy);
      std::snprintf(line, sizeof line, "%-20s %8.2f +- %5.2f\n", r.mode.c_str(), 100 * a, 100 * as);
    }
    os << line;
  }
  return os.str();
}

namespace {

std::filesystem::path checkpoint_path(const RunConfig& c) {
  return c.checkpoint.empty() ? c.out / "model.ckpt" : c.checkpoint;
}

int cmd_generate(const RunConfig& c, const ProgressFn& progress) {
  ScenarioConfig s = c.scenario;
  s.seed = c.seed;
  note(progress, "generating " + std::to_string(s.scenarios) + " scenarios of " + std::to_string(s.frames) + " frames");
  const Dataset ds = build_dataset(s);
  write_dataset(c.out, ds);
  std::map<std::string, Index> labels;
  for (const auto& r : ds.samples) {
    if (s.task == Task::kBeam) {
      ++labels["beam_" + std::to_string(r.beam)];
    } else {
      for (int v : r.link) ++labels["link_" + std::to_string(v)];
    }
  }
  const nlohmann::json summary = {{"samples", ds.size()},
                                  {"train", ds.indices(Split::kTrain).size()},
                                  {"val", ds.indices(Split::kVal).size()},
                                  {"labels", labels}};
  std::cout << summary.dump(2) << std::endl;
  return 0;
}

int cmd_train(const RunConfig& c, const ProgressFn& progress) {
  const Dataset ds = read_dataset(c.dataset);
  const ModelConfig model = model_for_dataset(ds.config, c.model);
  std::filesystem::create_directories(c.out);
  nlohmann::json runs = nlohmann::json::array();
  std::vector<double> primary;
  for (Index k = 0; k < std::max<Index>(1, c.seeds); ++k) {
    const std::uint64_t seed = c.seed + std::uint64_t(k);
    TrainResult r = train_model(ds, model, c.train, c.ablation, seed, progress);
    runs.push_back(metrics_json(r, c.ablation, seed));
    primary.push_back(r.eval.primary());
    if (k == 0) {
      save_checkpoint(checkpoint_path(c), r.config, r.params);
      write_text(c.out / "keep_ratios.csv", keep_ratio_csv(r.params, r.config));
      FlopsReport flops = count_flops(r.config, tokens_for_ratios(r.config, learned_ratios(r.params)));
      if (c.train.budget_flops) check_budget(flops, *c.train.budget_flops);
      write_text(c.out / "flops.json", nlohmann::json(flops).dump(2) + "\n");
    }
  }
  nlohmann::json metrics = runs.size() == 1 ? runs.front() : nlohmann::json{{"runs", runs}};
  if (runs.size() > 1) {
    const double mean = std::accumulate(primary.begin(), primary.end(), 0.0) / double(primary.size());
    double sq = 0.0;
    for (double p : primary) sq += (p - mean) * (p - mean);
    metrics["summary"] = {{"metric", model.task == Task::kBeam ? "top1" : "accuracy"},
                          {"mean", mean},
                          {"std", std::sqrt(sq / double(primary.size() - 1))}};
  }
  write_text(c.out / "metrics.json", metrics.dump(2) + "\n");
  std::cout << (runs.size() == 1 ? metrics["final"] : metrics["summary"]).dump(2) << std::endl;
  return 0;
}

int cmd_eval(const RunConfig& c, const ProgressFn& progress) {
  auto [model, params] = load_checkpoint(checkpoint_path(c));
  const Dataset ds = read_dataset(c.dataset);
  if (ds.config.task != model.task) {
    throw std::invalid_argument(std::string("eval: checkpoint is a ") + tname(model.task) + " model, dataset is " +
                                tname(ds.config.task));
  }
  const RoutingMode routing =
      c.ablation.kind == AblationKind::kRandomRouting ? RoutingMode::kRandom : RoutingMode::kLearned;
  note(progress, "evaluating " + checkpoint_path(c).string());
  const EvalMetrics m =
      evaluate(ds, spread(ds.indices(Split::kVal), c.train.eval_limit), params, model, routing, c.seed);
  nlohmann::json j = eval_json(m);
  j["flops"] = count_flops(model, tokens_for_ratios(model, learned_ratios(params)));
  std::filesystem::create_directories(c.out);
  write_text(c.out / "eval.json", j.dump(2) + "\n");
  std::cout << eval_json(m).dump(2) << std::endl;
  return 0;
}

int cmd_benchmark(const RunConfig& c, const ProgressFn& progress) {
  auto [model, params] = load_checkpoint(checkpoint_path(c));
  const Dataset ds = read_dataset(c.dataset);
  note(progress, "timing forward_infer, " + std::to_string(c.bench_runs) + " runs per setting");
  const auto rows = benchmark(ds, params, model, c.bench_runs);
  std::filesystem::create_directories(c.out);
  write_text(c.out / "bench.csv", bench_csv(rows));
  write_text(c.out / "flops.json",
             nlohmann::json(count_flops(model, tokens_for_ratios(model, learned_ratios(params)))).dump(2) + "\n");
  std::cout << bench_csv(rows);
  return 0;
}

int cmd_ablate(const RunConfig& c, const ProgressFn& progress) {
  const Dataset ds = read_dataset(c.dataset);
  const ModelConfig model = model_for_dataset(ds.config, c.model);
  const auto rows = run_ablations(ds, model, c.train, c.seed, std::max<Index>(1, c.seeds), progress);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& m : r.runs) runs.push_back(eval_json(m));
    j.push_back({{"mode", r.mode}, {"runs", runs}});
  }
  std::filesystem::create_directories(c.out);
  write_text(c.out / "ablation.json", j.dump(2) + "\n");
  const std::string table = ablation_table(rows);
  write_text(c.out / "ablation.txt", table);
  std::cout << table;
  return 0;
}

}  // namespace

int run_command(const RunConfig& c, const ProgressFn& progress) {
  switch (c.command) {
    case Command::kGenerate: return cmd_generate(c, progress);
    case Command::kTrain: return cmd_train(c, progress);
    case Command::kEval: return cmd_eval(c, progress);
    case Command::kBenchmark: return cmd_benchmark(c, progress);
    case Command::kAblate: return cmd_ablate(c, progress);
  }
  return 1;
}

}  // namespace tokenflow
