#include "tokenflow/harness.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace tokenflow;
namespace fs = std::filesystem;

namespace {

ScenarioConfig tiny_scenario() {
  auto s = ScenarioConfig::desk(Task::kBeam);
  s.image_size = 8;
  s.modalities = {ModalityKind::kImage, ModalityKind::kRadar, ModalityKind::kGps};
  s.codebook_size = 4;
  s.tau = 2;
  s.frames = 8;
  s.scenarios = 4;
  return s;
}

const Dataset& tiny_dataset() {
  static const Dataset ds = build_dataset(tiny_scenario());
  return ds;
}

ModelConfig tiny_model() { return model_for_dataset(tiny_dataset().config, ModelConfig::tiny()); }

TrainOptions quick_options() {
  TrainOptions o;
  o.lr = 1e-3;
  o.epochs = 2;
  o.batch = 4;
  return o;
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("tokenflow_harness_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Commands, ParseAndName) {
  for (Command c : {Command::kGenerate, Command::kTrain, Command::kEval, Command::kBenchmark, Command::kAblate}) {
    EXPECT_EQ(parse_command(command_name(c)), c);
  }
  EXPECT_THROW(parse_command("fit"), std::invalid_argument);
}

TEST(Ablations, ParseForms) {
  EXPECT_EQ(parse_ablation("none").kind, AblationKind::kNone);
  EXPECT_EQ(parse_ablation("freeze_tokenizers").kind, AblationKind::kFreezeTokenizers);
  EXPECT_EQ(parse_ablation("random_routing").kind, AblationKind::kRandomRouting);
  const Ablation a = parse_ablation("uniform_ratio(0.4)");
  EXPECT_EQ(a.kind, AblationKind::kUniformRatio);
  EXPECT_EQ(a.p, 0.4);
  EXPECT_EQ(parse_ablation("uniform_ratio:0.25").p, 0.25);
  EXPECT_EQ(ablation_name(a), "uniform_ratio(0.4)");
  EXPECT_EQ(parse_ablation(ablation_name(a)).p, 0.4);
  EXPECT_THROW(parse_ablation("uniform_ratio(1.5)"), std::invalid_argument);
  EXPECT_THROW(parse_ablation("uniform_ratio(0.3"), std::invalid_argument);
  EXPECT_THROW(parse_ablation("dropout"), std::invalid_argument);
}

TEST(RunConfigKeys, EveryListedKeyIsAccepted) {
  const std::map<std::string, std::string> samples{
      {"task", "handover"}, {"preset", "tiny"},        {"dataset", "d"},     {"out", "o"},
      {"checkpoint", "c"},  {"seed", "3"},             {"seeds", "2"},       {"epochs", "4"},
      {"batch", "8"},       {"lr", "0.001"},           {"weight_decay", "0"}, {"ratio_lr", "0.01"},
      {"lambda", "5"},      {"gamma_prime", "0.3"},    {"budget_flops", "1e6"}, {"ablation", "random_routing"},
      {"train_limit", "10"}, {"eval_limit", "5"},      {"bench_runs", "3"},  {"scenarios", "2"},
      {"frames", "20"},     {"tau", "3"},              {"vehicles", "2"},    {"d", "16"},
      {"layers", "2"},      {"heads", "2"},            {"d_ff", "32"},       {"gate", "sigmoid"}};
  for (const auto& key : run_config_keys()) {
    RunConfig c;
    ASSERT_TRUE(samples.count(key)) << "no sample value for " << key;
    EXPECT_NO_THROW(c.set(key, samples.at(key))) << key;
  }
  RunConfig c;
  EXPECT_THROW(c.set("colour", "blue"), std::invalid_argument);
  EXPECT_THROW(c.set("epochs", "many"), std::invalid_argument);
  EXPECT_THROW(c.set("gate", "relu"), std::invalid_argument);
}

TEST(RunConfigKeys, TaskResetsPresetsButKeepsScenarioSize) {
  RunConfig c;
  c.set("scenarios", "3");
  c.set("frames", "30");
  c.set("task", "handover");
  EXPECT_EQ(c.scenario.task, Task::kHandover);
  EXPECT_EQ(c.model.task, Task::kHandover);
  EXPECT_EQ(c.scenario.channel.mode, RssMode::kPowerSum);
  EXPECT_EQ(c.scenario.scenarios, 3);
  EXPECT_EQ(c.scenario.frames, 30);
  c.set("preset", "paper");
  EXPECT_EQ(c.model.d, 64);
  EXPECT_EQ(c.model.layers, 4);
}

TEST(RunConfigKeys, LoadsFileWithComments) {
  TempDir dir("config");
  const fs::path p = dir.path() / "run.cfg";
  {
    std::ofstream out(p);
    out << "# desk beam run\n\ntask = beam\nepochs = 3   # short\n  lr=0.002\ngamma_prime = 0.3\n";
  }
  const RunConfig c = load_run_config(p);
  EXPECT_EQ(c.train.epochs, 3);
  EXPECT_EQ(c.train.lr, 0.002);
  EXPECT_EQ(c.train.gamma_prime, 0.3);
  {
    std::ofstream out(p);
    out << "epochs 3\n";
  }
  EXPECT_THROW(load_run_config(p), std::invalid_argument);
  EXPECT_THROW(load_run_config(dir.path() / "missing.cfg"), std::runtime_error);
}

TEST(ModelForDataset, CopiesScenarioShape) {
  const ModelConfig m = tiny_model();
  EXPECT_EQ(m.tau, 2);
  EXPECT_EQ(m.num_classes, 4);
  EXPECT_EQ(m.image.height, 8);
  EXPECT_EQ(m.modalities, tiny_scenario().modalities);
  EXPECT_EQ(m.sequence_length(), 1 + 2 * (4 + 4 + 1));
}

TEST(Training, DeterministicUnderFixedSeed) {
  const auto a = train_model(tiny_dataset(), tiny_model(), quick_options(), {}, 11);
  const auto b = train_model(tiny_dataset(), tiny_model(), quick_options(), {}, 11);
  const auto c = train_model(tiny_dataset(), tiny_model(), quick_options(), {}, 12);
  const std::string ja = strip_timing(metrics_json(a, {}, 11)).dump();
  EXPECT_EQ(ja, strip_timing(metrics_json(b, {}, 11)).dump());
  EXPECT_NE(strip_timing(metrics_json(c, {}, 12)).dump(), ja);
  EXPECT_EQ(keep_ratio_csv(a.params, a.config), keep_ratio_csv(b.params, b.config));
  EXPECT_NE(ja.find("\"epochs\""), std::string::npos);
  EXPECT_EQ(metrics_json(a, {}, 11).count("timing"), 1u);
  EXPECT_EQ(strip_timing(metrics_json(a, {}, 11)).count("timing"), 0u);
}

TEST(Training, TopKAccuraciesAreNested) {
  const auto r = train_model(tiny_dataset(), tiny_model(), quick_options(), {}, 13);
  EXPECT_GT(r.eval.samples, 0);
  EXPECT_LE(r.eval.top1, r.eval.top3);
  EXPECT_LE(r.eval.top3, r.eval.top5);
  // Four classes: top-5 always contains the target.
  EXPECT_EQ(r.eval.top5, 1.0);
  ASSERT_EQ(r.epochs.size(), 2u);
  for (const auto& e : r.epochs) EXPECT_TRUE(std::isfinite(e.train_loss));
}

TEST(Training, RatiosLearnTowardTheTarget) {
  auto o = quick_options();
  o.epochs = 4;
  o.gamma_prime = 0.4;
  o.ratio_lr = 0.05;
  const auto r = train_model(tiny_dataset(), tiny_model(), o, {}, 14);
  const auto ratios = learned_ratios(r.params);
  const double r_avg = (ratios[0] + ratios[1]) / 2;
  EXPECT_LT(r_avg, 0.8);
  for (double v : ratios) {
    EXPECT_GE(v, r.config.r_min());
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(r.gamma_prime, 0.4);
}

TEST(Training, UniformRatioHoldsRatiosFixed) {
  const auto r = train_model(tiny_dataset(), tiny_model(), quick_options(), parse_ablation("uniform_ratio(1.0)"), 15);
  EXPECT_EQ(r.lambda, 0.0);
  for (const auto& e : r.epochs) {
    for (double v : e.ratios) EXPECT_EQ(v, 1.0);
    EXPECT_EQ(e.penalty, 0.0);
  }
  const auto half = train_model(tiny_dataset(), tiny_model(), quick_options(), parse_ablation("uniform_ratio:0.5"), 15);
  for (double v : learned_ratios(half.params)) EXPECT_EQ(v, 0.5);
}

TEST(Training, FrozenTokenizersStayAtInit) {
  const ModelConfig cfg = tiny_model();
  const auto r = train_model(tiny_dataset(), cfg, quick_options(), parse_ablation("freeze_tokenizers"), 16);
  const auto init = named_parameters(init_model_params(cfg, 16));
  const auto trained = named_parameters(r.params);
  bool something_moved = false;
  for (std::size_t i = 0; i < init.size(); ++i) {
    if (init[i].group == ParamGroup::kTokenizer) {
      EXPECT_EQ(init[i].var.value(), trained[i].var.value()) << init[i].name;
    } else if (!(init[i].var.value() == trained[i].var.value())) {
      something_moved = true;
    }
  }
  EXPECT_TRUE(something_moved);
}

TEST(Training, BudgetSetsTheTargetRatio) {
  const ModelConfig cfg = tiny_model();
  const double fmax = double(count_flops(cfg, full_tokens(cfg)).total_flops());
  auto o = quick_options();
  o.epochs = 0;
  o.budget_flops = 0.25 * fmax;
  const auto r = train_model(tiny_dataset(), cfg, o, {}, 17);
  EXPECT_NEAR(r.gamma_prime, 0.5, 1e-12);
}

TEST(Training, TaskMismatchIsRejected) {
  auto cfg = tiny_model();
  cfg.task = Task::kHandover;
  EXPECT_THROW(train_model(tiny_dataset(), cfg, quick_options(), {}, 1), std::invalid_argument);
}

TEST(Outputs, KeepRatioCsvAndBench) {
  auto o = quick_options();
  o.epochs = 1;
  const auto r = train_model(tiny_dataset(), tiny_model(), o, {}, 18);
  const std::string csv = keep_ratio_csv(r.params, r.config);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "layer,ratio,tokens");
  Index rows = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string layer, ratio, tokens;
    std::getline(row, layer, ',');
    std::getline(row, ratio, ',');
    std::getline(row, tokens, ',');
    EXPECT_EQ(std::stol(layer), rows);
    const double v = std::stod(ratio);
    EXPECT_GE(v, r.config.r_min());
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(std::stol(tokens), inference_k(v, r.config.sequence_length()));
    ++rows;
  }
  EXPECT_EQ(rows, r.config.layers);

  const auto bench = benchmark(tiny_dataset(), r.params, r.config, 3);
  ASSERT_EQ(bench.size(), 5u);
  EXPECT_EQ(bench[0].label, "as_trained");
  EXPECT_LT(bench[1].flops, bench[4].flops);  // r = 0.3 vs r = 1
  const std::string table = bench_csv(bench);
  EXPECT_EQ(table.rfind("label,r_avg,median_ms,flops", 0), 0u);
}

TEST(Evaluate, RandomRoutingIsSeeded) {
  const auto cfg = tiny_model();
  const auto params = init_model_params(cfg, 19);
  const auto val = tiny_dataset().indices(Split::kVal);
  const auto a = evaluate(tiny_dataset(), val, params, cfg, RoutingMode::kRandom, 5);
  const auto b = evaluate(tiny_dataset(), val, params, cfg, RoutingMode::kRandom, 5);
  EXPECT_EQ(a.top1, b.top1);
  EXPECT_EQ(a.samples, Index(val.size()));
  EXPECT_EQ(evaluate(tiny_dataset(), {}, params, cfg).samples, 0);
}

TEST(Ablation, TableHasOneRowPerMode) {
  auto o = quick_options();
  o.epochs = 1;
  o.gamma_prime = 0.5;
  const auto rows = run_ablations(tiny_dataset(), tiny_model(), o, 20, 2);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].mode, "proposed");
  EXPECT_EQ(rows[1].mode, "freeze_tokenizers");
  EXPECT_EQ(rows[2].mode, "random_routing");
  EXPECT_EQ(rows[3].mode, "uniform_ratio(0.5)");
  for (const auto& r : rows) EXPECT_EQ(r.runs.size(), 2u);
  const std::string table = ablation_table(rows);
  EXPECT_NE(table.find("random_routing"), std::string::npos);
  EXPECT_NE(table.find("+-"), std::string::npos);
}

TEST(RunCommand, EndToEndInATempDirectory) {
  TempDir dir("e2e");
  RunConfig c;
  c.scenario = tiny_scenario();
  c.model = ModelConfig::tiny();
  c.preset = "tiny";
  c.train = quick_options();
  c.train.epochs = 1;
  c.bench_runs = 2;
  c.dataset = dir.path() / "data";
  c.out = dir.path() / "data";
  c.command = Command::kGenerate;
  ASSERT_EQ(run_command(c), 0);
  EXPECT_TRUE(fs::exists(dir.path() / "data" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir.path() / "data" / "records.bin"));

  c.out = dir.path() / "run";
  c.command = Command::kTrain;
  ASSERT_EQ(run_command(c), 0);
  for (const char* f : {"model.ckpt", "keep_ratios.csv", "flops.json", "metrics.json"}) {
    EXPECT_TRUE(fs::exists(c.out / f)) << f;
  }
  const auto metrics = nlohmann::json::parse(slurp(c.out / "metrics.json"));
  EXPECT_TRUE(metrics.contains("final"));

  c.command = Command::kEval;
  ASSERT_EQ(run_command(c), 0);
  EXPECT_TRUE(nlohmann::json::parse(slurp(c.out / "eval.json")).contains("top1"));

  c.command = Command::kBenchmark;
  ASSERT_EQ(run_command(c), 0);
  EXPECT_TRUE(fs::exists(c.out / "bench.csv"));

  c.command = Command::kAblate;
  c.out = dir.path() / "ablate";
  ASSERT_EQ(run_command(c), 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(c.out / "ablation.json")).size(), 4u);
  EXPECT_TRUE(fs::exists(c.out / "ablation.txt"));

  // A handover dataset cannot be evaluated with the beam checkpoint.
  RunConfig h = c;
  h.scenario = tiny_scenario();
  h.scenario.task = Task::kHandover;
  h.command = Command::kGenerate;
  h.out = dir.path() / "handover";
  ASSERT_EQ(run_command(h), 0);
  h.command = Command::kEval;
  h.dataset = dir.path() / "handover";
  h.checkpoint = dir.path() / "run" / "model.ckpt";
  EXPECT_THROW(run_command(h), std::invalid_argument);
}
