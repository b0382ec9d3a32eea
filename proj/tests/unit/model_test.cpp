#include "tokenflow/model.hpp"

#include "tokenflow/ops.hpp"
#include "tokenflow/tensor_io.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace tokenflow;
using tokenflow::testing::normal_tensor;
using tokenflow::testing::random_tensor;

namespace {

std::vector<ModalityFrame> frames_for(const ModelConfig& c, std::mt19937_64& rng) {
  std::vector<ModalityFrame> frames;
  for (Index t = 0; t < c.tau; ++t) {
    for (auto kind : c.modalities) {
      Tensor payload;
      switch (kind) {
        case ModalityKind::kImage: payload = random_tensor({c.image.height, c.image.width, c.image.channels}, rng, 0, 1); break;
        case ModalityKind::kPointCloud: {
          payload = random_tensor({30, 4}, rng, 0.0, 1.0);
          for (Index i = 0; i < 30; ++i) {
            payload(i, 0) = -40 + 80 * payload(i, 0);
            payload(i, 1) = 1 + 14 * payload(i, 1);
            payload(i, 2) = 0.5 + 3 * payload(i, 2);
          }
          break;
        }
        case ModalityKind::kRadar: payload = random_tensor({6, 5}, rng); break;
        case ModalityKind::kGps: payload = random_tensor({2}, rng, 0, 1); break;
        case ModalityKind::kRssi: payload = random_tensor({1}, rng, -80, -30); break;
      }
      frames.push_back({kind, payload, t});
    }
  }
  return frames;
}

// Spreads the tiny model's weights so the end-to-end gradient is well above
// finite-difference noise.
void widen(ModelParams& p, std::mt19937_64& rng) {
  for (auto& np : named_parameters(p)) {
    if (np.group == ParamGroup::kRatio) continue;
    if (np.name.find("ln") != std::string::npos) continue;
    np.var.mutable_value() = normal_tensor(np.var.shape(), rng, 0.3);
  }
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("tokenflow_model_test_" + name);
}

}  // namespace

TEST(Model, DeskLogitsShape) {
  const auto c = ModelConfig::desk(Task::kBeam);
  const auto params = init_model_params(c, 1);
  std::mt19937_64 rng(1);
  const auto frames = frames_for(c, rng);
  const auto out = forward_train(frames, params, c);
  EXPECT_EQ(out.logits.shape(), (Shape{1, 16}));
  EXPECT_EQ(out.blocks.size(), std::size_t(c.layers));
  EXPECT_EQ(forward_infer(frames, params, c).shape(), (Shape{1, 16}));

  const auto h = ModelConfig::desk(Task::kHandover);
  const auto hp = init_model_params(h, 2);
  const auto hf = frames_for(h, rng);
  EXPECT_EQ(forward_infer(hf, hp, h).shape(), (Shape{1, 1}));
}

TEST(Model, InitialRatiosAreOne) {
  const auto params = init_model_params(ModelConfig::tiny(), 3);
  ASSERT_EQ(params.ratios.size(), 2u);
  for (const auto& r : params.ratios) EXPECT_EQ(r.value()[0], 1.0);
}

TEST(Model, NamedParametersAreUniqueAndCounted) {
  const auto params = init_model_params(ModelConfig::desk(Task::kBeam), 4);
  std::set<std::string> names;
  Index total = 0;
  for (const auto& p : named_parameters(params)) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    total += p.var.numel();
  }
  EXPECT_EQ(total, parameter_count(params));
}

TEST(Model, SameSeedSameWeights) {
  const auto a = named_parameters(init_model_params(ModelConfig::tiny(), 5));
  const auto b = named_parameters(init_model_params(ModelConfig::tiny(), 5));
  const auto c = named_parameters(init_model_params(ModelConfig::tiny(), 6));
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].var.value(), b[i].var.value());
    differs = differs || !(a[i].var.value() == c[i].var.value());
  }
  EXPECT_TRUE(differs);
}

TEST(Model, TrainAndInferAgreeAtLatticeRatios) {
  const auto c = ModelConfig::tiny();
  ASSERT_EQ(c.sequence_length(), 10);
  auto params = init_model_params(c, 7);
  std::mt19937_64 rng(7);
  widen(params, rng);
  const auto frames = frames_for(c, rng);
  for (double r : {1.0, 0.5, 0.3}) {
    for (auto& v : params.ratios) v.mutable_value()[0] = r;
    const Tensor train = forward_train(frames, params, c).logits.value();
    std::vector<BlockTrace> traces;
    const Tensor infer = forward_infer(frames, params, c, {}, &traces);
    EXPECT_LT((train.values() - infer.values()).cwiseAbs().maxCoeff(), 1e-12) << r;
    for (const auto& t : traces) EXPECT_EQ(t.tokens_processed, inference_k(r, 10));
  }
}

TEST(Model, RatioOverrideAndRandomRouting) {
  const auto c = ModelConfig::tiny();
  const auto params = init_model_params(c, 8);
  std::mt19937_64 rng(8);
  const auto frames = frames_for(c, rng);
  const std::vector<double> override{0.3, 0.7};
  ForwardOptions opts;
  opts.ratio_override = override;
  std::vector<BlockTrace> traces;
  forward_infer(frames, params, c, opts, &traces);
  EXPECT_EQ(traces[0].tokens_processed, 3);
  EXPECT_EQ(traces[1].tokens_processed, 7);
  const std::vector<double> wrong{0.5};
  opts.ratio_override = wrong;
  EXPECT_THROW(forward_infer(frames, params, c, opts), std::invalid_argument);

  ForwardOptions random;
  random.routing = RoutingMode::kRandom;
  EXPECT_THROW(forward_infer(frames, params, c, random), std::invalid_argument);
  std::mt19937_64 r1(1), r2(1);
  random.rng = &r1;
  const Tensor a = forward_infer(frames, params, c, random);
  random.rng = &r2;
  EXPECT_EQ(forward_infer(frames, params, c, random), a);
}

TEST(Model, EndToEndGradientMatchesFiniteDifferences) {
  const auto c = ModelConfig::tiny();
  auto params = init_model_params(c, 9);
  std::mt19937_64 rng(9);
  widen(params, rng);
  params.ratios[0].mutable_value()[0] = 0.55;
  params.ratios[1].mutable_value()[0] = 0.75;
  const auto frames = frames_for(c, rng);
  const Target target{2, {}};

  auto loss_value = [&] {
    NoGradGuard no_grad;
    const auto out = forward_train(frames, params, c);
    return total_loss(out.logits, target, params.ratios, c).total.item();
  };

  const auto named = named_parameters(params);
  for (auto p : named) p.var.zero_grad();
  {
    Tape tape;
    TapeGuard guard(tape);
    const auto out = forward_train(frames, params, c);
    tape.backward(total_loss(out.logits, target, params.ratios, c).total);
  }

  const double h = 1e-6;
  Index checked = 0;
  double worst = 0.0;
  std::string worst_name;
  for (auto p : named) {
    // Every entry of small tensors; a strided sample of larger ones.
    const Index n = p.var.numel();
    const Index stride = n > 24 ? n / 12 : 1;
    for (Index i = 0; i < n; i += stride) {
      double& w = p.var.mutable_value()[i];
      const double saved = w;
      w = saved + h;
      const double plus = loss_value();
      w = saved - h;
      const double minus = loss_value();
      w = saved;
      const double numeric = (plus - minus) / (2 * h);
      const double analytic = p.var.has_grad() ? p.var.grad()[i] : 0.0;
      const double err = std::abs(analytic - numeric) / std::max(1e-3, std::abs(numeric));
      if (err > worst) {
        worst = err;
        worst_name = p.name + "[" + std::to_string(i) + "]";
      }
      ++checked;
    }
  }
  EXPECT_GT(checked, 200);
  EXPECT_LT(worst, 1e-4) << worst_name;
}

TEST(Loss, ClosedFormValues) {
  auto c = ModelConfig::tiny();
  c.num_classes = 8;
  c.gamma_prime = 0.4;
  const std::vector<Var> at_target{Var::constant(Tensor({1}, {0.4})), Var::constant(Tensor({1}, {0.4}))};
  const auto beam = total_loss(Var::constant(Tensor({1, 8})), Target{5, {}}, at_target, c);
  EXPECT_NEAR(beam.task.item(), std::log(8.0), 1e-14);
  EXPECT_NEAR(beam.penalty.item(), 0.0, 1e-15);
  EXPECT_NEAR(beam.total.item(), std::log(8.0), 1e-14);

  c.task = Task::kHandover;
  c.num_vehicles = 3;
  const auto ho = total_loss(Var::constant(Tensor({1, 3})), Target{-1, Tensor({3}, {1, 0, 1})}, at_target, c);
  EXPECT_NEAR(ho.task.item(), std::log(2.0), 1e-14);
  EXPECT_THROW(total_loss(Var::constant(Tensor({1, 3})), Target{-1, Tensor({2})}, at_target, c),
               std::invalid_argument);

  const std::vector<Var> off{Var::constant(Tensor({1}, {1.0})), Var::constant(Tensor({1}, {0.6}))};
  EXPECT_NEAR(total_loss(Var::constant(Tensor({1, 3})), Target{-1, Tensor({3})}, off, c).penalty.item(),
              c.lambda * 0.16, 1e-12);
}

TEST(Predict, BeamTopKAndHandoverThreshold) {
  const auto p = predict(Tensor({1, 6}, {0.1, 0.5, 0.3, 0.9, 0.3, 0.0}), Task::kBeam);
  EXPECT_EQ(p.beam, 3);
  EXPECT_EQ(p.top1, (std::vector<Index>{3}));
  EXPECT_EQ(p.top3, (std::vector<Index>{3, 1, 2}));
  EXPECT_EQ(p.top5, (std::vector<Index>{3, 1, 2, 4, 0}));
  const auto small = predict(Tensor({1, 2}, {0.0, 1.0}), Task::kBeam);
  EXPECT_EQ(small.top5.size(), 2u);

  const auto h = predict(Tensor({1, 4}, {0.0, 0.1, -2.0, 7.0}), Task::kHandover);
  EXPECT_EQ(h.link, (std::vector<int>{0, 1, 0, 1}));
}

TEST(RandomScores, UniformOnUnitInterval) {
  std::mt19937_64 rng(10);
  std::array<int, 10> bins{};
  for (int i = 0; i < 100; ++i) {
    const Var s = random_scores(10, &rng);
    ASSERT_EQ(s.shape(), (Shape{10, 1}));
    for (Index j = 0; j < 10; ++j) {
      const double v = s.value()[j];
      ASSERT_GE(v, 0.0);
      ASSERT_LT(v, 1.0);
      ++bins[std::size_t(v * 10)];
    }
  }
  double chi2 = 0.0;
  for (int b : bins) chi2 += (b - 100.0) * (b - 100.0) / 100.0;
  EXPECT_LT(chi2, 27.88);  // 9 degrees of freedom, p = 0.001
  EXPECT_THROW(random_scores(3, nullptr), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto c = ModelConfig::desk(Task::kHandover);
  c.num_vehicles = 3;
  auto params = init_model_params(c, 11);
  params.ratios[1].mutable_value()[0] = 0.123456789012345;
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(path, c, params);
  const auto [lc, lp] = load_checkpoint(path);
  EXPECT_EQ(nlohmann::json(lc), nlohmann::json(c));
  const auto a = named_parameters(params), b = named_parameters(lp);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].var.value(), b[i].var.value()) << a[i].name;
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto c = ModelConfig::tiny();
  const auto params = init_model_params(c, 12);
  const auto path = temp_file("corrupt.ckpt");
  save_checkpoint(path, c, params);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto expect_kind = [&](const std::string& content, FormatErrorKind kind) {
    {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out << content;
    }
    try {
      load_checkpoint(path);
      ADD_FAILURE() << "accepted a corrupt checkpoint, expected " << format_error_name(kind);
    } catch (const FormatError& e) {
      EXPECT_EQ(e.kind(), kind) << e.what();
    }
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_kind(bad_magic, FormatErrorKind::kBadMagic);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  expect_kind(bad_version, FormatErrorKind::kVersionMismatch);
  expect_kind(bytes.substr(0, 10), FormatErrorKind::kTruncated);
  expect_kind(bytes.substr(0, 40), FormatErrorKind::kTruncated);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}
