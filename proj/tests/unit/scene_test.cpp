#include "tokenflow/scene.hpp"

#include "label_oracle.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>

using namespace tokenflow;
using tokenflow::testing::oracle_blocked;
using tokenflow::testing::oracle_labels;

namespace {

bool same_boxes(const std::vector<Box>& a, const std::vector<Box>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].x != b[i].x || a[i].y != b[i].y || a[i].vx != b[i].vx) return false;
  }
  return true;
}

bool has_los(const std::vector<PropagationPath>& paths) {
  return std::any_of(paths.begin(), paths.end(), [](const PropagationPath& p) { return p.is_los; });
}

}  // namespace

TEST(Scenario, RefusesZeroVehicles) {
  auto c = ScenarioConfig::desk(Task::kBeam);
  c.vehicles = 0;
  EXPECT_THROW(simulate_scenario(c, 1), std::invalid_argument);
  c.vehicles = 1;
  c.frames = c.tau;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Scenario, SameSeedSameTrajectory) {
  auto c = ScenarioConfig::desk(Task::kHandover);
  c.vehicles = 3;
  const auto a = simulate_scenario(c, 42), b = simulate_scenario(c, 42), other = simulate_scenario(c, 43);
  ASSERT_EQ(a.size(), std::size_t(c.frames));
  bool differs = false;
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_TRUE(same_boxes(a[t].vehicles, b[t].vehicles));
    EXPECT_TRUE(same_boxes(a[t].blockers, b[t].blockers));
    differs = differs || !same_boxes(a[t].vehicles, other[t].vehicles);
  }
  EXPECT_TRUE(differs);
}

TEST(Scenario, ConstantVelocityWithWrap) {
  auto c = ScenarioConfig::desk(Task::kBeam);
  c.lane_jitter = 0.0;
  const auto states = simulate_scenario(c, 5);
  const double span = c.road_x_max - c.road_x_min;
  for (std::size_t t = 1; t < states.size(); ++t) {
    for (std::size_t v = 0; v < states[t].vehicles.size(); ++v) {
      const auto& prev = states[t - 1].vehicles[v];
      const auto& cur = states[t].vehicles[v];
      double step = cur.x - prev.x;
      if (step > span / 2) step -= span;
      if (step < -span / 2) step += span;
      EXPECT_NEAR(step, prev.vx * c.dt, 1e-9);
      EXPECT_GE(cur.x, c.road_x_min);
      EXPECT_LT(cur.x, c.road_x_max);
      EXPECT_EQ(cur.y, prev.y);
    }
  }
}

TEST(Occlusion, ScriptedBlockerPassesThroughTheSightLine) {
  // Vehicle at (10, 10): the RSU sight line meets the blocker lane band
  // y in [3.75, 6.25] for x in [3.75, 6.25]. A 10 m blocker centred at bx
  // covers it exactly when bx lies in [-1.25, 11.25].
  const auto c = ScenarioConfig::desk(Task::kBeam);
  SceneState s;
  s.vehicles.push_back({10.0, 10.0, 4.5, 1.8, 1.5, 0.0});
  s.blockers.push_back({0.0, 5.0, 10.0, 2.5, 4.0, 1.0});
  for (double bx = -20.0; bx <= 30.0; bx += 0.25) {
    s.blockers[0].x = bx;
    const bool expected = bx >= -1.25 && bx <= 11.25;
    EXPECT_EQ(los_blocked(s, 0), expected) << "bx=" << bx;
    EXPECT_EQ(oracle_blocked(s.vehicles[0], s.blockers), expected) << "bx=" << bx;
    const auto paths = vehicle_paths(s, 0, c);
    EXPECT_EQ(has_los(paths), !expected);
    EXPECT_EQ(paths.size(), expected ? 1u : 2u);
  }
}

TEST(Occlusion, AgreesWithSegmentOracleOnSimulatedScenes) {
  auto c = ScenarioConfig::desk(Task::kHandover);
  c.vehicles = 3;
  c.max_blockers = 3;
  Index blocked = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& s : simulate_scenario(c, seed)) {
      for (Index v = 0; v < Index(s.vehicles.size()); ++v) {
        const bool got = los_blocked(s, v);
        ASSERT_EQ(got, oracle_blocked(s.vehicles[std::size_t(v)], s.blockers)) << "seed " << seed;
        blocked += got;
        ++total;
      }
    }
  }
  // Both outcomes are exercised.
  EXPECT_GT(blocked, total / 20);
  EXPECT_LT(blocked, total);
}

TEST(Paths, GeometryOfLosAndReflection) {
  const auto c = ScenarioConfig::desk(Task::kBeam);
  SceneState s;
  s.vehicles.push_back({3.0, 4.0, 4.5, 1.8, 1.5, 0.0});
  const auto paths = vehicle_paths(s, 0, c);
  ASSERT_EQ(paths.size(), 2u);
  const double dz_los = c.antenna_height - c.rsu_height, dz_ref = -(c.antenna_height + c.rsu_height);
  EXPECT_NEAR(paths[0].length, std::sqrt(25.0 + dz_los * dz_los), 1e-12);
  EXPECT_NEAR(paths[1].length, std::sqrt(25.0 + dz_ref * dz_ref), 1e-12);
  EXPECT_GT(paths[1].length, paths[0].length);
  EXPECT_TRUE(paths[0].is_los);
  EXPECT_FALSE(paths[1].is_los);
}

TEST(Labels, MatchIndependentEvaluator) {
  for (Task task : {Task::kBeam, Task::kHandover}) {
    auto c = ScenarioConfig::desk(task);
    c.vehicles = task == Task::kBeam ? 2 : 3;
    const auto book = build_codebook(c.antenna, c.codebook_size, c.grid);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      for (const auto& s : simulate_scenario(c, seed)) {
        const auto got = label_state(s, c, book);
        const auto want = oracle_labels(s.vehicles, s.blockers, c, book);
        ASSERT_EQ(got.beam, want.beam) << "seed " << seed;
        ASSERT_EQ(got.link, want.link) << "seed " << seed;
      }
    }
  }
}

TEST(Labels, HandoverLinkTracksBlockage) {
  const auto c = ScenarioConfig::desk(Task::kHandover);
  const auto book = build_codebook(c.antenna, c.codebook_size, c.grid);
  SceneState s;
  s.vehicles.push_back({10.0, 10.0, 4.5, 1.8, 1.5, 0.0});
  EXPECT_EQ(label_state(s, c, book).link[0], 1);
  s.blockers.push_back({5.0, 5.0, 10.0, 2.5, 4.0, 0.0});
  EXPECT_EQ(label_state(s, c, book).link[0], 0);
}

TEST(Render, EmptySceneIsBlank) {
  auto c = ScenarioConfig::desk(Task::kBeam);
  c.modalities = {ModalityKind::kImage, ModalityKind::kPointCloud, ModalityKind::kRadar};
  std::mt19937_64 noise(1);
  const auto frames = render_frame(SceneState{}, c, -60.0, noise);
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(frames[0].payload.shape(), (Shape{64, 64, 1}));
  EXPECT_EQ(frames[0].payload.values().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(frames[1].payload.shape(), (Shape{0, 4}));
  EXPECT_EQ(frames[2].payload.shape(), (Shape{0, 5}));
}

TEST(Render, VehicleFootprintRasterized) {
  auto c = ScenarioConfig::desk(Task::kBeam);
  c.modalities = {ModalityKind::kImage};
  SceneState s;
  s.vehicles.push_back({0.0, 8.0, 4.5, 1.8, 1.5, 0.0});
  std::mt19937_64 noise(1);
  const Tensor img = render_frame(s, c, 0.0, noise)[0].payload;
  const double px = 100.0 / 64.0, py = 16.0 / 64.0;
  Index inside = 0;
  for (Index r = 0; r < 64; ++r) {
    for (Index col = 0; col < 64; ++col) {
      const double x = -50.0 + (col + 0.5) * px, y = (r + 0.5) * py;
      const bool in = std::abs(x) <= 2.25 && std::abs(y - 8.0) <= 0.9;
      EXPECT_EQ(img[r * 64 + col], in ? 1.0 : 0.0) << r << "," << col;
      inside += in;
    }
  }
  // 4.5 m spans 2 or 3 columns of 1.5625 m; 1.8 m spans 7 rows of 0.25 m.
  EXPECT_GT(inside, 0);
}

TEST(Render, RadarAndGpsGeometry) {
  auto c = ScenarioConfig::desk(Task::kBeam);
  SceneState s;
  s.vehicles.push_back({0.0, 8.5, 4.5, 1.8, 1.5, 3.0});
  std::mt19937_64 noise(1);
  const auto frames = render_frame(s, c, 0.0, noise);
  const Tensor& radar = frames[2].payload;
  ASSERT_EQ(radar.shape(), (Shape{1, 5}));
  EXPECT_NEAR(radar(0, 1), 0.0, 1e-9);  // dead ahead
  EXPECT_NEAR(radar(0, 0), 0.0, 1e-9);  // crossing motion has no radial part
  const double depth = std::hypot(8.5, c.antenna_height - c.rsu_height);
  EXPECT_NEAR(radar(0, 4), 100.0 / (depth * depth), 1e-6);
  const Tensor& gps = frames[3].payload;
  EXPECT_NEAR(gps[0], 0.5, 1e-7);
  EXPECT_NEAR(gps[1], 8.5 / 16.0, 1e-7);
}

TEST(Render, RssiEchoesPreviousValue) {
  auto c = ScenarioConfig::desk(Task::kHandover);
  c.rssi_noise_db = 0.0;
  SceneState s;
  s.vehicles.push_back({0.0, 8.5, 4.5, 1.8, 1.5, 3.0});
  std::mt19937_64 noise(1);
  const auto frames = render_frame(s, c, -61.25, noise);
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(frames[2].kind, ModalityKind::kRssi);
  EXPECT_EQ(frames[2].payload[0], -61.25);
}

TEST(ScenarioJson, RoundTrip) {
  auto c = ScenarioConfig::desk(Task::kHandover);
  c.vehicles = 4;
  c.lanes = {4.0, 7.0, 10.0, 13.0};
  const ScenarioConfig back = nlohmann::json(c).get<ScenarioConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
  EXPECT_EQ(back.channel.mode, RssMode::kPowerSum);
  EXPECT_EQ(back.modalities, c.modalities);
}
