#pragma once

#include "tokenflow/channel.hpp"
#include "tokenflow/config.hpp"
#include "tokenflow/tokenizers.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <random>
#include <vector>

namespace tokenflow {

/// Straight road along x, RSU at the origin looking along +y.
struct ScenarioConfig {
  Task task = Task::kBeam;
  double road_x_min = -50.0;
  double road_x_max = 50.0;
  std::vector<double> lanes{5.0, 8.5, 12.0};  // lane centre y; lane 0 carries blockers
  double lane_jitter = 0.1;                   // std-dev of per-frame lateral wobble, m
  double rsu_height = 6.0;
  double antenna_height = 1.5;
  Index vehicles = 1;
  double speed_min = 5.0;
  double speed_max = 15.0;
  double vehicle_length = 4.5;
  double vehicle_width = 1.8;
  double vehicle_height = 1.5;
  Index max_blockers = 2;
  double blocker_probability = 0.8;  // per blocker slot
  double blocker_length = 10.0;
  double blocker_width = 2.5;
  double blocker_height = 4.0;
  double blocker_speed_min = 2.0;
  double blocker_speed_max = 8.0;
  double dt = 0.3;
  Index tau = 5;
  Index frames = 105;
  Index scenarios = 20;
  std::uint64_t seed = 7;
  AntennaConfig antenna;
  ChannelParams channel;
  Index codebook_size = 16;
  CodebookGrid grid;
  Index image_size = 64;
  BevConfig bev;
  double point_spacing = 0.5;
  double rssi_noise_db = 0.5;
  std::vector<ModalityKind> modalities{ModalityKind::kImage, ModalityKind::kPointCloud, ModalityKind::kRadar,
                                       ModalityKind::kGps};

  /// Beam: dB-domain RSS sum. Handover: linear power sum with transmit power
  /// and reflection loss so that blockage, not distance, drives link status.
  static ScenarioConfig desk(Task task);
  void validate() const;
};

void to_json(nlohmann::json& j, const ScenarioConfig& c);
void from_json(const nlohmann::json& j, ScenarioConfig& c);

/// Axis-aligned footprint centred at (x, y), moving along x at vx.
struct Box {
  double x = 0.0, y = 0.0;
  double length = 0.0, width = 0.0, height = 0.0;
  double vx = 0.0;
};

struct SceneState {
  std::vector<Box> vehicles;  // vehicles[0] is the GPS/RSSI target
  std::vector<Box> blockers;
};

/// Deterministic kinematics: constant velocity with wrap-around along the
/// road, Gaussian lane jitter for vehicles. Throws if config.vehicles < 1.
std::vector<SceneState> simulate_scenario(const ScenarioConfig& config, std::uint64_t seed);

/// True when the top-view segment RSU -> vehicle crosses a blocker footprint.
bool los_blocked(const SceneState& state, Index vehicle);

/// LoS (unless blocked) plus one ground reflection.
std::vector<PropagationPath> vehicle_paths(const SceneState& state, Index vehicle, const ScenarioConfig& config);

struct LinkLabels {
  Index beam = 0;                // optimal beam over all vehicles
  std::vector<int> link;         // per vehicle, at that vehicle's best beam
  std::vector<double> best_rss;  // per vehicle, dBm
};

LinkLabels label_state(const SceneState& state, const ScenarioConfig& config, const BeamCodebook& codebook);

/// image [S, S, 1], pointcloud [P, 4], radar [n, 5], gps [2], rssi [1]; only
/// the configured modalities are produced. previous_rss feeds the rssi frame.
std::vector<ModalityFrame> render_frame(const SceneState& state, const ScenarioConfig& config, double previous_rss,
                                        std::mt19937_64& noise);

}  // namespace tokenflow
