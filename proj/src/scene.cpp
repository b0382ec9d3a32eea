#include "tokenflow/scene.hpp"

#include "tokenflow/init.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tokenflow {

ScenarioConfig ScenarioConfig::desk(Task task) {
  ScenarioConfig c;
  c.task = task;
  if (task == Task::kHandover) {
    c.modalities = {ModalityKind::kImage, ModalityKind::kPointCloud, ModalityKind::kRssi};
    c.channel.mode = RssMode::kPowerSum;
    c.channel.tx_power_dbm = 58.0;
    c.channel.reflection_loss_db = 25.0;
  }
  return c;
}

void ScenarioConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("scenario config: " + what); };
  if (vehicles < 1) fail("at least one vehicle is required");
  if (tau < 1) fail("tau must be at least 1");
  if (!(dt > 0.0)) fail("frame period must be positive");
  if (frames < tau + 1) {
    fail("scenario of " + std::to_string(frames) + " frames is shorter than tau+1 = " + std::to_string(tau + 1));
  }
  if (scenarios < 1) fail("at least one scenario is required");
  if (lanes.size() < 2) fail("need a blocker lane and at least one vehicle lane");
  if (!(road_x_max > road_x_min)) fail("empty road");
  if (image_size < 1) fail("image size must be positive");
  if (speed_min > speed_max || blocker_speed_min > blocker_speed_max) fail("inverted speed range");
}

namespace {

double wrap(double x, double lo, double hi) {
  const double span = hi - lo;
  double r = std::fmod(x - lo, span);
  if (r < 0) r += span;
  return lo + r;
}

}  // namespace

std::vector<SceneState> simulate_scenario(const ScenarioConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::normal_distribution<double> jitter(0.0, config.lane_jitter);

  SceneState s0;
  std::vector<double> lane_y;
  for (Index v = 0; v < config.vehicles; ++v) {
    const auto lane = 1 + std::size_t(rng() % (config.lanes.size() - 1));
    const double dir = unit(rng) < 0.5 ? -1.0 : 1.0;
    lane_y.push_back(config.lanes[lane]);
    s0.vehicles.push_back({uniform(config.road_x_min, config.road_x_max), config.lanes[lane], config.vehicle_length,
                           config.vehicle_width, config.vehicle_height,
                           dir * uniform(config.speed_min, config.speed_max)});
  }
  for (Index b = 0; b < config.max_blockers; ++b) {
    // Draw every number even when the slot stays empty, so one slot's outcome
    // does not shift the others.
    const bool present = unit(rng) < config.blocker_probability;
    const double x = uniform(config.road_x_min, config.road_x_max);
    const double dir = unit(rng) < 0.5 ? -1.0 : 1.0;
    const double speed = uniform(config.blocker_speed_min, config.blocker_speed_max);
    if (present) {
      s0.blockers.push_back({x, config.lanes[0], config.blocker_length, config.blocker_width, config.blocker_height,
                             dir * speed});
    }
  }

  std::vector<SceneState> states{s0};
  for (Index t = 1; t < config.frames; ++t) {
    SceneState s = states.back();
    for (std::size_t v = 0; v < s.vehicles.size(); ++v) {
      auto& box = s.vehicles[v];
      box.x = wrap(box.x + box.vx * config.dt, config.road_x_min, config.road_x_max);
      box.y = lane_y[v] + jitter(rng);
    }
    for (auto& box : s.blockers) box.x = wrap(box.x + box.vx * config.dt, config.road_x_min, config.road_x_max);
    states.push_back(std::move(s));
  }
  return states;
}

bool los_blocked(const SceneState& state, Index vehicle) {
  const Box& v = state.vehicles.at(std::size_t(vehicle));
  // Liang-Barsky clip of the segment (0,0) -> (v.x, v.y) against each box.
  for (const Box& b : state.blockers) {
    const double p[4] = {-v.x, v.x, -v.y, v.y};
    const double q[4] = {0.0 - (b.x - b.length / 2), (b.x + b.length / 2) - 0.0, 0.0 - (b.y - b.width / 2),
                         (b.y + b.width / 2) - 0.0};
    double t0 = 0.0, t1 = 1.0;
    bool inside = true;
    for (int i = 0; i < 4 && inside; ++i) {
      if (p[i] == 0.0) {
        if (q[i] < 0.0) inside = false;
      } else {
        const double r = q[i] / p[i];
        if (p[i] < 0.0) {
          t0 = std::max(t0, r);
        } else {
          t1 = std::min(t1, r);
        }
        if (t0 > t1) inside = false;
      }
    }
    if (inside) return true;
  }
  return false;
}

namespace {

PropagationPath path_towards(double dx, double dy, double dz, bool los) {
  const double len = std::sqrt(dx * dx + dy * dy + dz * dz);
  PropagationPath p;
  p.length = std::max(1.0, len);
  p.theta = std::acos(std::clamp(dy / len, -1.0, 1.0));
  p.phi = std::atan2(dz, dx);
  p.is_los = los;
  return p;
}

}  // namespace

std::vector<PropagationPath> vehicle_paths(const SceneState& state, Index vehicle, const ScenarioConfig& config) {
  const Box& v = state.vehicles.at(std::size_t(vehicle));
  std::vector<PropagationPath> paths;
  if (!los_blocked(state, vehicle)) {
    paths.push_back(path_towards(v.x, v.y, config.antenna_height - config.rsu_height, true));
  }
  // Ground bounce unfolded through the mirror image of the RSU.
  paths.push_back(path_towards(v.x, v.y, -(config.antenna_height + config.rsu_height), false));
  return paths;
}

LinkLabels label_state(const SceneState& state, const ScenarioConfig& config, const BeamCodebook& codebook) {
  LinkLabels labels;
  std::vector<std::vector<PropagationPath>> all;
  for (Index v = 0; v < Index(state.vehicles.size()); ++v) all.push_back(vehicle_paths(state, v, config));
  labels.beam = optimal_beam(all, codebook, config.antenna, config.channel);
  for (const auto& paths : all) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& f : codebook.beams) best = std::max(best, rss_dbm(paths, f, config.antenna, config.channel));
    labels.best_rss.push_back(best);
    labels.link.push_back(link_status(best, config.channel.s_th_dbm));
  }
  return labels;
}

namespace {

Tensor render_image(const SceneState& s, const ScenarioConfig& c) {
  const Index n = c.image_size;
  Tensor img({n, n, 1});
  const auto& b = c.bev;
  const double dx = (b.x_max - b.x_min) / double(n), dy = (b.y_max - b.y_min) / double(n);
  auto paint = [&](const Box& box, double value) {
    for (Index r = 0; r < n; ++r) {
      const double y = b.y_min + (double(r) + 0.5) * dy;
      if (std::abs(y - box.y) > box.width / 2) continue;
      for (Index col = 0; col < n; ++col) {
        const double x = b.x_min + (double(col) + 0.5) * dx;
        if (std::abs(x - box.x) <= box.length / 2) img[r * n + col] = std::max(img[r * n + col], value);
      }
    }
  };
  for (const auto& box : s.blockers) paint(box, 0.5);
  for (const auto& box : s.vehicles) paint(box, 1.0);
  return img;
}

Tensor render_points(const SceneState& s, const ScenarioConfig& c) {
  std::vector<std::array<double, 4>> pts;
  auto outline = [&](const Box& box) {
    const double x0 = box.x - box.length / 2, y0 = box.y - box.width / 2;
    const Index nx = std::max<Index>(1, Index(std::ceil(box.length / c.point_spacing)));
    const Index ny = std::max<Index>(1, Index(std::ceil(box.width / c.point_spacing)));
    for (double z : {0.5 * box.height, box.height}) {
      for (Index i = 0; i <= nx; ++i) {
        const double x = x0 + box.length * double(i) / double(nx);
        pts.push_back({x, y0, z, 1.0});
        pts.push_back({x, y0 + box.width, z, 1.0});
      }
      for (Index j = 1; j < ny; ++j) {
        const double y = y0 + box.width * double(j) / double(ny);
        pts.push_back({x0, y, z, 1.0});
        pts.push_back({x0 + box.length, y, z, 1.0});
      }
    }
  };
  for (const auto& box : s.blockers) outline(box);
  for (const auto& box : s.vehicles) outline(box);
  if (pts.empty()) return Tensor({0, 4});
  // Ground returns along each lane centre; the BEV step drops them.
  for (double y : c.lanes)
    for (double x = c.road_x_min; x < c.road_x_max; x += 10.0) pts.push_back({x, y, 0.0, 1.0});
  Tensor out({Index(pts.size()), 4});
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (Index k = 0; k < 4; ++k) out(Index(i), k) = pts[i][std::size_t(k)];
  return out;
}

Tensor render_radar(const SceneState& s, const ScenarioConfig& c) {
  std::vector<std::array<double, 5>> rows;
  auto detect = [&](const Box& box, double z) {
    const double dz = z - c.rsu_height;
    const double horiz = std::hypot(box.x, box.y);
    const double depth = std::max(1.0, std::sqrt(horiz * horiz + dz * dz));
    const double radial = box.vx * box.x / depth;
    rows.push_back({radial / 10.0, std::atan2(box.x, box.y), std::atan2(dz, horiz), depth / 50.0,
                    (10.0 / depth) * (10.0 / depth)});
  };
  for (const auto& box : s.vehicles) detect(box, c.antenna_height);
  for (const auto& box : s.blockers) detect(box, box.height / 2);
  Tensor out({Index(rows.size()), 5});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Index k = 0; k < 5; ++k) out(Index(i), k) = rows[i][std::size_t(k)];
  return out;
}

Tensor as_stored(const Tensor& t) { return t.cast<float>().cast<double>(); }

}  // namespace

std::vector<ModalityFrame> render_frame(const SceneState& state, const ScenarioConfig& config, double previous_rss,
                                        std::mt19937_64& noise) {
  std::vector<ModalityFrame> frames;
  for (auto kind : config.modalities) {
    Tensor payload;
    switch (kind) {
      case ModalityKind::kImage: payload = render_image(state, config); break;
      case ModalityKind::kPointCloud: payload = render_points(state, config); break;
      case ModalityKind::kRadar: payload = render_radar(state, config); break;
      case ModalityKind::kGps: {
        const Box& v = state.vehicles.at(0);
        payload = Tensor({2}, {(v.x - config.bev.x_min) / (config.bev.x_max - config.bev.x_min),
                               (v.y - config.bev.y_min) / (config.bev.y_max - config.bev.y_min)});
        break;
      }
      case ModalityKind::kRssi: {
        std::normal_distribution<double> n(0.0, config.rssi_noise_db);
        payload = Tensor({1}, {previous_rss + n(noise)});
        break;
      }
    }
    // Payloads are stored as f32 on disk; quantize up front so a write/read
    // round trip reproduces them exactly.
    frames.push_back({kind, as_stored(payload), 0});
  }
  return frames;
}

void to_json(nlohmann::json& j, const ScenarioConfig& c) {
  std::vector<std::string> mods;
  for (auto k : c.modalities) mods.emplace_back(modality_name(k));
  j = {{"task", task_name(c.task)},
       {"road_x_min", c.road_x_min},
       {"road_x_max", c.road_x_max},
       {"lanes", c.lanes},
       {"lane_jitter", c.lane_jitter},
       {"rsu_height", c.rsu_height},
       {"antenna_height", c.antenna_height},
       {"vehicles", c.vehicles},
       {"speed", {c.speed_min, c.speed_max}},
       {"vehicle_size", {c.vehicle_length, c.vehicle_width, c.vehicle_height}},
       {"max_blockers", c.max_blockers},
       {"blocker_probability", c.blocker_probability},
       {"blocker_size", {c.blocker_length, c.blocker_width, c.blocker_height}},
       {"blocker_speed", {c.blocker_speed_min, c.blocker_speed_max}},
       {"dt", c.dt},
       {"tau", c.tau},
       {"frames", c.frames},
       {"scenarios", c.scenarios},
       {"seed", c.seed},
       {"antenna", {{"q", c.antenna.q}, {"include_pi", c.antenna.include_pi}}},
       {"channel",
        {{"p0_db", c.channel.p0_db},
         {"eta", c.channel.eta},
         {"xi_db", c.channel.xi_db},
         {"s_th_dbm", c.channel.s_th_dbm},
         {"gain_floor_db", c.channel.gain_floor_db},
         {"tx_power_dbm", c.channel.tx_power_dbm},
         {"reflection_loss_db", c.channel.reflection_loss_db},
         {"mode", c.channel.mode == RssMode::kDbSum ? "db_sum" : "power_sum"}}},
       {"codebook_size", c.codebook_size},
       {"grid", {c.grid.theta_min, c.grid.theta_max, c.grid.phi_min, c.grid.phi_max}},
       {"image_size", c.image_size},
       {"bev", {c.bev.x_min, c.bev.x_max, c.bev.y_min, c.bev.y_max, c.bev.height, c.bev.width}},
       {"point_spacing", c.point_spacing},
       {"rssi_noise_db", c.rssi_noise_db},
       {"modalities", mods}};
}

void from_json(const nlohmann::json& j, ScenarioConfig& c) {
  c.task = parse_task(j.at("task").get<std::string>());
  j.at("road_x_min").get_to(c.road_x_min);
  j.at("road_x_max").get_to(c.road_x_max);
  j.at("lanes").get_to(c.lanes);
  j.at("lane_jitter").get_to(c.lane_jitter);
  j.at("rsu_height").get_to(c.rsu_height);
  j.at("antenna_height").get_to(c.antenna_height);
  j.at("vehicles").get_to(c.vehicles);
  c.speed_min = j.at("speed").at(0);
  c.speed_max = j.at("speed").at(1);
  c.vehicle_length = j.at("vehicle_size").at(0);
  c.vehicle_width = j.at("vehicle_size").at(1);
  c.vehicle_height = j.at("vehicle_size").at(2);
  j.at("max_blockers").get_to(c.max_blockers);
  j.at("blocker_probability").get_to(c.blocker_probability);
  c.blocker_length = j.at("blocker_size").at(0);
  c.blocker_width = j.at("blocker_size").at(1);
  c.blocker_height = j.at("blocker_size").at(2);
  c.blocker_speed_min = j.at("blocker_speed").at(0);
  c.blocker_speed_max = j.at("blocker_speed").at(1);
  j.at("dt").get_to(c.dt);
  j.at("tau").get_to(c.tau);
  j.at("frames").get_to(c.frames);
  j.at("scenarios").get_to(c.scenarios);
  j.at("seed").get_to(c.seed);
  j.at("antenna").at("q").get_to(c.antenna.q);
  j.at("antenna").at("include_pi").get_to(c.antenna.include_pi);
  const auto& ch = j.at("channel");
  ch.at("p0_db").get_to(c.channel.p0_db);
  ch.at("eta").get_to(c.channel.eta);
  ch.at("xi_db").get_to(c.channel.xi_db);
  ch.at("s_th_dbm").get_to(c.channel.s_th_dbm);
  ch.at("gain_floor_db").get_to(c.channel.gain_floor_db);
  ch.at("tx_power_dbm").get_to(c.channel.tx_power_dbm);
  ch.at("reflection_loss_db").get_to(c.channel.reflection_loss_db);
  c.channel.mode = ch.at("mode").get<std::string>() == "power_sum" ? RssMode::kPowerSum : RssMode::kDbSum;
  j.at("codebook_size").get_to(c.codebook_size);
  const auto& g = j.at("grid");
  c.grid = {g.at(0), g.at(1), g.at(2), g.at(3)};
  j.at("image_size").get_to(c.image_size);
  const auto& b = j.at("bev");
  c.bev.x_min = b.at(0);
  c.bev.x_max = b.at(1);
  c.bev.y_min = b.at(2);
  c.bev.y_max = b.at(3);
  c.bev.height = b.at(4);
  c.bev.width = b.at(5);
  j.at("point_spacing").get_to(c.point_spacing);
  j.at("rssi_noise_db").get_to(c.rssi_noise_db);
  c.modalities.clear();
  for (const auto& m : j.at("modalities")) c.modalities.push_back(parse_modality(m.get<std::string>()));
}

}  // namespace tokenflow
