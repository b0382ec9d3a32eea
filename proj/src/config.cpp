#include "tokenflow/config.hpp"

#include <nlohmann/json.hpp>

#include <stdexcept>

namespace tokenflow {

namespace {

Index conv_out(Index n, Index stride) { return (n - 1) / stride + 1; }  // 3x3, pad 1
Index pool_out(Index n, Index k) { return k > 1 ? (n - k) / k + 1 : n; }

Index stack_extent(Index n, const ConvStackConfig& c) {
  n = pool_out(conv_out(n, c.stem_stride), c.pool1);
  return pool_out(conv_out(n, c.down_stride), c.pool2);
}

}  // namespace

std::string_view modality_name(ModalityKind kind) {
  switch (kind) {
    case ModalityKind::kImage: return "image";
    case ModalityKind::kPointCloud: return "pointcloud";
    case ModalityKind::kRadar: return "radar";
    case ModalityKind::kGps: return "gps";
    case ModalityKind::kRssi: return "rssi";
  }
  return "?";
}

ModalityKind parse_modality(std::string_view name) {
  for (auto k : {ModalityKind::kImage, ModalityKind::kPointCloud, ModalityKind::kRadar, ModalityKind::kGps,
                 ModalityKind::kRssi}) {
    if (modality_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown modality '" + std::string(name) + "'");
}

std::string_view task_name(Task task) { return task == Task::kBeam ? "beam" : "handover"; }

Task parse_task(std::string_view name) {
  if (name == "beam") return Task::kBeam;
  if (name == "handover") return Task::kHandover;
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

Index ConvStackConfig::grid_h() const { return stack_extent(height, *this); }
Index ConvStackConfig::grid_w() const { return stack_extent(width, *this); }

Index ModelConfig::tokens_per_frame(ModalityKind kind) const {
  switch (kind) {
    case ModalityKind::kImage: return image.tokens();
    case ModalityKind::kPointCloud: return lidar.tokens();
    case ModalityKind::kRadar: return n_rad;
    case ModalityKind::kGps:
    case ModalityKind::kRssi: return 1;
  }
  return 0;
}

Index ModelConfig::sequence_length() const {
  Index per_frame = 0;
  for (auto k : modalities) per_frame += tokens_per_frame(k);
  return 1 + tau * per_frame;
}

bool ModelConfig::has(ModalityKind kind) const {
  for (auto k : modalities) {
    if (k == kind) return true;
  }
  return false;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (d < 1 || layers < 1 || heads < 1 || d_ff < 1 || tau < 1) fail("dimensions must be positive");
  if (d % heads != 0) fail("d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
  if (modalities.empty()) fail("no modalities");
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (modalities[i] == modalities[j]) fail("duplicate modality " + std::string(modality_name(modalities[i])));
    }
  }
  if (output_size() < 1) fail("output size must be positive");
  if (has(ModalityKind::kRadar) && n_rad < 1) fail("n_rad must be positive");
  if (has(ModalityKind::kPointCloud) && (lidar.height != bev.height || lidar.width != bev.width)) {
    fail("lidar stack input must match the BEV grid");
  }
  for (const auto* s : {&image, &lidar}) {
    if (s->grid_h() < 1 || s->grid_w() < 1) fail("conv stack reduces the grid to nothing");
  }
  if (!(gamma_prime > 0.0 && gamma_prime <= 1.0)) fail("gamma_prime must lie in (0,1]");
  if (lambda < 0.0) fail("lambda must be nonnegative");
}

ModelConfig ModelConfig::desk(Task task) {
  ModelConfig c;
  c.task = task;
  if (task == Task::kHandover) {
    c.modalities = {ModalityKind::kImage, ModalityKind::kPointCloud, ModalityKind::kRssi};
  }
  return c;
}

ModelConfig ModelConfig::paper(Task task) {
  ModelConfig c = desk(task);
  c.d = 64;
  c.layers = task == Task::kHandover ? 4 : 8;
  c.heads = 8;
  c.d_ff = 256;
  // Conv widths sized so tokenizers stay a small share of inference cost, in
  // line with the measured latency breakdown (about 6% at r = 0.5).
  c.image = ConvStackConfig{512, 512, 3, 16, 32, 2, 2, 2, 2};
  c.lidar = ConvStackConfig{512, 512, 1, 16, 32, 2, 2, 2, 2};
  c.bev.height = c.bev.width = 512;
  c.n_rad = 300;
  c.num_classes = 64;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d = 8;
  c.layers = 2;
  c.heads = 2;
  c.d_ff = 16;
  c.tau = 1;
  c.num_classes = 4;
  c.modalities = {ModalityKind::kImage, ModalityKind::kRadar, ModalityKind::kGps};
  c.image = ConvStackConfig{8, 8, 1, 2, 3, 2, 2, 1, 1};
  c.n_rad = 4;
  return c;
}

namespace {

void to_json(nlohmann::json& j, const ConvStackConfig& s) {
  j = {{"height", s.height}, {"width", s.width},         {"channels", s.channels}, {"c1", s.c1},
       {"c2", s.c2},         {"stem_stride", s.stem_stride}, {"pool1", s.pool1},   {"down_stride", s.down_stride},
       {"pool2", s.pool2}};
}

void from_json(const nlohmann::json& j, ConvStackConfig& s) {
  j.at("height").get_to(s.height);
  j.at("width").get_to(s.width);
  j.at("channels").get_to(s.channels);
  j.at("c1").get_to(s.c1);
  j.at("c2").get_to(s.c2);
  j.at("stem_stride").get_to(s.stem_stride);
  j.at("pool1").get_to(s.pool1);
  j.at("down_stride").get_to(s.down_stride);
  j.at("pool2").get_to(s.pool2);
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  std::vector<std::string> mods;
  for (auto k : c.modalities) mods.emplace_back(modality_name(k));
  nlohmann::json image, lidar;
  to_json(image, c.image);
  to_json(lidar, c.lidar);
  j = {{"task", task_name(c.task)},
       {"d", c.d},
       {"layers", c.layers},
       {"heads", c.heads},
       {"d_ff", c.d_ff},
       {"tau", c.tau},
       {"num_classes", c.num_classes},
       {"num_vehicles", c.num_vehicles},
       {"modalities", mods},
       {"image", image},
       {"lidar", lidar},
       {"bev",
        {{"x_min", c.bev.x_min},
         {"x_max", c.bev.x_max},
         {"y_min", c.bev.y_min},
         {"y_max", c.bev.y_max},
         {"height", c.bev.height},
         {"width", c.bev.width},
         {"pooling", c.bev.pooling == BevPooling::kSum ? "sum" : "max"},
         {"min_height", c.bev.min_height}}},
       {"n_rad", c.n_rad},
       {"router_hidden", c.router_hidden},
       {"gate", c.gate == GateMode::kRaw ? "raw" : "sigmoid"},
       {"router_bias_init", c.router_bias_init},
       {"share_position_tables", c.share_position_tables},
       {"gamma_prime", c.gamma_prime},
       {"lambda", c.lambda}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.task = parse_task(j.at("task").get<std::string>());
  j.at("d").get_to(c.d);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("tau").get_to(c.tau);
  j.at("num_classes").get_to(c.num_classes);
  j.at("num_vehicles").get_to(c.num_vehicles);
  c.modalities.clear();
  for (const auto& m : j.at("modalities")) c.modalities.push_back(parse_modality(m.get<std::string>()));
  from_json(j.at("image"), c.image);
  from_json(j.at("lidar"), c.lidar);
  const auto& b = j.at("bev");
  b.at("x_min").get_to(c.bev.x_min);
  b.at("x_max").get_to(c.bev.x_max);
  b.at("y_min").get_to(c.bev.y_min);
  b.at("y_max").get_to(c.bev.y_max);
  b.at("height").get_to(c.bev.height);
  b.at("width").get_to(c.bev.width);
  c.bev.pooling = b.at("pooling").get<std::string>() == "max" ? BevPooling::kMax : BevPooling::kSum;
  b.at("min_height").get_to(c.bev.min_height);
  j.at("n_rad").get_to(c.n_rad);
  j.at("router_hidden").get_to(c.router_hidden);
  c.gate = j.at("gate").get<std::string>() == "sigmoid" ? GateMode::kSigmoid : GateMode::kRaw;
  j.at("router_bias_init").get_to(c.router_bias_init);
  j.at("share_position_tables").get_to(c.share_position_tables);
  j.at("gamma_prime").get_to(c.gamma_prime);
  j.at("lambda").get_to(c.lambda);
}

}  // namespace tokenflow
