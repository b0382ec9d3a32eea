#pragma once

#include "tokenflow/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

#include <string>
#include <string_view>
#include <vector>

namespace tokenflow {

enum class ModalityKind { kImage, kPointCloud, kRadar, kGps, kRssi };
enum class Task { kBeam, kHandover };
enum class GateMode { kRaw, kSigmoid };
enum class BevPooling { kSum, kMax };

std::string_view modality_name(ModalityKind kind);
ModalityKind parse_modality(std::string_view name);
std::string_view task_name(Task task);
Task parse_task(std::string_view name);

/// Residual conv tokenizer: stem conv, pool, residual block, strided conv,
/// residual block, pool, 1x1 projection. Pools of size 1 are skipped.
struct ConvStackConfig {
  Index height = 64;
  Index width = 64;
  Index channels = 1;
  Index c1 = 4;
  Index c2 = 8;
  Index stem_stride = 2;
  Index pool1 = 2;
  Index down_stride = 2;
  Index pool2 = 2;

  Index grid_h() const;
  Index grid_w() const;
  Index tokens() const { return grid_h() * grid_w(); }
};

struct BevConfig {
  double x_min = -50.0;
  double x_max = 50.0;
  double y_min = 0.0;
  double y_max = 16.0;
  Index height = 64;
  Index width = 64;
  BevPooling pooling = BevPooling::kSum;
  // Points at or below this height are treated as ground returns and dropped.
  double min_height = 0.1;
};

struct ModelConfig {
  Task task = Task::kBeam;
  Index d = 32;
  Index layers = 4;
  Index heads = 4;
  Index d_ff = 64;
  Index tau = 5;
  Index num_classes = 16;  // |F| for the beam task
  Index num_vehicles = 1;  // V for the handover task
  std::vector<ModalityKind> modalities{ModalityKind::kImage, ModalityKind::kPointCloud, ModalityKind::kRadar,
                                       ModalityKind::kGps};
  ConvStackConfig image;
  ConvStackConfig lidar;  // input is the BEV grid
  BevConfig bev;
  Index n_rad = 8;
  Index router_hidden = 0;  // 0 means d
  GateMode gate = GateMode::kRaw;
  double router_bias_init = 0.0;
  bool share_position_tables = false;
  double gamma_prime = 0.5;
  double lambda = 10.0;

  Index tokens_per_frame(ModalityKind kind) const;
  /// N = 1 + tau * sum of per-frame token counts.
  Index sequence_length() const;
  Index output_size() const { return task == Task::kBeam ? num_classes : num_vehicles; }
  Index router_width() const { return router_hidden > 0 ? router_hidden : d; }
  double r_min() const { return 1.0 / double(sequence_length()); }
  bool has(ModalityKind kind) const;
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  static ModelConfig desk(Task task = Task::kBeam);
  static ModelConfig paper(Task task = Task::kBeam);
  /// N = 10, d = 8, L = 2; small enough for end-to-end finite differences.
  static ModelConfig tiny();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace tokenflow
