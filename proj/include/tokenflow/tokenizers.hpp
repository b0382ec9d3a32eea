#pragma once

#include "tokenflow/autograd.hpp"
#include "tokenflow/config.hpp"

#include <map>
#include <random>
#include <span>
#include <vector>

namespace tokenflow {

/// One sensor reading. Payload shapes by kind:
///   image [H, W, C]; pointcloud [P, 4] rows (x, y, z, feature);
///   radar [n, 4] or [n, 5] rows (velocity, azimuth, altitude, depth[, magnitude]);
///   gps [2]; rssi [1].
struct ModalityFrame {
  ModalityKind kind = ModalityKind::kImage;
  Tensor payload;
  Index frame_index = 0;
};

struct TokenInfo {
  ModalityKind kind = ModalityKind::kImage;
  Index frame_index = -1;
  Index position = -1;
  bool is_cls = false;
};

struct TokenSequence {
  Var tokens;  // [N, d]
  std::vector<TokenInfo> layout;
};

struct ResBlockParams {
  Var w1, b1, w2, b2;
};

struct ConvStackParams {
  Var stem_w, stem_b;
  ResBlockParams res1;
  Var down_w, down_b;
  ResBlockParams res2;
  Var proj_w, proj_b;  // 1x1 projection to d
};

/// Linear -> GELU -> Linear.
struct MlpParams {
  Var w1, b1, w2, b2;
};

struct TokenizerParams {
  ConvStackParams image;
  ConvStackParams lidar;
  MlpParams radar;
  MlpParams gps;
  MlpParams rssi;
  std::map<ModalityKind, Var> position;  // [tokens_per_frame, d]; image and lidar may alias
  Var time;                              // [tau, d]
  Var modality;                          // [M, d], row = index in config.modalities
  Var cls;                               // [1, d]
};

TokenizerParams init_tokenizer_params(const ModelConfig& config, std::mt19937_64& rng);

Var mlp_forward(const Var& x, const MlpParams& p);
/// Runs the conv stack on [C, H, W] and returns [grid_h * grid_w, d] tokens,
/// row-major over the grid.
Var conv_stack_forward(const Var& x, const ConvStackParams& p, const ConvStackConfig& c);

/// Sum- or max-pools in-bounds, above-ground point features onto a
/// [1, height, width] grid. Rows follow y, columns follow x.
Tensor rasterize_bev(const Tensor& points, const BevConfig& bev);

/// Keeps the n_rad rows with the largest magnitude (ties to the lower row),
/// ordered by rank, zero-padded. Returns [n_rad, 4]; kept_rows gets the
/// source row of each kept detection.
Tensor select_radar_rows(const Tensor& detections, Index n_rad, std::vector<Index>* kept_rows = nullptr);

Var tokenize_image(const ModalityFrame& frame, const TokenizerParams& params, const ModelConfig& config);
Var tokenize_pointcloud(const ModalityFrame& frame, const TokenizerParams& params, const ModelConfig& config);
Var tokenize_radar(const ModalityFrame& frame, const TokenizerParams& params, const ModelConfig& config);

/// RSSI arrives in dBm (roughly -100..-20); scaled to O(1) before the MLP.
inline constexpr double kRssiInputScale = 1.0 / 50.0;

Var tokenize_scalar(const ModalityFrame& frame, const TokenizerParams& params, const ModelConfig& config);

/// Tokenizes every frame, adds position + time + modality embeddings and
/// prepends CLS. Token order is frame-major, then config.modalities order.
TokenSequence assemble_sequence(std::span<const ModalityFrame> frames, const TokenizerParams& params,
                                const ModelConfig& config);

}  // namespace tokenflow
