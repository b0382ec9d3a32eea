#include "tokenflow/tokenizers.hpp"

#include "tokenflow/init.hpp"
#include "tokenflow/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tokenflow {

namespace {

constexpr double kInitSigma = 0.02;

Var conv_weight(Index f, Index c, Index k, std::mt19937_64& rng) {
  return Var::parameter(he_normal({f, c, k, k}, c * k * k, rng));
}

Var zeros(Shape shape) { return Var::parameter(Tensor(std::move(shape))); }

ResBlockParams init_res_block(Index c, std::mt19937_64& rng) {
  return {conv_weight(c, c, 3, rng), zeros({c}), conv_weight(c, c, 3, rng), zeros({c})};
}

ConvStackParams init_conv_stack(const ConvStackConfig& c, Index d, std::mt19937_64& rng) {
  ConvStackParams p;
  p.stem_w = conv_weight(c.c1, c.channels, 3, rng);
  p.stem_b = zeros({c.c1});
  p.res1 = init_res_block(c.c1, rng);
  p.down_w = conv_weight(c.c2, c.c1, 3, rng);
  p.down_b = zeros({c.c2});
  p.res2 = init_res_block(c.c2, rng);
  p.proj_w = Var::parameter(truncated_normal({d, c.c2, 1, 1}, kInitSigma, rng));
  p.proj_b = zeros({d});
  return p;
}

MlpParams init_mlp(Index in, Index d, std::mt19937_64& rng) {
  return {Var::parameter(truncated_normal({in, d}, kInitSigma, rng)), zeros({d}),
          Var::parameter(truncated_normal({d, d}, kInitSigma, rng)), zeros({d})};
}

Var res_block(const Var& x, const ResBlockParams& p) {
  const Var h = gelu(conv2d(x, p.w1, p.b1, 1, 1));
  return gelu(add(x, conv2d(h, p.w2, p.b2, 1, 1)));
}

Var maybe_pool(const Var& x, Index k) { return k > 1 ? max_pool2d(x, k, k) : x; }

void require_kind(const ModalityFrame& f, std::initializer_list<ModalityKind> kinds, const char* op) {
  for (auto k : kinds) {
    if (f.kind == k) return;
  }
  throw std::invalid_argument(std::string(op) + ": unexpected " + std::string(modality_name(f.kind)) + " frame");
}

Index modality_slot(const ModelConfig& config, ModalityKind kind) {
  const auto it = std::find(config.modalities.begin(), config.modalities.end(), kind);
  return Index(it - config.modalities.begin());
}

}  // namespace

TokenizerParams init_tokenizer_params(const ModelConfig& config, std::mt19937_64& rng) {
  config.validate();
  const Index d = config.d;
  TokenizerParams p;
  if (config.has(ModalityKind::kImage)) p.image = init_conv_stack(config.image, d, rng);
  if (config.has(ModalityKind::kPointCloud)) p.lidar = init_conv_stack(config.lidar, d, rng);
  if (config.has(ModalityKind::kRadar)) p.radar = init_mlp(4, d, rng);
  if (config.has(ModalityKind::kGps)) p.gps = init_mlp(2, d, rng);
  if (config.has(ModalityKind::kRssi)) p.rssi = init_mlp(1, d, rng);
  for (auto kind : config.modalities) {
    const bool alias = config.share_position_tables && kind == ModalityKind::kPointCloud &&
                       p.position.count(ModalityKind::kImage) &&
                       config.image.tokens() == config.lidar.tokens();
    p.position[kind] = alias ? p.position.at(ModalityKind::kImage)
                             : Var::parameter(truncated_normal({config.tokens_per_frame(kind), d}, kInitSigma, rng));
  }
  p.time = Var::parameter(truncated_normal({config.tau, d}, kInitSigma, rng));
  p.modality = Var::parameter(truncated_normal({Index(config.modalities.size()), d}, kInitSigma, rng));
  p.cls = Var::parameter(truncated_normal({1, d}, kInitSigma, rng));
  return p;
}

Var mlp_forward(const Var& x, const MlpParams& p) { return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2); }

Var conv_stack_forward(const Var& x, const ConvStackParams& p, const ConvStackConfig& c) {
  Var h = gelu(conv2d(x, p.stem_w, p.stem_b, c.stem_stride, 1));
  h = res_block(maybe_pool(h, c.pool1), p.res1);
  h = gelu(conv2d(h, p.down_w, p.down_b, c.down_stride, 1));
  h = maybe_pool(res_block(h, p.res2), c.pool2);
  const Var proj = conv2d(h, p.proj_w, p.proj_b, 1, 0);  // [d, g_h, g_w]
  const Index d = proj.shape()[0];
  return transpose(reshape(proj, {d, proj.numel() / d}));
}

Tensor rasterize_bev(const Tensor& points, const BevConfig& bev) {
  Tensor grid({1, bev.height, bev.width});
  if (points.numel() == 0) return grid;
  if (points.rank() != 2 || points.cols() != 4) {
    throw std::invalid_argument("rasterize_bev: expected [P,4] points, got " + shape_string(points.shape()));
  }
  const double dx = (bev.x_max - bev.x_min) / double(bev.width);
  const double dy = (bev.y_max - bev.y_min) / double(bev.height);
  std::vector<bool> touched(std::size_t(bev.height * bev.width), false);
  for (Index i = 0; i < points.rows(); ++i) {
    const double x = points(i, 0), y = points(i, 1), z = points(i, 2), f = points(i, 3);
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z) || !std::isfinite(f)) {
      throw std::domain_error("rasterize_bev: non-finite point");
    }
    if (z <= bev.min_height) continue;
    if (x < bev.x_min || x >= bev.x_max || y < bev.y_min || y >= bev.y_max) continue;
    const Index col = std::min(bev.width - 1, Index((x - bev.x_min) / dx));
    const Index row = std::min(bev.height - 1, Index((y - bev.y_min) / dy));
    const Index cell = row * bev.width + col;
    if (bev.pooling == BevPooling::kSum) {
      grid[cell] += f;
    } else {
      grid[cell] = touched[std::size_t(cell)] ? std::max(grid[cell], f) : f;
    }
    touched[std::size_t(cell)] = true;
  }
  return grid;
}

Tensor select_radar_rows(const Tensor& detections, Index n_rad, std::vector<Index>* kept_rows) {
  Tensor out({n_rad, 4});
  if (kept_rows) kept_rows->clear();
  if (detections.numel() == 0) return out;
  if (detections.rank() != 2 || (detections.cols() != 4 && detections.cols() != 5)) {
    throw std::invalid_argument("tokenize_radar: expected [n,4] or [n,5] detections, got " +
                                shape_string(detections.shape()));
  }
  if (!detections.all_finite()) throw std::domain_error("tokenize_radar: non-finite detection");
  const Index mag_col = detections.cols() == 5 ? 4 : 3;
  std::vector<Index> order(std::size_t(detections.rows()));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return detections(a, mag_col) > detections(b, mag_col); });
  const Index keep = std::min<Index>(n_rad, Index(order.size()));
  for (Index i = 0; i < keep; ++i) {
    out.matrix().row(i) = detections.matrix().row(order[std::size_t(i)]).head(4);
    if (kept_rows) kept_rows->push_back(order[std::size_t(i)]);
  }
  return out;
}

Var tokenize_image(const ModalityFrame& frame, const TokenizerParams& params, const ModelConfig& config) {
  require_kind(frame, {ModalityKind::kImage}, "tokenize_image");
  const auto& c = config.image;
  const Shape expected{c.height, c.width, c.channels};
  if (frame.payload.shape() != expected) {
    throw std::invalid_argument("tokenize_image: expected resolution " + shape_string(expected) + ", got " +
                                shape_string(frame.payload.shape()));
  }
  // HWC -> CHW
  Tensor chw({c.channels, c.height, c.width});
  for (Index y = 0; y < c.height; ++y)
    for (Index x = 0; x < c.width; ++x)
      for (Index ch = 0; ch < c.channels; ++ch)
        chw[(ch * c.height + y) * c.width + x] = frame.payload[(y * c.width + x) * c.channels + ch];
  return conv_stack_forward(Var::constant(std::move(chw)), params.image, c);
}

Var tokenize_pointcloud(const ModalityFrame& frame, const TokenizerParams& params, const ModelConfig& config) {
  require_kind(frame, {ModalityKind::kPointCloud}, "tokenize_pointcloud");
  return conv_stack_forward(Var::constant(rasterize_bev(frame.payload, config.bev)), params.lidar, config.lidar);
}

Var tokenize_radar(const ModalityFrame& frame, const TokenizerParams& params, const ModelConfig& config) {
  require_kind(frame, {ModalityKind::kRadar}, "tokenize_radar");
  return mlp_forward(Var::constant(select_radar_rows(frame.payload, config.n_rad)), params.radar);
}

Var tokenize_scalar(const ModalityFrame& frame, const TokenizerParams& params, const ModelConfig&) {
  require_kind(frame, {ModalityKind::kGps, ModalityKind::kRssi}, "tokenize_scalar");
  const bool gps = frame.kind == ModalityKind::kGps;
  const Index width = gps ? 2 : 1;
  if (frame.payload.numel() != width) {
    throw std::invalid_argument("tokenize_scalar: " + std::string(modality_name(frame.kind)) + " expects " +
                                std::to_string(width) + " values, got " + shape_string(frame.payload.shape()));
  }
  if (!frame.payload.all_finite()) throw std::domain_error("tokenize_scalar: non-finite input");
  Tensor input = frame.payload.reshaped({1, width});
  if (!gps) input[0] *= kRssiInputScale;
  return mlp_forward(Var::constant(input), gps ? params.gps : params.rssi);
}

TokenSequence assemble_sequence(std::span<const ModalityFrame> frames, const TokenizerParams& params,
                                const ModelConfig& config) {
  const Index M = Index(config.modalities.size());
  std::vector<const ModalityFrame*> slots(std::size_t(config.tau * M), nullptr);
  for (const auto& f : frames) {
    if (f.frame_index < 0 || f.frame_index >= config.tau) {
      throw std::invalid_argument("assemble_sequence: frame_index " + std::to_string(f.frame_index) +
                                  " outside [0," + std::to_string(config.tau) + ")");
    }
    const Index m = modality_slot(config, f.kind);
    if (m == M) {
      throw std::invalid_argument("assemble_sequence: modality " + std::string(modality_name(f.kind)) +
                                  " is not configured");
    }
    auto& slot = slots[std::size_t(f.frame_index * M + m)];
    if (slot) {
      throw std::invalid_argument("assemble_sequence: duplicate " + std::string(modality_name(f.kind)) +
                                  " at frame " + std::to_string(f.frame_index));
    }
    slot = &f;
  }
  std::string missing;
  for (Index t = 0; t < config.tau; ++t)
    for (Index m = 0; m < M; ++m)
      if (!slots[std::size_t(t * M + m)]) {
        missing += " " + std::string(modality_name(config.modalities[std::size_t(m)])) + "@" + std::to_string(t);
      }
  if (!missing.empty()) throw std::invalid_argument("assemble_sequence: missing frames:" + missing);

  TokenSequence seq;
  std::vector<Var> parts{params.cls};
  seq.layout.push_back({ModalityKind::kImage, -1, -1, true});
  for (Index t = 0; t < config.tau; ++t) {
    const std::vector<Index> t_row{t};
    const Var time = embedding(params.time, t_row);
    for (Index m = 0; m < M; ++m) {
      const ModalityFrame& f = *slots[std::size_t(t * M + m)];
      Var tokens;
      switch (f.kind) {
        case ModalityKind::kImage: tokens = tokenize_image(f, params, config); break;
        case ModalityKind::kPointCloud: tokens = tokenize_pointcloud(f, params, config); break;
        case ModalityKind::kRadar: tokens = tokenize_radar(f, params, config); break;
        case ModalityKind::kGps:
        case ModalityKind::kRssi: tokens = tokenize_scalar(f, params, config); break;
      }
      const std::vector<Index> m_row{m};
      const Var offset = add(time, embedding(params.modality, m_row));  // [1, d], broadcast over rows
      parts.push_back(add(add(tokens, params.position.at(f.kind)), offset));
      for (Index i = 0; i < tokens.shape()[0]; ++i) seq.layout.push_back({f.kind, t, i, false});
    }
  }
  seq.tokens = concat(parts, 0);
  return seq;
}

}  // namespace tokenflow
