#pragma once

#include "tokenflow/tensor.hpp"

#include <complex>
#include <span>
#include <vector>

namespace tokenflow {

/// Q x Q uniform planar array with half-wavelength spacing. Angles follow the
/// array frame: theta is measured from boresight and phi around it, so the
/// direction has components (sin t cos p, cos t, sin t sin p) along the
/// array's x axis, boresight, and vertical axis.
struct AntennaConfig {
  Index q = 4;
  bool include_pi = true;
};

struct PropagationPath {
  double theta = 0.0;
  double phi = 0.0;
  double length = 1.0;
  bool is_los = true;
};

enum class RssMode { kDbSum, kPowerSum };

struct ChannelParams {
  double p0_db = 61.4;  // free-space loss at 1 m, 28 GHz
  double eta = 2.0;
  double xi_db = 0.0;  // std-dev of per-path large-scale fading
  double s_th_dbm = -47.0;
  double gain_floor_db = -200.0;
  double tx_power_dbm = 0.0;
  double reflection_loss_db = 0.0;  // applied to non-LoS paths
  RssMode mode = RssMode::kDbSum;
};

using BeamVector = Eigen::VectorXcd;

struct CodebookGrid {
  double theta_min = 0.35;
  double theta_max = 1.40;
  double phi_min = -2.95;
  double phi_max = -0.20;
};

struct BeamCodebook {
  std::vector<BeamVector> beams;
  std::vector<std::pair<double, double>> angles;  // (theta, phi) each beam points at
};

/// a = a_x kron a_y with unit-modulus entries scaled by 1/sqrt(Q) per axis.
BeamVector array_response(double theta, double phi, const AntennaConfig& antenna);

/// 10 log10 max(|sum_n f_n a_n|, 10^(floor/10)).
double beam_gain_db(const BeamVector& f, double theta, double phi, const AntennaConfig& antenna,
                    double gain_floor_db = -200.0);

/// P0 + 10 eta log10(l) + xi. Throws for l < 1.
double path_loss_db(const PropagationPath& path, const ChannelParams& params, double xi_sample = 0.0);

/// Per-path received level tx + R - Omega (minus reflection loss off LoS),
/// combined by summing dB values (kDbSum) or linear powers (kPowerSum).
/// xi supplies one fading sample per path or is empty for none.
double rss_dbm(std::span<const PropagationPath> paths, const BeamVector& f, const AntennaConfig& antenna,
               const ChannelParams& params, std::span<const double> xi = {});

/// |F| = m^2 with m <= Q gives an m x m (theta, phi) grid of conjugate
/// steering vectors; any other size sweeps theta at the middle phi.
BeamCodebook build_codebook(const AntennaConfig& antenna, Index size, const CodebookGrid& grid = {});

/// argmax_f sum_v S_v(f), ties to the lower index.
Index optimal_beam(std::span<const std::vector<PropagationPath>> vehicles, const BeamCodebook& codebook,
                   const AntennaConfig& antenna, const ChannelParams& params);

/// 1 iff s > threshold.
int link_status(double s_dbm, double threshold_dbm);

}  // namespace tokenflow
