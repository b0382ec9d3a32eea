#include "tokenflow/channel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace tokenflow {

namespace {

Eigen::VectorXcd steering(Index q, double phase_step) {
  Eigen::VectorXcd v(q);
  const double norm = 1.0 / std::sqrt(double(q));
  for (Index n = 0; n < q; ++n) v[n] = std::polar(norm, phase_step * double(n));
  return v;
}

}  // namespace

BeamVector array_response(double theta, double phi, const AntennaConfig& antenna) {
  if (antenna.q < 1) throw std::invalid_argument("array_response: Q must be positive");
  if (!std::isfinite(theta) || !std::isfinite(phi)) throw std::domain_error("array_response: non-finite angle");
  const double c = antenna.include_pi ? std::numbers::pi : 1.0;
  const Eigen::VectorXcd ax = steering(antenna.q, c * std::sin(theta) * std::cos(phi));
  const Eigen::VectorXcd ay = steering(antenna.q, c * std::sin(theta) * std::sin(phi));
  BeamVector a(antenna.q * antenna.q);
  for (Index i = 0; i < antenna.q; ++i) a.segment(i * antenna.q, antenna.q) = ax[i] * ay;
  return a;
}

double beam_gain_db(const BeamVector& f, double theta, double phi, const AntennaConfig& antenna,
                    double gain_floor_db) {
  const BeamVector a = array_response(theta, phi, antenna);
  if (f.size() != a.size()) {
    throw std::invalid_argument("beam_gain_db: beam has " + std::to_string(f.size()) + " entries, array has " +
                                std::to_string(a.size()));
  }
  const double mag = std::abs((f.array() * a.array()).sum());
  return 10.0 * std::log10(std::max(mag, std::pow(10.0, gain_floor_db / 10.0)));
}

double path_loss_db(const PropagationPath& path, const ChannelParams& params, double xi_sample) {
  if (!(path.length >= 1.0)) {
    throw std::invalid_argument("path_loss_db: path length " + std::to_string(path.length) + " m is below 1 m");
  }
  return params.p0_db + 10.0 * params.eta * std::log10(path.length) + xi_sample;
}

double rss_dbm(std::span<const PropagationPath> paths, const BeamVector& f, const AntennaConfig& antenna,
               const ChannelParams& params, std::span<const double> xi) {
  if (paths.empty()) throw std::invalid_argument("rss_dbm: no propagation paths");
  if (!xi.empty() && xi.size() != paths.size()) throw std::invalid_argument("rss_dbm: one fading sample per path");
  double db_sum = 0.0, power = 0.0;
  for (std::size_t j = 0; j < paths.size(); ++j) {
    const auto& p = paths[j];
    double level = beam_gain_db(f, p.theta, p.phi, antenna, params.gain_floor_db) -
                   path_loss_db(p, params, xi.empty() ? 0.0 : xi[j]);
    if (!p.is_los) level -= params.reflection_loss_db;
    db_sum += level;
    power += std::pow(10.0, (params.tx_power_dbm + level) / 10.0);
  }
  return params.mode == RssMode::kDbSum ? params.tx_power_dbm + db_sum : 10.0 * std::log10(power);
}

BeamCodebook build_codebook(const AntennaConfig& antenna, Index size, const CodebookGrid& grid) {
  if (size < 1) throw std::invalid_argument("build_codebook: |F| must be positive");
  auto at = [](double lo, double hi, Index i, Index m) { return m == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * double(i) / double(m - 1); };
  BeamCodebook book;
  const Index m = Index(std::llround(std::sqrt(double(size))));
  if (m * m == size && m <= antenna.q) {
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < m; ++j) book.angles.emplace_back(at(grid.theta_min, grid.theta_max, i, m),
                                                             at(grid.phi_min, grid.phi_max, j, m));
  } else {
    const double phi = 0.5 * (grid.phi_min + grid.phi_max);
    for (Index i = 0; i < size; ++i) book.angles.emplace_back(at(grid.theta_min, grid.theta_max, i, size), phi);
  }
  for (const auto& [theta, phi] : book.angles) book.beams.push_back(array_response(theta, phi, antenna).conjugate());
  return book;
}

Index optimal_beam(std::span<const std::vector<PropagationPath>> vehicles, const BeamCodebook& codebook,
                   const AntennaConfig& antenna, const ChannelParams& params) {
  if (vehicles.empty()) throw std::invalid_argument("optimal_beam: no vehicles");
  Index best = 0;
  double best_value = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < codebook.beams.size(); ++i) {
    double total = 0.0;
    for (const auto& paths : vehicles) total += rss_dbm(paths, codebook.beams[i], antenna, params);
    if (total > best_value) {
      best_value = total;
      best = Index(i);
    }
  }
  return best;
}

int link_status(double s_dbm, double threshold_dbm) { return s_dbm > threshold_dbm ? 1 : 0; }

}  // namespace tokenflow
