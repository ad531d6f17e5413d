#pragma once

// Compound uncertainty coefficient kappa = sigma_theta + sigma_s, regime
// classification and the two-step threshold calibration.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cuc/ensemble.hpp"
#include "cuc/error.hpp"

namespace cuc {

inline constexpr double kDefaultClip = 5.0;
inline constexpr double kDefaultCTau = 0.3;
inline constexpr double kMinThresholdMargin = 0.05;

struct KappaComponents {
  double sigma_theta = 0.0;
  double sigma_s = 0.0;
  double kappa = 0.0;
  int t = 0;
};

struct RegimeThresholds {
  double tau_low = 0.2;
  double tau_high = 0.5;

  void validate() const {
    if (!(tau_low > 0.0 && tau_high > tau_low)) throw InputError("thresholds must satisfy 0 < tau_low < tau_high");
  }
  bool operator==(const RegimeThresholds&) const = default;
};

enum class Regime { LowDeficit = 0, Transition = 1, HighDeficit = 2 };

inline std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::LowDeficit: return "LowDeficit";
    case Regime::Transition: return "Transition";
    case Regime::HighDeficit: return "HighDeficit";
  }
  return "?";
}

// clip((mse - mu0) / sigma0, 0, C) / C
inline double sigma_theta(double mse_t, const NoiseFloor& floor, double clip = kDefaultClip) {
  if (!(clip > 0.0)) throw InputError("clip ceiling must be positive");
  double z = (mse_t - floor.mu0) / floor.sigma0;
  return std::clamp(z, 0.0, clip) / clip;
}

// PO + delay * (1 + PO), delay = clip(tau * c_tau, 0, 1). Not clamped: reaches 3 at PO = 1, delay = 1.
inline double sigma_s(double po, int tau, double c_tau = kDefaultCTau) {
  if (!(po >= 0.0 && po <= 1.0)) throw InputError("PO fraction outside [0, 1]");
  if (tau < 0) throw InputError("delay must be >= 0");
  double delay = std::clamp(static_cast<double>(tau) * c_tau, 0.0, 1.0);
  return po + delay * (1.0 + po);
}

inline double kappa(double sigma_theta_v, double sigma_s_v) { return sigma_theta_v + sigma_s_v; }

inline KappaComponents make_components(double sigma_theta_v, double sigma_s_v, int t) {
  return {sigma_theta_v, sigma_s_v, kappa(sigma_theta_v, sigma_s_v), t};
}

inline Regime classify_regime(double k, const RegimeThresholds& thr) {
  if (k < thr.tau_low) return Regime::LowDeficit;
  if (k <= thr.tau_high) return Regime::Transition;
  return Regime::HighDeficit;
}

// Nearest-rank percentile, p in (0, 100].
inline double percentile_nearest_rank(std::vector<double> values, double p) {
  if (values.empty()) throw InputError("percentile of an empty sample");
  if (!(p > 0.0 && p <= 100.0)) throw InputError("percentile must be in (0, 100]");
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

inline double mean_of(std::span<const double> xs) {
  if (xs.empty()) throw InputError("mean of an empty sample");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

struct ThresholdCalibrationOptions {
  double percentile = 95.0;
  double min_margin = kMinThresholdMargin;
  double range_fraction = 0.05;
  bool round_high_to_tenth = false;
};

// tau_low : 95th percentile of the baseline kappa plus max(0.05, 5% of its range).
// tau_high: midpoint between the largest single-stressor mean and the compound mean.
inline RegimeThresholds calibrate_thresholds(std::span<const double> c1_kappas,
                                             const std::map<std::string, std::vector<double>>& single_stressor,
                                             std::span<const double> compound_kappas,
                                             const ThresholdCalibrationOptions& opt = {}) {
  if (c1_kappas.empty() || compound_kappas.empty() || single_stressor.empty())
    throw CalibrationError("threshold calibration needs nonempty baseline, single-stressor and compound samples");
  std::vector<double> c1(c1_kappas.begin(), c1_kappas.end());
  auto [lo, hi] = std::minmax_element(c1.begin(), c1.end());
  double margin = std::max(opt.min_margin, opt.range_fraction * (*hi - *lo));
  double tau_low = percentile_nearest_rank(c1, opt.percentile) + margin;

  double max_single = -std::numeric_limits<double>::infinity();
  for (const auto& [label, ks] : single_stressor) {
    if (ks.empty()) throw CalibrationError("single-stressor sample '" + label + "' is empty");
    max_single = std::max(max_single, mean_of(ks));
  }
  double compound = mean_of(compound_kappas);
  if (!(compound > max_single))
    throw CalibrationError("no separating gap: compound mean " + std::to_string(compound) +
                           " does not exceed the largest single-stressor mean " + std::to_string(max_single));
  double tau_high = 0.5 * (max_single + compound);
  if (opt.round_high_to_tenth) tau_high = std::round(tau_high * 10.0) / 10.0;
  if (!(tau_high > tau_low))
    throw CalibrationError("calibrated tau_high " + std::to_string(tau_high) + " is not above tau_low " +
                           std::to_string(tau_low));
  return {tau_low, tau_high};
}

}  // namespace cuc
