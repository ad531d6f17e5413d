#pragma once

// Super-additivity statistics over matched-seed condition sweeps.

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cuc/ensemble.hpp"
#include "cuc/error.hpp"
#include "cuc/kappa.hpp"

namespace cuc {

// Episode returns of the four conditions of one configuration, same seed.
struct MatchedReturns {
  std::string config_id;
  double c1 = 0.0, c2 = 0.0, c3 = 0.0, c4 = 0.0;
  double po = 0.0;
  int tau = 0;
  bool shifted = false;
};

struct DegradationRecord {
  std::string config_id;
  double return_c1 = 0.0, return_c2 = 0.0, return_c3 = 0.0, return_c4 = 0.0;
  // Fractional losses relative to |return_c1|; NaN when return_c1 == 0.
  double delta_po = 0.0, delta_theta = 0.0, delta_compound = 0.0;
  double synergy_frac = 0.0;
  double synergy_units = 0.0;
  bool fractions_defined = true;
  double po = 0.0;
  int tau = 0;
  bool shifted = false;
};

inline DegradationRecord degradation(const MatchedReturns& r) {
  DegradationRecord d;
  d.config_id = r.config_id;
  d.return_c1 = r.c1;
  d.return_c2 = r.c2;
  d.return_c3 = r.c3;
  d.return_c4 = r.c4;
  d.po = r.po;
  d.tau = r.tau;
  d.shifted = r.shifted;
  d.synergy_units = (r.c1 - r.c4) - ((r.c1 - r.c2) + (r.c1 - r.c3));
  double base = std::abs(r.c1);
  if (base == 0.0) {
    d.fractions_defined = false;
    d.delta_po = d.delta_theta = d.delta_compound = d.synergy_frac = std::numeric_limits<double>::quiet_NaN();
    return d;
  }
  d.delta_po = (r.c1 - r.c2) / base;
  d.delta_theta = (r.c1 - r.c3) / base;
  d.delta_compound = (r.c1 - r.c4) / base;
  d.synergy_frac = d.delta_compound - (d.delta_po + d.delta_theta);
  return d;
}

// Builds a record directly from fractional losses (unit returns scale 1).
inline DegradationRecord degradation_from_fractions(double delta_po, double delta_theta, double delta_compound) {
  DegradationRecord d;
  d.return_c1 = 1.0;
  d.return_c2 = 1.0 - delta_po;
  d.return_c3 = 1.0 - delta_theta;
  d.return_c4 = 1.0 - delta_compound;
  d.delta_po = delta_po;
  d.delta_theta = delta_theta;
  d.delta_compound = delta_compound;
  d.synergy_frac = delta_compound - (delta_po + delta_theta);
  d.synergy_units = d.synergy_frac;
  return d;
}

enum class SynergyScale { Fraction, Units };

struct TTest {
  bool defined = false;
  std::size_t n = 0;
  double mean = 0.0;
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

// One-sample t test of mean == 0, two-sided, with a 95% confidence interval.
inline TTest one_sample_t(std::span<const double> xs) {
  TTest r;
  r.n = xs.size();
  if (xs.size() < 2) return r;
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  double sd = std::sqrt(ss / (n - 1.0));
  double se = sd / std::sqrt(n);
  r.defined = true;
  r.mean = mean;
  r.df = n - 1.0;
  boost::math::students_t dist(r.df);
  double q = boost::math::quantile(dist, 0.975);
  r.ci_low = mean - q * se;
  r.ci_high = mean + q * se;
  if (se == 0.0) {
    r.t = mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p_value = mean == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.t = mean / se;
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

struct StratumRate {
  std::string key;
  std::size_t n = 0;
  std::size_t flagged = 0;
  double rate = 0.0;
};

struct SynergyReport {
  std::size_t n_configs = 0;
  std::size_t n_superadditive = 0;
  double rate = 0.0;
  double mean_synergy_units = 0.0;  // over flagged records, NaN if none
  double mean_synergy_frac = 0.0;
  SynergyScale scale = SynergyScale::Fraction;
  double threshold = 0.0;
  TTest test;  // on synergy_units of flagged records
  std::vector<StratumRate> per_delay;
  std::string note;
};

inline double synergy_in(const DegradationRecord& r, SynergyScale scale) {
  return scale == SynergyScale::Fraction ? r.synergy_frac : r.synergy_units;
}

inline bool is_superadditive(const DegradationRecord& r, double threshold, SynergyScale scale) {
  if (scale == SynergyScale::Fraction && !r.fractions_defined) return false;
  return synergy_in(r, scale) > threshold;
}

namespace detail {
inline std::vector<StratumRate> rates_by(std::span<const DegradationRecord> records, double threshold,
                                         SynergyScale scale, std::string (*key)(const DegradationRecord&)) {
  std::map<std::string, StratumRate> m;
  for (const auto& r : records) {
    if (scale == SynergyScale::Fraction && !r.fractions_defined) continue;
    auto& s = m[key(r)];
    s.key = key(r);
    ++s.n;
    if (is_superadditive(r, threshold, scale)) ++s.flagged;
  }
  std::vector<StratumRate> out;
  for (auto& [k, s] : m) {
    s.rate = s.n ? static_cast<double>(s.flagged) / static_cast<double>(s.n) : 0.0;
    out.push_back(s);
  }
  return out;
}
inline std::string delay_key(const DegradationRecord& r) { return "tau=" + std::to_string(r.tau); }
inline std::string shift_only_key(const DegradationRecord& r) { return r.tau == 0 ? "shift_only" : "delayed"; }
}  // namespace detail

// Records with fractions undefined are skipped when scale is Fraction.
inline SynergyReport superadditive_rate(std::span<const DegradationRecord> records, double threshold = 0.0,
                                        SynergyScale scale = SynergyScale::Fraction) {
  if (records.empty()) throw InputError("superadditive_rate needs at least one record");
  SynergyReport rep;
  rep.scale = scale;
  rep.threshold = threshold;
  std::vector<double> units;
  double frac_sum = 0.0;
  for (const auto& r : records) {
    if (scale == SynergyScale::Fraction && !r.fractions_defined) continue;
    ++rep.n_configs;
    if (is_superadditive(r, threshold, scale)) {
      ++rep.n_superadditive;
      units.push_back(r.synergy_units);
      frac_sum += r.synergy_frac;
    }
  }
  rep.rate = rep.n_configs ? static_cast<double>(rep.n_superadditive) / static_cast<double>(rep.n_configs) : 0.0;
  if (units.empty()) {
    rep.mean_synergy_units = rep.mean_synergy_frac = std::numeric_limits<double>::quiet_NaN();
    rep.note = "no super-additive records";
  } else {
    double s = 0.0;
    for (double u : units) s += u;
    rep.mean_synergy_units = s / static_cast<double>(units.size());
    rep.mean_synergy_frac = frac_sum / static_cast<double>(units.size());
    rep.test = one_sample_t(units);
    if (!rep.test.defined) rep.note = "fewer than two super-additive records; t test undefined";
  }
  rep.per_delay = detail::rates_by(records, threshold, scale, &detail::delay_key);
  return rep;
}

enum class StratumKey { DelayLevel, ShiftOnly };

struct RateTest {
  std::vector<StratumRate> strata;
  double chi2 = 0.0;
  double df = 0.0;
  double p_value = 1.0;
};

// Pearson chi-square test of equal super-additivity rates across strata
// (k x 2 table, no continuity correction).
inline RateTest chi_square_homogeneity(std::vector<StratumRate> strata) {
  if (strata.size() < 2) throw InputError("rate test needs at least two strata");
  RateTest t;
  double n = 0.0, flagged = 0.0;
  for (const auto& s : strata) {
    if (s.n == 0) throw InputError("rate test stratum '" + s.key + "' is empty");
    n += static_cast<double>(s.n);
    flagged += static_cast<double>(s.flagged);
  }
  t.df = static_cast<double>(strata.size() - 1);
  double p_flag = flagged / n;
  if (p_flag > 0.0 && p_flag < 1.0) {
    for (const auto& s : strata) {
      double e1 = static_cast<double>(s.n) * p_flag;
      double e0 = static_cast<double>(s.n) - e1;
      double o1 = static_cast<double>(s.flagged);
      double o0 = static_cast<double>(s.n - s.flagged);
      t.chi2 += (o1 - e1) * (o1 - e1) / e1 + (o0 - e0) * (o0 - e0) / e0;
    }
    t.p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(t.df), t.chi2));
  }
  t.strata = std::move(strata);
  return t;
}

inline RateTest stratified_rate_test(std::span<const DegradationRecord> records, StratumKey key,
                                     double threshold = 0.0, SynergyScale scale = SynergyScale::Fraction) {
  auto strata = detail::rates_by(records, threshold, scale,
                                 key == StratumKey::DelayLevel ? &detail::delay_key : &detail::shift_only_key);
  return chi_square_homogeneity(std::move(strata));
}

struct SpikeLead {
  int collapse_t = 0;
  int spike_t = 0;
  int lead = 0;
};

struct KappaTraceStats {
  double post_onset_mean = 0.0;
  double post_onset_mean_windowed = 0.0;  // mean of the trailing moving average
  double peak = 0.0;
  int peak_t = 0;
  std::vector<SpikeLead> spike_leads;
  std::vector<int> uncovered_collapses;  // collapse events with no preceding spike
};

struct TraceStatsOptions {
  double tau_high = 0.5;
  double collapse_fraction = 0.5;  // collapse: task signal below this fraction of its pre-onset mean
  int window = 10;
};

// `task_signal` is aligned with `trace` (may be empty: no collapse analysis).
inline KappaTraceStats kappa_trace_stats(std::span<const KappaComponents> trace, int onset_t,
                                         std::span<const double> task_signal = {}, const TraceStatsOptions& opt = {}) {
  if (onset_t < 0 || trace.size() <= static_cast<std::size_t>(onset_t))
    throw InputError("kappa trace must be longer than the onset");
  if (!task_signal.empty() && task_signal.size() != trace.size())
    throw InputError("task signal and kappa trace lengths differ");
  if (opt.window < 1) throw InputError("window must be >= 1");
  KappaTraceStats st;
  const auto n = trace.size();
  const auto on = static_cast<std::size_t>(onset_t);

  std::vector<double> smooth(n);
  double run = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    run += trace[i].kappa;
    if (i >= static_cast<std::size_t>(opt.window)) run -= trace[i - static_cast<std::size_t>(opt.window)].kappa;
    smooth[i] = run / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(opt.window)));
  }

  double sum = 0.0, sum_w = 0.0;
  st.peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = on; i < n; ++i) {
    sum += trace[i].kappa;
    sum_w += smooth[i];
    if (trace[i].kappa > st.peak) {
      st.peak = trace[i].kappa;
      st.peak_t = trace[i].t;
    }
  }
  st.post_onset_mean = sum / static_cast<double>(n - on);
  st.post_onset_mean_windowed = sum_w / static_cast<double>(n - on);

  if (task_signal.empty() || on == 0) return st;
  double pre = 0.0;
  for (std::size_t i = 0; i < on; ++i) pre += task_signal[i];
  pre /= static_cast<double>(on);
  if (!(pre > 0.0)) return st;
  const double thr = opt.collapse_fraction * pre;

  std::vector<int> spikes;
  for (std::size_t i = 0; i < n; ++i)
    if (trace[i].kappa > opt.tau_high && (i == 0 || trace[i - 1].kappa <= opt.tau_high)) spikes.push_back(trace[i].t);

  for (std::size_t i = on; i < n; ++i) {
    bool below = task_signal[i] < thr;
    bool was_below = i > on && task_signal[i - 1] < thr;
    if (!below || was_below) continue;
    int ct = trace[i].t;
    int best = -1;
    for (int s : spikes)
      if (s <= ct) best = s;
    if (best < 0)
      st.uncovered_collapses.push_back(ct);
    else
      st.spike_leads.push_back({ct, best, ct - best});
  }
  return st;
}

// Evaluator-side epistemic gap: the model's mean ensemble error on
// transitions generated under the ground-truth dynamics.
inline double epistemic_gap(const EnsembleModel& model, std::span<const Sample> ground_truth) {
  if (ground_truth.empty()) throw InputError("epistemic gap needs ground-truth transitions");
  double s = 0.0;
  for (const auto& g : ground_truth) s += model.mse(g);
  return s / static_cast<double>(ground_truth.size());
}

}  // namespace cuc
