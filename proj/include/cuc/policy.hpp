#pragma once

// Regime-adaptive action selection: task value + alpha(kappa) * information
// gain - lambda * risk over a finite candidate set, with candidates whose
// predicted one-step risk exceeds the budget delta(kappa) removed first.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "cuc/ensemble.hpp"
#include "cuc/env.hpp"
#include "cuc/error.hpp"
#include "cuc/kappa.hpp"

namespace cuc {

struct PolicyWeights {
  double alpha = 0.0;
  double lambda = 1.0;
  double delta = 1.0;
};

struct PolicyParams {
  int candidates = 32;
  double alpha_max = 2.0;
  double delta_max = 1.0;
  double lambda = 1.0;
};

namespace detail {
inline double ramp(double k, const RegimeThresholds& thr) {
  return std::clamp((k - thr.tau_low) / (thr.tau_high - thr.tau_low), 0.0, 1.0);
}
}  // namespace detail

inline double alpha_schedule(double k, const RegimeThresholds& thr, double alpha_max) {
  if (!(alpha_max > 0.0)) throw InputError("alpha_max must be positive");
  return alpha_max * detail::ramp(k, thr);
}

inline double delta_budget(double k, const RegimeThresholds& thr, double delta_max) {
  if (!(delta_max > 0.0)) throw InputError("delta_max must be positive");
  return delta_max * (1.0 - detail::ramp(k, thr));
}

inline PolicyWeights weights_for(double k, const RegimeThresholds& thr, const PolicyParams& p) {
  return {alpha_schedule(k, thr, p.alpha_max), p.lambda, delta_budget(k, thr, p.delta_max)};
}

// Trace of the across-member (population) covariance of predicted deltas.
inline double dis_score(const EnsembleModel& ensemble, const Vec& obs, const Vec& acc, const Action& candidate) {
  auto preds = ensemble.predict_all(obs, acc, candidate);
  Vec mean = Vec::Zero(preds.front().size());
  for (const auto& p : preds) mean += p;
  mean /= static_cast<double>(preds.size());
  double tr = 0.0;
  for (const auto& p : preds) tr += (p - mean).squaredNorm();
  return tr / static_cast<double>(preds.size());
}

inline double composite_value(double r_task, double ig, double r_risk, const PolicyWeights& w) {
  return r_task + w.alpha * ig - w.lambda * r_risk;
}

// Scripted task controllers. DriftBot: heading-and-distance P controller to
// the path-following goal. MassSpring1D: state-feedback regulator to the origin.
inline Action task_command(EnvId env, const Observation& o) {
  if (env == EnvId::DriftBot) {
    using D = DriftBot;
    double heading = std::atan2(o[D::kSin], o[D::kCos]);
    auto [gx, gy] = D::goal_for(o[D::kX], o[D::kY]);
    double dx = gx - o[D::kX], dy = gy - o[D::kY];
    double dist = std::hypot(dx, dy);
    double err = std::remainder(std::atan2(dy, dx) - heading, 2.0 * std::numbers::pi);
    double v = std::clamp(1.0 * dist, 0.0, 1.0) * std::max(0.0, std::cos(err));
    double w = 2.0 * err;
    double half = w * D::kWheelBase / (2.0 * D::kVMax);
    return Action{{std::clamp(v / D::kVMax - half, -1.0, 1.0), std::clamp(v / D::kVMax + half, -1.0, 1.0)}};
  }
  using S = MassSpring1D;
  return Action{{std::clamp(-1.0 * o[S::kPos] - 0.2 * o[S::kVel], -1.0, 1.0)}};
}

// Agent-side state belief. Entries reported as observed are taken as read;
// masked entries are dead-reckoned through the noise-free model under the
// agent's assumed parameters, so the estimate inherits any dynamics mismatch.
class StateEstimator {
 public:
  StateEstimator(EnvId env, DynamicsParams assumed) : env_(env), assumed_(std::move(assumed)) {}

  const Observation& reset(const Observation& first) {
    est_ = first;
    return est_;
  }

  // `obs` is the agent's (zero-filled) observation after executing `commanded`.
  const Observation& update(const Observation& obs, const std::vector<bool>& masked, const Action& commanded) {
    if (static_cast<std::size_t>(obs.size()) != masked.size()) throw InputError("mask flags do not match observation");
    if (std::none_of(masked.begin(), masked.end(), [](bool b) { return b; })) {
      est_ = obs;
      return est_;
    }
    Observation pred = nominal_predict(env_, est_, commanded, assumed_);
    for (Eigen::Index i = 0; i < obs.size(); ++i) est_[i] = masked[static_cast<std::size_t>(i)] ? pred[i] : obs[i];
    return est_;
  }

  const Observation& estimate() const { return est_; }

 private:
  EnvId env_;
  DynamicsParams assumed_;
  Observation est_;
};

// Candidate 0 is the zero action (halt), candidate 1 the task command, the
// rest are uniform in [-1, 1]^d from the episode's policy stream.
struct CandidateActionSet {
  std::vector<Action> actions;

  static CandidateActionSet build(const Action& task_cmd, int n, std::mt19937_64& rng) {
    if (n < 2) throw InputError("candidate set needs at least the halt and task actions");
    CandidateActionSet s;
    s.actions.reserve(static_cast<std::size_t>(n));
    s.actions.push_back(Action::Zero(task_cmd.size()));
    s.actions.push_back(task_cmd);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 2; i < n; ++i) {
      Action a(task_cmd.size());
      for (Eigen::Index j = 0; j < a.size(); ++j) a[j] = u(rng);
      s.actions.push_back(std::move(a));
    }
    return s;
  }
};

struct CandidateScore {
  double task = 0.0;  // in [-1, 0]
  double ig = 0.0;    // disagreement normalised by the set maximum, in [0, 1]
  double ig_raw = 0.0;
  double risk = 0.0;  // predicted one-step risk
  double value = 0.0;
  bool admissible = true;
};

struct Decision {
  std::size_t index = 0;
  Action action;
  CandidateScore score;
  bool fallback = false;          // nothing met the budget; minimum-risk candidate taken
  bool budget_violation = false;  // chosen risk > budget although a compliant candidate existed
  double min_risk = 0.0;          // lowest predicted risk in the candidate set
};

// Argmax of composite value over candidates within budget, lowest index on
// ties; minimum-risk candidate if none is within budget.
inline std::size_t select_from_scores(std::vector<CandidateScore>& scores, const PolicyWeights& w, bool& fallback) {
  if (scores.empty()) throw InputError("empty candidate set");
  fallback = false;
  std::size_t best = scores.size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto& s = scores[i];
    s.value = composite_value(s.task, s.ig, s.risk, w);
    s.admissible = s.risk <= w.delta;
    if (s.admissible && (best == scores.size() || s.value > scores[best].value)) best = i;
  }
  if (best != scores.size()) return best;
  fallback = true;
  best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i].risk < scores[best].risk) best = i;
  return best;
}

struct DecisionContext {
  EnvId env = EnvId::DriftBot;
  Observation obs;
  Vec acc;
  Action task_cmd;
  const EnsembleModel* model = nullptr;  // predicts risk and disagreement
};

inline Decision select_action(const DecisionContext& ctx, Regime regime, const CandidateActionSet& candidates,
                              const PolicyWeights& w, std::vector<CandidateScore>* all_scores = nullptr) {
  const auto& cands = candidates.actions;
  if (cands.empty()) throw InputError("empty candidate set");
  if (!ctx.model) throw InputError("decision context has no model");
  std::vector<CandidateScore> scores(cands.size());
  const double norm = 4.0 * static_cast<double>(ctx.task_cmd.size());
  bool want_ig = regime != Regime::LowDeficit && w.alpha > 0.0;
  double ig_max = 0.0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    auto preds = ctx.model->predict_all(ctx.obs, ctx.acc, cands[i]);
    Vec mean = Vec::Zero(ctx.obs.size());
    for (const auto& p : preds) mean += p;
    mean /= static_cast<double>(preds.size());
    auto& s = scores[i];
    s.task = -(cands[i] - ctx.task_cmd).squaredNorm() / norm;
    s.risk = risk_of(ctx.env, ctx.obs + mean);
    if (want_ig) {
      double tr = 0.0;
      for (const auto& p : preds) tr += (p - mean).squaredNorm();
      s.ig_raw = tr / static_cast<double>(preds.size());
      ig_max = std::max(ig_max, s.ig_raw);
    }
  }
  if (want_ig && ig_max > 0.0)
    for (auto& s : scores) s.ig = s.ig_raw / ig_max;

  Decision d;
  d.index = select_from_scores(scores, w, d.fallback);
  d.action = cands[d.index];
  d.score = scores[d.index];
  bool any_ok = std::any_of(scores.begin(), scores.end(), [](const CandidateScore& s) { return s.admissible; });
  d.min_risk = std::min_element(scores.begin(), scores.end(), [](const CandidateScore& a, const CandidateScore& b) {
                 return a.risk < b.risk;
               })->risk;
  d.budget_violation = any_ok && d.score.risk > w.delta;
  if (all_scores) *all_scores = std::move(scores);
  return d;
}

}  // namespace cuc
