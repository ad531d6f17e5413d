#pragma once

// Closed-loop episodes: perturbed environment -> frozen ensemble (sigma_theta)
// + observability metadata (sigma_s) -> kappa -> regime-adaptive policy, with
// an online-adapting copy of the ensemble fed by post-onset transitions.
//
// Also the calibration pipeline: pre-training rollouts, noise floor and the
// two-step threshold calibration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cuc/analysis.hpp"
#include "cuc/ensemble.hpp"
#include "cuc/env.hpp"
#include "cuc/kappa.hpp"
#include "cuc/perturb.hpp"
#include "cuc/policy.hpp"

namespace cuc {

inline constexpr const char* kToolkitVersion = "0.1.0";

struct GridSpec {
  std::vector<double> po;
  std::vector<int> delay;
  std::vector<std::optional<ShiftSpec>> shift;
  std::vector<std::uint64_t> seeds;
  int onset = kDefaultOnset;

  std::size_t size() const { return po.size() * delay.size() * shift.size() * seeds.size(); }
};

struct RunParams {
  int kappa_window = 10;      // trailing window of kappa fed to the regime selector
  int adapt_every = 5;        // steps between adaptive ensemble updates
  std::size_t probe_window = 64;  // most recent probe samples used per update
  double excitation = 1.0;    // dither amplitude of the excitation policy
};

struct ExperimentConfig {
  EnvId env = EnvId::DriftBot;
  DynamicsParams theta = DriftBot::nominal();
  int horizon = kDefaultHorizon;
  std::uint64_t seed = 1024;
  GridSpec grid;
  std::vector<std::uint64_t> calibration_seeds{1001, 1002, 1003};
  EnsembleHyper ensemble;
  double clip = kDefaultClip;
  double c_tau = kDefaultCTau;
  PolicyParams policy;
  RunParams run;
  std::optional<RegimeThresholds> thresholds;  // overrides calibration
  std::string output_dir = "out";
  int workers = 1;
};

inline GridSpec default_grid(EnvId env) {
  GridSpec g;
  g.delay = {0, 1, 2, 3};
  g.seeds = {1, 2, 3, 4, 5};
  if (env == EnvId::DriftBot) {
    g.po = {0.0, 0.25, 0.5};
    g.shift = {std::nullopt, ShiftSpec{"left_gain", 0.5, kDefaultOnset}};
  } else {
    g.po = {0.0, 0.5};
    g.shift = {std::nullopt, ShiftSpec{"m", 2.0, kDefaultOnset}};
  }
  return g;
}

inline ExperimentConfig default_config(EnvId env) {
  ExperimentConfig c;
  c.env = env;
  c.theta = nominal_params(env);
  c.grid = default_grid(env);
  return c;
}

enum class PolicyMode { Adaptive, Task, Excitation };

inline std::string_view to_string(PolicyMode m) {
  switch (m) {
    case PolicyMode::Adaptive: return "adaptive";
    case PolicyMode::Task: return "task";
    case PolicyMode::Excitation: return "excitation";
  }
  return "?";
}

struct EpisodeOptions {
  PolicyMode mode = PolicyMode::Adaptive;
  bool adapt = true;          // maintain the online ensemble
  bool keep_steps = true;     // retain per-step records
  int max_steps = 0;          // 0: run to the horizon
};

struct StepRecord {
  Transition agent;     // zero-filled observations as delivered
  Observation estimate;  // agent's state estimate at t
  Action applied;
  KappaComponents k;
  double kappa_control = 0.0;
  Regime regime = Regime::LowDeficit;
  PolicyWeights weights;
  int chosen = -1;  // candidate index, -1 when the policy does not use candidates
  CandidateScore score;
  bool fallback = false;
  bool budget_violation = false;
  double min_candidate_risk = 0.0;
  double po = 0.0;
  int tau = 0;
};

struct EpisodeResult {
  std::uint64_t seed = 0;
  ConditionSpec condition;
  std::vector<StepRecord> steps;
  std::vector<KappaComponents> kappa;
  double episode_return = 0.0;
  double post_onset_kappa = 0.0;
  double post_onset_kappa_windowed = 0.0;
  double post_onset_sigma_theta = 0.0;
  double post_onset_sigma_s = 0.0;
  double post_onset_mse = 0.0;
  double kappa_peak = 0.0;
  int kappa_peak_t = 0;
  int budget_violations = 0;
  int fallbacks = 0;
  int n_steps = 0;
  std::optional<EnsembleModel> adaptive;
};

// Frozen ensemble plus everything needed to compute kappa and drive the policy.
struct Calibration {
  EnsembleModel model;
  RegimeThresholds thresholds;
  double clip = kDefaultClip;
  double c_tau = kDefaultCTau;
  std::map<std::string, double> label_means;  // post-onset kappa means of the calibration rollouts
  double c1_p95 = 0.0;
};

namespace detail {
inline std::mt19937_64 stream(std::uint64_t seed, std::uint32_t salt) {
  std::seed_seq s{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), salt};
  return std::mt19937_64(s);
}
inline constexpr std::uint32_t kPolicySalt = 0x901CU;
}  // namespace detail

inline Action excitation_action(const Action& cmd, double amplitude, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  Action a = cmd;
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = std::clamp(a[i] + u(rng), -1.0, 1.0);
  return a;
}

// Runs one episode. `frozen` must carry a noise floor.
inline EpisodeResult run_episode(const ExperimentConfig& cfg, const EnsembleModel& frozen,
                                 const RegimeThresholds& thr, const ConditionSpec& condition, std::uint64_t seed,
                                 const EpisodeOptions& opt = {}) {
  if (!frozen.noise_floor()) throw CalibrationError("ensemble has no noise floor");
  thr.validate();
  const NoiseFloor floor = *frozen.noise_floor();
  PerturbedEnv env(Env(cfg.env, cfg.horizon), condition);
  Observation obs = env.reset(seed, cfg.theta);
  auto rng = detail::stream(seed, detail::kPolicySalt);

  std::optional<EnsembleModel> adaptive;
  if (opt.adapt && opt.mode != PolicyMode::Excitation) adaptive = frozen.adaptive_copy();
  std::deque<Sample> probes;

  const int onset = [&] {
    int on = cfg.horizon;
    if (condition.mask) on = std::min(on, condition.mask->onset_t);
    if (condition.delay) on = std::min(on, condition.delay->onset_t);
    if (condition.shift) on = std::min(on, condition.shift->onset_t);
    return on == cfg.horizon ? cfg.grid.onset : on;
  }();

  EpisodeResult res;
  res.seed = seed;
  res.condition = condition;
  const int limit = opt.max_steps > 0 ? std::min(opt.max_steps, cfg.horizon) : cfg.horizon;
  // The agent acts on its state estimate: observed entries as read, masked
  // entries dead-reckoned under the nominal parameters.
  StateEstimator estimator(cfg.env, cfg.theta);
  Observation view = estimator.reset(obs);
  std::deque<Observation> hist;  // estimates at t-2, t-1
  std::deque<double> window;
  double window_sum = 0.0;
  double post_k = 0.0, post_st = 0.0, post_ss = 0.0, post_mse = 0.0;
  int post_n = 0;
  res.kappa_peak = -1.0;

  for (int t = 0; t < limit && !env.terminal(); ++t) {
    Vec acc = hist.size() == 2 ? acc_feature(view, hist[1], hist[0]) : Vec::Zero(view.size());
    double k_ctl = window.empty() ? 0.0 : window_sum / static_cast<double>(window.size());

    StepRecord rec;
    rec.kappa_control = k_ctl;
    rec.regime = classify_regime(k_ctl, thr);
    rec.weights = weights_for(k_ctl, thr, cfg.policy);
    Action cmd = task_command(cfg.env, view);
    Action act;
    switch (opt.mode) {
      case PolicyMode::Task:
        act = cmd;
        break;
      case PolicyMode::Excitation:
        act = excitation_action(cmd, cfg.run.excitation, rng);
        break;
      case PolicyMode::Adaptive: {
        auto cands = CandidateActionSet::build(cmd, cfg.policy.candidates, rng);
        DecisionContext ctx{cfg.env, view, acc, cmd, adaptive ? &*adaptive : &frozen};
        Decision d = select_action(ctx, rec.regime, cands, rec.weights);
        act = d.action;
        rec.chosen = static_cast<int>(d.index);
        rec.score = d.score;
        rec.fallback = d.fallback;
        rec.budget_violation = d.budget_violation;
        rec.min_candidate_risk = d.min_risk;
        break;
      }
    }

    PerturbedStep ps = env.step(act);
    Observation next_view = estimator.update(ps.agent.next_obs, env.masked_at(t + 1), act);
    Vec view_delta = next_view - view;
    rec.agent = ps.agent;
    rec.estimate = view;
    rec.applied = ps.truth.action;
    rec.po = env.po_at(t);
    rec.tau = env.tau_at(t);

    double st = 0.0, mse = 0.0;
    if (hist.size() == 2) {
      // sigma_theta is scored on the dimensions visible at both t and t + 1.
      auto m_now = env.masked_at(t), m_next = env.masked_at(t + 1);
      std::unique_ptr<bool[]> excl(new bool[m_now.size()]);
      for (std::size_t i = 0; i < m_now.size(); ++i) excl[i] = m_now[i] || m_next[i];
      mse = frozen.mse(view, acc, act, view_delta, std::span<const bool>(excl.get(), m_now.size()));
      st = sigma_theta(mse, floor, cfg.clip);
      if (adaptive && t >= onset) {
        Vec wt(static_cast<Eigen::Index>(m_now.size()));
        for (std::size_t i = 0; i < m_now.size(); ++i) wt[static_cast<Eigen::Index>(i)] = excl[i] ? 0.0 : 1.0;
        probes.push_back({view, acc, act, view_delta, wt});
        if (probes.size() > cfg.run.probe_window) probes.pop_front();
      }
    }
    double ss = sigma_s(rec.po, rec.tau, cfg.c_tau);
    rec.k = make_components(st, ss, t);

    if (adaptive && t >= onset && cfg.run.adapt_every > 0 && (t - onset + 1) % cfg.run.adapt_every == 0 &&
        !probes.empty()) {
      std::vector<Sample> batch(probes.begin(), probes.end());
      adaptive_update(*adaptive, batch);
    }

    window.push_back(rec.k.kappa);
    window_sum += rec.k.kappa;
    if (static_cast<int>(window.size()) > cfg.run.kappa_window) {
      window_sum -= window.front();
      window.pop_front();
    }

    res.episode_return += ps.agent.reward;
    res.budget_violations += rec.budget_violation ? 1 : 0;
    res.fallbacks += rec.fallback ? 1 : 0;
    if (t >= onset) {
      post_k += rec.k.kappa;
      post_st += st;
      post_ss += ss;
      post_mse += mse;
      ++post_n;
      if (rec.k.kappa > res.kappa_peak) {
        res.kappa_peak = rec.k.kappa;
        res.kappa_peak_t = t;
      }
    }
    res.kappa.push_back(rec.k);
    if (opt.keep_steps) res.steps.push_back(std::move(rec));

    hist.push_back(view);
    if (hist.size() > 2) hist.pop_front();
    view = next_view;
    ++res.n_steps;
  }

  if (post_n > 0) {
    res.post_onset_kappa = post_k / post_n;
    res.post_onset_sigma_theta = post_st / post_n;
    res.post_onset_sigma_s = post_ss / post_n;
    res.post_onset_mse = post_mse / post_n;
    auto stats = kappa_trace_stats(res.kappa, onset, {}, {thr.tau_high, 0.5, cfg.run.kappa_window});
    res.post_onset_kappa_windowed = stats.post_onset_mean_windowed;
  }
  res.adaptive = std::move(adaptive);
  return res;
}

// Evaluator-side ground truth: short random-action segments from random
// states under the given parameters. Each segment yields one sample whose acc
// comes from the two preceding steps.
struct EvaluatorRegion {
  double half_width = 2.5;  // states drawn from the centred square (DriftBot) or interval (MassSpring1D)
  int segments = 400;
};

inline std::vector<Sample> evaluator_samples(EnvId id, const DynamicsParams& theta, std::uint64_t seed,
                                             const EvaluatorRegion& region = {}) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(region.segments));
  auto rng = detail::stream(seed, 0xE7A1U);
  std::uniform_real_distribution<double> pos(-region.half_width, region.half_width);
  std::uniform_real_distribution<double> ang(-std::numbers::pi, std::numbers::pi);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto da = static_cast<Eigen::Index>(action_dim(id));
  for (int s = 0; s < region.segments; ++s) {
    Env env(id);
    Vec phys = id == EnvId::DriftBot ? Vec{{pos(rng), pos(rng), ang(rng)}} : Vec{{pos(rng), u(rng)}};
    Observation o0 = env.reset_at(seed * 7919ULL + static_cast<std::uint64_t>(s), theta, phys);
    std::vector<Observation> obs{o0};
    Transition last;
    for (int k = 0; k < 3; ++k) {
      Action a(da);
      for (Eigen::Index j = 0; j < da; ++j) a[j] = u(rng);
      last = env.step(a);
      obs.push_back(last.next_obs);
    }
    out.push_back({last.obs, acc_feature(obs[2], obs[1], obs[0]), last.action, last.delta, {}});
  }
  return out;
}

// C1 rollouts under the excitation policy until `t_pre` samples with full
// history are available.
inline ReplayBuffer collect_pretraining(const ExperimentConfig& cfg) {
  ReplayBuffer buf;
  const std::size_t want = cfg.ensemble.t_pre;
  const int len = std::min(cfg.horizon, static_cast<int>(want) + 2);
  std::size_t have = 0;
  for (std::uint64_t ep = 0; have < want; ++ep) {
    PerturbedEnv env(Env(cfg.env, cfg.horizon), ConditionSpec{});
    std::uint64_t seed = cfg.seed + ep;
    Observation obs = env.reset(seed, cfg.theta);
    auto rng = detail::stream(seed, detail::kPolicySalt);
    for (int t = 0; t < len && have < want; ++t) {
      Action a = excitation_action(task_command(cfg.env, obs), cfg.run.excitation, rng);
      auto ps = env.step(a);
      buf.add(ps.agent);
      if (t >= 2) ++have;
      obs = ps.agent.next_obs;
    }
  }
  return buf;
}

// Pre-trains the bootstrapped ensemble on baseline transitions, records the
// noise floor and freezes it.
inline EnsembleModel train_baseline(const ExperimentConfig& cfg) {
  ReplayBuffer buf = collect_pretraining(cfg);
  EnsembleModel model = bootstrap_train(buf, cfg.ensemble, cfg.seed);
  calibrate_noise_floor(model, buf);
  return model;
}

struct LabelKappa {
  std::vector<double> per_step_c1;                    // post-onset per-step kappa of C1 cells
  std::map<std::string, std::vector<double>> cell_means;  // label -> per-cell post-onset means
};

// Two-step threshold calibration from task-policy rollouts over the grid
// levels with the calibration seeds.
inline Calibration calibrate(const ExperimentConfig& cfg) {
  Calibration cal;
  cal.model = train_baseline(cfg);
  cal.clip = cfg.clip;
  cal.c_tau = cfg.c_tau;
  if (cfg.thresholds) {
    cfg.thresholds->validate();
    cal.thresholds = *cfg.thresholds;
    return cal;
  }
  if (cfg.calibration_seeds.empty()) throw CalibrationError("no calibration seeds");
  auto cells = condition_matrix(cfg.env, cfg.grid.po, cfg.grid.delay, cfg.grid.shift, cfg.calibration_seeds,
                                cfg.grid.onset);
  LabelKappa lk;
  const RegimeThresholds placeholder{0.2, 0.5};  // task policy ignores thresholds
  EpisodeOptions opt{PolicyMode::Task, false, false, 0};
  for (const auto& cell : cells) {
    auto r = run_episode(cfg, cal.model, placeholder, cell.condition, cell.seed, opt);
    lk.cell_means[cell.condition.label].push_back(r.post_onset_kappa);
    if (cell.condition.label == "C1")
      for (const auto& k : r.kappa)
        if (k.t >= cfg.grid.onset) lk.per_step_c1.push_back(k.kappa);
  }
  for (const char* l : {"C1", "C2", "C3", "C4"})
    if (lk.cell_means[l].empty())
      throw CalibrationError(std::string("calibration grid produced no ") + l + " cells");
  std::map<std::string, std::vector<double>> singles{{"C2", lk.cell_means["C2"]}, {"C3", lk.cell_means["C3"]}};
  cal.thresholds = calibrate_thresholds(lk.per_step_c1, singles, lk.cell_means["C4"]);
  for (auto& [l, v] : lk.cell_means) cal.label_means[l] = mean_of(v);
  cal.c1_p95 = percentile_nearest_rank(lk.per_step_c1, 95.0);
  return cal;
}

}  // namespace cuc
