#pragma once

// Seedable desk-scale environments.
//
//  DriftBot      differential-drive robot following a circular track; each wheel has a
//                gain in [0,1] so a loose wheel shows up as drift.
//                obs = [x, y, cos(heading), sin(heading)], action = [a_L, a_R]
//  MassSpring1D  x'' = (-k x + u) / m, semi-implicit Euler.
//                obs = [x, v], action = [u]
//
// Both share the CRTP base below, which owns the step counter, the per-episode
// RNG stream and the Transition bookkeeping.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cuc/error.hpp"

namespace cuc {

using Vec = Eigen::VectorXd;
using Observation = Eigen::VectorXd;
using Action = Eigen::VectorXd;

inline constexpr int kDefaultHorizon = 1000;

enum class EnvId { DriftBot, MassSpring1D };

inline std::string_view to_string(EnvId id) {
  return id == EnvId::DriftBot ? "DriftBot" : "MassSpring1D";
}

inline EnvId parse_env_id(std::string_view s) {
  if (s == "DriftBot") return EnvId::DriftBot;
  if (s == "MassSpring1D") return EnvId::MassSpring1D;
  throw InputError("unknown environment id: " + std::string(s));
}

struct ParamBound {
  std::string name;
  double lo;
  double hi;
  bool lo_exclusive = false;

  bool contains(double v) const {
    if (!std::isfinite(v)) return false;
    return (lo_exclusive ? v > lo : v >= lo) && v <= hi;
  }
};

// Named dynamics parameters (theta). Sorted by name so iteration order and
// serialization are stable.
class DynamicsParams {
 public:
  DynamicsParams() = default;
  DynamicsParams(std::initializer_list<std::pair<const std::string, double>> init) : values_(init) {}

  double at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ParameterDomainError("unknown dynamics parameter: " + name);
    return it->second;
  }
  void set(const std::string& name, double value) { values_[name] = value; }
  bool contains(const std::string& name) const { return values_.count(name) != 0; }

  const std::map<std::string, double>& values() const { return values_; }
  bool operator==(const DynamicsParams&) const = default;

 private:
  std::map<std::string, double> values_;
};

inline void validate_params(const DynamicsParams& theta, std::span<const ParamBound> bounds) {
  if (theta.values().size() != bounds.size())
    throw ParameterDomainError("dynamics parameter set does not match the environment declaration");
  for (const auto& b : bounds) {
    if (!theta.contains(b.name)) throw ParameterDomainError("missing dynamics parameter: " + b.name);
    double v = theta.at(b.name);
    if (!b.contains(v))
      throw ParameterDomainError("dynamics parameter " + b.name + "=" + std::to_string(v) + " out of bounds");
  }
}

struct Transition {
  Observation obs;
  Action action;
  Observation next_obs;
  Observation delta;  // next_obs - obs
  double reward = 0.0;
  double risk = 0.0;
  int t = 0;
};

struct EpisodeTrace {
  std::vector<Transition> steps;
  bool terminal = false;
  std::string condition;
};

// Physical state snapshot plus step counter.
struct EnvState {
  Vec physical;
  int t = 0;
};

template <class Derived>
class EnvBase {
 public:
  explicit EnvBase(int horizon) : horizon_(horizon) {
    detail::require<InputError>(horizon > 0, "horizon must be positive");
  }

  Observation reset(std::uint64_t seed, const DynamicsParams& theta) {
    start(seed, theta);
    self().init_state(rng_);
    return self().observe();
  }

  // Starts from an explicit physical state instead of the seeded initial one.
  Observation reset_at(std::uint64_t seed, const DynamicsParams& theta, const Vec& physical) {
    start(seed, theta);
    self().set_physical(physical);
    return self().observe();
  }

  Transition step(const Action& action) {
    if (!started_) throw LifecycleError("step before reset");
    if (terminal_) throw LifecycleError("step after terminal");
    if (action.size() != static_cast<Eigen::Index>(Derived::kActionDim))
      throw InputError("action has wrong dimension");
    for (Eigen::Index i = 0; i < action.size(); ++i)
      if (!(action[i] >= -1.0 && action[i] <= 1.0)) throw InputError("action entry outside [-1, 1]");

    Transition tr;
    tr.t = t_;
    tr.obs = self().observe();
    tr.action = action;
    self().advance(action, rng_);
    tr.next_obs = self().observe();
    tr.delta = tr.next_obs - tr.obs;
    tr.reward = self().reward(tr);
    tr.risk = self().risk_of(tr.next_obs);
    ++t_;
    terminal_ = t_ >= horizon_;
    return tr;
  }

  void set_parameter(const std::string& name, double value) {
    auto bounds = Derived::param_bounds();
    auto it = std::find_if(bounds.begin(), bounds.end(), [&](const ParamBound& b) { return b.name == name; });
    if (it == bounds.end()) throw ParameterDomainError("unknown dynamics parameter: " + name);
    if (!it->contains(value)) throw ParameterDomainError("shifted value for " + name + " out of bounds");
    theta_.set(name, value);
  }

  int t() const { return t_; }
  int horizon() const { return horizon_; }
  bool terminal() const { return terminal_; }
  EnvState state() const { return {self().physical(), t_}; }

 protected:
  const DynamicsParams& theta() const { return theta_; }
  const DynamicsParams& params_in_effect() const { return theta_; }

 private:
  void start(std::uint64_t seed, const DynamicsParams& theta) {
    validate_params(theta, Derived::param_bounds());
    theta_ = theta;
    rng_.seed(seed);
    t_ = 0;
    terminal_ = false;
    started_ = true;
  }

  Derived& self() { return static_cast<Derived&>(*this); }
  const Derived& self() const { return static_cast<const Derived&>(*this); }

  DynamicsParams theta_;
  std::mt19937_64 rng_;
  int horizon_;
  int t_ = 0;
  bool terminal_ = false;
  bool started_ = false;

  friend class Env;
};

class DriftBot : public EnvBase<DriftBot> {
 public:
  static constexpr std::size_t kObsDim = 4;
  static constexpr std::size_t kActionDim = 2;
  enum ObsIndex : std::size_t { kX = 0, kY = 1, kCos = 2, kSin = 3 };

  static constexpr double kDt = 0.05;
  static constexpr double kVMax = 1.0;
  static constexpr double kWheelBase = 0.4;
  static constexpr double kArenaHalfWidth = 5.0;
  static constexpr double kRiskMargin = 1.0;
  // Task: follow a counter-clockwise circle about the origin, chasing a goal
  // point kLookahead radians ahead of the robot's own polar angle.
  static constexpr double kTrackRadius = 2.0;
  static constexpr double kLookahead = 0.5;
  static constexpr double kControlCost = 0.002;

  explicit DriftBot(int horizon = kDefaultHorizon) : EnvBase(horizon) {}

  static std::vector<ParamBound> param_bounds() {
    return {{"left_gain", 0.0, 1.0}, {"right_gain", 0.0, 1.0}, {"wheel_noise", 0.0, 0.5}};
  }
  static DynamicsParams nominal() { return {{"left_gain", 1.0}, {"right_gain", 1.0}, {"wheel_noise", 0.02}}; }
  static std::vector<std::string> obs_names() { return {"x", "y", "cos_heading", "sin_heading"}; }
  // Masking priority: position is hidden first, then heading.
  static std::vector<std::size_t> mask_order() { return {kY, kX, kSin, kCos}; }

  // Boundary-proximity penalty in [0, 1] from the position entries of an observation.
  static double risk_of(const Observation& o) {
    double wall = kArenaHalfWidth - std::max(std::abs(o[kX]), std::abs(o[kY]));
    return std::clamp(1.0 - wall / kRiskMargin, 0.0, 1.0);
  }

  static std::pair<double, double> goal_for(double x, double y) {
    double psi = (x == 0.0 && y == 0.0) ? 0.0 : std::atan2(y, x);
    return {kTrackRadius * std::cos(psi + kLookahead), kTrackRadius * std::sin(psi + kLookahead)};
  }

  // Noise-free one-step prediction of the observation under parameters theta.
  static Observation predict(const Observation& o, const Action& a, const DynamicsParams& theta) {
    auto [v, w] = body_rates(a[0], a[1], theta.at("left_gain"), theta.at("right_gain"));
    double heading = std::atan2(o[kSin], o[kCos]);
    double x = std::clamp(o[kX] + v * std::cos(heading) * kDt, -kArenaHalfWidth, kArenaHalfWidth);
    double y = std::clamp(o[kY] + v * std::sin(heading) * kDt, -kArenaHalfWidth, kArenaHalfWidth);
    heading += w * kDt;
    return Observation{{x, y, std::cos(heading), std::sin(heading)}};
  }

  // Forward speed and yaw rate for given wheel commands and gains (noise free).
  static std::pair<double, double> body_rates(double a_left, double a_right, double g_left, double g_right) {
    double v = kVMax * (g_left * a_left + g_right * a_right) / 2.0;
    double w = (g_right * a_right - g_left * a_left) * kVMax / kWheelBase;
    return {v, w};
  }

 private:
  friend class EnvBase<DriftBot>;

  void init_state(std::mt19937_64&) { x_ = y_ = heading_ = 0.0; }

  void set_physical(const Vec& s) {
    if (s.size() != 3) throw InputError("DriftBot physical state is (x, y, heading)");
    x_ = s[0];
    y_ = s[1];
    heading_ = s[2];
  }
  Vec physical() const { return Vec{{x_, y_, heading_}}; }

  Observation observe() const { return Observation{{x_, y_, std::cos(heading_), std::sin(heading_)}}; }

  void advance(const Action& a, std::mt19937_64& rng) {
    const auto& th = theta();
    double noise = th.at("wheel_noise");
    double eps_l = 0.0, eps_r = 0.0;
    if (noise > 0.0) {
      std::normal_distribution<double> n01(0.0, 1.0);
      eps_l = noise * n01(rng);
      eps_r = noise * n01(rng);
    }
    double gl = th.at("left_gain"), gr = th.at("right_gain");
    double wl = gl * a[0] + eps_l;
    double wr = gr * a[1] + eps_r;
    double v = kVMax * (wl + wr) / 2.0;
    double w = (wr - wl) * kVMax / kWheelBase;
    x_ = std::clamp(x_ + v * std::cos(heading_) * kDt, -kArenaHalfWidth, kArenaHalfWidth);
    y_ = std::clamp(y_ + v * std::sin(heading_) * kDt, -kArenaHalfWidth, kArenaHalfWidth);
    heading_ += w * kDt;
  }

  double reward(const Transition& tr) const {
    // Progress toward the goal fixed at the start of the step.
    auto [gx, gy] = goal_for(tr.obs[kX], tr.obs[kY]);
    auto dist = [&](const Observation& o) { return std::hypot(gx - o[kX], gy - o[kY]); };
    return (dist(tr.obs) - dist(tr.next_obs)) - kControlCost * tr.action.squaredNorm();
  }

  double x_ = 0.0, y_ = 0.0, heading_ = 0.0;
};

class MassSpring1D : public EnvBase<MassSpring1D> {
 public:
  static constexpr std::size_t kObsDim = 2;
  static constexpr std::size_t kActionDim = 1;
  enum ObsIndex : std::size_t { kPos = 0, kVel = 1 };

  static constexpr double kDt = 0.05;
  static constexpr double kOvershootLimit = 1.5;

  explicit MassSpring1D(int horizon = kDefaultHorizon, double process_noise = 0.01)
      : EnvBase(horizon), process_noise_(process_noise) {
    detail::require<InputError>(process_noise >= 0.0, "process noise must be non-negative");
  }

  static std::vector<ParamBound> param_bounds() { return {{"k", 0.0, 10.0, true}, {"m", 0.0, 10.0, true}}; }
  static DynamicsParams nominal() { return {{"k", 1.0}, {"m", 1.0}}; }
  static std::vector<std::string> obs_names() { return {"x", "v"}; }
  static std::vector<std::size_t> mask_order() { return {kVel, kPos}; }

  static Observation predict(const Observation& o, const Action& a, const DynamicsParams& theta) {
    double v = o[kVel] + kDt * (-theta.at("k") * o[kPos] + a[0]) / theta.at("m");
    return Observation{{o[kPos] + kDt * v, v}};
  }

  static double risk_of(const Observation& o) {
    double over = std::abs(o[kPos]) - kOvershootLimit;
    return over > 0.0 ? over : 0.0;
  }

 private:
  friend class EnvBase<MassSpring1D>;

  void init_state(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    x_ = u(rng);
    v_ = 0.0;
  }
  void set_physical(const Vec& s) {
    if (s.size() != 2) throw InputError("MassSpring1D physical state is (x, v)");
    x_ = s[0];
    v_ = s[1];
  }
  Vec physical() const { return Vec{{x_, v_}}; }
  Observation observe() const { return Observation{{x_, v_}}; }

  void advance(const Action& a, std::mt19937_64& rng) {
    double k = theta().at("k"), m = theta().at("m");
    double force = a[0];
    if (process_noise_ > 0.0) force += process_noise_ * std::normal_distribution<double>(0.0, 1.0)(rng);
    v_ += kDt * (-k * x_ + force) / m;
    x_ += kDt * v_;
  }

  double reward(const Transition& tr) const { return -std::abs(tr.next_obs[kPos]); }

  double process_noise_;
  double x_ = 0.0, v_ = 0.0;
};

// Type-erased environment with value semantics. Copying an Env copies its
// RNG stream, so a copy replays the same future.
class Env {
 public:
  explicit Env(EnvId id, int horizon = kDefaultHorizon) {
    if (id == EnvId::DriftBot)
      impl_ = DriftBot(horizon);
    else
      impl_ = MassSpring1D(horizon);
  }
  Env(DriftBot e) : impl_(std::move(e)) {}
  Env(MassSpring1D e) : impl_(std::move(e)) {}

  EnvId id() const { return std::holds_alternative<DriftBot>(impl_) ? EnvId::DriftBot : EnvId::MassSpring1D; }

  std::size_t obs_dim() const {
    return std::visit([](const auto& e) { return std::decay_t<decltype(e)>::kObsDim; }, impl_);
  }
  std::size_t action_dim() const {
    return std::visit([](const auto& e) { return std::decay_t<decltype(e)>::kActionDim; }, impl_);
  }

  Observation reset(std::uint64_t seed, const DynamicsParams& theta) {
    return std::visit([&](auto& e) { return e.reset(seed, theta); }, impl_);
  }
  Observation reset_at(std::uint64_t seed, const DynamicsParams& theta, const Vec& physical) {
    return std::visit([&](auto& e) { return e.reset_at(seed, theta, physical); }, impl_);
  }
  Transition step(const Action& a) {
    return std::visit([&](auto& e) { return e.step(a); }, impl_);
  }
  void set_parameter(const std::string& name, double value) {
    std::visit([&](auto& e) { e.set_parameter(name, value); }, impl_);
  }

  int t() const { return std::visit([](const auto& e) { return e.t(); }, impl_); }
  bool terminal() const { return std::visit([](const auto& e) { return e.terminal(); }, impl_); }
  EnvState state() const { return std::visit([](const auto& e) { return e.state(); }, impl_); }

  double risk_of(const Observation& o) const {
    return std::visit([&](const auto& e) { return std::decay_t<decltype(e)>::risk_of(o); }, impl_);
  }

 private:
  friend class EvaluatorView;
  const DynamicsParams& true_dynamics() const {
    return std::visit([](const auto& e) -> const DynamicsParams& { return e.params_in_effect(); }, impl_);
  }

  std::variant<DriftBot, MassSpring1D> impl_;
};

// Evaluator-only channel to the ground-truth dynamics. Agent-side code is
// handed observations and transitions, never an EvaluatorView.
class EvaluatorView {
 public:
  explicit EvaluatorView(const Env& env) : env_(&env) {}
  DynamicsParams true_dynamics() const { return env_->true_dynamics(); }

 private:
  const Env* env_;
};

inline DynamicsParams nominal_params(EnvId id) {
  return id == EnvId::DriftBot ? DriftBot::nominal() : MassSpring1D::nominal();
}
inline std::vector<ParamBound> param_bounds(EnvId id) {
  return id == EnvId::DriftBot ? DriftBot::param_bounds() : MassSpring1D::param_bounds();
}
inline std::size_t obs_dim(EnvId id) { return id == EnvId::DriftBot ? DriftBot::kObsDim : MassSpring1D::kObsDim; }
inline std::size_t action_dim(EnvId id) {
  return id == EnvId::DriftBot ? DriftBot::kActionDim : MassSpring1D::kActionDim;
}
inline Observation nominal_predict(EnvId id, const Observation& o, const Action& a, const DynamicsParams& theta) {
  return id == EnvId::DriftBot ? DriftBot::predict(o, a, theta) : MassSpring1D::predict(o, a, theta);
}
inline std::vector<std::string> obs_names(EnvId id) {
  return id == EnvId::DriftBot ? DriftBot::obs_names() : MassSpring1D::obs_names();
}
inline std::vector<std::size_t> mask_order(EnvId id) {
  return id == EnvId::DriftBot ? DriftBot::mask_order() : MassSpring1D::mask_order();
}
inline double risk_of(EnvId id, const Observation& o) {
  return id == EnvId::DriftBot ? DriftBot::risk_of(o) : MassSpring1D::risk_of(o);
}

// Replays a fixed action sequence from reset; stops early at the horizon.
inline EpisodeTrace record_episode(EnvId id, std::uint64_t seed, const DynamicsParams& theta,
                                   std::span<const Action> actions, int horizon = kDefaultHorizon) {
  Env env(id, horizon);
  env.reset(seed, theta);
  EpisodeTrace tr;
  tr.condition = "C1";
  for (const auto& a : actions) {
    if (env.terminal()) break;
    tr.steps.push_back(env.step(a));
  }
  tr.terminal = env.terminal();
  return tr;
}

}  // namespace cuc
