#pragma once

// Perturbation wrappers and the experimental condition matrix.
//
// Composition order inside PerturbedEnv is fixed:
//   shift  (dynamics parameter schedule on the wrapped Env)
//   delay  (commanded action -> applied action queue)
//   mask   (true observation -> agent observation)
// Masked entries are zero-filled so vector dimensions never change.

#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cuc/env.hpp"
#include "cuc/error.hpp"

namespace cuc {

inline constexpr int kDefaultOnset = 50;

struct MaskSpec {
  std::vector<std::size_t> masked_dims;
  int onset_t = kDefaultOnset;

  void validate(std::size_t d_total) const {
    if (onset_t < 0) throw SpecError("mask onset must be >= 0");
    std::set<std::size_t> seen;
    for (auto d : masked_dims) {
      if (d >= d_total) throw SpecError("masked dimension " + std::to_string(d) + " out of range");
      if (!seen.insert(d).second) throw SpecError("masked dimension listed twice");
    }
  }
  double po_fraction(std::size_t d_total) const {
    return d_total == 0 ? 0.0 : static_cast<double>(masked_dims.size()) / static_cast<double>(d_total);
  }
  bool active(int t) const { return t >= onset_t && !masked_dims.empty(); }
};

struct DelaySpec {
  int tau = 0;
  int onset_t = kDefaultOnset;

  void validate() const {
    if (tau < 0) throw SpecError("delay tau must be >= 0");
    if (onset_t < 0) throw SpecError("delay onset must be >= 0");
  }
};

struct ShiftSpec {
  std::string param;
  double value = 0.0;
  int onset_t = kDefaultOnset;

  void validate(EnvId env) const {
    if (onset_t < 0) throw SpecError("shift onset must be >= 0");
    for (const auto& b : param_bounds(env)) {
      if (b.name == param) {
        if (!b.contains(value)) throw SpecError("shifted value for " + param + " out of bounds");
        return;
      }
    }
    throw SpecError("unknown shift parameter: " + param);
  }
  bool operator==(const ShiftSpec&) const = default;
};

enum class ConditionLabel { C1, C2, C3, C4 };

inline std::string to_string(ConditionLabel l) {
  static const char* names[] = {"C1", "C2", "C3", "C4"};
  return names[static_cast<int>(l)];
}

// C1 none, C2 mask only, C3 delay and/or shift only, C4 mask plus delay/shift.
inline ConditionLabel classify_condition(bool masked, bool delayed, bool shifted) {
  bool dyn = delayed || shifted;
  if (masked) return dyn ? ConditionLabel::C4 : ConditionLabel::C2;
  return dyn ? ConditionLabel::C3 : ConditionLabel::C1;
}

struct ConditionSpec {
  std::string label = "C1";  // C1..C4, or any other free-form label
  std::optional<MaskSpec> mask;
  std::optional<DelaySpec> delay;
  std::optional<ShiftSpec> shift;

  bool has_mask() const { return mask && !mask->masked_dims.empty(); }
  bool has_delay() const { return delay && delay->tau > 0; }
  bool has_shift() const { return shift.has_value(); }

  ConditionLabel derived_label() const { return classify_condition(has_mask(), has_delay(), has_shift()); }

  void validate(EnvId env) const {
    if (mask) mask->validate(obs_dim(env));
    if (delay) delay->validate();
    if (shift) shift->validate(env);
    if (label == "C1" || label == "C2" || label == "C3" || label == "C4") {
      if (label != to_string(derived_label()))
        throw SpecError("condition labelled " + label + " but its perturbations make it " +
                        to_string(derived_label()));
    }
  }
};

inline Observation apply_mask(const Observation& obs, const MaskSpec& spec, int t) {
  spec.validate(static_cast<std::size_t>(obs.size()));
  if (t < spec.onset_t) return obs;
  Observation out = obs;
  for (auto d : spec.masked_dims) out[static_cast<Eigen::Index>(d)] = 0.0;
  return out;
}

// Streaming action delay. Before onset actions pass straight through; at
// onset the queue is pre-filled with tau zero actions.
class ActionDelay {
 public:
  explicit ActionDelay(DelaySpec spec) : spec_(spec) { spec_.validate(); }

  Action push(const Action& commanded, int t) {
    if (t < spec_.onset_t || spec_.tau == 0) return commanded;
    if (!primed_) {
      for (int i = 0; i < spec_.tau; ++i) queue_.push_back(Action::Zero(commanded.size()));
      primed_ = true;
    }
    queue_.push_back(commanded);
    Action out = std::move(queue_.front());
    queue_.pop_front();
    return out;
  }

  void reset() {
    queue_.clear();
    primed_ = false;
  }

 private:
  DelaySpec spec_;
  std::deque<Action> queue_;
  bool primed_ = false;
};

// Applies the delay to a whole command stream indexed from t = 0.
inline std::vector<Action> delay_actions(std::span<const Action> commanded, const DelaySpec& spec) {
  ActionDelay delay(spec);
  std::vector<Action> out;
  out.reserve(commanded.size());
  for (std::size_t t = 0; t < commanded.size(); ++t) out.push_back(delay.push(commanded[t], static_cast<int>(t)));
  return out;
}

// Sets the shifted parameter once t has reached the onset.
inline void apply_shift(Env& env, const ShiftSpec& spec, int t) {
  spec.validate(env.id());
  if (t >= spec.onset_t) env.set_parameter(spec.param, spec.value);
}

// One agent-facing step of a perturbed episode.
struct PerturbedStep {
  Transition agent;  // masked observations, commanded action, true reward/risk
  Transition truth;  // unmasked observations, applied action
};

class PerturbedEnv {
 public:
  PerturbedEnv(Env env, ConditionSpec condition)
      : env_(std::move(env)), condition_(std::move(condition)), delay_(condition_.delay.value_or(DelaySpec{0, 0})) {
    condition_.validate(env_.id());
  }

  Observation reset(std::uint64_t seed, const DynamicsParams& theta) {
    delay_.reset();
    Observation o = env_.reset(seed, theta);
    if (condition_.shift) apply_shift(env_, *condition_.shift, 0);
    return mask(o, 0);
  }

  Observation reset_at(std::uint64_t seed, const DynamicsParams& theta, const Vec& physical) {
    delay_.reset();
    Observation o = env_.reset_at(seed, theta, physical);
    if (condition_.shift) apply_shift(env_, *condition_.shift, 0);
    return mask(o, 0);
  }

  PerturbedStep step(const Action& commanded) {
    int t = env_.t();
    Action applied = delay_.push(commanded, t);
    PerturbedStep out;
    out.truth = env_.step(applied);
    if (condition_.shift) apply_shift(env_, *condition_.shift, env_.t());
    out.agent = out.truth;
    out.agent.action = commanded;
    out.agent.obs = mask(out.truth.obs, t);
    out.agent.next_obs = mask(out.truth.next_obs, t + 1);
    out.agent.delta = out.agent.next_obs - out.agent.obs;
    return out;
  }

  // Observability metadata in effect at step t (zero before the onsets).
  double po_at(int t) const {
    return condition_.mask && condition_.mask->active(t) ? condition_.mask->po_fraction(env_.obs_dim()) : 0.0;
  }
  int tau_at(int t) const { return condition_.delay && t >= condition_.delay->onset_t ? condition_.delay->tau : 0; }
  std::vector<bool> masked_at(int t) const {
    std::vector<bool> m(env_.obs_dim(), false);
    if (condition_.mask && condition_.mask->active(t))
      for (auto d : condition_.mask->masked_dims) m[d] = true;
    return m;
  }

  const Env& env() const { return env_; }
  const ConditionSpec& condition() const { return condition_; }
  int t() const { return env_.t(); }
  bool terminal() const { return env_.terminal(); }

 private:
  Observation mask(const Observation& o, int t) const {
    return condition_.mask ? apply_mask(o, *condition_.mask, t) : o;
  }

  Env env_;
  ConditionSpec condition_;
  ActionDelay delay_;
};

// Masks the first round(po * d_total) entries of the environment's masking
// priority list. po must be exactly representable as k / d_total.
inline MaskSpec mask_for_po(EnvId env, double po, int onset_t = kDefaultOnset) {
  if (!(po >= 0.0 && po <= 1.0)) throw SpecError("PO level outside [0, 1]");
  auto order = mask_order(env);
  double d = static_cast<double>(order.size());
  auto k = static_cast<std::size_t>(std::llround(po * d));
  if (std::abs(static_cast<double>(k) / d - po) > 1e-12)
    throw SpecError("PO level " + std::to_string(po) + " is not a multiple of 1/" + std::to_string(order.size()) +
                    " for " + std::string(to_string(env)));
  MaskSpec m;
  m.masked_dims.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  m.onset_t = onset_t;
  return m;
}

struct ConditionCell {
  ConditionSpec condition;
  std::uint64_t seed = 0;
  double po = 0.0;
  int tau = 0;
  int shift_index = 0;  // index into the shift level list; 0 is conventionally "none"
};

// Cartesian product po x delay x shift x seed (seed varies fastest).
// A nullopt shift level means no shift.
inline std::vector<ConditionCell> condition_matrix(EnvId env, std::span<const double> po_levels,
                                                   std::span<const int> delay_levels,
                                                   std::span<const std::optional<ShiftSpec>> shift_levels,
                                                   std::span<const std::uint64_t> seeds, int onset_t = kDefaultOnset) {
  if (po_levels.empty() || delay_levels.empty() || shift_levels.empty() || seeds.empty())
    throw SpecError("condition matrix axes must be nonempty");
  std::vector<ConditionCell> cells;
  cells.reserve(po_levels.size() * delay_levels.size() * shift_levels.size() * seeds.size());
  for (double po : po_levels) {
    MaskSpec m = mask_for_po(env, po, onset_t);
    for (int tau : delay_levels) {
      if (tau < 0) throw SpecError("delay level must be >= 0");
      for (std::size_t si = 0; si < shift_levels.size(); ++si) {
        for (auto seed : seeds) {
          ConditionCell c;
          c.seed = seed;
          c.po = po;
          c.tau = tau;
          c.shift_index = static_cast<int>(si);
          if (!m.masked_dims.empty()) c.condition.mask = m;
          if (tau > 0) c.condition.delay = DelaySpec{tau, onset_t};
          if (shift_levels[si]) {
            ShiftSpec s = *shift_levels[si];
            s.onset_t = onset_t;
            s.validate(env);
            c.condition.shift = s;
          }
          c.condition.label = to_string(c.condition.derived_label());
          cells.push_back(std::move(c));
        }
      }
    }
  }
  return cells;
}

}  // namespace cuc
