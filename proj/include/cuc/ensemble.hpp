#pragma once

// Bootstrapped ensemble of two-layer ReLU dynamics predictors.
//
// Each member maps [obs; acc; action] to the observation delta. Inputs and
// targets are standardised with statistics of the pre-training buffer; the
// ensemble error is always reported in raw observation units.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "cuc/env.hpp"
#include "cuc/error.hpp"

namespace cuc {

inline constexpr double kNoiseFloorEpsilon = 1e-8;
// Smallest pre-training buffer bootstrap_train accepts regardless of T_pre.
inline constexpr std::size_t kMinPretrainSamples = 64;
// Global gradient-norm ceiling per SGD step (standardised units).
inline constexpr double kGradClip = 10.0;

// Second-order finite difference o_t - 2 o_{t-1} + o_{t-2}.
inline Vec acc_feature(const Vec& o_t, const Vec& o_tm1, const Vec& o_tm2) {
  if (o_t.size() != o_tm1.size() || o_t.size() != o_tm2.size())
    throw InputError("acc_feature: observation dimensions differ");
  return o_t - 2.0 * o_tm1 + o_tm2;
}

// One supervised example: inputs (obs, acc, action), target delta.
struct Sample {
  Vec obs;
  Vec acc;
  Action action;
  Vec delta;
  Vec target_weight;  // per-dimension loss weight; empty means all ones
};

// Transitions grouped into contiguous segments. A transition whose t does not
// follow its predecessor starts a new segment; acc is defined from the third
// transition of a segment on.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 100000) : capacity_(capacity) {}

  void add(const Transition& tr) {
    bool fresh = items_.empty() || tr.t != items_.back().tr.t + 1;
    if (fresh) ++segment_;
    items_.push_back({tr, segment_});
    if (items_.size() > capacity_) items_.pop_front();
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  // Samples with full two-step history, in buffer order.
  std::vector<Sample> samples() const {
    std::vector<Sample> out;
    for (std::size_t i = 2; i < items_.size(); ++i) {
      const auto& a = items_[i - 2];
      const auto& b = items_[i - 1];
      const auto& c = items_[i];
      if (a.segment != c.segment || b.segment != c.segment) continue;
      out.push_back({c.tr.obs, acc_feature(c.tr.obs, b.tr.obs, a.tr.obs), c.tr.action, c.tr.delta, {}});
    }
    return out;
  }

 private:
  struct Item {
    Transition tr;
    std::uint64_t segment;
  };
  std::size_t capacity_;
  std::deque<Item> items_;
  std::uint64_t segment_ = 0;
};

struct NoiseFloor {
  double mu0 = 0.0;
  double sigma0 = 1.0;
  bool operator==(const NoiseFloor&) const = default;
};

struct EnsembleHyper {
  int members = 5;
  int hidden = 64;
  int epochs = 50;
  double lr = 0.01;
  int batch = 16;
  std::size_t t_pre = 300;
  double adapt_lr = 0.01;
  int adapt_epochs = 1;
};

// Standardisation shared by all members.
struct Normalizer {
  Vec in_mean, in_scale, out_mean, out_scale;

  static Normalizer identity(Eigen::Index in_dim, Eigen::Index out_dim) {
    return {Vec::Zero(in_dim), Vec::Ones(in_dim), Vec::Zero(out_dim), Vec::Ones(out_dim)};
  }

  static Normalizer fit(const std::vector<Vec>& inputs, const std::vector<Vec>& targets) {
    auto stats = [](const std::vector<Vec>& xs, Vec& mean, Vec& scale) {
      const auto n = static_cast<double>(xs.size());
      mean = Vec::Zero(xs.front().size());
      for (const auto& x : xs) mean += x;
      mean /= n;
      Vec var = Vec::Zero(mean.size());
      for (const auto& x : xs) var += (x - mean).cwiseAbs2();
      var /= n;
      scale = var.cwiseSqrt();
      for (Eigen::Index i = 0; i < scale.size(); ++i)
        if (!(scale[i] > 1e-9)) scale[i] = 1.0;
    };
    Normalizer nz;
    stats(inputs, nz.in_mean, nz.in_scale);
    stats(targets, nz.out_mean, nz.out_scale);
    return nz;
  }
};

// Two-layer feedforward network on standardised inputs/targets.
struct Predictor {
  Eigen::MatrixXd w1;  // hidden x in
  Vec b1;
  Eigen::MatrixXd w2;  // out x hidden
  Vec b2;

  Predictor() = default;
  Predictor(Eigen::Index in, Eigen::Index hidden, Eigen::Index out)
      : w1(Eigen::MatrixXd::Zero(hidden, in)),
        b1(Vec::Zero(hidden)),
        w2(Eigen::MatrixXd::Zero(out, hidden)),
        b2(Vec::Zero(out)) {}

  Eigen::Index in_dim() const { return w1.cols(); }
  Eigen::Index hidden_dim() const { return w1.rows(); }
  Eigen::Index out_dim() const { return w2.rows(); }

  static Predictor random(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, std::mt19937_64& rng) {
    Predictor p(in, hidden, out);
    auto fill = [&rng](Eigen::MatrixXd& w) {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      double bound = std::sqrt(6.0 / static_cast<double>(w.cols()));
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = bound * u(rng);
    };
    fill(p.w1);
    fill(p.w2);
    p.w2 *= 0.5;
    return p;
  }

  Vec forward(const Vec& x) const { return w2 * (w1 * x + b1).cwiseMax(0.0) + b2; }

  // One SGD step on the mean (over columns) squared error of a batch,
  // optionally weighted per output entry.
  void sgd_step(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lr,
                const Eigen::MatrixXd* weight = nullptr) {
    const double n = static_cast<double>(x.cols());
    Eigen::MatrixXd pre = (w1 * x).colwise() + b1;
    Eigen::MatrixXd h = pre.cwiseMax(0.0);
    Eigen::MatrixXd err = ((w2 * h).colwise() + b2) - y;
    if (weight) err = err.cwiseProduct(*weight);
    Eigen::MatrixXd g_out = (2.0 / n) * err;
    Eigen::MatrixXd g_h = (w2.transpose() * g_out).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    Eigen::MatrixXd gw2 = g_out * h.transpose();
    Vec gb2 = g_out.rowwise().sum();
    Eigen::MatrixXd gw1 = g_h * x.transpose();
    Vec gb1 = g_h.rowwise().sum();
    double norm = std::sqrt(gw2.squaredNorm() + gb2.squaredNorm() + gw1.squaredNorm() + gb1.squaredNorm());
    double step = norm > kGradClip ? lr * kGradClip / norm : lr;
    w2 -= step * gw2;
    b2 -= step * gb2;
    w1 -= step * gw1;
    b1 -= step * gb1;
  }

  bool finite() const {
    return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite();
  }
};

class EnsembleModel {
 public:
  EnsembleModel() = default;
  EnsembleModel(std::vector<Predictor> members, Normalizer norm, EnsembleHyper hyper = {}, std::uint64_t seed = 0)
      : members_(std::move(members)), norm_(std::move(norm)), hyper_(hyper), seed_(seed) {
    if (members_.size() < 2) throw InputError("an ensemble needs at least two members");
    const auto& m0 = members_.front();
    for (const auto& m : members_)
      if (m.in_dim() != m0.in_dim() || m.out_dim() != m0.out_dim() || m.hidden_dim() != m0.hidden_dim())
        throw InputError("ensemble members disagree on dimensions");
    if (norm_.in_mean.size() != m0.in_dim() || norm_.out_mean.size() != m0.out_dim())
      throw InputError("normalizer does not match member dimensions");
    hyper_.members = static_cast<int>(members_.size());
    hyper_.hidden = static_cast<int>(m0.hidden_dim());
  }

  std::size_t size() const { return members_.size(); }
  Eigen::Index obs_dim() const { return members_.front().out_dim(); }
  Eigen::Index action_dim() const { return members_.front().in_dim() - 2 * obs_dim(); }
  const std::vector<Predictor>& members() const { return members_; }
  const Normalizer& normalizer() const { return norm_; }
  const EnsembleHyper& hyper() const { return hyper_; }
  std::uint64_t seed() const { return seed_; }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  const std::optional<NoiseFloor>& noise_floor() const { return floor_; }
  void set_noise_floor(NoiseFloor f) { floor_ = f; }

  // Mutable copy for online adaptation; keeps the noise floor for reference.
  EnsembleModel adaptive_copy() const {
    EnsembleModel c = *this;
    c.frozen_ = false;
    return c;
  }

  Vec input(const Vec& obs, const Vec& acc, const Action& action) const {
    if (obs.size() != obs_dim() || acc.size() != obs_dim() || action.size() != action_dim())
      throw InputError("ensemble input has wrong dimension");
    Vec x(obs.size() + acc.size() + action.size());
    x << obs, acc, action;
    return (x - norm_.in_mean).cwiseQuotient(norm_.in_scale);
  }

  // Raw-unit predicted delta of every member.
  std::vector<Vec> predict_all(const Vec& obs, const Vec& acc, const Action& action) const {
    Vec x = input(obs, acc, action);
    std::vector<Vec> out;
    out.reserve(members_.size());
    for (const auto& m : members_) out.push_back(norm_.out_mean + norm_.out_scale.cwiseProduct(m.forward(x)));
    return out;
  }

  Vec predict_mean(const Vec& obs, const Vec& acc, const Action& action) const {
    auto preds = predict_all(obs, acc, action);
    Vec mean = Vec::Zero(obs_dim());
    for (const auto& p : preds) mean += p;
    return mean / static_cast<double>(preds.size());
  }

  // (1/M) sum_m || f_m([o; acc], a) - delta ||^2, optionally skipping the
  // dimensions flagged in `excluded`.
  double mse(const Vec& obs, const Vec& acc, const Action& action, const Vec& delta,
             std::span<const bool> excluded = {}) const {
    if (delta.size() != obs_dim()) throw InputError("delta has wrong dimension");
    if (!excluded.empty() && excluded.size() != static_cast<std::size_t>(obs_dim()))
      throw InputError("exclusion mask has wrong dimension");
    double total = 0.0;
    for (const auto& p : predict_all(obs, acc, action)) {
      Vec e = p - delta;
      for (Eigen::Index i = 0; i < e.size(); ++i)
        if (excluded.empty() || !excluded[static_cast<std::size_t>(i)]) total += e[i] * e[i];
    }
    return total / static_cast<double>(members_.size());
  }
  double mse(const Sample& s, std::span<const bool> excluded = {}) const {
    return mse(s.obs, s.acc, s.action, s.delta, excluded);
  }

  // FNV-1a over all weights; changes iff any weight bit changes.
  std::uint64_t weights_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const double* p, Eigen::Index n) {
      for (Eigen::Index i = 0; i < n; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, p + i, sizeof bits);
        for (int b = 0; b < 8; ++b) {
          h ^= (bits >> (8 * b)) & 0xffU;
          h *= 1099511628211ULL;
        }
      }
    };
    for (const auto& m : members_) {
      mix(m.w1.data(), m.w1.size());
      mix(m.b1.data(), m.b1.size());
      mix(m.w2.data(), m.w2.size());
      mix(m.b2.data(), m.b2.size());
    }
    return h;
  }

  // Gradient access for training routines.
  std::vector<Predictor>& mutable_members() {
    if (frozen_) throw LifecycleError("ensemble is frozen");
    return members_;
  }

 private:
  std::vector<Predictor> members_;
  Normalizer norm_;
  EnsembleHyper hyper_;
  std::uint64_t seed_ = 0;
  bool frozen_ = false;
  std::optional<NoiseFloor> floor_;
};

namespace detail {

inline Vec raw_input(const Sample& s) {
  Vec x(s.obs.size() + s.acc.size() + s.action.size());
  x << s.obs, s.acc, s.action;
  return x;
}

inline void train_member(Predictor& p, const EnsembleModel& model, const std::vector<Sample>& data,
                         const std::vector<std::size_t>& idx, int epochs, int batch, double lr, std::mt19937_64* rng) {
  const auto& nz = model.normalizer();
  const Eigen::Index in = p.in_dim(), out = p.out_dim();
  std::vector<std::size_t> order = idx;
  for (int e = 0; e < epochs; ++e) {
    if (rng) std::shuffle(order.begin(), order.end(), *rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
      auto n = static_cast<Eigen::Index>(end - start);
      Eigen::MatrixXd x(in, n), y(out, n), w = Eigen::MatrixXd::Ones(out, n);
      bool weighted = false;
      for (Eigen::Index j = 0; j < n; ++j) {
        const Sample& s = data[order[start + static_cast<std::size_t>(j)]];
        x.col(j) = (raw_input(s) - nz.in_mean).cwiseQuotient(nz.in_scale);
        y.col(j) = (s.delta - nz.out_mean).cwiseQuotient(nz.out_scale);
        if (s.target_weight.size() == out) {
          w.col(j) = s.target_weight;
          weighted = true;
        }
      }
      p.sgd_step(x, y, lr, weighted ? &w : nullptr);
    }
  }
}

}  // namespace detail

// Trains M members, each on its own with-replacement resample (same size as
// the sample set) of the buffer. Deterministic for a given seed.
inline EnsembleModel bootstrap_train(const ReplayBuffer& buffer, const EnsembleHyper& hyper, std::uint64_t seed) {
  if (hyper.members < 2) throw InputError("ensemble size must be >= 2");
  if (hyper.hidden < 1 || hyper.epochs < 0 || hyper.batch < 1 || !(hyper.lr > 0.0))
    throw InputError("invalid ensemble hyperparameters");
  std::vector<Sample> data = buffer.samples();
  std::size_t need = std::max(hyper.t_pre, kMinPretrainSamples);
  if (data.size() < need)
    throw CalibrationError("pre-training buffer has " + std::to_string(data.size()) + " usable transitions, need " +
                           std::to_string(need));

  std::vector<Vec> xs, ys;
  for (const auto& s : data) {
    xs.push_back(detail::raw_input(s));
    ys.push_back(s.delta);
  }
  Normalizer nz = Normalizer::fit(xs, ys);
  const auto in = xs.front().size(), out = ys.front().size();

  std::vector<Predictor> members;
  std::vector<std::vector<std::size_t>> resamples;
  for (int m = 0; m < hyper.members; ++m) {
    std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(m), 0xb0075U};
    std::mt19937_64 rng(sseq);
    members.push_back(Predictor::random(in, hyper.hidden, out, rng));
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::vector<std::size_t> idx(data.size());
    for (auto& i : idx) i = pick(rng);
    resamples.push_back(std::move(idx));
  }
  EnsembleModel model(std::move(members), nz, hyper, seed);
  auto& ms = model.mutable_members();
  for (int m = 0; m < hyper.members; ++m) {
    std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(m), 0x5eedU};
    std::mt19937_64 rng(sseq);
    detail::train_member(ms[static_cast<std::size_t>(m)], model, data, resamples[static_cast<std::size_t>(m)],
                         hyper.epochs, hyper.batch, hyper.lr, &rng);
    if (!ms[static_cast<std::size_t>(m)].finite())
      throw CalibrationError("ensemble training diverged (non-finite weights); lower the learning rate");
  }
  return model;
}

inline double ensemble_mse(const EnsembleModel& model, const Vec& obs, const Vec& acc, const Action& action,
                           const Vec& delta) {
  return model.mse(obs, acc, action, delta);
}

// mu0 / sigma0 (population std, floored) of the per-transition ensemble MSE
// over the buffer. Freezes the model.
inline NoiseFloor calibrate_noise_floor(EnsembleModel& model, const std::vector<Sample>& samples) {
  if (samples.empty()) throw CalibrationError("cannot calibrate a noise floor on an empty buffer");
  std::vector<double> errs;
  errs.reserve(samples.size());
  for (const auto& s : samples) errs.push_back(model.mse(s));
  const auto n = static_cast<double>(errs.size());
  double mean = std::accumulate(errs.begin(), errs.end(), 0.0) / n;
  double var = 0.0;
  for (double e : errs) var += (e - mean) * (e - mean);
  var /= n;
  NoiseFloor f{mean, std::max(std::sqrt(var), kNoiseFloorEpsilon)};
  model.set_noise_floor(f);
  model.freeze();
  return f;
}

inline NoiseFloor calibrate_noise_floor(EnsembleModel& model, const ReplayBuffer& buffer) {
  return calibrate_noise_floor(model, buffer.samples());
}

// Online gradient steps on probe samples, in order. Only legal on the
// adaptive (unfrozen) ensemble.
inline void adaptive_update(EnsembleModel& model, std::span<const Sample> probes) {
  if (model.frozen()) throw LifecycleError("adaptive_update called on a frozen ensemble");
  if (probes.empty()) return;
  std::vector<Sample> data(probes.begin(), probes.end());
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto& h = model.hyper();
  auto& ms = model.mutable_members();
  for (auto& m : ms) {
    detail::train_member(m, model, data, idx, h.adapt_epochs, h.batch, h.adapt_lr, nullptr);
    if (!m.finite()) throw CalibrationError("adaptive update diverged (non-finite weights)");
  }
}

}  // namespace cuc
