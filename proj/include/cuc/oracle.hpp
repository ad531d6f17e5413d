#pragma once

// Exact mutual information on small discrete joint beliefs b(s, theta).
// All entropies in nats; 0 log 0 = 0.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>

#include "cuc/error.hpp"

namespace cuc {

inline constexpr double kBeliefTolerance = 1e-12;
inline constexpr double kBoundTolerance = 1e-9;

class DiscreteJointBelief {
 public:
  // Rows index states s, columns index parameters theta.
  explicit DiscreteJointBelief(Eigen::MatrixXd p) : p_(std::move(p)) {
    if (p_.rows() < 1 || p_.cols() < 1) throw InputError("belief must be nonempty");
    if (!p_.allFinite() || (p_.array() < 0.0).any()) throw InputError("belief entries must be finite and >= 0");
    if (std::abs(p_.sum() - 1.0) > kBeliefTolerance) throw InputError("belief does not sum to 1");
  }

  const Eigen::MatrixXd& matrix() const { return p_; }
  Eigen::Index n_states() const { return p_.rows(); }
  Eigen::Index n_params() const { return p_.cols(); }
  DiscreteJointBelief transposed() const { return DiscreteJointBelief(p_.transpose()); }

 private:
  Eigen::MatrixXd p_;
};

struct Entropies {
  double h_s = 0.0;
  double h_theta = 0.0;
  double h_joint = 0.0;
};

namespace detail {
template <class Derived>
double shannon(const Eigen::DenseBase<Derived>& p) {
  double h = 0.0;
  for (Eigen::Index j = 0; j < p.cols(); ++j)
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      double v = p(i, j);
      if (v > 0.0) h -= v * std::log(v);
    }
  return h;
}
}  // namespace detail

inline Entropies marginal_entropies(const DiscreteJointBelief& b) {
  const auto& p = b.matrix();
  Eigen::VectorXd ps = p.rowwise().sum();
  Eigen::RowVectorXd pt = p.colwise().sum();
  return {detail::shannon(ps), detail::shannon(pt), detail::shannon(p)};
}

// Direct summation of sum p(s,t) log(p(s,t) / (p(s) p(t))).
inline double exact_mi(const DiscreteJointBelief& b) {
  const auto& p = b.matrix();
  Eigen::VectorXd ps = p.rowwise().sum();
  Eigen::RowVectorXd pt = p.colwise().sum();
  double mi = 0.0;
  for (Eigen::Index j = 0; j < p.cols(); ++j)
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      double v = p(i, j);
      if (v > 0.0) mi += v * std::log(v / (ps[i] * pt[j]));
    }
  return mi;
}

struct BoundCheck {
  double mi = 0.0;
  double bound = 0.0;  // H(s) + H(theta)
  bool holds = true;
  double slack = 0.0;  // bound - mi, equals H(s, theta)
};

inline BoundCheck verify_bound(const DiscreteJointBelief& b) {
  auto h = marginal_entropies(b);
  BoundCheck c;
  c.mi = exact_mi(b);
  c.bound = h.h_s + h.h_theta;
  c.holds = c.mi <= c.bound + kBoundTolerance;
  c.slack = c.bound - c.mi;
  return c;
}

// (1 - lambda) * uniform + lambda * uniform-diagonal, n x n.
inline DiscreteJointBelief coupling_family(double lambda, int n) {
  if (n < 2) throw InputError("coupling family needs n >= 2");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InputError("coupling lambda outside [0, 1]");
  const double nn = static_cast<double>(n);
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(n, n, (1.0 - lambda) / (nn * nn));
  for (int i = 0; i < n; ++i) p(i, i) += lambda / nn;
  p /= p.sum();
  return DiscreteJointBelief(std::move(p));
}

// Uniform draw from the simplex of n_s x n_theta beliefs (Dirichlet(1, ..., 1)).
inline DiscreteJointBelief random_belief(int n_s, int n_theta, std::mt19937_64& rng) {
  if (n_s < 1 || n_theta < 1) throw InputError("belief shape must be positive");
  std::gamma_distribution<double> g(1.0, 1.0);
  Eigen::MatrixXd p(n_s, n_theta);
  for (Eigen::Index j = 0; j < p.cols(); ++j)
    for (Eigen::Index i = 0; i < p.rows(); ++i) p(i, j) = g(rng);
  p /= p.sum();
  return DiscreteJointBelief(std::move(p));
}

}  // namespace cuc
