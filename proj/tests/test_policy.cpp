#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "cuc/policy.hpp"

using namespace cuc;

namespace {

// MassSpring-shaped ensemble (obs 2, action 1) whose member m predicts
// delta = (g_m * a, 0), built from relu(a) - relu(-a).
EnsembleModel linear_ensemble(const std::vector<double>& gains) {
  std::vector<Predictor> ms;
  for (double g : gains) {
    Predictor p(5, 2, 2);
    p.w1(0, 4) = 1.0;
    p.w1(1, 4) = -1.0;
    p.w2(0, 0) = g;
    p.w2(0, 1) = -g;
    ms.push_back(p);
  }
  return EnsembleModel(ms, Normalizer::identity(5, 2));
}

DecisionContext ctx_at(double x, double task, const EnsembleModel& m) {
  return {EnvId::MassSpring1D, Observation{{x, 0.0}}, Vec::Zero(2), Action{{task}}, &m};
}

CandidateActionSet actions(std::initializer_list<double> as) {
  CandidateActionSet s;
  for (double a : as) s.actions.push_back(Action{{a}});
  return s;
}

const RegimeThresholds kThr{0.2, 0.5};

}  // namespace

TEST(Schedules, HandExamples) {
  EXPECT_DOUBLE_EQ(alpha_schedule(0.35, kThr, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(alpha_schedule(0.35, kThr, 2.0), 1.0);
  EXPECT_DOUBLE_EQ(delta_budget(0.35, kThr, 2.0), 1.0);
  EXPECT_EQ(alpha_schedule(0.1, kThr, 2.0), 0.0);
  EXPECT_EQ(delta_budget(0.1, kThr, 2.0), 2.0);
  EXPECT_EQ(alpha_schedule(0.9, kThr, 2.0), 2.0);
  EXPECT_EQ(delta_budget(0.9, kThr, 2.0), 0.0);
  EXPECT_THROW(alpha_schedule(0.3, kThr, 0.0), InputError);
  EXPECT_THROW(delta_budget(0.3, kThr, -1.0), InputError);
  auto w = weights_for(0.35, kThr, PolicyParams{32, 2.0, 1.0, 0.7});
  EXPECT_DOUBLE_EQ(w.alpha, 1.0);
  EXPECT_DOUBLE_EQ(w.delta, 0.5);
  EXPECT_EQ(w.lambda, 0.7);
}

TEST(Schedules, MonotoneInKappa) {
  double pa = -1.0, pd = 1e9;
  for (int i = 0; i <= 400; ++i) {
    double k = i * 0.01;
    double a = alpha_schedule(k, kThr, 2.0), d = delta_budget(k, kThr, 1.0);
    ASSERT_GE(a, pa);
    ASSERT_LE(d, pd);
    ASSERT_GE(a, 0.0);
    ASSERT_LE(a, 2.0);
    ASSERT_GE(d, 0.0);
    ASSERT_LE(d, 1.0);
    pa = a;
    pd = d;
  }
}

TEST(Composite, HandExample) {
  EXPECT_DOUBLE_EQ(composite_value(1.0, 2.0, 0.5, PolicyWeights{1.0, 2.0, 1.0}), 2.0);
  EXPECT_DOUBLE_EQ(composite_value(-0.5, 1.0, 0.0, PolicyWeights{0.0, 1.0, 1.0}), -0.5);
}

TEST(DisScore, TwoMembersIsQuarterSquaredGap) {
  std::vector<Predictor> ms(2, Predictor(6, 1, 2));
  ms[0].b2 = Vec{{1.0, 2.0}};
  ms[1].b2 = Vec{{-1.0, 0.0}};
  EnsembleModel m(ms, Normalizer::identity(6, 2));
  Vec z = Vec::Zero(2);
  // ||(2, 2)||^2 / 4
  EXPECT_DOUBLE_EQ(dis_score(m, z, z, Action::Zero(2)), 2.0);
  auto lin = linear_ensemble({0.0, 1.0});
  // predictions 0 and a: population variance a^2 / 4
  EXPECT_DOUBLE_EQ(dis_score(lin, z, z, Action{{0.6}}), 0.09);
  EXPECT_EQ(dis_score(lin, z, z, Action{{0.0}}), 0.0);
}

TEST(TaskCommand, MassSpringRegulator) {
  EXPECT_EQ(task_command(EnvId::MassSpring1D, Observation{{0.0, 0.0}}), (Action{{0.0}}));
  EXPECT_DOUBLE_EQ(task_command(EnvId::MassSpring1D, Observation{{0.5, 1.0}})[0], -0.7);
  EXPECT_EQ(task_command(EnvId::MassSpring1D, Observation{{3.0, 0.0}}), (Action{{-1.0}}));
}

TEST(TaskCommand, DriftBotFromOrigin) {
  Action a = task_command(EnvId::DriftBot, Observation{{0.0, 0.0, 1.0, 0.0}});
  // goal at lookahead angle 0.5 on the radius-2 track; heading error 0.5
  double v = std::cos(0.5), half = 1.0 * 0.4 / 2.0;
  EXPECT_NEAR(a[0], v - half, 1e-12);
  EXPECT_EQ(a[1], 1.0);  // v + half = 1.078 saturates
}

TEST(Candidates, LayoutAndDeterminism) {
  std::mt19937_64 r1(3), r2(3);
  Action cmd{{0.2, -0.4}};
  auto a = CandidateActionSet::build(cmd, 32, r1);
  auto b = CandidateActionSet::build(cmd, 32, r2);
  ASSERT_EQ(a.actions.size(), 32u);
  EXPECT_EQ(a.actions[0], Action::Zero(2));
  EXPECT_EQ(a.actions[1], cmd);
  for (std::size_t i = 0; i < 32; ++i) {
    EXPECT_EQ(a.actions[i], b.actions[i]);
    EXPECT_LE(a.actions[i].cwiseAbs().maxCoeff(), 1.0);
  }
  EXPECT_THROW(CandidateActionSet::build(cmd, 1, r1), InputError);
}

TEST(SelectFromScores, TiesGoToLowestIndex) {
  std::vector<CandidateScore> s(3);
  s[0].task = -0.5;
  s[1].task = -0.1;
  s[2].task = -0.1;
  bool fb = true;
  EXPECT_EQ(select_from_scores(s, PolicyWeights{0.0, 1.0, 1.0}, fb), 1u);
  EXPECT_FALSE(fb);
  std::vector<CandidateScore> none;
  EXPECT_THROW(select_from_scores(none, PolicyWeights{}, fb), InputError);
}

TEST(SelectAction, LowDeficitTakesTaskCommand) {
  auto m = linear_ensemble({0.1, 0.2});
  std::mt19937_64 rng(1);
  auto cands = CandidateActionSet::build(Action{{0.4}}, 16, rng);
  auto w = weights_for(0.1, kThr, PolicyParams{});
  auto d = select_action(ctx_at(0.0, 0.4, m), classify_regime(0.1, kThr), cands, w);
  EXPECT_EQ(d.index, 1u);
  EXPECT_EQ(d.action, (Action{{0.4}}));
  EXPECT_EQ(d.score.task, 0.0);
  EXPECT_EQ(d.score.ig, 0.0);
  EXPECT_FALSE(d.fallback);
  EXPECT_FALSE(d.budget_violation);
}

TEST(SelectAction, HighDeficitPrefersDisagreement) {
  auto m = linear_ensemble({0.0, 1.0});
  auto cands = actions({0.0, 0.0, 0.3, -0.9, 0.6});
  auto w = weights_for(2.0, kThr, PolicyParams{5, 10.0, 1.0, 1.0});
  ASSERT_EQ(w.alpha, 10.0);
  ASSERT_EQ(w.delta, 0.0);
  std::vector<CandidateScore> all;
  auto d = select_action(ctx_at(0.0, 0.0, m), Regime::HighDeficit, cands, w, &all);
  EXPECT_EQ(d.index, 3u);
  EXPECT_EQ(d.score.ig, 1.0);
  EXPECT_DOUBLE_EQ(d.score.ig_raw, 0.81 / 4.0);
  EXPECT_GT(d.score.ig_raw, all[1].ig_raw);
  // value = -(0.81) / 4 + 10
  EXPECT_DOUBLE_EQ(d.score.value, 10.0 - 0.81 / 4.0);
}

TEST(SelectAction, BudgetRemovesRiskyTaskCommand) {
  auto m = linear_ensemble({1.0, 1.0});
  auto cands = actions({0.0, 1.0, -0.5});
  std::vector<CandidateScore> all;
  auto d = select_action(ctx_at(1.5, 1.0, m), Regime::LowDeficit, cands, PolicyWeights{0.0, 1.0, 0.5}, &all);
  EXPECT_DOUBLE_EQ(all[1].risk, 1.0);
  EXPECT_FALSE(all[1].admissible);
  EXPECT_TRUE(all[0].admissible);
  EXPECT_EQ(d.index, 0u);
  EXPECT_DOUBLE_EQ(d.score.task, -0.25);
  EXPECT_FALSE(d.fallback);
}

TEST(SelectAction, AllOverBudgetFallsBackToMinimumRisk) {
  auto m = linear_ensemble({1.0, 1.0});
  // predicted x' = 3 + a, risk = x' - 1.5
  auto cands = actions({0.0, 0.5, -0.8, 0.9});
  auto d = select_action(ctx_at(3.0, 0.5, m), Regime::Transition, cands, PolicyWeights{0.5, 1.0, 0.1});
  EXPECT_TRUE(d.fallback);
  EXPECT_EQ(d.index, 2u);
  EXPECT_DOUBLE_EQ(d.score.risk, 0.7);
  EXPECT_DOUBLE_EQ(d.min_risk, 0.7);
  EXPECT_FALSE(d.budget_violation);
}

TEST(SelectAction, RequiresModelAndCandidates) {
  auto m = linear_ensemble({1.0, 1.0});
  DecisionContext c = ctx_at(0.0, 0.0, m);
  EXPECT_THROW(select_action(c, Regime::LowDeficit, CandidateActionSet{}, PolicyWeights{}), InputError);
  c.model = nullptr;
  EXPECT_THROW(select_action(c, Regime::LowDeficit, actions({0.0, 0.0}), PolicyWeights{}), InputError);
}

TEST(SelectActionProperty, ChoiceRespectsBudgetAndMaximisesValue) {
  auto m = linear_ensemble({0.5, 1.0, 2.0});
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0), k(0.0, 1.0);
  int fallbacks = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    double x = 2.5 * u(rng), kap = k(rng);
    Action cmd{{u(rng)}};
    auto cands = CandidateActionSet::build(cmd, 8, rng);
    auto w = weights_for(kap, kThr, PolicyParams{8, 2.0, 1.0, 1.0});
    std::vector<CandidateScore> all;
    auto d = select_action(ctx_at(x, cmd[0], m), classify_regime(kap, kThr), cands, w, &all);
    ASSERT_FALSE(d.budget_violation);
    double min_risk = all[0].risk;
    for (const auto& s : all) min_risk = std::min(min_risk, s.risk);
    ASSERT_EQ(d.min_risk, min_risk);
    if (d.fallback) {
      ++fallbacks;
      ASSERT_EQ(d.score.risk, min_risk);
      for (const auto& s : all) ASSERT_FALSE(s.admissible);
      continue;
    }
    ASSERT_LE(d.score.risk, w.delta);
    for (const auto& s : all)
      if (s.admissible) ASSERT_LE(s.value, d.score.value);
  }
  EXPECT_GT(fallbacks, 0);
  EXPECT_LT(fallbacks, 2000);
}

TEST(SelectAction, Deterministic) {
  auto m = linear_ensemble({0.3, 0.9});
  auto run = [&] {
    std::mt19937_64 rng(5);
    auto cands = CandidateActionSet::build(Action{{0.1}}, 32, rng);
    return select_action(ctx_at(1.2, 0.1, m), Regime::Transition, cands, weights_for(0.4, kThr, PolicyParams{}));
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.index, b.index);
  EXPECT_EQ(a.score.value, b.score.value);
}

TEST(StateEstimator, ObservedDimsPassThrough) {
  StateEstimator est(EnvId::MassSpring1D, MassSpring1D::nominal());
  est.reset(Observation{{0.2, 0.1}});
  auto e = est.update(Observation{{0.3, -0.4}}, {false, false}, Action{{0.5}});
  EXPECT_EQ(e, (Observation{{0.3, -0.4}}));
  EXPECT_THROW(est.update(Observation{{0.3, -0.4}}, {false}, Action{{0.5}}), InputError);
}

TEST(StateEstimator, MaskedDimsAreDeadReckoned) {
  DynamicsParams th{{"k", 2.0}, {"m", 1.0}};
  StateEstimator est(EnvId::MassSpring1D, th);
  est.reset(Observation{{0.4, -0.2}});
  // v' = -0.2 + 0.05 * (-2 * 0.4 + 0.5) / 1 = -0.215
  auto e = est.update(Observation{{0.39, 0.0}}, {false, true}, Action{{0.5}});
  EXPECT_EQ(e[0], 0.39);
  EXPECT_NEAR(e[1], -0.215, 1e-15);
  // next step propagates from the estimate, not from the zero-filled reading
  // v'' = -0.215 + 0.05 * (-2 * 0.39 + 0) = -0.254
  e = est.update(Observation{{0.378, 0.0}}, {false, true}, Action{{0.0}});
  EXPECT_NEAR(e[1], -0.254, 1e-15);
  EXPECT_EQ(est.estimate(), e);
}
