#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cuc/experiment.hpp"
#include "cuc/io.hpp"

using namespace cuc;

namespace {

DynamicsParams quiet_bot(double left = 1.0, double right = 1.0) {
  return {{"left_gain", left}, {"right_gain", right}, {"wheel_noise", 0.0}};
}

double heading_of(const Observation& o) { return std::atan2(o[DriftBot::kSin], o[DriftBot::kCos]); }

std::vector<Action> random_actions(std::size_t n, Eigen::Index dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Action> out;
  for (std::size_t i = 0; i < n; ++i) {
    Action a(dim);
    for (Eigen::Index j = 0; j < dim; ++j) a[j] = u(rng);
    out.push_back(a);
  }
  return out;
}

bool bit_equal(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  return true;
}

}  // namespace

// ---- env_core ---------------------------------------------------------------

TEST(EnvReset, MassSpringSameSeedSameObservation) {
  Env a(EnvId::MassSpring1D), b(EnvId::MassSpring1D);
  DynamicsParams th{{"m", 1.0}, {"k", 1.0}};
  EXPECT_TRUE(bit_equal(a.reset(7, th), b.reset(7, th)));
}

TEST(EnvReset, DriftBotStartsAtOriginHeadingZero) {
  Env e(EnvId::DriftBot);
  Observation o = e.reset(1, DriftBot::nominal());
  EXPECT_EQ(o, (Observation{{0.0, 0.0, 1.0, 0.0}}));
}

TEST(EnvReset, GainFaultInvisibleBeforeMotion) {
  Env a(EnvId::DriftBot), b(EnvId::DriftBot);
  DynamicsParams faulty = DriftBot::nominal();
  faulty.set("left_gain", 0.5);
  EXPECT_TRUE(bit_equal(a.reset(1, DriftBot::nominal()), b.reset(1, faulty)));
}

TEST(EnvReset, OutOfBoundsThetaIsDomainError) {
  Env e(EnvId::DriftBot);
  EXPECT_THROW(e.reset(1, quiet_bot(1.5)), ParameterDomainError);
  Env m(EnvId::MassSpring1D);
  EXPECT_THROW(m.reset(1, DynamicsParams{{"m", 0.0}, {"k", 1.0}}), ParameterDomainError);
  EXPECT_THROW(m.reset(1, DynamicsParams{{"m", 1.0}}), ParameterDomainError);
}

TEST(EnvStep, MassSpringEquilibriumIsFixed) {
  MassSpring1D env(10, 0.0);
  env.reset_at(3, MassSpring1D::nominal(), Vec{{0.0, 0.0}});
  Transition tr = env.step(Action{{0.0}});
  EXPECT_EQ(tr.next_obs, (Observation{{0.0, 0.0}}));
  EXPECT_EQ(tr.delta, (Observation{{0.0, 0.0}}));
}

TEST(EnvStep, MassSpringSemiImplicitEuler) {
  MassSpring1D env(10, 0.0);
  DynamicsParams th{{"m", 2.0}, {"k", 3.0}};
  env.reset_at(3, th, Vec{{0.4, -0.2}});
  Transition tr = env.step(Action{{0.5}});
  // v' = -0.2 + 0.05 * (-3 * 0.4 + 0.5) / 2 = -0.2175; x' = 0.4 + 0.05 * v'
  EXPECT_NEAR(tr.next_obs[1], -0.2175, 1e-15);
  EXPECT_NEAR(tr.next_obs[0], 0.389125, 1e-15);
  EXPECT_DOUBLE_EQ(tr.reward, -0.389125);
}

TEST(EnvStep, SymmetricDriveKeepsHeading) {
  Env e(EnvId::DriftBot);
  e.reset(1, quiet_bot());
  Transition tr = e.step(Action{{1.0, 1.0}});
  EXPECT_EQ(heading_of(tr.next_obs), 0.0);
  EXPECT_GT(tr.next_obs[DriftBot::kX], 0.0);
  EXPECT_DOUBLE_EQ(tr.next_obs[DriftBot::kX], 0.05);
}

TEST(EnvStep, WeakLeftWheelTurnsLeftByClosedForm) {
  Env e(EnvId::DriftBot);
  e.reset(1, quiet_bot(0.5, 1.0));
  Transition tr = e.step(Action{{1.0, 1.0}});
  // w = (1 * 1 - 0.5 * 1) * 1 / 0.4 = 1.25 rad/s over dt 0.05
  EXPECT_NEAR(heading_of(tr.next_obs), 0.0625, 1e-15);
  // v = (0.5 + 1) / 2 = 0.75 along the initial heading
  EXPECT_NEAR(tr.next_obs[DriftBot::kX], 0.0375, 1e-15);
  EXPECT_EQ(tr.next_obs[DriftBot::kY], 0.0);
}

TEST(EnvStep, ActionOutOfRangeAndStepAfterTerminal) {
  Env e(EnvId::DriftBot, 2);
  EXPECT_THROW(e.step(Action{{0.0, 0.0}}), LifecycleError);
  e.reset(1, DriftBot::nominal());
  EXPECT_THROW(e.step(Action{{1.5, 0.0}}), InputError);
  EXPECT_THROW(e.step(Action{{0.0}}), InputError);
  e.step(Action{{0.0, 0.0}});
  e.step(Action{{0.0, 0.0}});
  EXPECT_TRUE(e.terminal());
  EXPECT_THROW(e.step(Action{{0.0, 0.0}}), LifecycleError);
}

TEST(EnvStep, StepCounterAndDeltaConservation) {
  for (EnvId id : {EnvId::DriftBot, EnvId::MassSpring1D}) {
    auto acts = random_actions(300, static_cast<Eigen::Index>(action_dim(id)), 5);
    EpisodeTrace tr = record_episode(id, 11, nominal_params(id), acts, 1000);
    ASSERT_EQ(tr.steps.size(), acts.size());
    for (std::size_t i = 0; i < tr.steps.size(); ++i) {
      const auto& s = tr.steps[i];
      EXPECT_EQ(s.t, static_cast<int>(i));
      EXPECT_TRUE(bit_equal(s.next_obs - s.obs, s.delta));
      EXPECT_GE(s.risk, 0.0);
      EXPECT_TRUE(s.next_obs.allFinite());
      if (i > 0) EXPECT_TRUE(bit_equal(s.obs, tr.steps[i - 1].next_obs));
    }
  }
}

TEST(EnvStep, BitExactDeterminism) {
  auto acts = random_actions(200, 2, 9);
  auto a = record_episode(EnvId::DriftBot, 4, DriftBot::nominal(), acts);
  auto b = record_episode(EnvId::DriftBot, 4, DriftBot::nominal(), acts);
  EXPECT_EQ(episode_trace_jsonl(a), episode_trace_jsonl(b));
  auto c = record_episode(EnvId::DriftBot, 5, DriftBot::nominal(), acts);
  EXPECT_NE(episode_trace_jsonl(a), episode_trace_jsonl(c));
}

TEST(EnvStep, EpisodeTraceJsonlOneLinePerTransition) {
  auto acts = random_actions(5, 1, 2);
  auto tr = record_episode(EnvId::MassSpring1D, 1, MassSpring1D::nominal(), acts);
  std::string s = episode_trace_jsonl(tr);
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 5);
  auto first = json::parse(s.substr(0, s.find('\n')));
  EXPECT_EQ(first.at("t"), 0);
  EXPECT_EQ(first.at("delta").size(), 2u);
}

TEST(EnvStep, RiskIsBoundaryProximity) {
  EXPECT_EQ(DriftBot::risk_of(Observation{{0.0, 0.0, 1.0, 0.0}}), 0.0);
  EXPECT_DOUBLE_EQ(DriftBot::risk_of(Observation{{4.5, 0.0, 1.0, 0.0}}), 0.5);
  EXPECT_EQ(DriftBot::risk_of(Observation{{0.0, -5.0, 1.0, 0.0}}), 1.0);
  EXPECT_EQ(MassSpring1D::risk_of(Observation{{1.0, 0.0}}), 0.0);
  EXPECT_DOUBLE_EQ(MassSpring1D::risk_of(Observation{{-2.0, 0.0}}), 0.5);
}

TEST(EnvStep, NominalPredictMatchesNoiseFreeStep) {
  DriftBot env(10);
  DynamicsParams th = quiet_bot(0.7, 0.9);
  Observation o = env.reset_at(1, th, Vec{{1.0, -0.5, 0.3}});
  Action a{{0.4, -0.2}};
  Transition tr = env.step(a);
  EXPECT_LT((DriftBot::predict(o, a, th) - tr.next_obs).norm(), 1e-12);
}

TEST(TrueDynamics, ReportsParametersInEffect) {
  Env e(EnvId::MassSpring1D);
  e.reset(1, DynamicsParams{{"m", 2.0}, {"k", 1.0}});
  EXPECT_EQ(EvaluatorView(e).true_dynamics().at("m"), 2.0);
  for (int i = 0; i < 20; ++i) e.step(Action{{0.1}});
  EXPECT_EQ(EvaluatorView(e).true_dynamics(), (DynamicsParams{{"m", 2.0}, {"k", 1.0}}));
}

// ---- perturb ----------------------------------------------------------------

TEST(Mask, EmptyMaskIsIdentity) {
  Observation o{{1.0, 2.0, 3.0, 4.0}};
  for (int t : {0, 50, 999}) EXPECT_EQ(apply_mask(o, MaskSpec{{}, 0}, t), o);
}

TEST(Mask, HalfMaskZeroesDimsAfterOnset) {
  MaskSpec m{{0, 1}, 50};
  Observation o{{1.0, 2.0, 3.0, 4.0}};
  EXPECT_EQ(m.po_fraction(4), 0.5);
  EXPECT_EQ(apply_mask(o, m, 50), (Observation{{0.0, 0.0, 3.0, 4.0}}));
  EXPECT_EQ(apply_mask(o, m, 49), o);
}

TEST(Mask, IndexOutOfRangeIsSpecError) {
  EXPECT_THROW(apply_mask(Observation{{1.0, 2.0}}, MaskSpec{{2}, 0}, 5), SpecError);
  EXPECT_THROW(apply_mask(Observation{{1.0, 2.0}}, MaskSpec{{0, 0}, 0}, 5), SpecError);
}

TEST(Mask, PoLevelsFollowMaskingPriority) {
  EXPECT_EQ(mask_for_po(EnvId::DriftBot, 0.25).masked_dims, (std::vector<std::size_t>{DriftBot::kY}));
  EXPECT_EQ(mask_for_po(EnvId::DriftBot, 0.5).masked_dims, (std::vector<std::size_t>{DriftBot::kY, DriftBot::kX}));
  EXPECT_EQ(mask_for_po(EnvId::MassSpring1D, 0.5).masked_dims, (std::vector<std::size_t>{MassSpring1D::kVel}));
  EXPECT_THROW(mask_for_po(EnvId::MassSpring1D, 0.25), SpecError);
}

TEST(Delay, ZeroDelayIsIdentity) {
  auto acts = random_actions(10, 2, 3);
  auto out = delay_actions(acts, DelaySpec{0, 0});
  for (std::size_t i = 0; i < acts.size(); ++i) EXPECT_EQ(out[i], acts[i]);
}

TEST(Delay, OneStepQueue) {
  std::vector<Action> cmd{Action{{0.1}}, Action{{0.2}}, Action{{0.3}}};
  auto out = delay_actions(cmd, DelaySpec{1, 0});
  EXPECT_EQ(out[0], Action{{0.0}});
  EXPECT_EQ(out[1], Action{{0.1}});
  EXPECT_EQ(out[2], Action{{0.2}});
}

TEST(Delay, PrefillWithZeros) {
  auto cmd = random_actions(10, 2, 8);
  auto out = delay_actions(cmd, DelaySpec{3, 4});
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(out[t], cmd[t]);
  for (std::size_t t = 4; t < 7; ++t) EXPECT_EQ(out[t], Action::Zero(2));
  for (std::size_t t = 7; t < 10; ++t) EXPECT_EQ(out[t], cmd[t - 3]);
}

TEST(Shift, ScheduleVisibleThroughEvaluator) {
  ConditionSpec c;
  c.label = "C3";
  c.shift = ShiftSpec{"m", 2.0, 50};
  PerturbedEnv pe(Env(EnvId::MassSpring1D), c);
  pe.reset(1, MassSpring1D::nominal());
  for (int t = 0; t < 49; ++t) pe.step(Action{{0.0}});
  EXPECT_EQ(pe.t(), 49);
  EXPECT_EQ(EvaluatorView(pe.env()).true_dynamics().at("m"), 1.0);
  pe.step(Action{{0.0}});
  EXPECT_EQ(EvaluatorView(pe.env()).true_dynamics().at("m"), 2.0);
}

TEST(Shift, OutOfBoundsValueIsSpecError) {
  ConditionSpec c;
  c.shift = ShiftSpec{"left_gain", 1.5, 50};
  EXPECT_THROW(PerturbedEnv(Env(EnvId::DriftBot), c), SpecError);
  c.shift = ShiftSpec{"mass", 1.0, 50};
  EXPECT_THROW(PerturbedEnv(Env(EnvId::DriftBot), c), SpecError);
}

TEST(Shift, NoOpShiftLeavesTraceUnchanged) {
  ConditionSpec c;
  c.shift = ShiftSpec{"left_gain", 1.0, 50};
  c.label = "C3";
  PerturbedEnv a(Env(EnvId::DriftBot), c), b(Env(EnvId::DriftBot), ConditionSpec{});
  a.reset(2, DriftBot::nominal());
  b.reset(2, DriftBot::nominal());
  for (const auto& act : random_actions(120, 2, 4)) {
    auto sa = a.step(act), sb = b.step(act);
    ASSERT_TRUE(bit_equal(sa.truth.next_obs, sb.truth.next_obs));
  }
}

TEST(Shift, DriftStartsAtOnset) {
  ConditionSpec c;
  c.label = "C3";
  c.shift = ShiftSpec{"left_gain", 0.5, 50};
  PerturbedEnv pe(Env(EnvId::DriftBot), c);
  pe.reset(1, quiet_bot());
  for (int t = 0; t < 60; ++t) {
    auto s = pe.step(Action{{1.0, 1.0}});
    double dphi = std::remainder(heading_of(s.truth.next_obs) - heading_of(s.truth.obs), 2.0 * std::numbers::pi);
    if (t < 50)
      EXPECT_EQ(dphi, 0.0) << "t=" << t;
    else
      EXPECT_NEAR(dphi, 0.0625, 1e-12) << "t=" << t;
  }
}

TEST(Condition, LabelsMustMatchPerturbations) {
  ConditionSpec c;
  c.label = "C2";
  EXPECT_THROW(c.validate(EnvId::DriftBot), SpecError);
  c.mask = MaskSpec{{0}, 50};
  EXPECT_NO_THROW(c.validate(EnvId::DriftBot));
  c.delay = DelaySpec{1, 50};
  EXPECT_THROW(c.validate(EnvId::DriftBot), SpecError);
  c.label = "custom";
  EXPECT_NO_THROW(c.validate(EnvId::DriftBot));
}

TEST(Condition, PreOnsetPrefixMatchesBaseline) {
  auto cells = condition_matrix(EnvId::DriftBot, std::vector<double>{0.5}, std::vector<int>{3},
                                std::vector<std::optional<ShiftSpec>>{ShiftSpec{"left_gain", 0.5}},
                                std::vector<std::uint64_t>{7});
  PerturbedEnv c4(Env(EnvId::DriftBot), cells[0].condition), c1(Env(EnvId::DriftBot), ConditionSpec{});
  c4.reset(7, DriftBot::nominal());
  c1.reset(7, DriftBot::nominal());
  for (const auto& a : random_actions(50, 2, 6)) {
    // Observations o_0 .. o_49 and the true transitions of steps 0 .. 49 agree.
    auto s4 = c4.step(a), s1 = c1.step(a);
    ASSERT_TRUE(bit_equal(s4.agent.obs, s1.agent.obs));
    ASSERT_TRUE(bit_equal(s4.truth.next_obs, s1.truth.next_obs));
    ASSERT_TRUE(bit_equal(s4.truth.action, s1.truth.action));
    ASSERT_EQ(s4.agent.reward, s1.agent.reward);
  }
}

TEST(Condition, CompoundEqualsMaskComposedWithSingleStressor) {
  MaskSpec m = mask_for_po(EnvId::DriftBot, 0.5);
  ConditionSpec c3;
  c3.label = "C3";
  c3.delay = DelaySpec{2, 50};
  c3.shift = ShiftSpec{"left_gain", 0.5, 50};
  ConditionSpec c4 = c3;
  c4.label = "C4";
  c4.mask = m;
  PerturbedEnv e3(Env(EnvId::DriftBot), c3), e4(Env(EnvId::DriftBot), c4);
  e3.reset(9, DriftBot::nominal());
  e4.reset(9, DriftBot::nominal());
  for (const auto& a : random_actions(150, 2, 10)) {
    auto s3 = e3.step(a), s4 = e4.step(a);
    ASSERT_TRUE(bit_equal(s3.truth.next_obs, s4.truth.next_obs));
    ASSERT_TRUE(bit_equal(apply_mask(s3.truth.next_obs, m, s3.truth.t + 1), s4.agent.next_obs));
  }
}

TEST(Condition, PoMetadataFeedsSigmaS) {
  ConditionSpec c;
  c.label = "C4";
  c.mask = mask_for_po(EnvId::DriftBot, 0.5);
  c.delay = DelaySpec{1, 50};
  PerturbedEnv pe(Env(EnvId::DriftBot), c);
  pe.reset(1, DriftBot::nominal());
  EXPECT_EQ(pe.po_at(49), 0.0);
  EXPECT_EQ(pe.po_at(50), 0.5);
  EXPECT_EQ(pe.tau_at(50), 1);
  EXPECT_EQ(pe.masked_at(50), (std::vector<bool>{true, true, false, false}));
}

TEST(ConditionMatrix, SingletonIsC1) {
  auto cells = condition_matrix(EnvId::DriftBot, std::vector<double>{0.0}, std::vector<int>{0},
                                std::vector<std::optional<ShiftSpec>>{std::nullopt}, std::vector<std::uint64_t>{1});
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0].condition.label, "C1");
}

TEST(ConditionMatrix, TwoByTwoGivesAllFourLabels) {
  auto cells = condition_matrix(EnvId::DriftBot, std::vector<double>{0.0, 0.5}, std::vector<int>{0, 1},
                                std::vector<std::optional<ShiftSpec>>{std::nullopt}, std::vector<std::uint64_t>{1});
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0].condition.label, "C1");
  EXPECT_EQ(cells[1].condition.label, "C3");
  EXPECT_EQ(cells[2].condition.label, "C2");
  EXPECT_EQ(cells[3].condition.label, "C4");
}

TEST(ConditionMatrix, DefaultGridHas120Cells) {
  for (EnvId id : {EnvId::DriftBot}) {
    auto g = default_grid(id);
    auto cells = condition_matrix(id, g.po, g.delay, g.shift, g.seeds, g.onset);
    EXPECT_EQ(cells.size(), 120u);
    std::map<std::string, int> n;
    for (const auto& c : cells) ++n[c.condition.label];
    EXPECT_EQ(n["C1"], 5);
    EXPECT_EQ(n["C2"], 10);
    EXPECT_EQ(n["C3"], 35);
    EXPECT_EQ(n["C4"], 70);
  }
}

TEST(ConditionMatrix, EmptyAxisIsSpecError) {
  EXPECT_THROW(condition_matrix(EnvId::DriftBot, std::vector<double>{}, std::vector<int>{0},
                                std::vector<std::optional<ShiftSpec>>{std::nullopt}, std::vector<std::uint64_t>{1}),
               SpecError);
}
