#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <map>
#include <set>

#include "devi/episodic.hpp"
#include "devi/oracle.hpp"
#include "support.hpp"

using namespace devi;
using devi::testing::identity_encoder;
using devi::testing::one_hot;
using devi::testing::shared_library;
using devi::testing::tabular_store;
using devi::testing::tabular_transitions;

namespace {

PlannerConfig sharp(std::size_t sweeps, double gamma = 0.9) {
  PlannerConfig cfg;
  cfg.gamma = gamma;
  cfg.sweeps = sweeps;
  cfg.temperature = 0.05;
  return cfg;
}

std::vector<Transition> random_replay(const TaskSpec& task, std::shared_ptr<const GlyphLibrary> lib, std::size_t steps,
                                      std::uint64_t seed) {
  GraphWorldEnv env(task, std::move(lib));
  Rng rng(seed);
  std::vector<Transition> out;
  for (std::size_t i = 0; i < steps; ++i) {
    if (env.episode_over()) env.reset(rng);
    out.push_back(env.step(uniform_index(rng, 2), rng));
  }
  return out;
}

std::vector<double> planner_values(const EpisodicStore& store, const PlannerConfig& cfg, const EncoderParams& enc,
                                   std::size_t sweeps) {
  Tape tape;
  const EmpiricalModel model = build_empirical_model(tape, store, enc, cfg);
  return plan(tape, model, sweeps).back().value().storage();
}

std::size_t goalward_action(const TaskSpec& t, std::size_t s) {
  return t.successor(s, 0) == t.terminal_states[0] ? 0 : 1;
}

}  // namespace

TEST(SimilarityWeights, SingleColumnIsOne) {
  Tape tape;
  Var q = tape.constant(Tensor::matrix(1, 3, {0.3, -1.0, 2.0}));
  Var s = tape.constant(Tensor::matrix(1, 3, {5.0, 1.0, 0.0}));
  EXPECT_EQ(similarity_weights(q, s).value()[0], 1.0);
}

TEST(SimilarityWeights, IdenticalAndOrthogonalColumns) {
  Tape tape;
  Var q = tape.constant(Tensor::matrix(1, 2, {1.0, 0.0}));
  Var s = tape.constant(Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0}));
  const Tensor w = similarity_weights(q, s).value();
  const double e = std::exp(1.0);
  EXPECT_NEAR(w[0], e / (e + 1.0), 1e-15);
  EXPECT_NEAR(w[1], 1.0 / (e + 1.0), 1e-15);
  EXPECT_NEAR(w[0], 0.7311, 1e-4);
}

TEST(SimilarityWeights, IdenticalStoredLatentsGiveUniformWeights) {
  Tape tape;
  Var q = tape.constant(Tensor::matrix(2, 2, {0.4, 0.1, -0.3, 0.9}));
  Var s = tape.constant(Tensor::matrix(4, 2, {1, 2, 1, 2, 1, 2, 1, 2}));
  for (double v : similarity_weights(q, s).value().values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(SimilarityWeights, DimensionMismatchThrows) {
  Tape tape;
  EXPECT_THROW(similarity_weights(tape.constant(Tensor(Shape{1, 3})), tape.constant(Tensor(Shape{2, 4}))),
               std::invalid_argument);
}

TEST(EmpiricalModel, OneHotLatentsRecoverIndicatorRows) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 3, GlyphSplit::Train, *lib);
  const EpisodicStore store = tabular_store(task);
  Tape tape;
  const EmpiricalModel model = build_empirical_model(tape, store, identity_encoder(), sharp(1));
  std::vector<std::size_t> resultant_states;
  for (const auto& p : store.actions)
    resultant_states.insert(resultant_states.end(), p.resultant_states.begin(), p.resultant_states.end());
  for (std::size_t a = 0; a < 2; ++a) {
    const Tensor& theta = model.theta[a].value();
    EXPECT_EQ(theta.shape(), (Shape{18, 9}));
    for (std::size_t x = 0; x < resultant_states.size(); ++x) {
      if (task.is_terminal(resultant_states[x])) continue;
      std::size_t best = 0;
      double total = 0.0;
      for (std::size_t j = 0; j < theta.shape()[1]; ++j) {
        total += theta.at(x, j);
        if (theta.at(x, j) > theta.at(x, best)) best = j;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
      EXPECT_EQ(store.actions[a].origin_states[best], resultant_states[x]);
      EXPECT_GT(theta.at(x, best), 1.0 - 1e-6);
    }
  }
}

TEST(EmpiricalModel, DuplicateOriginsShareMassEqually) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 3, GlyphSplit::Train, *lib);
  const EpisodicStore store = tabular_store(task, 2);
  Tape tape;
  const EmpiricalModel model = build_empirical_model(tape, store, identity_encoder(), sharp(1));
  const Tensor& theta = model.theta[0].value();
  const auto& origins = store.actions[0].origin_states;
  for (std::size_t x = 0; x < theta.shape()[0]; ++x)
    for (std::size_t j = 0; j + 1 < origins.size(); j += 2) {
      ASSERT_EQ(origins[j], origins[j + 1]);
      EXPECT_EQ(theta.at(x, j), theta.at(x, j + 1));
    }
}

TEST(EmpiricalModel, EvaluationStoreShapesOnRing) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 3, GlyphSplit::Train, *lib);
  GraphWorldEnv env(task, lib);
  Rng rng(4);
  const EpisodicStore store = evaluation_store(env, 5, rng);
  // the goal is terminal and never an origin: 9 states x 5 samples per action
  EXPECT_EQ(store.total(), 90u);
  Tape tape;
  const EmpiricalModel model = build_empirical_model(tape, store, diff::build_encoder(diff::EncoderKind::SmallMlp, 1),
                                                     PlannerConfig{});
  for (std::size_t a = 0; a < 2; ++a) EXPECT_EQ(model.theta[a].shape(), (Shape{9 * 5 * 2, 9 * 5}));
}

TEST(Sweep, GammaZeroIsKernelWeightedMaxReward) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::HardRing, 2, GlyphSplit::Train, *lib);
  const EpisodicStore store = EpisodicStore::from_transitions(random_replay(task, lib, 60, 1), 2);
  const EncoderParams enc = diff::build_encoder(diff::EncoderKind::SmallMlp, 2);
  PlannerConfig cfg;
  cfg.gamma = 0.0;
  Tape tape;
  const EmpiricalModel model = build_empirical_model(tape, store, enc, cfg);
  const Tensor v = value_iteration_sweep(model, tape.constant(Tensor(Shape{model.resultant_count()}, 3.0))).value();
  for (std::size_t x = 0; x < model.resultant_count(); ++x) {
    double best = -1e9;
    for (std::size_t a = 0; a < 2; ++a) {
      double acc = 0.0;
      for (std::size_t j = 0; j < store.actions[a].size(); ++j)
        acc += model.theta[a].value().at(x, j) * store.actions[a].rewards[j];
      best = std::max(best, acc);
    }
    EXPECT_NEAR(v[x], model.live.value()[x] * best, 1e-12);
  }
}

TEST(Sweep, ZeroRewardsStayZero) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Tree, 2, GlyphSplit::Train, *lib);
  EpisodicStore store = EpisodicStore::from_transitions(random_replay(task, lib, 100, 2), 2);
  for (auto& p : store.actions) std::fill(p.rewards.begin(), p.rewards.end(), 0.0);
  for (double v : planner_values(store, PlannerConfig{}, diff::build_encoder(diff::EncoderKind::SmallMlp, 2), 25))
    EXPECT_EQ(v, 0.0);
}

TEST(Sweep, LengthMismatchThrows) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 2, GlyphSplit::Train, *lib);
  const EpisodicStore store = tabular_store(task);
  Tape tape;
  const EmpiricalModel model = build_empirical_model(tape, store, identity_encoder(), sharp(1));
  EXPECT_THROW(value_iteration_sweep(model, tape.constant(Tensor(Shape{3}))), std::invalid_argument);
}

TEST(Sweep, TabularRingMatchesExactValueIteration) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 5, GlyphSplit::Train, *lib);
  const EpisodicStore store = tabular_store(task);
  oracle::StopRule rule;
  rule.horizon = 10;
  const auto exact = oracle::exact_value_iteration(task, 0.9, rule);
  const auto values = planner_values(store, sharp(10), identity_encoder(), 10);
  std::size_t x = 0;
  for (const auto& p : store.actions)
    for (std::size_t s : p.resultant_states) EXPECT_NEAR(values[x++], exact.v_by_horizon[10][s], 1e-6);
}

TEST(Sweep, IsAGammaContraction) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::HardRing, 8, GlyphSplit::Train, *lib);
  const EpisodicStore store = EpisodicStore::from_transitions(random_replay(task, lib, 80, 3), 2);
  Tape tape;
  const EmpiricalModel model =
      build_empirical_model(tape, store, diff::build_encoder(diff::EncoderKind::SmallMlp, 5), PlannerConfig{});
  Rng rng(9);
  std::uniform_real_distribution<double> u(-3, 3);
  const std::size_t n = model.resultant_count();
  for (int trial = 0; trial < 100; ++trial) {
    Tensor v1(Shape{n}), v2(Shape{n});
    for (auto& v : v1.values()) v = u(rng);
    for (auto& v : v2.values()) v = u(rng);
    const Tensor b1 = value_iteration_sweep(model, tape.constant(v1)).value();
    const Tensor b2 = value_iteration_sweep(model, tape.constant(v2)).value();
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      lhs = std::max(lhs, std::abs(b1[i] - b2[i]));
      rhs = std::max(rhs, std::abs(v1[i] - v2[i]));
    }
    EXPECT_LE(lhs, 0.9 * rhs + 1e-12);
  }
}

TEST(Sweep, NonNegativeRewardsGiveMonotoneBoundedValues) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 8, GlyphSplit::Train, *lib);
  const EpisodicStore store = EpisodicStore::from_transitions(random_replay(task, lib, 80, 4), 2);
  Tape tape;
  const EmpiricalModel model =
      build_empirical_model(tape, store, diff::build_encoder(diff::EncoderKind::SmallMlp, 6), PlannerConfig{});
  const auto values = plan(tape, model, 40);
  for (std::size_t k = 1; k < values.size(); ++k)
    for (std::size_t i = 0; i < model.resultant_count(); ++i) {
      EXPECT_GE(values[k].value()[i], values[k - 1].value()[i] - 1e-15);
      EXPECT_LE(values[k].value()[i], 1.0 / (1.0 - 0.9));
    }
}

TEST(QValues, LimitOneIsKernelWeightedImmediateReward) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 2, GlyphSplit::Train, *lib);
  const EpisodicStore store = EpisodicStore::from_transitions(random_replay(task, lib, 60, 5), 2);
  const EncoderParams enc = diff::build_encoder(diff::EncoderKind::SmallMlp, 7);
  PlannerConfig cfg;
  cfg.sweeps = 1;
  const Observation& query = *store.actions[0].origins[3];
  const auto q = q_values(query, enc, store, cfg);
  Tape tape;
  const ObservationPtr qp = std::make_shared<const Observation>(query);
  Var z = diff::encode(tape, enc, std::span<const ObservationPtr>(&qp, 1));
  for (std::size_t a = 0; a < 2; ++a) {
    Var zs = diff::encode(tape, enc, store.actions[a].origins);
    const Tensor w = similarity_weights(z, zs).value();
    double expected = 0.0;
    for (std::size_t j = 0; j < store.actions[a].size(); ++j) expected += w[j] * store.actions[a].rewards[j];
    EXPECT_NEAR(q[a], expected, 1e-12);
  }
}

TEST(QValues, TabularRingNextToGoal) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 5, GlyphSplit::Train, *lib);
  const EpisodicStore store = tabular_store(task);
  const std::size_t goal = task.terminal_states[0];
  const std::size_t s = (goal + 1) % task.n_states;
  const auto q = q_values(Observation::one_hot(s), identity_encoder(), store, sharp(5));
  const std::size_t toward = goalward_action(task, s);
  EXPECT_NEAR(q[toward], 1.0, 1e-6);
  EXPECT_NEAR(q[1 - toward], 0.81, 1e-6);
}

TEST(QValues, InvariantToStorePermutation) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::HardRing, 5, GlyphSplit::Train, *lib);
  auto replay = random_replay(task, lib, 70, 6);
  const EncoderParams enc = diff::build_encoder(diff::EncoderKind::SmallMlp, 8);
  PlannerConfig cfg;
  cfg.sweeps = 8;
  const EpisodicStore a = EpisodicStore::from_transitions(replay, 2);
  Rng rng(1);
  std::shuffle(replay.begin(), replay.end(), rng);
  const EpisodicStore b = EpisodicStore::from_transitions(replay, 2);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto qa = q_values(*replay[i].observation, enc, a, cfg);
    const auto qb = q_values(*replay[i].observation, enc, b, cfg);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(qa[k], qb[k], 1e-12);
  }
}

TEST(QValues, FrozenPlannerAgreesWithTapeEvaluation) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Tree, 5, GlyphSplit::Train, *lib);
  const auto replay = random_replay(task, lib, 120, 7);
  const EpisodicStore store = EpisodicStore::from_transitions(replay, 2);
  const EncoderParams enc = diff::build_encoder(diff::EncoderKind::SmallMlp, 9);
  PlannerConfig cfg;
  cfg.sweeps = 6;
  cfg.temperature = 0.2;
  const FrozenPlanner planner(enc, store, cfg);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto q1 = planner.q_values(*replay[i].observation);
    const auto q2 = q_values(*replay[i].observation, enc, store, cfg);
    for (std::size_t a = 0; a < 2; ++a) EXPECT_NEAR(q1[a], q2[a], 1e-12);
  }
}

TEST(QValues, EmptyStoreThrows) {
  EpisodicStore store;
  store.actions.resize(2);
  EXPECT_THROW(q_values(Observation::one_hot(0), identity_encoder(), store, PlannerConfig{}), std::invalid_argument);
}

TEST(Loss, TerminalRewardWithZeroPredictionIsOne) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 5, GlyphSplit::Train, *lib);
  EpisodicStore store = tabular_store(task);
  for (auto& p : store.actions) std::fill(p.rewards.begin(), p.rewards.end(), 0.0);
  const Transition t{one_hot(1), 0, 1.0, one_hot(2), true, 1, 2};
  PlannerConfig cfg;
  cfg.sweeps = 1;
  Tape tape;
  EXPECT_DOUBLE_EQ(multi_horizon_loss(tape, std::span<const Transition>(&t, 1), identity_encoder(), store, cfg)
                       .loss.value()
                       .item(),
                   1.0);
}

TEST(Loss, PerfectPredictionsGiveZero) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 5, GlyphSplit::Train, *lib);
  EpisodicStore store = tabular_store(task);
  for (auto& p : store.actions) std::fill(p.rewards.begin(), p.rewards.end(), 0.0);
  const std::vector<Transition> batch{{one_hot(1), 0, 0.0, one_hot(2), false, 1, 2},
                                      {one_hot(3), 1, 0.0, one_hot(4), true, 3, 4}};
  PlannerConfig cfg;
  cfg.sweeps = 4;
  Tape tape;
  const LossResult r = multi_horizon_loss(tape, batch, identity_encoder(), store, cfg);
  EXPECT_EQ(r.loss.value().item(), 0.0);
  EXPECT_EQ(r.horizon_errors.size(), 4u);
}

TEST(Loss, ConvergedTabularRingIsNearZero) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 5, GlyphSplit::Train, *lib);
  const EpisodicStore store = tabular_store(task);
  const auto batch = tabular_transitions(task);
  Tape tape;
  const LossResult r = multi_horizon_loss(tape, batch, identity_encoder(), store, sharp(12));
  EXPECT_LE(r.loss.value().item(), 1e-8);
}

TEST(Loss, EmptyBatchThrows) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 5, GlyphSplit::Train, *lib);
  Tape tape;
  EXPECT_THROW(multi_horizon_loss(tape, {}, identity_encoder(), tabular_store(task), PlannerConfig{}),
               std::invalid_argument);
}

class LossGradient : public ::testing::TestWithParam<bool> {};

TEST_P(LossGradient, MatchesFiniteDifferences) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::HardRing, 1, GlyphSplit::Train, *lib);
  const auto replay = random_replay(task, lib, 200, 8);
  Rng rng(3);
  const EpisodicStore store = subsample_store(replay, 10, 2, rng);  // 20 tuples
  std::vector<Transition> batch(replay.begin() + 50, replay.begin() + 66);
  EncoderParams enc = diff::build_encoder(diff::EncoderKind::SmallMlp, 11);
  PlannerConfig cfg;
  cfg.sweeps = 3;
  cfg.couple_targets = GetParam();
  const LossAndGradients lg = multi_horizon_loss_and_gradients(batch, enc, store, cfg);
  // constant targets are held at their current values on both sides
  std::vector<Tensor> targets;
  {
    Tape tape;
    targets = multi_horizon_loss(tape, batch, enc, store, cfg).targets;
  }
  const std::vector<Tensor>* hold = cfg.couple_targets ? nullptr : &targets;
  const auto coords = oracle::sample_coordinates(enc.params, 200, rng);
  const auto numeric = oracle::finite_difference_grad(
      [&](const diff::ParameterSet& p) {
        EncoderParams e = enc;
        e.params = p;
        Tape tape;
        return multi_horizon_loss(tape, batch, e, store, cfg, hold).loss.value().item();
      },
      enc.params, coords, 1e-5);
  const auto report = oracle::compare_gradients(enc.params, lg.gradients, coords, numeric, 1e-4, 0.99);
  EXPECT_TRUE(report.ok()) << report.passed << "/" << report.checked << " worst " << report.worst_name << " "
                           << report.worst_error;
}

INSTANTIATE_TEST_SUITE_P(Targets, LossGradient, ::testing::Values(false, true));

TEST(Subsample, ExhaustiveSampleIsAPermutation) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 1, GlyphSplit::Train, *lib);
  const auto replay = random_replay(task, lib, 50, 10);
  std::vector<std::size_t> per_action(2, 0);
  for (const auto& t : replay) ++per_action[t.action];
  const std::size_t n = std::min(per_action[0], per_action[1]);
  Rng rng(1);
  const EpisodicStore store = subsample_store(replay, n, 2, rng);
  for (std::size_t a = 0; a < 2; ++a) {
    if (per_action[a] != n) continue;
    std::multiset<const Observation*> want, got;
    for (const auto& t : replay)
      if (t.action == a) want.insert(t.observation.get());
    for (const auto& o : store.actions[a].origins) got.insert(o.get());
    EXPECT_EQ(want, got);
  }
}

TEST(Subsample, InsufficientTuplesThrows) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 1, GlyphSplit::Train, *lib);
  const auto replay = random_replay(task, lib, 10, 11);
  Rng rng(1);
  EXPECT_THROW(subsample_store(replay, 10, 2, rng), std::runtime_error);
}

TEST(Subsample, DifferentSeedsGiveDifferentValidStores) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 1, GlyphSplit::Train, *lib);
  const auto replay = random_replay(task, lib, 400, 12);
  std::set<std::vector<const Observation*>> distinct;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const EpisodicStore store = subsample_store(replay, 20, 2, rng);
    std::vector<const Observation*> key;
    for (std::size_t a = 0; a < 2; ++a) {
      ASSERT_EQ(store.actions[a].size(), 20u);
      for (const auto& o : store.actions[a].origins) key.push_back(o.get());
    }
    distinct.insert(key);
  }
  EXPECT_EQ(distinct.size(), 100u);
}

TEST(EvaluationStore, FivePerPairOnEveryPrototype) {
  auto lib = shared_library();
  for (Prototype p : {Prototype::Ring, Prototype::HardRing, Prototype::Tree}) {
    const TaskSpec task = make_task(p, 3, GlyphSplit::Test, *lib);
    GraphWorldEnv env(task, lib);
    Rng rng(2);
    const EpisodicStore store = evaluation_store(env, 5, rng);
    std::map<std::pair<std::size_t, std::size_t>, int> counts;
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t s : store.actions[a].origin_states) ++counts[{s, a}];
    std::size_t live = 0;
    for (std::size_t s = 0; s < task.n_states; ++s) live += !task.is_terminal(s);
    EXPECT_EQ(counts.size(), 2 * live);
    for (const auto& [key, c] : counts) EXPECT_EQ(c, 5);
  }
}

TEST(EvaluationStore, StepBudgetExhaustionIsReported) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Tree, 3, GlyphSplit::Test, *lib);
  GraphWorldEnv env(task, lib);
  Rng rng(2);
  EXPECT_THROW(evaluation_store(env, 5, rng, 50), std::runtime_error);
}

TEST(Loss, FixedTargetsReproduceComputedLoss) {
  auto lib = shared_library();
  const TaskSpec task = make_task(Prototype::Ring, 4, GlyphSplit::Train, *lib);
  const auto replay = random_replay(task, lib, 100, 13);
  Rng rng(1);
  const EpisodicStore store = subsample_store(replay, 10, 2, rng);
  const std::vector<Transition> batch(replay.begin(), replay.begin() + 12);
  const EncoderParams enc = diff::build_encoder(diff::EncoderKind::SmallMlp, 13);
  PlannerConfig cfg;
  cfg.sweeps = 4;
  Tape t1, t2;
  const LossResult a = multi_horizon_loss(t1, batch, enc, store, cfg);
  ASSERT_EQ(a.targets.size(), 4u);
  const LossResult b = multi_horizon_loss(t2, batch, enc, store, cfg, &a.targets);
  EXPECT_EQ(a.loss.value().item(), b.loss.value().item());
  const std::vector<Tensor> wrong(3, Tensor(Shape{12}));
  Tape t3;
  EXPECT_THROW(multi_horizon_loss(t3, batch, enc, store, cfg, &wrong), std::invalid_argument);
}
