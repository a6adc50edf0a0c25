#pragma once

// Episodic value iteration: a kernel-based planner over stored transitions
// whose similarity metric is a learned embedding.
//
// The store holds, per action a, origin observations S_a, rewards R_a,
// resultant observations S'_a and terminal flags. Every resultant state is
// mapped onto a distribution over the origin states of each action by a
// softmax over cosine similarities, which turns the store into a small
// closed MDP on which value iteration runs. Every step is a tape op, so the
// whole planner is differentiable with respect to the encoder.

#include <algorithm>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "devi/diffkit/encoder.hpp"
#include "devi/diffkit/tape.hpp"
#include "devi/graphworld.hpp"
#include "devi/random.hpp"

namespace devi {

using diff::EncoderParams;
using diff::Gradients;
using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

/// Stored transitions of one action. All vectors are index-aligned.
struct ActionPartition {
  std::vector<ObservationPtr> origins;
  std::vector<double> rewards;
  std::vector<ObservationPtr> resultants;
  std::vector<bool> done;
  // ground-truth states, for diagnostics only
  std::vector<std::size_t> origin_states;
  std::vector<std::size_t> resultant_states;

  std::size_t size() const { return origins.size(); }

  void push(const Transition& t) {
    origins.push_back(t.observation);
    rewards.push_back(t.reward);
    resultants.push_back(t.next_observation);
    done.push_back(t.terminal);
    origin_states.push_back(t.state);
    resultant_states.push_back(t.next_state);
  }
};

struct EpisodicStore {
  std::vector<ActionPartition> actions;

  std::size_t action_count() const { return actions.size(); }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& p : actions) n += p.size();
    return n;
  }

  /// Offset of action a's slice in the concatenated resultant list.
  std::size_t offset(std::size_t a) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < a; ++k) n += actions[k].size();
    return n;
  }

  void validate() const {
    if (actions.empty()) throw std::invalid_argument("episodic store: no actions");
    for (std::size_t a = 0; a < actions.size(); ++a) {
      const auto& p = actions[a];
      if (p.size() == 0) throw std::invalid_argument("episodic store: empty partition for action " + std::to_string(a));
      if (p.rewards.size() != p.size() || p.resultants.size() != p.size() || p.done.size() != p.size())
        throw std::invalid_argument("episodic store: misaligned arrays for action " + std::to_string(a));
    }
  }

  static EpisodicStore from_transitions(std::span<const Transition> transitions, std::size_t n_actions) {
    EpisodicStore store;
    store.actions.resize(n_actions);
    for (const auto& t : transitions) {
      if (t.action >= n_actions) throw std::out_of_range("episodic store: action index out of range");
      store.actions[t.action].push(t);
    }
    return store;
  }
};

struct PlannerConfig {
  double gamma = 0.9;
  std::size_t sweeps = 10;     // value-iteration horizon K
  double temperature = 1.0;    // kernel is softmax(cos / temperature)
  bool couple_targets = false; // let gradients flow through TD targets
};

inline void validate(const PlannerConfig& cfg) {
  if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw std::invalid_argument("planner: gamma must lie in [0, 1]");
  if (cfg.sweeps < 1) throw std::invalid_argument("planner: sweeps must be >= 1");
  if (!(cfg.temperature > 0.0)) throw std::invalid_argument("planner: temperature must be positive");
}

// ---------------------------------------------------------------------------
// Kernel and empirical model
// ---------------------------------------------------------------------------

/// Row-stochastic weights softmax_j(cos(q_i, s_j) / temperature).
inline Var similarity_weights(Var query_latents, Var stored_latents, double temperature = 1.0) {
  if (query_latents.shape().size() != 2 || stored_latents.shape().size() != 2 ||
      query_latents.shape()[1] != stored_latents.shape()[1])
    throw std::invalid_argument("similarity_weights: dimension mismatch " + diff::shape_string(query_latents.shape()) +
                                " vs " + diff::shape_string(stored_latents.shape()));
  if (stored_latents.shape()[0] == 0) throw std::invalid_argument("similarity_weights: no stored latents");
  Var cos = diff::cosine_similarity_matrix(query_latents, stored_latents);
  if (temperature != 1.0) cos = diff::scale(cos, 1.0 / temperature);
  return diff::softmax_rows(cos);
}

/// The store turned into a closed MDP over resultant states.
struct EmpiricalModel {
  std::vector<Var> origin_latents;  // per action [n_a, d]
  Var resultant_latents;            // [N', d], actions concatenated
  std::vector<Var> theta;           // per action [N', n_a]
  std::vector<Var> rewards;         // per action [n_a]
  std::vector<Var> continuation;    // per action [n_a], gamma * (1 - done)
  Var live;                         // [N'], 0 for terminal resultant states
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> sizes;

  std::size_t action_count() const { return theta.size(); }
  std::size_t resultant_count() const { return resultant_latents.shape()[0]; }
};

inline EmpiricalModel build_empirical_model(Tape& tape, const EpisodicStore& store,
                                            const std::vector<Var>& origin_latents,
                                            const std::vector<Var>& resultant_latents, const PlannerConfig& cfg) {
  store.validate();
  validate(cfg);
  const std::size_t A = store.action_count();
  if (origin_latents.size() != A || resultant_latents.size() != A)
    throw std::invalid_argument("build_empirical_model: one latent block per action required");
  EmpiricalModel model;
  model.origin_latents = origin_latents;
  model.resultant_latents = A == 1 ? resultant_latents[0] : diff::concat_rows(resultant_latents);
  std::vector<double> live;
  for (std::size_t a = 0; a < A; ++a) {
    const auto& p = store.actions[a];
    if (origin_latents[a].shape()[0] != p.size() || resultant_latents[a].shape()[0] != p.size())
      throw std::invalid_argument("build_empirical_model: latent rows do not match store size");
    model.offsets.push_back(live.size());
    model.sizes.push_back(p.size());
    std::vector<double> cont(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      cont[i] = p.done[i] ? 0.0 : cfg.gamma;
      live.push_back(p.done[i] ? 0.0 : 1.0);
    }
    model.rewards.push_back(tape.constant(Tensor::vector(p.rewards)));
    model.continuation.push_back(tape.constant(Tensor::vector(std::move(cont))));
  }
  for (std::size_t a = 0; a < A; ++a)
    model.theta.push_back(similarity_weights(model.resultant_latents, origin_latents[a], cfg.temperature));
  model.live = tape.constant(Tensor::vector(std::move(live)));
  return model;
}

/// Encodes every stored observation with one shared encoder pass.
inline EmpiricalModel build_empirical_model(Tape& tape, const EpisodicStore& store, const EncoderParams& encoder,
                                            const PlannerConfig& cfg) {
  store.validate();
  std::vector<ObservationPtr> all;
  for (const auto& p : store.actions) all.insert(all.end(), p.origins.begin(), p.origins.end());
  for (const auto& p : store.actions) all.insert(all.end(), p.resultants.begin(), p.resultants.end());
  Var z = diff::encode(tape, encoder, all);
  std::vector<Var> origins, resultants;
  std::size_t row = 0;
  for (const auto& p : store.actions) {
    origins.push_back(diff::slice_rows(z, row, p.size()));
    row += p.size();
  }
  for (const auto& p : store.actions) {
    resultants.push_back(diff::slice_rows(z, row, p.size()));
    row += p.size();
  }
  return build_empirical_model(tape, store, origins, resultants, cfg);
}

// ---------------------------------------------------------------------------
// Planner
// ---------------------------------------------------------------------------

/// Backup targets R_a + gamma (1 - done_a) V(S'_a) for one action.
inline Var backup_targets(const EmpiricalModel& model, Var values, std::size_t a) {
  Var next = diff::slice_rows(values, model.offsets[a], model.sizes[a]);
  return diff::add(model.rewards[a], diff::mul(model.continuation[a], next));
}

/// One approximate Bellman backup over all resultant states:
/// V'(x) = max_a sum_s kappa(x, s) [R_a(s) + gamma (1 - done_a(s)) V(s'_a)].
/// Terminal resultant states keep value zero.
inline Var value_iteration_sweep(const EmpiricalModel& model, Var values) {
  if (values.shape() != Shape{model.resultant_count()})
    throw std::invalid_argument("value_iteration_sweep: value vector length " + diff::shape_string(values.shape()) +
                                " does not match " + std::to_string(model.resultant_count()) + " resultant states");
  std::vector<Var> per_action;
  for (std::size_t a = 0; a < model.action_count(); ++a)
    per_action.push_back(diff::matvec(model.theta[a], backup_targets(model, values, a)));
  Var best = diff::reduce_max_with_argmax(diff::stack_columns(per_action)).values;
  return diff::mul(model.live, best);
}

/// V_0 = 0, V_1, ..., V_sweeps.
inline std::vector<Var> plan(Tape& tape, const EmpiricalModel& model, std::size_t sweeps) {
  std::vector<Var> values{tape.constant(Tensor(Shape{model.resultant_count()}, 0.0))};
  for (std::size_t k = 0; k < sweeps; ++k) values.push_back(value_iteration_sweep(model, values.back()));
  return values;
}

/// Query backup: Q(x, a) = kappa(z_x, Z_a) [R_a + gamma (1 - done_a) V(S'_a)].
/// `weights[a]` is the [B, n_a] kernel of the queries against Z_a. Returns [B, A].
inline Var query_backup(const EmpiricalModel& model, const std::vector<Var>& weights, Var values) {
  std::vector<Var> cols;
  for (std::size_t a = 0; a < model.action_count(); ++a)
    cols.push_back(diff::matvec(weights[a], backup_targets(model, values, a)));
  return diff::stack_columns(cols);
}

inline std::vector<Var> query_weights(const EmpiricalModel& model, Var query_latents, double temperature) {
  std::vector<Var> w;
  for (const Var& z : model.origin_latents) w.push_back(similarity_weights(query_latents, z, temperature));
  return w;
}

/// Q(s, a) for a batch of observations with `sweeps` = limit: limit - 1 sweeps
/// into V followed by the query backup. Returns [B, A].
inline Var q_values(Tape& tape, std::span<const ObservationPtr> queries, const EncoderParams& encoder,
                    const EpisodicStore& store, const PlannerConfig& cfg) {
  if (queries.empty()) throw std::invalid_argument("q_values: no queries");
  EmpiricalModel model = build_empirical_model(tape, store, encoder, cfg);
  std::vector<Var> values = plan(tape, model, cfg.sweeps - 1);
  Var z = diff::encode(tape, encoder, queries);
  return query_backup(model, query_weights(model, z, cfg.temperature), values.back());
}

inline std::vector<double> q_values(const Observation& observation, const EncoderParams& encoder,
                                    const EpisodicStore& store, const PlannerConfig& cfg) {
  Tape tape;
  const ObservationPtr q = std::make_shared<const Observation>(observation);
  const Var out = q_values(tape, std::span<const ObservationPtr>(&q, 1), encoder, store, cfg);
  return out.value().storage();
}

/// Planner with frozen encoder and store: latents and V_{K-1} are computed
/// once, each query then costs one encoder pass plus the kernel row.
class FrozenPlanner {
 public:
  FrozenPlanner(const EncoderParams& encoder, const EpisodicStore& store, const PlannerConfig& cfg)
      : encoder_(encoder), cfg_(cfg) {
    Tape tape;
    EmpiricalModel model = build_empirical_model(tape, store, encoder_, cfg_);
    std::vector<Var> values = plan(tape, model, cfg_.sweeps - 1);
    for (std::size_t a = 0; a < model.action_count(); ++a) {
      origin_latents_.push_back(model.origin_latents[a].value());
      targets_.push_back(backup_targets(model, values.back(), a).value());
    }
    resultant_values_ = values.back().value();
  }

  std::vector<double> q_values(const Observation& observation) const {
    Tape tape;
    const ObservationPtr q = std::make_shared<const Observation>(observation);
    Var z = diff::encode(tape, encoder_, std::span<const ObservationPtr>(&q, 1));
    std::vector<double> out;
    for (std::size_t a = 0; a < targets_.size(); ++a) {
      Var w = similarity_weights(z, tape.constant(origin_latents_[a]), cfg_.temperature);
      out.push_back(diff::matvec(w, tape.constant(targets_[a])).value()[0]);
    }
    return out;
  }

  /// Highest-valued action, lowest index on ties.
  std::size_t greedy_action(const Observation& observation) const {
    const auto q = q_values(observation);
    return static_cast<std::size_t>(std::max_element(q.begin(), q.end()) - q.begin());
  }

  const Tensor& resultant_values() const { return resultant_values_; }

 private:
  EncoderParams encoder_;
  PlannerConfig cfg_;
  std::vector<Tensor> origin_latents_;
  std::vector<Tensor> targets_;
  Tensor resultant_values_;
};

// ---------------------------------------------------------------------------
// Multi-horizon TD loss
// ---------------------------------------------------------------------------

struct LossResult {
  Var loss;
  std::vector<double> horizon_errors;  // mean squared TD error per horizon 1..K
  std::vector<Tensor> targets;         // y per horizon, [B] each
};

/// Averages K squared TD errors, one per planning horizon i = 1..K:
///   prediction  Q(s, a, E, i)
///   target      r                                    if terminal or i == 1
///               r + gamma max_a' Q(s', a', E, i - 1) otherwise
/// Targets are constants unless cfg.couple_targets is set. `fixed_targets`
/// replaces the computed targets with given values, which lets a
/// finite-difference check hold them still the way the backward pass does.
inline LossResult multi_horizon_loss(Tape& tape, std::span<const Transition> batch, const EncoderParams& encoder,
                                     const EpisodicStore& store, const PlannerConfig& cfg,
                                     const std::vector<Tensor>* fixed_targets = nullptr) {
  if (batch.empty()) throw std::invalid_argument("multi_horizon_loss: empty batch");
  store.validate();
  validate(cfg);
  const std::size_t B = batch.size(), A = store.action_count(), K = cfg.sweeps;
  if (fixed_targets && (fixed_targets->size() != K || (K > 0 && fixed_targets->front().shape() != Shape{B})))
    throw std::invalid_argument("multi_horizon_loss: fixed targets must be K vectors of batch length");

  std::vector<ObservationPtr> all;
  for (const auto& p : store.actions) all.insert(all.end(), p.origins.begin(), p.origins.end());
  for (const auto& p : store.actions) all.insert(all.end(), p.resultants.begin(), p.resultants.end());
  const std::size_t stored = all.size();
  for (const auto& t : batch) all.push_back(t.observation);
  for (const auto& t : batch) all.push_back(t.next_observation);
  Var z = diff::encode(tape, encoder, all);

  std::vector<Var> origins, resultants;
  std::size_t row = 0;
  for (const auto& p : store.actions) {
    origins.push_back(diff::slice_rows(z, row, p.size()));
    row += p.size();
  }
  for (const auto& p : store.actions) {
    resultants.push_back(diff::slice_rows(z, row, p.size()));
    row += p.size();
  }
  EmpiricalModel model = build_empirical_model(tape, store, origins, resultants, cfg);
  Var z_now = diff::slice_rows(z, stored, B);
  Var z_next = diff::slice_rows(z, stored + B, B);
  const std::vector<Var> w_now = query_weights(model, z_now, cfg.temperature);
  const std::vector<Var> w_next = K > 1 ? query_weights(model, z_next, cfg.temperature) : std::vector<Var>{};
  const std::vector<Var> values = plan(tape, model, K - 1);

  std::vector<std::size_t> actions(B);
  std::vector<double> rewards(B), cont(B);
  for (std::size_t j = 0; j < B; ++j) {
    if (batch[j].action >= A) throw std::out_of_range("multi_horizon_loss: action index out of range");
    actions[j] = batch[j].action;
    rewards[j] = batch[j].reward;
    cont[j] = batch[j].terminal ? 0.0 : cfg.gamma;
  }
  Var reward = tape.constant(Tensor::vector(rewards));
  Var continuation = tape.constant(Tensor::vector(cont));

  LossResult result;
  std::vector<Var> errors;
  Var prev_next_q;  // Q(s', ., E, i - 1)
  for (std::size_t i = 1; i <= K; ++i) {
    Var q_now = query_backup(model, w_now, values[i - 1]);
    Var prediction = diff::gather_columns(q_now, actions);
    Var target = reward;
    if (fixed_targets) {
      target = tape.constant((*fixed_targets)[i - 1]);
    } else if (i > 1) {
      Var best_next = diff::reduce_max_with_argmax(prev_next_q).values;
      if (cfg.couple_targets) {
        target = diff::add(reward, diff::mul(continuation, best_next));
      } else {
        Tensor y(Shape{B});
        for (std::size_t j = 0; j < B; ++j) y[j] = rewards[j] + cont[j] * best_next.value()[j];
        target = tape.constant(std::move(y));
      }
    }
    result.targets.push_back(target.value());
    Var err = diff::square(diff::sub(target, prediction));
    double se = 0.0;
    for (double v : err.value().values()) se += v;
    result.horizon_errors.push_back(se / static_cast<double>(B));
    errors.push_back(err);
    if (i < K) prev_next_q = query_backup(model, w_next, values[i - 1]);
  }
  result.loss = diff::mean(diff::concat_rows(errors));
  return result;
}

struct LossAndGradients {
  double loss = 0.0;
  std::vector<double> horizon_errors;
  Gradients gradients;
};

inline LossAndGradients multi_horizon_loss_and_gradients(std::span<const Transition> batch,
                                                         const EncoderParams& encoder, const EpisodicStore& store,
                                                         const PlannerConfig& cfg,
                                                         diff::Fault fault = diff::Fault::None) {
  Tape tape;
  tape.inject_fault(fault);
  LossResult r = multi_horizon_loss(tape, batch, encoder, store, cfg);
  LossAndGradients out;
  out.loss = r.loss.value().item();
  out.horizon_errors = std::move(r.horizon_errors);
  out.gradients = tape.backward(r.loss);
  if (out.gradients.empty())  // parameter-free encoder
    for (const auto& p : encoder.params.tensors()) out.gradients.emplace_back(p.shape(), 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Store construction
// ---------------------------------------------------------------------------

/// Uniform without-replacement sample of `per_action_count` transitions for
/// every action.
inline EpisodicStore subsample_store(std::span<const Transition> replay, std::size_t per_action_count,
                                     std::size_t n_actions, Rng& rng) {
  if (per_action_count == 0) throw std::invalid_argument("subsample_store: per_action_count must be positive");
  std::vector<std::vector<std::size_t>> by_action(n_actions);
  for (std::size_t i = 0; i < replay.size(); ++i) {
    if (replay[i].action >= n_actions) throw std::out_of_range("subsample_store: action index out of range");
    by_action[replay[i].action].push_back(i);
  }
  EpisodicStore store;
  store.actions.resize(n_actions);
  for (std::size_t a = 0; a < n_actions; ++a) {
    auto& idx = by_action[a];
    if (idx.size() < per_action_count)
      throw std::runtime_error("subsample_store: action " + std::to_string(a) + " has " + std::to_string(idx.size()) +
                               " transitions, " + std::to_string(per_action_count) + " required");
    for (std::size_t k = 0; k < per_action_count; ++k) {
      const std::size_t j = k + uniform_index(rng, idx.size() - k);
      std::swap(idx[k], idx[j]);
      store.actions[a].push(replay[idx[k]]);
    }
  }
  return store;
}

/// Store with exactly `per_pair` transitions for every (non-terminal state,
/// action) pair, gathered by uniform random rollouts. Throws if some pair is
/// still short after `step_budget` environment steps.
inline EpisodicStore evaluation_store(GraphWorldEnv& env, std::size_t per_pair, Rng& rng,
                                      std::size_t step_budget = 200000) {
  const TaskSpec& task = env.task();
  const std::size_t A = task.n_actions;
  std::vector<std::size_t> counts(task.n_states * A, 0);
  std::size_t missing = 0;
  for (std::size_t s = 0; s < task.n_states; ++s)
    if (!task.is_terminal(s)) missing += per_pair * A;
  std::vector<Transition> kept;
  kept.reserve(missing);
  std::size_t steps = 0;
  while (missing > 0) {
    if (steps >= step_budget)
      throw std::runtime_error("evaluation_store: " + std::to_string(missing) + " transitions still missing after " +
                               std::to_string(step_budget) + " steps");
    if (env.episode_over()) env.reset(rng);
    Transition t = env.step(uniform_index(rng, A), rng);
    ++steps;
    std::size_t& c = counts[t.state * A + t.action];
    if (c < per_pair) {
      ++c;
      --missing;
      kept.push_back(std::move(t));
    }
  }
  return EpisodicStore::from_transitions(kept, A);
}

}  // namespace devi
