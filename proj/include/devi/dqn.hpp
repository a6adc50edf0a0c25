#pragma once

// Parametric Q-network baseline: encoder + linear head of width |A|, trained
// on one-step TD targets from a periodically synced target network.

#include <algorithm>
#include <span>
#include <stdexcept>
#include <vector>

#include "devi/diffkit/encoder.hpp"
#include "devi/diffkit/tape.hpp"
#include "devi/graphworld.hpp"

namespace devi::dqn {

using diff::EncoderParams;
using diff::Tape;
using diff::Tensor;
using diff::Var;

/// Encoder tensors followed by "head.w" [latent, A] and "head.b" [A].
struct DqnParams {
  EncoderParams net;
  std::size_t n_actions = kGraphActions;

  friend bool operator==(const DqnParams&, const DqnParams&) = default;
};

inline DqnParams build_dqn(diff::EncoderKind kind, std::size_t n_actions, Rng& rng) {
  DqnParams p;
  p.n_actions = n_actions;
  p.net = diff::build_encoder(kind, rng);
  const std::size_t latent = diff::latent_dim(kind);
  p.net.params.add("head.w", diff::fan_in_uniform({latent, n_actions}, latent, rng));
  p.net.params.add("head.b", Tensor(diff::Shape{n_actions}));
  return p;
}

inline DqnParams build_dqn(diff::EncoderKind kind, std::size_t n_actions, std::uint64_t seed) {
  Rng rng(derive_seed(seed, streams::kInit));
  return build_dqn(kind, n_actions, rng);
}

/// [B, A] action values.
inline Var dqn_q(Tape& tape, const DqnParams& p, std::span<const ObservationPtr> batch) {
  if (batch.empty()) throw std::invalid_argument("dqn_q: empty batch");
  Var z = diff::encode(tape, p.net, batch);
  const std::size_t head = p.net.encoder_tensors;
  return diff::dense(z, tape.parameter(p.net.params, head), tape.parameter(p.net.params, head + 1));
}

inline std::vector<double> dqn_q(const DqnParams& p, const Observation& observation) {
  Tape tape;
  const ObservationPtr q = std::make_shared<const Observation>(observation);
  return dqn_q(tape, p, std::span<const ObservationPtr>(&q, 1)).value().storage();
}

inline std::size_t greedy_action(const DqnParams& p, const Observation& observation) {
  const auto q = dqn_q(p, observation);
  return static_cast<std::size_t>(std::max_element(q.begin(), q.end()) - q.begin());
}

struct TargetNetwork {
  DqnParams params;
  std::size_t staleness = 0;  // optimizer steps since the last sync
  std::size_t syncs = 0;
};

inline TargetNetwork make_target(const DqnParams& online) { return TargetNetwork{online, 0, 0}; }

inline void sync_target(const DqnParams& online, TargetNetwork& target) {
  if (online.net.params.size() != target.params.net.params.size())
    throw std::invalid_argument("sync_target: parameter layout mismatch");
  for (std::size_t i = 0; i < online.net.params.size(); ++i)
    if (online.net.params[i].shape() != target.params.net.params[i].shape())
      throw std::invalid_argument("sync_target: shape mismatch for " + online.net.params.name(i));
  target.params = online;
  target.staleness = 0;
  ++target.syncs;
}

struct TdConfig {
  double gamma = 0.9;
  bool double_dqn = false;
};

/// mean_j (Q(s_j, a_j) - (r_j + gamma (1 - terminal_j) max_a' Q_target(s'_j, a')))^2.
/// With double_dqn the online network picks a' and the target network values it.
/// Gradients flow through the online network only.
inline Var dqn_td_loss(Tape& tape, std::span<const Transition> batch, const DqnParams& online,
                       const DqnParams& target, const TdConfig& cfg = {}) {
  if (batch.empty()) throw std::invalid_argument("dqn_td_loss: empty batch");
  const std::size_t B = batch.size(), A = online.n_actions;
  std::vector<ObservationPtr> now, next;
  std::vector<std::size_t> actions(B);
  for (std::size_t j = 0; j < B; ++j) {
    if (batch[j].action >= A) throw std::out_of_range("dqn_td_loss: action index out of range");
    now.push_back(batch[j].observation);
    next.push_back(batch[j].next_observation);
    actions[j] = batch[j].action;
  }

  Tensor next_target;
  {
    Tape side;
    next_target = dqn_q(side, target, next).value();
  }
  std::vector<std::size_t> pick(B, 0);
  if (cfg.double_dqn) {
    Tape side;
    const Tensor next_online = dqn_q(side, online, next).value();
    for (std::size_t j = 0; j < B; ++j)
      for (std::size_t a = 1; a < A; ++a)
        if (next_online.at(j, a) > next_online.at(j, pick[j])) pick[j] = a;
  } else {
    for (std::size_t j = 0; j < B; ++j)
      for (std::size_t a = 1; a < A; ++a)
        if (next_target.at(j, a) > next_target.at(j, pick[j])) pick[j] = a;
  }
  Tensor y(diff::Shape{B});
  for (std::size_t j = 0; j < B; ++j)
    y[j] = batch[j].reward + (batch[j].terminal ? 0.0 : cfg.gamma * next_target.at(j, pick[j]));

  Var prediction = diff::gather_columns(dqn_q(tape, online, now), actions);
  return diff::mean(diff::square(diff::sub(prediction, tape.constant(std::move(y)))));
}

struct TdLossAndGradients {
  double loss = 0.0;
  diff::Gradients gradients;
};

inline TdLossAndGradients dqn_loss_and_gradients(std::span<const Transition> batch, const DqnParams& online,
                                                 const DqnParams& target, const TdConfig& cfg = {},
                                                 diff::Fault fault = diff::Fault::None) {
  Tape tape;
  tape.inject_fault(fault);
  Var loss = dqn_td_loss(tape, batch, online, target, cfg);
  return {loss.value().item(), tape.backward(loss)};
}

}  // namespace devi::dqn
