#pragma once

// Replay, behaviour policy, training loops and the frozen-weight transfer
// evaluation.

#include <charconv>
#include <cmath>
#include <istream>
#include <functional>
#include <iomanip>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "devi/diffkit/adam.hpp"
#include "devi/dqn.hpp"
#include "devi/episodic.hpp"
#include "devi/graphworld.hpp"
#include "devi/oracle.hpp"
#include "devi/persistence.hpp"
#include "devi/random.hpp"

namespace devi {

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

/// Bounded FIFO of transitions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
    items_.reserve(std::min<std::size_t>(capacity, 1 << 20));
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool full() const { return items_.size() == capacity_; }

  void push(Transition t) {
    if (items_.size() < capacity_) {
      items_.push_back(std::move(t));
    } else {
      items_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
  }

  /// i-th oldest element.
  const Transition& operator[](std::size_t i) const { return items_[(head_ + i) % items_.size()]; }

  std::vector<Transition> contents() const {
    std::vector<Transition> out;
    out.reserve(items_.size());
    for (std::size_t i = 0; i < items_.size(); ++i) out.push_back((*this)[i]);
    return out;
  }

  /// Uniform sample with replacement.
  std::vector<Transition> sample(std::size_t n, Rng& rng) const {
    if (items_.empty()) throw std::runtime_error("ReplayBuffer: sample from empty buffer");
    std::vector<Transition> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(items_[uniform_index(rng, items_.size())]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<Transition> items_;
};

using Policy = std::function<std::size_t(const Observation&, Rng&)>;

inline Policy uniform_random_policy(std::size_t n_actions) {
  return [n_actions](const Observation&, Rng& rng) { return uniform_index(rng, n_actions); };
}

/// Appends exactly `steps` transitions, resetting on terminal or time limit.
inline void collect(GraphWorldEnv& env, const Policy& policy, std::size_t steps, ReplayBuffer& buffer, Rng& rng) {
  for (std::size_t i = 0; i < steps; ++i) {
    if (env.episode_over()) env.reset(rng);
    const std::size_t a = policy(*env.observation(), rng);
    buffer.push(env.step(a, rng));
  }
}

inline Rng data_stream(std::uint64_t seed) { return Rng(derive_seed(seed, streams::kData)); }

/// Fresh environment on `task` and a buffer filled by the uniform policy.
/// Both learners draw their data through this function.
inline ReplayBuffer fill_buffer(const TaskSpec& task, std::shared_ptr<const GlyphLibrary> library, std::size_t steps,
                                std::size_t capacity, Rng& data_rng) {
  GraphWorldEnv env(task, std::move(library));
  ReplayBuffer buffer(capacity);
  collect(env, uniform_random_policy(task.n_actions), steps, buffer, data_rng);
  return buffer;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct ReturnStats {
  std::size_t episodes = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double oracle_norm = 0.0;  // mean of return / optimal return from the same start
  std::vector<double> returns;
  std::vector<double> normalized;
};

using GreedyPolicy = std::function<std::size_t(const Observation&)>;

/// Runs `episodes` episodes with a deterministic policy and scores each
/// discounted return against the exact optimum over the same time limit.
inline ReturnStats evaluate_policy(const TaskSpec& task, std::shared_ptr<const GlyphLibrary> library,
                                   const GreedyPolicy& policy, std::size_t episodes, double gamma, Rng& rng) {
  if (episodes == 0) throw std::invalid_argument("evaluate_policy: episodes must be positive");
  oracle::StopRule rule;
  rule.horizon = task.time_limit();
  const auto optimum = oracle::exact_value_iteration(task, gamma, rule).v;
  GraphWorldEnv env(task, std::move(library));
  ReturnStats stats;
  stats.episodes = episodes;
  for (std::size_t e = 0; e < episodes; ++e) {
    env.reset(rng);
    const std::size_t start = env.state();
    double ret = 0.0, discount = 1.0;
    while (!env.episode_over()) {
      const Transition t = env.step(policy(*env.observation()), rng);
      ret += discount * t.reward;
      discount *= gamma;
    }
    if (!(optimum[start] > 0.0))
      throw std::logic_error("evaluate_policy: optimal return from start state is not positive");
    stats.returns.push_back(ret);
    stats.normalized.push_back(ret / optimum[start]);
  }
  double s = 0.0, sn = 0.0;
  for (std::size_t e = 0; e < episodes; ++e) {
    s += stats.returns[e];
    sn += stats.normalized[e];
  }
  stats.mean = s / static_cast<double>(episodes);
  stats.oracle_norm = sn / static_cast<double>(episodes);
  double var = 0.0;
  for (double r : stats.returns) var += (r - stats.mean) * (r - stats.mean);
  stats.stddev = episodes > 1 ? std::sqrt(var / static_cast<double>(episodes - 1)) : 0.0;
  return stats;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::string run_id;
  std::string phase;
  std::size_t step = 0;
  std::string task_prototype;
  std::uint64_t task_seed = 0;
  std::size_t env_steps = 0;  // environment steps taken so far, burn-in included
  std::optional<double> loss;
  std::optional<double> return_mean;
  std::optional<double> return_std;
  std::optional<double> oracle_norm;
  std::vector<double> horizon_errors;
};

using MetricsLog = std::vector<MetricsRow>;

inline constexpr const char* kMetricsHeader =
    "run_id,phase,step,task_prototype,task_seed,loss,return_mean,return_std,oracle_norm";

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << r.run_id << ',' << r.phase << ',' << r.step << ',' << r.task_prototype << ',' << r.task_seed << ','
     << format_optional(r.loss) << ',' << format_optional(r.return_mean) << ',' << format_optional(r.return_std)
     << ',' << format_optional(r.oracle_norm);
}

inline void write_metrics_csv(std::ostream& os, const MetricsLog& log) {
  os << kMetricsHeader << '\n';
  for (const auto& r : log) {
    write_metrics_row(os, r);
    os << '\n';
  }
}

/// Parses a metrics CSV written by `write_metrics_csv`. Throws on any schema
/// deviation.
inline MetricsLog read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("metrics csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw std::runtime_error("metrics csv: unexpected header '" + line + "'");
  MetricsLog log;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    const std::string where = "metrics csv line " + std::to_string(line_no);
    if (f.size() != 9) throw std::runtime_error(where + ": expected 9 fields, got " + std::to_string(f.size()));
    auto parse_u64 = [&](const std::string& text, const char* what) {
      std::uint64_t v = 0;
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
        throw std::runtime_error(where + ": bad " + what + " '" + text + "'");
      return v;
    };
    auto parse_opt = [&](const std::string& text, const char* what) -> std::optional<double> {
      if (text.empty()) return std::nullopt;
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size())
        throw std::runtime_error(where + ": bad " + what + " '" + text + "'");
      return v;
    };
    MetricsRow r;
    r.run_id = f[0];
    r.phase = f[1];
    r.step = parse_u64(f[2], "step");
    r.task_prototype = f[3];
    r.task_seed = parse_u64(f[4], "task_seed");
    r.loss = parse_opt(f[5], "loss");
    r.return_mean = parse_opt(f[6], "return_mean");
    r.return_std = parse_opt(f[7], "return_std");
    r.oracle_norm = parse_opt(f[8], "oracle_norm");
    log.push_back(std::move(r));
  }
  return log;
}

/// Per-step detail not carried by the metrics schema: environment steps and
/// the per-horizon TD errors.
inline void write_detail_csv(std::ostream& os, const MetricsLog& log) {
  std::size_t k = 0;
  for (const auto& r : log) k = std::max(k, r.horizon_errors.size());
  os << "run_id,phase,step,env_steps";
  for (std::size_t i = 1; i <= k; ++i) os << ",horizon_" << i;
  os << '\n';
  for (const auto& r : log) {
    os << r.run_id << ',' << r.phase << ',' << r.step << ',' << r.env_steps;
    for (std::size_t i = 0; i < k; ++i) os << ',' << (i < r.horizon_errors.size() ? format_number(r.horizon_errors[i]) : "");
    os << '\n';
  }
}

/// Serialises appends from concurrent workers.
class MetricsSink {
 public:
  void append(MetricsLog rows) {
    std::lock_guard lock(mutex_);
    for (auto& r : rows) rows_.push_back(std::move(r));
  }
  MetricsLog rows() const {
    std::lock_guard lock(mutex_);
    return rows_;
  }

 private:
  mutable std::mutex mutex_;
  MetricsLog rows_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainSchedule {
  std::size_t burn_in = 1000;
  std::size_t minibatch = 100;
  std::size_t minibatches = 2000;
  std::size_t task_switch_interval = 1;  // training steps per task; 1 switches every step
  bool interleave_episodes = false;      // switch when the current episode ends instead
  std::size_t store_per_action = 50;
  std::size_t replay_capacity = 100000;
  std::size_t target_sync = 100;
  bool double_dqn = false;
  std::size_t eval_every = 50;
  std::size_t eval_episodes = 100;
  std::optional<double> stop_at_oracle_norm;
  std::uint64_t seed = 1;
  diff::AdamConfig adam;
  PlannerConfig planner;
  std::string run_id = "run";
};

inline void validate(const TrainSchedule& s) {
  if (s.minibatch == 0) throw std::invalid_argument("schedule: minibatch must be positive");
  if (s.burn_in < s.minibatch) throw std::invalid_argument("schedule: burn_in must be >= minibatch");
  if (s.task_switch_interval == 0) throw std::invalid_argument("schedule: task_switch_interval must be positive");
  if (s.store_per_action == 0) throw std::invalid_argument("schedule: store_per_action must be positive");
  if (s.target_sync == 0) throw std::invalid_argument("schedule: target_sync must be positive");
  if (s.replay_capacity < s.minibatch) throw std::invalid_argument("schedule: replay_capacity must be >= minibatch");
  validate(s.planner);
}

/// Seed of the k-th task drawn during training.
inline std::uint64_t training_task_seed(std::uint64_t run_seed, std::size_t k) {
  return derive_seed(run_seed, streams::kTask, k);
}

using TaskSampler = std::function<TaskSpec(std::uint64_t task_seed)>;

struct DeviTrainResult {
  EncoderParams encoder;
  MetricsLog log;
  std::size_t skipped_updates = 0;
};

using BufferObserver = std::function<void(std::size_t step, const ReplayBuffer&)>;

/// Interleaved multi-task training. Every `task_switch_interval` steps (or at
/// the end of each episode with `interleave_episodes`) a fresh task is drawn
/// and its buffer burned in with the uniform policy; otherwise one more
/// environment step is collected. Each step then subsamples a store,
/// draws a minibatch and takes one ADAM step on the multi-horizon loss.
inline DeviTrainResult train_devi(const TaskSampler& sampler, std::shared_ptr<const GlyphLibrary> library,
                                  const TrainSchedule& schedule, EncoderParams encoder,
                                  const BufferObserver& observer = {}) {
  validate(schedule);
  DeviTrainResult result;
  Rng data_rng = data_stream(schedule.seed);
  Rng store_rng(derive_seed(schedule.seed, streams::kStore));
  Rng batch_rng(derive_seed(schedule.seed, streams::kBatch));
  diff::AdamState adam;
  std::optional<TaskSpec> task;
  std::optional<GraphWorldEnv> env;
  std::optional<ReplayBuffer> buffer;
  std::size_t tasks_drawn = 0, env_steps = 0;

  for (std::size_t step = 0; step < schedule.minibatches; ++step) {
    const bool switch_now = schedule.interleave_episodes ? (!env || env->episode_over())
                                                         : step % schedule.task_switch_interval == 0;
    if (switch_now) {
      task = sampler(training_task_seed(schedule.seed, tasks_drawn++));
      env.emplace(*task, library);
      buffer.emplace(std::max(schedule.burn_in, schedule.minibatch));
      collect(*env, uniform_random_policy(task->n_actions), schedule.burn_in, *buffer, data_rng);
      env_steps += schedule.burn_in;
      // the burn-in rarely ends on an episode boundary; start the episode that
      // decides the next switch afresh
      if (schedule.interleave_episodes) env->reset(data_rng);
    } else {
      collect(*env, uniform_random_policy(task->n_actions), 1, *buffer, data_rng);
      ++env_steps;
    }
    if (observer) observer(step, *buffer);

    const std::vector<Transition> replay = buffer->contents();
    const EpisodicStore store = subsample_store(replay, schedule.store_per_action, task->n_actions, store_rng);
    const std::vector<Transition> batch = buffer->sample(schedule.minibatch, batch_rng);
    LossAndGradients lg = multi_horizon_loss_and_gradients(batch, encoder, store, schedule.planner);
    if (!diff::adam_step(encoder.params, lg.gradients, adam, schedule.adam)) ++result.skipped_updates;

    MetricsRow row;
    row.run_id = schedule.run_id;
    row.phase = "train";
    row.step = step + 1;
    row.task_prototype = to_string(task->prototype);
    row.task_seed = task->seed;
    row.env_steps = env_steps;
    row.loss = lg.loss;
    row.horizon_errors = std::move(lg.horizon_errors);
    result.log.push_back(std::move(row));
  }
  result.encoder = std::move(encoder);
  return result;
}

struct DqnTrainResult {
  dqn::DqnParams params;
  MetricsLog log;
  std::size_t syncs = 0;
  std::size_t gradient_steps = 0;
  std::size_t sample_evaluations = 0;
  std::optional<std::size_t> reached_at;  // first evaluated step meeting stop_at_oracle_norm
  std::size_t skipped_updates = 0;
};

inline ReturnStats evaluate_dqn(const dqn::DqnParams& params, const TaskSpec& task,
                                std::shared_ptr<const GlyphLibrary> library, std::size_t episodes, double gamma,
                                Rng& rng) {
  return evaluate_policy(task, std::move(library),
                         [&params](const Observation& o) { return dqn::greedy_action(params, o); }, episodes, gamma,
                         rng);
}

/// Trains a Q-network on one task from a buffer pre-filled to capacity.
/// Greedy returns are logged every `eval_every` minibatches (and at step 0).
inline DqnTrainResult train_dqn(const TaskSpec& task, std::shared_ptr<const GlyphLibrary> library,
                                const TrainSchedule& schedule, dqn::DqnParams params,
                                const std::string& phase = "train") {
  validate(schedule);
  DqnTrainResult result;
  Rng data_rng = data_stream(schedule.seed);
  Rng batch_rng(derive_seed(schedule.seed, streams::kBatch));
  const ReplayBuffer buffer = fill_buffer(task, library, schedule.replay_capacity, schedule.replay_capacity, data_rng);
  dqn::TargetNetwork target = dqn::make_target(params);
  diff::AdamState adam;
  const dqn::TdConfig td{schedule.planner.gamma, schedule.double_dqn};

  auto log_eval = [&](std::size_t step) {
    Rng eval_rng(derive_seed(schedule.seed, streams::kEval, step));
    const ReturnStats stats = evaluate_dqn(params, task, library, schedule.eval_episodes, td.gamma, eval_rng);
    MetricsRow row;
    row.run_id = schedule.run_id;
    row.phase = phase;
    row.step = step;
    row.task_prototype = to_string(task.prototype);
    row.task_seed = task.seed;
    row.env_steps = schedule.replay_capacity;
    if (!result.log.empty() && result.log.back().step == step) row.loss = result.log.back().loss;
    row.return_mean = stats.mean;
    row.return_std = stats.stddev;
    row.oracle_norm = stats.oracle_norm;
    if (!result.log.empty() && result.log.back().step == step)
      result.log.back() = row;
    else
      result.log.push_back(row);
    if (schedule.stop_at_oracle_norm && !result.reached_at && stats.oracle_norm >= *schedule.stop_at_oracle_norm)
      result.reached_at = step;
  };

  if (schedule.eval_every > 0) log_eval(0);
  for (std::size_t m = 1; m <= schedule.minibatches && !result.reached_at; ++m) {
    const std::vector<Transition> batch = buffer.sample(schedule.minibatch, batch_rng);
    dqn::TdLossAndGradients lg = dqn::dqn_loss_and_gradients(batch, params, target.params, td);
    if (!diff::adam_step(params.net.params, lg.gradients, adam, schedule.adam)) ++result.skipped_updates;
    ++result.gradient_steps;
    result.sample_evaluations += batch.size();
    ++target.staleness;
    if (m % schedule.target_sync == 0) dqn::sync_target(params, target);

    MetricsRow row;
    row.run_id = schedule.run_id;
    row.phase = phase;
    row.step = m;
    row.task_prototype = to_string(task.prototype);
    row.task_seed = task.seed;
    row.env_steps = schedule.replay_capacity;
    row.loss = lg.loss;
    result.log.push_back(std::move(row));
    if (schedule.eval_every > 0 && m % schedule.eval_every == 0) log_eval(m);
  }
  result.syncs = target.syncs;
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Transfer
// ---------------------------------------------------------------------------

struct TransferProtocol {
  std::size_t store_per_pair = 5;
  std::size_t episodes = 100;
  std::size_t step_budget = 200000;
  PlannerConfig planner;
  std::uint64_t seed = 1;
};

struct TransferResult {
  ReturnStats stats;
  std::uint64_t hash_before = 0;
  std::uint64_t hash_after = 0;
  std::size_t gradient_updates = 0;
  std::size_t store_size = 0;

  bool frozen() const { return hash_before == hash_after && gradient_updates == 0; }
};

/// Evaluation store for a transfer task, filled by random rollouts.
inline EpisodicStore transfer_store(const TaskSpec& task, std::shared_ptr<const GlyphLibrary> library,
                                    const TransferProtocol& protocol) {
  Rng store_rng(derive_seed(protocol.seed, streams::kStore, task.seed));
  GraphWorldEnv env(task, std::move(library));
  return evaluation_store(env, protocol.store_per_pair, store_rng, protocol.step_budget);
}

/// One-shot evaluation with frozen weights against a given store.
inline TransferResult transfer_eval_devi(const EncoderParams& encoder, const EpisodicStore& store,
                                         const TaskSpec& task, std::shared_ptr<const GlyphLibrary> library,
                                         const TransferProtocol& protocol) {
  TransferResult r;
  r.hash_before = diff::content_hash(encoder_checkpoint(encoder));
  r.store_size = store.total();
  const FrozenPlanner planner(encoder, store, protocol.planner);
  Rng eval_rng(derive_seed(protocol.seed, streams::kEval, task.seed));
  r.stats = evaluate_policy(task, std::move(library),
                            [&planner](const Observation& o) { return planner.greedy_action(o); },
                            protocol.episodes, protocol.planner.gamma, eval_rng);
  r.hash_after = diff::content_hash(encoder_checkpoint(encoder));
  return r;
}

/// One-shot evaluation with frozen weights: only the episodic store is
/// populated from the new task.
inline TransferResult transfer_eval_devi(const EncoderParams& encoder, const TaskSpec& task,
                                         std::shared_ptr<const GlyphLibrary> library,
                                         const TransferProtocol& protocol) {
  return transfer_eval_devi(encoder, transfer_store(task, library, protocol), task, library, protocol);
}

inline TransferResult transfer_eval_dqn(const dqn::DqnParams& params, const TaskSpec& task,
                                        std::shared_ptr<const GlyphLibrary> library,
                                        const TransferProtocol& protocol) {
  TransferResult r;
  r.hash_before = diff::content_hash(dqn_checkpoint(params));
  Rng eval_rng(derive_seed(protocol.seed, streams::kEval, task.seed));
  r.stats = evaluate_dqn(params, task, std::move(library), protocol.episodes, protocol.planner.gamma, eval_rng);
  r.hash_after = diff::content_hash(dqn_checkpoint(params));
  return r;
}

}  // namespace devi
