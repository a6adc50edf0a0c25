#pragma once

// Ground-truth references: exact tabular value iteration, brute-force
// finite-horizon enumeration and a central finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "devi/diffkit/tape.hpp"
#include "devi/graphworld.hpp"

namespace devi::oracle {

struct TabularSolution {
  std::vector<double> v;  // final V, per state
  std::vector<double> q;  // final Q, [state * n_actions + action]
  std::vector<std::vector<double>> v_by_horizon;  // V_0 .. V_k
  std::vector<std::vector<double>> q_by_horizon;  // Q_0 .. Q_k (Q_0 = 0)
  std::size_t n_actions = kGraphActions;
  std::size_t sweeps = 0;

  double q_at(std::size_t s, std::size_t a) const { return q[s * n_actions + a]; }
  double q_at(std::size_t horizon, std::size_t s, std::size_t a) const {
    return q_by_horizon.at(horizon)[s * n_actions + a];
  }
};

struct StopRule {
  std::optional<std::size_t> horizon;  // fixed number of backups
  double tolerance = 1e-10;            // otherwise stop when |V_k+1 - V_k|_inf <= tolerance
  std::size_t max_sweeps = 100000;
};

/// Tabular Bellman operator. Terminal states are absorbing with value zero.
inline std::vector<double> bellman_backup(const TaskSpec& task, double gamma, const std::vector<double>& v,
                                          std::vector<double>* q_out = nullptr) {
  const std::size_t A = task.n_actions;
  std::vector<double> next(task.n_states, 0.0);
  std::vector<double> q(task.n_states * A, 0.0);
  for (std::size_t s = 0; s < task.n_states; ++s) {
    if (task.is_terminal(s)) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < A; ++a) {
      const std::size_t t = task.successor(s, a);
      const double value = task.reward(s, a) + (task.is_terminal(t) ? 0.0 : gamma * v[t]);
      q[s * A + a] = value;
      best = std::max(best, value);
    }
    next[s] = best;
  }
  if (q_out) *q_out = std::move(q);
  return next;
}

/// Synchronous value iteration from V_0 = 0.
inline TabularSolution exact_value_iteration(const TaskSpec& task, double gamma, const StopRule& rule = {}) {
  TabularSolution sol;
  sol.n_actions = task.n_actions;
  sol.v_by_horizon.emplace_back(task.n_states, 0.0);
  sol.q_by_horizon.emplace_back(task.n_states * task.n_actions, 0.0);
  const std::size_t limit = rule.horizon.value_or(rule.max_sweeps);
  for (std::size_t k = 0; k < limit; ++k) {
    std::vector<double> q;
    std::vector<double> v = bellman_backup(task, gamma, sol.v_by_horizon.back(), &q);
    double delta = 0.0;
    for (std::size_t s = 0; s < v.size(); ++s) delta = std::max(delta, std::abs(v[s] - sol.v_by_horizon.back()[s]));
    sol.v_by_horizon.push_back(std::move(v));
    sol.q_by_horizon.push_back(std::move(q));
    if (!rule.horizon && delta <= rule.tolerance) break;
  }
  sol.sweeps = sol.v_by_horizon.size() - 1;
  sol.v = sol.v_by_horizon.back();
  sol.q = sol.q_by_horizon.back();
  return sol;
}

/// Optimal discounted return over at most `horizon` steps from `state`.
inline double optimal_return(const TaskSpec& task, double gamma, std::size_t state, std::size_t horizon) {
  StopRule rule;
  rule.horizon = horizon;
  return exact_value_iteration(task, gamma, rule).v.at(state);
}

inline constexpr std::size_t kMaxBruteForceHorizon = 12;

struct BruteForceResult {
  double value = 0.0;
  std::size_t branches = 0;  // action sequences enumerated
};

/// Best discounted return over every action sequence of length `horizon` that
/// starts with `action`, found by enumerating all |A|^(horizon-1)
/// continuations and simulating each one.
inline BruteForceResult brute_force_q_detail(const TaskSpec& task, double gamma, std::size_t horizon,
                                             std::size_t state, std::size_t action) {
  if (horizon == 0) throw std::invalid_argument("brute_force_q: horizon must be >= 1");
  if (horizon > kMaxBruteForceHorizon)
    throw std::invalid_argument("brute_force_q: horizon " + std::to_string(horizon) + " exceeds limit " +
                                std::to_string(kMaxBruteForceHorizon));
  if (state >= task.n_states || action >= task.n_actions) throw std::out_of_range("brute_force_q: bad state/action");
  BruteForceResult out;
  if (task.is_terminal(state)) return out;
  const std::size_t A = task.n_actions;
  std::size_t count = 1;
  for (std::size_t i = 1; i < horizon; ++i) count *= A;
  out.value = -std::numeric_limits<double>::infinity();
  for (std::size_t code = 0; code < count; ++code) {
    std::size_t rest = code, s = state, a = action;
    double ret = 0.0, discount = 1.0;
    for (std::size_t t = 0; t < horizon; ++t) {
      if (t > 0) {
        a = rest % A;
        rest /= A;
      }
      ret += discount * task.reward(s, a);
      s = task.successor(s, a);
      if (task.is_terminal(s)) break;
      discount *= gamma;
    }
    out.value = std::max(out.value, ret);
    ++out.branches;
  }
  return out;
}

inline double brute_force_q(const TaskSpec& task, double gamma, std::size_t horizon, std::size_t state,
                            std::size_t action) {
  return brute_force_q_detail(task, gamma, horizon, state, action).value;
}

/// CSV rows "state,action,q_star".
inline void write_q_csv(std::ostream& os, const TabularSolution& sol) {
  os << "state,action,q_star\n";
  os.precision(17);
  for (std::size_t s = 0; s < sol.v.size(); ++s)
    for (std::size_t a = 0; a < sol.n_actions; ++a) os << s << ',' << a << ',' << sol.q_at(s, a) << '\n';
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

struct Coordinate {
  std::size_t tensor = 0;
  std::size_t index = 0;
};

/// Central differences (f(p + h e) - f(p - h e)) / 2h for each coordinate.
/// `params` is perturbed in place and restored bit-exactly.
inline std::vector<double> finite_difference_grad(const std::function<double(const diff::ParameterSet&)>& loss_fn,
                                                  diff::ParameterSet& params,
                                                  const std::vector<Coordinate>& coordinates, double step = 1e-5) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_grad: step must be positive");
  std::vector<double> out;
  out.reserve(coordinates.size());
  for (const auto& c : coordinates) {
    double& x = params[c.tensor][c.index];
    const double saved = x;
    x = saved + step;
    const double up = loss_fn(params);
    x = saved - step;
    const double down = loss_fn(params);
    x = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("finite_difference_grad: non-finite loss");
    out.push_back((up - down) / (2.0 * step));
  }
  return out;
}

/// Uniformly sampled (tensor, index) pairs, weighted by tensor size.
template <typename RngT>
std::vector<Coordinate> sample_coordinates(const diff::ParameterSet& params, std::size_t count, RngT& rng) {
  const std::size_t total = params.scalar_count();
  if (total == 0) throw std::invalid_argument("sample_coordinates: no parameters");
  std::vector<Coordinate> out;
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t flat = pick(rng), t = 0;
    while (flat >= params[t].size()) flat -= params[t++].size();
    out.push_back({t, flat});
  }
  return out;
}

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double tolerance = 0.0;
  double required_fraction = 0.0;
  Coordinate worst{};
  std::string worst_name;
  double worst_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  double pass_fraction() const { return checked ? static_cast<double>(passed) / static_cast<double>(checked) : 0.0; }
  bool ok() const { return checked > 0 && pass_fraction() >= required_fraction; }
};

inline GradCheckReport compare_gradients(const diff::ParameterSet& params, const diff::Gradients& analytic,
                                         const std::vector<Coordinate>& coordinates,
                                         const std::vector<double>& numeric, double tolerance,
                                         double required_fraction) {
  GradCheckReport r;
  r.tolerance = tolerance;
  r.required_fraction = required_fraction;
  r.worst_error = -1.0;
  for (std::size_t i = 0; i < coordinates.size(); ++i) {
    const auto& c = coordinates[i];
    const double a = analytic.at(c.tensor)[c.index];
    const double err = relative_error(a, numeric[i]);
    ++r.checked;
    if (err <= tolerance) ++r.passed;
    if (err > r.worst_error) {
      r.worst_error = err;
      r.worst = c;
      r.worst_name = params.name(c.tensor);
      r.worst_analytic = a;
      r.worst_numeric = numeric[i];
    }
  }
  return r;
}

}  // namespace devi::oracle
