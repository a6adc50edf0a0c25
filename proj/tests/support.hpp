#pragma once

// Fixtures shared by the test binaries.

#include <memory>
#include <vector>

#include "devi/episodic.hpp"
#include "devi/graphworld.hpp"

namespace devi::testing {

inline std::shared_ptr<const GlyphLibrary> shared_library(std::uint64_t seed = 7, std::size_t classes = 600) {
  return std::make_shared<const GlyphLibrary>(make_procedural_library({.classes = classes, .seed = seed}));
}

inline diff::EncoderParams identity_encoder() {
  diff::EncoderParams enc;
  enc.kind = diff::EncoderKind::Identity;
  return enc;
}

/// `per_pair` copies of every (non-terminal state, action) transition with
/// one-hot observations: state s lights pixel s, so raw pixels are an
/// orthonormal embedding.
inline std::vector<Transition> tabular_transitions(const TaskSpec& task, std::size_t per_pair = 1) {
  std::vector<ObservationPtr> obs;
  for (std::size_t s = 0; s < task.n_states; ++s) obs.push_back(std::make_shared<const Observation>(Observation::one_hot(s)));
  std::vector<Transition> out;
  for (std::size_t s = 0; s < task.n_states; ++s) {
    if (task.is_terminal(s)) continue;
    for (std::size_t a = 0; a < task.n_actions; ++a)
      for (std::size_t k = 0; k < per_pair; ++k) {
        const StepOutcome o = step(task, s, a);
        out.push_back({obs[s], a, o.reward, obs[o.next_state], o.terminal, s, o.next_state});
      }
  }
  return out;
}

inline EpisodicStore tabular_store(const TaskSpec& task, std::size_t per_pair = 1) {
  return EpisodicStore::from_transitions(tabular_transitions(task, per_pair), task.n_actions);
}

inline ObservationPtr one_hot(std::size_t s) { return std::make_shared<const Observation>(Observation::one_hot(s)); }

}  // namespace devi::testing
