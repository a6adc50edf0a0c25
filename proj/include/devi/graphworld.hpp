#pragma once

// Graph-world task domain: small deterministic MDPs whose hidden states are
// only visible through noisy 28x28 glyph images.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "devi/random.hpp"

namespace devi {

inline constexpr std::size_t kImageSide = 28;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kGraphActions = 2;

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// A 28x28 grayscale image. Pixels are stored as 8-bit levels; the public
/// value of a pixel is level / 255, always within [0, 1].
class Observation {
 public:
  using Levels = std::array<std::uint8_t, kImagePixels>;

  Observation() : levels_{} {}
  explicit Observation(const Levels& levels) : levels_(levels) {}

  double pixel(std::size_t index) const { return levels_.at(index) / 255.0; }
  double at(std::size_t row, std::size_t col) const {
    return pixel(row * kImageSide + col);
  }
  std::uint8_t level(std::size_t index) const { return levels_.at(index); }
  const Levels& levels() const { return levels_; }

  /// Image with a single lit pixel; gives exactly orthogonal raw embeddings
  /// for tabular experiments.
  static Observation one_hot(std::size_t index) {
    if (index >= kImagePixels) throw std::out_of_range("one_hot: index beyond image size");
    Levels levels{};
    levels[index] = 255;
    return Observation(levels);
  }

  std::size_t hamming_distance(const Observation& other) const {
    std::size_t count = 0;
    for (std::size_t i = 0; i < kImagePixels; ++i) count += levels_[i] != other.levels_[i];
    return count;
  }

  friend bool operator==(const Observation&, const Observation&) = default;

 private:
  Levels levels_;
};

using ObservationPtr = std::shared_ptr<const Observation>;

// ---------------------------------------------------------------------------
// Glyph library
// ---------------------------------------------------------------------------

enum class GlyphSplit { Train, Test };

inline std::string to_string(GlyphSplit split) {
  return split == GlyphSplit::Train ? "train" : "test";
}

inline GlyphSplit parse_split(std::string_view name) {
  if (name == "train") return GlyphSplit::Train;
  if (name == "test") return GlyphSplit::Test;
  throw std::invalid_argument("unknown glyph split '" + std::string(name) + "'");
}

struct GlyphLibrary {
  std::vector<Observation> prototypes;
  /// Optional per-class sample images (real datasets). Empty for procedural
  /// libraries, in which case observations are noisy prototypes.
  std::vector<std::vector<Observation>> samples;
  std::vector<std::size_t> train_classes;
  std::vector<std::size_t> test_classes;
  double noise_rate = 0.05;

  std::size_t class_count() const { return prototypes.size(); }

  const std::vector<std::size_t>& classes(GlyphSplit split) const {
    return split == GlyphSplit::Train ? train_classes : test_classes;
  }

  bool splits_disjoint() const {
    std::vector<std::size_t> a = train_classes, b = test_classes, common;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    return common.empty();
  }
};

namespace detail {

inline void assign_splits(GlyphLibrary& library, double test_fraction) {
  if (test_fraction < 0.0 || test_fraction > 1.0)
    throw std::invalid_argument("test_fraction must lie in [0, 1]");
  const std::size_t n = library.class_count();
  const auto n_test = static_cast<std::size_t>(static_cast<double>(n) * test_fraction + 0.5);
  library.train_classes.clear();
  library.test_classes.clear();
  for (std::size_t c = 0; c < n; ++c)
    (c < n - n_test ? library.train_classes : library.test_classes).push_back(c);
}

}  // namespace detail

struct ProceduralGlyphOptions {
  std::size_t classes = 1600;
  double test_fraction = 0.25;
  double ink_density = 0.5;
  double noise_rate = 0.05;
  std::uint64_t seed = 0;
};

/// Stand-in for a character dataset: every class is an independent random
/// binary image. Train classes come first, held-out classes last.
inline GlyphLibrary make_procedural_library(const ProceduralGlyphOptions& options = {}) {
  if (options.classes == 0) throw std::invalid_argument("procedural library needs at least one class");
  if (options.noise_rate < 0.0 || options.noise_rate > 1.0)
    throw std::invalid_argument("noise_rate must lie in [0, 1]");
  GlyphLibrary library;
  library.noise_rate = options.noise_rate;
  library.prototypes.reserve(options.classes);
  Rng rng(derive_seed(options.seed, streams::kGlyph));
  std::bernoulli_distribution ink(options.ink_density);
  for (std::size_t c = 0; c < options.classes; ++c) {
    Observation::Levels levels{};
    for (auto& v : levels) v = ink(rng) ? 255 : 0;
    library.prototypes.emplace_back(levels);
  }
  detail::assign_splits(library, options.test_fraction);
  return library;
}

/// Parses one binary PGM (P5) image of size 28x28. Levels are rescaled so that
/// maxval maps to 255.
inline Observation parse_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) -> long {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') ++pos;
    if (start == pos) throw std::runtime_error(std::string("pgm: malformed header, expected ") + what);
    return std::stol(std::string(bytes.substr(start, pos - start)));
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw std::runtime_error("pgm: malformed header, magic is not P5");
  pos = 2;
  const long width = read_int("width");
  const long height = read_int("height");
  const long maxval = read_int("maxval");
  if (width != static_cast<long>(kImageSide) || height != static_cast<long>(kImageSide))
    throw std::runtime_error("pgm: wrong dimensions " + std::to_string(width) + "x" +
                             std::to_string(height) + ", expected 28x28");
  if (maxval <= 0 || maxval > 255) throw std::runtime_error("pgm: malformed header, unsupported maxval");
  if (pos >= bytes.size()) throw std::runtime_error("pgm: truncated header");
  ++pos;  // single whitespace byte before the raster
  if (bytes.size() - pos < kImagePixels) throw std::runtime_error("pgm: truncated raster");

  Observation::Levels levels{};
  for (std::size_t i = 0; i < kImagePixels; ++i) {
    const auto raw = static_cast<unsigned char>(bytes[pos + i]);
    if (raw > maxval) throw std::runtime_error("pgm: pixel exceeds maxval");
    levels[i] = static_cast<std::uint8_t>((raw * 255 + maxval / 2) / maxval);
  }
  return Observation(levels);
}

inline Observation read_pgm_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pgm: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_pgm(bytes);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string(e.what()) + " (" + path.string() + ")");
  }
}

/// Loads a dataset laid out as one subdirectory per class holding .pgm files.
/// Classes are indexed in lexicographic directory order; the first sample of
/// each class doubles as its prototype.
inline GlyphLibrary load_pgm_directory(const std::filesystem::path& root,
                                       double test_fraction = 0.25, double noise_rate = 0.0) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("pgm: not a directory: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw std::runtime_error("pgm: no class directories under " + root.string());

  GlyphLibrary library;
  library.noise_rate = noise_rate;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".pgm") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("pgm: empty class directory " + dir.string());
    std::vector<Observation> images;
    images.reserve(files.size());
    for (const auto& f : files) images.push_back(read_pgm_file(f));
    library.prototypes.push_back(images.front());
    library.samples.push_back(std::move(images));
  }
  detail::assign_splits(library, test_fraction);
  return library;
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

enum class Prototype { Ring, HardRing, Tree };

inline std::string to_string(Prototype p) {
  switch (p) {
    case Prototype::Ring: return "ring";
    case Prototype::HardRing: return "hard_ring";
    case Prototype::Tree: return "tree";
  }
  throw std::invalid_argument("unknown prototype");
}

inline Prototype parse_prototype(std::string_view name) {
  if (name == "ring") return Prototype::Ring;
  if (name == "hard_ring") return Prototype::HardRing;
  if (name == "tree") return Prototype::Tree;
  throw std::invalid_argument("unknown prototype '" + std::string(name) + "'");
}

/// Sizes and reward magnitudes of the three prototypes.
struct TaskOptions {
  std::size_t ring_states = 10;
  std::size_t hard_ring_states = 15;
  std::size_t tree_depth = 5;  // root at depth 0, so 2^(depth+1) - 1 states
  double ring_goal_reward = 1.0;
  double hard_ring_penalty = -1.0;
  double hard_ring_bonus = 0.1;
  double tree_bad_leaf = -1.0;
  double tree_good_leaf = 1.0;
};

/// Ground-truth deterministic MDP plus the state -> glyph class mapping.
struct TaskSpec {
  Prototype prototype = Prototype::Ring;
  std::size_t n_states = 0;
  std::size_t n_actions = kGraphActions;
  std::vector<std::size_t> transitions;  // [state * n_actions + action]
  std::vector<double> rewards;           // [state * n_actions + action]
  std::vector<std::size_t> terminal_states;
  std::vector<std::size_t> start_states;
  std::vector<std::size_t> class_assignment;
  std::vector<std::size_t> action_permutation;  // index -> semantic action
  std::uint64_t seed = 0;
  GlyphSplit split = GlyphSplit::Train;

  std::size_t successor(std::size_t s, std::size_t a) const { return transitions.at(s * n_actions + a); }
  double reward(std::size_t s, std::size_t a) const { return rewards.at(s * n_actions + a); }
  bool is_terminal(std::size_t s) const {
    return std::find(terminal_states.begin(), terminal_states.end(), s) != terminal_states.end();
  }
  std::size_t time_limit() const { return 4 * n_states; }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

namespace detail {

inline std::uint64_t task_stream(Prototype p, GlyphSplit split) {
  return (static_cast<std::uint64_t>(p) + 1) * 16 + static_cast<std::uint64_t>(split);
}

inline void fill_ring(TaskSpec& task, std::size_t n) {
  // semantic action 0 moves clockwise (+1), 1 counterclockwise (-1)
  task.n_states = n;
  task.transitions.assign(n * kGraphActions, 0);
  task.rewards.assign(n * kGraphActions, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t a = 0; a < kGraphActions; ++a) {
      const bool clockwise = task.action_permutation[a] == 0;
      task.transitions[s * kGraphActions + a] = clockwise ? (s + 1) % n : (s + n - 1) % n;
    }
  }
}

inline void reward_entries_into(TaskSpec& task, std::size_t target, double value) {
  for (std::size_t s = 0; s < task.n_states; ++s)
    for (std::size_t a = 0; a < task.n_actions; ++a)
      if (task.successor(s, a) == target && s != target) task.rewards[s * task.n_actions + a] = value;
}

}  // namespace detail

/// Draws a task of the given prototype. Pure function of its arguments.
inline TaskSpec make_task(Prototype prototype, std::uint64_t seed, GlyphSplit split,
                          const GlyphLibrary& library, const TaskOptions& options = {}) {
  TaskSpec task;
  task.prototype = prototype;
  task.seed = seed;
  task.split = split;
  Rng rng(derive_seed(seed, streams::kTask, detail::task_stream(prototype, split)));

  task.action_permutation = {0, 1};
  if (std::bernoulli_distribution(0.5)(rng)) std::swap(task.action_permutation[0], task.action_permutation[1]);

  switch (prototype) {
    case Prototype::Ring: {
      if (options.ring_states < 3) throw std::invalid_argument("ring needs at least 3 states");
      detail::fill_ring(task, options.ring_states);
      const std::size_t goal = uniform_index(rng, task.n_states);
      detail::reward_entries_into(task, goal, options.ring_goal_reward);
      task.terminal_states = {goal};
      break;
    }
    case Prototype::HardRing: {
      if (options.hard_ring_states < 4) throw std::invalid_argument("hard ring needs at least 4 states");
      detail::fill_ring(task, options.hard_ring_states);
      const std::size_t trap = uniform_index(rng, task.n_states);
      std::size_t bonus = uniform_index(rng, task.n_states - 1);
      if (bonus >= trap) ++bonus;
      detail::reward_entries_into(task, trap, options.hard_ring_penalty);
      detail::reward_entries_into(task, bonus, options.hard_ring_bonus);
      task.terminal_states = {trap};
      break;
    }
    case Prototype::Tree: {
      if (options.tree_depth < 1 || options.tree_depth > 8) throw std::invalid_argument("tree depth must be in [1, 8]");
      const std::size_t n = (std::size_t{1} << (options.tree_depth + 1)) - 1;
      const std::size_t first_leaf = (n - 1) / 2;
      task.n_states = n;
      task.transitions.assign(n * kGraphActions, 0);
      task.rewards.assign(n * kGraphActions, 0.0);
      const std::size_t good_leaf = first_leaf + uniform_index(rng, n - first_leaf);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t a = 0; a < kGraphActions; ++a) {
          // leaves self-loop; they are terminal and never stepped from
          const std::size_t child = s < first_leaf ? 2 * s + 1 + task.action_permutation[a] : s;
          task.transitions[s * kGraphActions + a] = child;
          if (s < first_leaf && child >= first_leaf)
            task.rewards[s * kGraphActions + a] = child == good_leaf ? options.tree_good_leaf : options.tree_bad_leaf;
        }
      }
      for (std::size_t leaf = first_leaf; leaf < n; ++leaf) task.terminal_states.push_back(leaf);
      task.start_states = {0};
      break;
    }
  }
  if (prototype != Prototype::Tree)
    for (std::size_t s = 0; s < task.n_states; ++s)
      if (!task.is_terminal(s)) task.start_states.push_back(s);

  const auto& pool = library.classes(split);
  if (pool.size() < task.n_states)
    throw std::invalid_argument("insufficient glyph classes: " + std::to_string(task.n_states) + " states need " +
                                std::to_string(task.n_states) + " classes, " + to_string(split) + " split has " +
                                std::to_string(pool.size()));
  // partial Fisher-Yates draw of distinct classes
  std::vector<std::size_t> shuffled = pool;
  for (std::size_t i = 0; i < task.n_states; ++i) {
    const std::size_t j = i + uniform_index(rng, shuffled.size() - i);
    std::swap(shuffled[i], shuffled[j]);
  }
  task.class_assignment.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(task.n_states));
  return task;
}

/// Draws an image of the state's glyph class with independent per-pixel flips.
inline Observation observe(const GlyphLibrary& library, const TaskSpec& task, std::size_t state, Rng& rng) {
  if (state >= task.n_states) throw std::out_of_range("observe: state " + std::to_string(state) + " out of range");
  const std::size_t cls = task.class_assignment[state];
  if (cls >= library.class_count()) throw std::out_of_range("observe: glyph class missing from library");
  const auto& samples = cls < library.samples.size() ? library.samples[cls] : std::vector<Observation>{};
  Observation::Levels levels =
      samples.empty() ? library.prototypes[cls].levels() : samples[uniform_index(rng, samples.size())].levels();

  const double p = library.noise_rate;
  if (p >= 1.0) {
    for (auto& v : levels) v = static_cast<std::uint8_t>(255 - v);
  } else if (p > 0.0) {
    // skip ahead by geometric gaps: same law as an independent coin per pixel
    std::geometric_distribution<std::size_t> gap(p);
    for (std::size_t i = gap(rng); i < kImagePixels; i += 1 + gap(rng))
      levels[i] = static_cast<std::uint8_t>(255 - levels[i]);
  }
  return Observation(levels);
}

struct StepOutcome {
  std::size_t next_state = 0;
  double reward = 0.0;
  bool terminal = false;
};

inline StepOutcome step(const TaskSpec& task, std::size_t state, std::size_t action) {
  if (state >= task.n_states) throw std::out_of_range("step: state out of range");
  if (action >= task.n_actions) throw std::out_of_range("step: action out of range");
  if (task.is_terminal(state)) throw std::logic_error("step: cannot step from terminal state " + std::to_string(state));
  const std::size_t next = task.successor(state, action);
  return {next, task.reward(state, action), task.is_terminal(next)};
}

/// States reachable from `from` without passing through terminal states
/// (terminal states themselves are counted as reached).
inline std::vector<bool> reachable_states(const TaskSpec& task, std::size_t from) {
  std::vector<bool> seen(task.n_states, false);
  std::vector<std::size_t> frontier{from};
  seen[from] = true;
  while (!frontier.empty()) {
    const std::size_t s = frontier.back();
    frontier.pop_back();
    if (task.is_terminal(s)) continue;
    for (std::size_t a = 0; a < task.n_actions; ++a) {
      const std::size_t t = task.successor(s, a);
      if (!seen[t]) {
        seen[t] = true;
        frontier.push_back(t);
      }
    }
  }
  return seen;
}

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

/// One observed transition. Ground-truth state indices ride along for
/// diagnostics and tests; learners only look at the observations.
struct Transition {
  ObservationPtr observation;
  std::size_t action = 0;
  double reward = 0.0;
  ObservationPtr next_observation;
  bool terminal = false;
  std::size_t state = 0;
  std::size_t next_state = 0;
};

/// Episodic wrapper around a TaskSpec. Episodes start at a uniformly drawn
/// start state and end on a terminal state or after time_limit() steps.
class GraphWorldEnv {
 public:
  GraphWorldEnv(TaskSpec task, std::shared_ptr<const GlyphLibrary> library)
      : task_(std::move(task)), library_(std::move(library)) {
    if (!library_) throw std::invalid_argument("GraphWorldEnv: null glyph library");
  }

  const TaskSpec& task() const { return task_; }
  const GlyphLibrary& library() const { return *library_; }
  std::size_t state() const { return state_; }
  std::size_t elapsed() const { return elapsed_; }
  bool episode_over() const { return !started_ || done_; }
  const ObservationPtr& observation() const { return observation_; }

  ObservationPtr reset(Rng& rng) { return reset_to(task_.start_states[uniform_index(rng, task_.start_states.size())], rng); }

  ObservationPtr reset_to(std::size_t state, Rng& rng) {
    if (task_.is_terminal(state)) throw std::logic_error("reset: start state is terminal");
    state_ = state;
    elapsed_ = 0;
    done_ = false;
    started_ = true;
    observation_ = std::make_shared<const Observation>(observe(*library_, task_, state_, rng));
    return observation_;
  }

  /// Steps the current episode. `truncated` is set when the time limit ends a
  /// non-terminal episode.
  Transition step(std::size_t action, Rng& rng, bool* truncated = nullptr) {
    if (episode_over()) throw std::logic_error("step: episode is over, call reset first");
    const StepOutcome out = devi::step(task_, state_, action);
    Transition t;
    t.observation = observation_;
    t.action = action;
    t.reward = out.reward;
    t.terminal = out.terminal;
    t.state = state_;
    t.next_state = out.next_state;
    t.next_observation = std::make_shared<const Observation>(observe(*library_, task_, out.next_state, rng));
    state_ = out.next_state;
    observation_ = t.next_observation;
    ++elapsed_;
    const bool timed_out = !out.terminal && elapsed_ >= task_.time_limit();
    done_ = out.terminal || timed_out;
    if (truncated) *truncated = timed_out;
    return t;
  }

 private:
  TaskSpec task_;
  std::shared_ptr<const GlyphLibrary> library_;
  std::size_t state_ = 0;
  std::size_t elapsed_ = 0;
  bool done_ = false;
  bool started_ = false;
  ObservationPtr observation_;
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = nlohmann::json{{"prototype", to_string(t.prototype)},
                     {"n_states", t.n_states},
                     {"n_actions", t.n_actions},
                     {"transitions", t.transitions},
                     {"rewards", t.rewards},
                     {"terminal_states", t.terminal_states},
                     {"start_states", t.start_states},
                     {"class_assignment", t.class_assignment},
                     {"action_permutation", t.action_permutation},
                     {"seed", t.seed},
                     {"split", to_string(t.split)}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  t.prototype = parse_prototype(j.at("prototype").get<std::string>());
  j.at("n_states").get_to(t.n_states);
  j.at("n_actions").get_to(t.n_actions);
  j.at("transitions").get_to(t.transitions);
  j.at("rewards").get_to(t.rewards);
  j.at("terminal_states").get_to(t.terminal_states);
  j.at("start_states").get_to(t.start_states);
  j.at("class_assignment").get_to(t.class_assignment);
  j.at("action_permutation").get_to(t.action_permutation);
  j.at("seed").get_to(t.seed);
  t.split = parse_split(j.at("split").get<std::string>());
}

}  // namespace devi
