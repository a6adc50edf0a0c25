#pragma once

// JSON-configured experiment commands behind the command-line front end.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "devi/oracle.hpp"
#include "devi/persistence.hpp"
#include "devi/plot.hpp"
#include "devi/trainkit.hpp"

namespace devi::experiment {

inline constexpr const char* kCodeVersion = "devi 0.1.0";

using nlohmann::json;
namespace fs = std::filesystem;

/// Invalid configuration. `key()` is the dotted path of the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error("config key '" + key + "': " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct LibraryConfig {
  std::string source = "procedural";  // or "pgm"
  std::string path;                   // pgm root directory
  std::size_t classes = 1600;
  double test_fraction = 0.25;
  double noise_rate = 0.05;
  std::uint64_t seed = 0;
};

struct TransferConfig {
  std::vector<Prototype> prototypes{Prototype::Ring, Prototype::HardRing, Prototype::Tree};
  GlyphSplit split = GlyphSplit::Test;
  std::size_t tasks_per_prototype = 5;
  std::size_t store_per_pair = 5;
  std::size_t episodes = 100;
  std::size_t step_budget = 200000;
  std::size_t sweeps = 20;
  std::uint64_t seed = 0;
  std::size_t relearn_minibatches = 0;  // DQN only; 0 keeps the weights frozen
  std::optional<double> relearn_stop;   // stop relearning at this normalised return
  bool save_stores = false;
};

struct GradcheckConfig {
  Prototype prototype = Prototype::HardRing;
  std::size_t replay_steps = 200;
  std::size_t store_per_action = 10;
  std::size_t batch = 16;
  std::size_t sweeps = 3;
  std::size_t coordinates = 200;
  double step = 1e-5;
  double tolerance = 1e-4;
  double required_fraction = 0.99;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  std::string model = "devi";
  diff::EncoderKind encoder = diff::EncoderKind::SmallMlp;
  std::vector<Prototype> train_prototypes{Prototype::Ring};
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "out";
  LibraryConfig library;
  TrainSchedule schedule;  // planner settings live in schedule.planner
  TransferConfig transfer;
  GradcheckConfig gradcheck;
};

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace detail {

/// Reads one JSON object, recording which keys were consumed so that leftovers
/// can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "expected an object");
  }

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(path(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(path(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(path(key), "expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, std::optional<double>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
        return;
      }
      if (!v->is_number()) throw ConfigError(path(key), "expected a number or null");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) out = unsigned_value(*v, path(key));
  }
  void get(const std::string& key, std::vector<std::uint64_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(path(key), "expected an array of non-negative integers");
      out.clear();
      for (const auto& e : *v) out.push_back(unsigned_value(e, path(key)));
    }
  }
  void get(const std::string& key, std::vector<Prototype>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(path(key), "expected an array of prototype names");
      out.clear();
      for (const auto& e : *v) out.push_back(prototype(e, path(key)));
    }
  }
  void get(const std::string& key, Prototype& out) {
    if (const json* v = find(key)) out = prototype(*v, path(key));
  }

  /// Nested object reader, empty when the key is absent.
  std::optional<ObjectReader> child(const std::string& key) {
    if (const json* v = find(key)) return ObjectReader(*v, path(key));
    return std::nullopt;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(path(key), "unknown key");
  }

 private:
  static std::uint64_t unsigned_value(const json& v, const std::string& where) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    throw ConfigError(where, "expected a non-negative integer");
  }
  static Prototype prototype(const json& v, const std::string& where) {
    if (!v.is_string()) throw ConfigError(where, "expected a prototype name");
    try {
      return parse_prototype(v.get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where, e.what());
    }
  }

  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  detail::ObjectReader root(j, "");
  root.get("model", cfg.model);
  if (cfg.model != "devi" && cfg.model != "dqn") throw ConfigError("model", "expected 'devi' or 'dqn'");
  {
    std::string enc = diff::to_string(cfg.encoder);
    root.get("encoder", enc);
    try {
      cfg.encoder = diff::parse_encoder_kind(enc);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("encoder", e.what());
    }
  }
  root.get("train_prototypes", cfg.train_prototypes);
  if (cfg.train_prototypes.empty()) throw ConfigError("train_prototypes", "must not be empty");
  root.get("seeds", cfg.seeds);
  if (cfg.seeds.empty()) throw ConfigError("seeds", "must not be empty");
  if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size())
    throw ConfigError("seeds", "must not repeat");
  root.get("output_dir", cfg.output_dir);
  if (cfg.output_dir.empty()) throw ConfigError("output_dir", "must not be empty");

  if (auto lib = root.child("library")) {
    lib->get("source", cfg.library.source);
    lib->get("path", cfg.library.path);
    lib->get("classes", cfg.library.classes);
    lib->get("test_fraction", cfg.library.test_fraction);
    lib->get("noise_rate", cfg.library.noise_rate);
    lib->get("seed", cfg.library.seed);
    lib->finish();
  }
  if (cfg.library.source != "procedural" && cfg.library.source != "pgm")
    throw ConfigError("library.source", "expected 'procedural' or 'pgm'");
  if (cfg.library.source == "pgm" && cfg.library.path.empty())
    throw ConfigError("library.path", "required when source is 'pgm'");
  if (!(cfg.library.test_fraction > 0.0 && cfg.library.test_fraction < 1.0))
    throw ConfigError("library.test_fraction", "must lie in (0, 1)");
  if (!(cfg.library.noise_rate >= 0.0 && cfg.library.noise_rate <= 1.0))
    throw ConfigError("library.noise_rate", "must lie in [0, 1]");

  TrainSchedule& s = cfg.schedule;
  if (auto sch = root.child("schedule")) {
    sch->get("burn_in", s.burn_in);
    sch->get("minibatch", s.minibatch);
    sch->get("minibatches", s.minibatches);
    sch->get("task_switch_interval", s.task_switch_interval);
    sch->get("interleave_episodes", s.interleave_episodes);
    sch->get("store_per_action", s.store_per_action);
    sch->get("replay_capacity", s.replay_capacity);
    sch->get("target_sync", s.target_sync);
    sch->get("double_dqn", s.double_dqn);
    sch->get("eval_every", s.eval_every);
    sch->get("eval_episodes", s.eval_episodes);
    sch->get("stop_at_oracle_norm", s.stop_at_oracle_norm);
    sch->get("learning_rate", s.adam.learning_rate);
    sch->get("beta1", s.adam.beta1);
    sch->get("beta2", s.adam.beta2);
    sch->get("epsilon", s.adam.epsilon);
    sch->finish();
  }
  if (auto pl = root.child("planner")) {
    pl->get("gamma", s.planner.gamma);
    pl->get("sweeps", s.planner.sweeps);
    pl->get("temperature", s.planner.temperature);
    pl->get("couple_targets", s.planner.couple_targets);
    pl->finish();
  }
  if (!(s.planner.gamma >= 0.0 && s.planner.gamma <= 1.0)) throw ConfigError("planner.gamma", "must lie in [0, 1]");
  if (s.planner.sweeps == 0) throw ConfigError("planner.sweeps", "must be positive");
  if (!(s.planner.temperature > 0.0)) throw ConfigError("planner.temperature", "must be positive");
  if (s.minibatch == 0) throw ConfigError("schedule.minibatch", "must be positive");
  if (s.burn_in < s.minibatch) throw ConfigError("schedule.burn_in", "must be >= schedule.minibatch");
  if (s.task_switch_interval == 0) throw ConfigError("schedule.task_switch_interval", "must be positive");
  if (s.store_per_action == 0) throw ConfigError("schedule.store_per_action", "must be positive");
  if (s.target_sync == 0) throw ConfigError("schedule.target_sync", "must be positive");
  if (s.replay_capacity < s.minibatch) throw ConfigError("schedule.replay_capacity", "must be >= schedule.minibatch");
  try {
    validate(s.planner);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("planner", e.what());
  }
  try {
    validate(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("schedule", e.what());
  }
  if (!(s.adam.learning_rate > 0.0)) throw ConfigError("schedule.learning_rate", "must be positive");
  if (s.eval_episodes == 0) throw ConfigError("schedule.eval_episodes", "must be positive");

  TransferConfig& t = cfg.transfer;
  if (auto tr = root.child("transfer")) {
    tr->get("prototypes", t.prototypes);
    std::string split = to_string(t.split);
    tr->get("split", split);
    try {
      t.split = parse_split(split);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(tr->path("split"), e.what());
    }
    tr->get("tasks_per_prototype", t.tasks_per_prototype);
    tr->get("store_per_pair", t.store_per_pair);
    tr->get("episodes", t.episodes);
    tr->get("step_budget", t.step_budget);
    tr->get("sweeps", t.sweeps);
    tr->get("seed", t.seed);
    tr->get("relearn_minibatches", t.relearn_minibatches);
    tr->get("relearn_stop", t.relearn_stop);
    tr->get("save_stores", t.save_stores);
    tr->finish();
  }
  if (t.prototypes.empty()) throw ConfigError("transfer.prototypes", "must not be empty");
  if (t.tasks_per_prototype == 0) throw ConfigError("transfer.tasks_per_prototype", "must be positive");
  if (t.store_per_pair == 0) throw ConfigError("transfer.store_per_pair", "must be positive");
  if (t.episodes == 0) throw ConfigError("transfer.episodes", "must be positive");
  if (t.sweeps == 0) throw ConfigError("transfer.sweeps", "must be positive");

  GradcheckConfig& g = cfg.gradcheck;
  if (auto gc = root.child("gradcheck")) {
    gc->get("prototype", g.prototype);
    gc->get("replay_steps", g.replay_steps);
    gc->get("store_per_action", g.store_per_action);
    gc->get("batch", g.batch);
    gc->get("sweeps", g.sweeps);
    gc->get("coordinates", g.coordinates);
    gc->get("step", g.step);
    gc->get("tolerance", g.tolerance);
    gc->get("required_fraction", g.required_fraction);
    gc->get("seed", g.seed);
    gc->finish();
  }
  if (g.batch == 0 || g.batch > g.replay_steps) throw ConfigError("gradcheck.batch", "must lie in [1, replay_steps]");
  if (g.sweeps == 0) throw ConfigError("gradcheck.sweeps", "must be positive");
  if (g.coordinates == 0) throw ConfigError("gradcheck.coordinates", "must be positive");
  if (!(g.step > 0.0)) throw ConfigError("gradcheck.step", "must be positive");
  if (!(g.required_fraction >= 0.0 && g.required_fraction <= 1.0))
    throw ConfigError("gradcheck.required_fraction", "must lie in [0, 1]");

  root.finish();
  return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline json to_json(const ExperimentConfig& c) {
  auto names = [](const std::vector<Prototype>& ps) {
    json a = json::array();
    for (Prototype p : ps) a.push_back(to_string(p));
    return a;
  };
  const TrainSchedule& s = c.schedule;
  const TransferConfig& t = c.transfer;
  const GradcheckConfig& g = c.gradcheck;
  return json{
      {"model", c.model},
      {"encoder", diff::to_string(c.encoder)},
      {"train_prototypes", names(c.train_prototypes)},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir},
      {"library",
       {{"source", c.library.source},
        {"path", c.library.path},
        {"classes", c.library.classes},
        {"test_fraction", c.library.test_fraction},
        {"noise_rate", c.library.noise_rate},
        {"seed", c.library.seed}}},
      {"schedule",
       {{"burn_in", s.burn_in},
        {"minibatch", s.minibatch},
        {"minibatches", s.minibatches},
        {"task_switch_interval", s.task_switch_interval},
        {"interleave_episodes", s.interleave_episodes},
        {"store_per_action", s.store_per_action},
        {"replay_capacity", s.replay_capacity},
        {"target_sync", s.target_sync},
        {"double_dqn", s.double_dqn},
        {"eval_every", s.eval_every},
        {"eval_episodes", s.eval_episodes},
        {"stop_at_oracle_norm", s.stop_at_oracle_norm ? json(*s.stop_at_oracle_norm) : json(nullptr)},
        {"learning_rate", s.adam.learning_rate},
        {"beta1", s.adam.beta1},
        {"beta2", s.adam.beta2},
        {"epsilon", s.adam.epsilon}}},
      {"planner",
       {{"gamma", s.planner.gamma},
        {"sweeps", s.planner.sweeps},
        {"temperature", s.planner.temperature},
        {"couple_targets", s.planner.couple_targets}}},
      {"transfer",
       {{"prototypes", names(t.prototypes)},
        {"split", to_string(t.split)},
        {"tasks_per_prototype", t.tasks_per_prototype},
        {"store_per_pair", t.store_per_pair},
        {"episodes", t.episodes},
        {"step_budget", t.step_budget},
        {"sweeps", t.sweeps},
        {"seed", t.seed},
        {"relearn_minibatches", t.relearn_minibatches},
        {"relearn_stop", t.relearn_stop ? json(*t.relearn_stop) : json(nullptr)},
        {"save_stores", t.save_stores}}},
      {"gradcheck",
       {{"prototype", to_string(g.prototype)},
        {"replay_steps", g.replay_steps},
        {"store_per_action", g.store_per_action},
        {"batch", g.batch},
        {"sweeps", g.sweeps},
        {"coordinates", g.coordinates},
        {"step", g.step},
        {"tolerance", g.tolerance},
        {"required_fraction", g.required_fraction},
        {"seed", g.seed}}},
  };
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

inline std::shared_ptr<const GlyphLibrary> make_library(const LibraryConfig& c) {
  if (c.source == "pgm") return std::make_shared<const GlyphLibrary>(load_pgm_directory(c.path, c.test_fraction, c.noise_rate));
  return std::make_shared<const GlyphLibrary>(make_procedural_library(
      {.classes = c.classes, .test_fraction = c.test_fraction, .noise_rate = c.noise_rate, .seed = c.seed}));
}

/// Creates `dir` and checks that a file can be written into it.
inline void ensure_writable(const fs::path& dir, const std::string& key) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError(key, "cannot create " + dir.string() + ": " + ec.message());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw ConfigError(key, "directory not writable: " + dir.string());
  }
  fs::remove(probe, ec);
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

inline void write_provenance(const fs::path& dir, const std::string& command, const ExperimentConfig& cfg,
                             const json& extra = json::object()) {
  json p{{"command", command}, {"code_version", kCodeVersion}, {"seeds", cfg.seeds}, {"config", to_json(cfg)}};
  for (const auto& [k, v] : extra.items()) p[k] = v;
  write_text(dir / ("provenance_" + command + ".json"), p.dump(2) + "\n");
}

/// Runs fn(0..n-1) on up to `workers` threads. Exceptions are rethrown in
/// index order after all workers finish.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline TaskSampler make_sampler(const std::vector<Prototype>& prototypes, std::shared_ptr<const GlyphLibrary> lib) {
  return [prototypes, lib](std::uint64_t task_seed) {
    return make_task(prototypes[task_seed % prototypes.size()], task_seed, GlyphSplit::Train, *lib);
  };
}

/// Seed of the k-th transfer task; shared by every prototype and checkpoint.
inline std::uint64_t transfer_task_seed(std::uint64_t transfer_seed, std::size_t k) {
  return derive_seed(transfer_seed, streams::kEval, k);
}

inline std::vector<TaskSpec> transfer_tasks(const ExperimentConfig& cfg, const GlyphLibrary& lib) {
  std::vector<TaskSpec> out;
  for (Prototype p : cfg.transfer.prototypes)
    for (std::size_t k = 0; k < cfg.transfer.tasks_per_prototype; ++k)
      out.push_back(make_task(p, transfer_task_seed(cfg.transfer.seed, k), cfg.transfer.split, lib));
  return out;
}

inline std::string run_name(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.model + "_seed" + std::to_string(seed);
}

inline TrainSchedule schedule_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainSchedule s = cfg.schedule;
  s.seed = seed;
  s.run_id = run_name(cfg, seed);
  return s;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct TrainOutput {
  std::uint64_t seed = 0;
  fs::path checkpoint;
  fs::path metrics;
};

/// One checkpoint, one metrics CSV and one detail CSV per seed.
inline std::vector<TrainOutput> cmd_train(const ExperimentConfig& cfg, std::size_t parallel, std::ostream& log) {
  const fs::path out = cfg.output_dir;
  ensure_writable(out, "output_dir");
  const auto lib = make_library(cfg.library);
  std::vector<TrainOutput> outputs(cfg.seeds.size());
  std::mutex log_mutex;
  parallel_for(cfg.seeds.size(), parallel, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    const TrainSchedule schedule = schedule_for(cfg, seed);
    const std::string name = run_name(cfg, seed);
    const json meta{{"seed", seed}, {"run_id", name}, {"code_version", kCodeVersion}};
    MetricsLog metrics;
    diff::Checkpoint ckpt;
    if (cfg.model == "devi") {
      DeviTrainResult r = train_devi(make_sampler(cfg.train_prototypes, lib), lib, schedule,
                                     diff::build_encoder(cfg.encoder, seed));
      ckpt = encoder_checkpoint(r.encoder, meta);
      metrics = std::move(r.log);
    } else {
      const TaskSpec task =
          make_task(cfg.train_prototypes.front(), training_task_seed(seed, 0), GlyphSplit::Train, *lib);
      DqnTrainResult r = train_dqn(task, lib, schedule, dqn::build_dqn(cfg.encoder, task.n_actions, seed));
      ckpt = dqn_checkpoint(r.params, meta);
      metrics = std::move(r.log);
    }
    TrainOutput& o = outputs[i];
    o.seed = seed;
    o.checkpoint = out / (name + ".ckpt");
    o.metrics = out / (name + "_metrics.csv");
    diff::save_checkpoint(o.checkpoint, ckpt);
    std::ostringstream csv, detail;
    write_metrics_csv(csv, metrics);
    write_detail_csv(detail, metrics);
    write_text(o.metrics, csv.str());
    write_text(out / (name + "_detail.csv"), detail.str());
    std::lock_guard lock(log_mutex);
    log << "trained " << name << " -> " << o.checkpoint.string() << '\n';
  });
  write_provenance(out, "train", cfg);
  return outputs;
}

inline std::vector<fs::path> default_checkpoints(const ExperimentConfig& cfg) {
  std::vector<fs::path> out;
  for (std::uint64_t s : cfg.seeds) out.push_back(fs::path(cfg.output_dir) / (run_name(cfg, s) + ".ckpt"));
  return out;
}

struct TransferRow {
  std::string row = "eval";  // or "aggregate"
  std::string checkpoint;
  std::string model;
  std::string phase;  // frozen or relearn
  std::string task_prototype;
  std::string task_seed;
  std::string split;
  bool in_distribution = false;
  std::size_t episodes = 0;
  double return_mean = 0.0;
  double return_std = 0.0;
  double oracle_norm = 0.0;
  std::size_t gradient_updates = 0;
  std::optional<std::size_t> minibatches_to_threshold;
  std::size_t store_size = 0;
  std::uint64_t hash_before = 0;
  std::uint64_t hash_after = 0;
};

inline constexpr const char* kTransferHeader =
    "row,checkpoint,model,phase,task_prototype,task_seed,split,in_distribution,episodes,return_mean,return_std,"
    "oracle_norm,gradient_updates,minibatches_to_threshold,store_size,hash_before,hash_after";

inline void write_transfer_csv(std::ostream& os, const std::vector<TransferRow>& rows) {
  os << kTransferHeader << '\n';
  for (const auto& r : rows) {
    os << r.row << ',' << r.checkpoint << ',' << r.model << ',' << r.phase << ',' << r.task_prototype << ','
       << r.task_seed << ',' << r.split << ',' << (r.in_distribution ? 1 : 0) << ',' << r.episodes << ','
       << format_number(r.return_mean) << ',' << format_number(r.return_std) << ',' << format_number(r.oracle_norm)
       << ',' << r.gradient_updates << ','
       << (r.minibatches_to_threshold ? std::to_string(*r.minibatches_to_threshold) : std::string()) << ','
       << r.store_size << ',' << r.hash_before << ',' << r.hash_after << '\n';
  }
}

/// Aggregates per (model, phase, prototype) and per (model, phase) over all
/// prototypes: mean and sample std of per-row normalised returns.
inline std::vector<TransferRow> aggregate_transfer(const std::vector<TransferRow>& rows) {
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<const TransferRow*>> groups;
  for (const auto& r : rows) {
    groups[{r.model, r.phase, r.task_prototype}].push_back(&r);
    groups[{r.model, r.phase, "all"}].push_back(&r);
  }
  std::vector<TransferRow> out;
  for (const auto& [key, members] : groups) {
    TransferRow a;
    a.row = "aggregate";
    a.checkpoint = "*";
    a.model = std::get<0>(key);
    a.phase = std::get<1>(key);
    a.task_prototype = std::get<2>(key);
    a.task_seed = "*";
    a.split = members.front()->split;
    double sum_ret = 0.0, sum_norm = 0.0;
    for (const TransferRow* m : members) {
      a.in_distribution = a.in_distribution || m->in_distribution;
      a.episodes += m->episodes;
      a.gradient_updates += m->gradient_updates;
      a.store_size += m->store_size;
      sum_ret += m->return_mean;
      sum_norm += m->oracle_norm;
    }
    const double n = static_cast<double>(members.size());
    a.return_mean = sum_ret / n;
    a.oracle_norm = sum_norm / n;
    double var = 0.0;
    for (const TransferRow* m : members) var += (m->oracle_norm - a.oracle_norm) * (m->oracle_norm - a.oracle_norm);
    a.return_std = members.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;  // spread of normalised scores
    out.push_back(std::move(a));
  }
  return out;
}

/// Frozen-weight evaluation of every checkpoint on every transfer task, plus
/// optional DQN relearning. Aborts if held-out glyph classes leak into the
/// training split.
inline std::vector<TransferRow> cmd_transfer(const ExperimentConfig& cfg, std::shared_ptr<const GlyphLibrary> lib,
                                             const std::vector<fs::path>& checkpoints, std::size_t parallel,
                                             std::ostream& log) {
  const fs::path out = cfg.output_dir;
  ensure_writable(out, "output_dir");
  for (const auto& c : checkpoints)
    if (!fs::is_regular_file(c)) throw std::runtime_error("missing checkpoint: " + c.string());
  if (!lib->splits_disjoint()) throw std::runtime_error("transfer: held-out glyph classes overlap the training classes");
  const std::vector<TaskSpec> tasks = transfer_tasks(cfg, *lib);
  const std::set<std::size_t> train_classes(lib->train_classes.begin(), lib->train_classes.end());
  for (const auto& t : tasks)
    if (t.split == GlyphSplit::Test)
      for (std::size_t c : t.class_assignment)
        if (train_classes.count(c)) throw std::runtime_error("transfer: held-out task uses a training glyph class");
  if (cfg.transfer.save_stores) ensure_writable(out / "stores", "output_dir");

  TransferProtocol protocol;
  protocol.store_per_pair = cfg.transfer.store_per_pair;
  protocol.episodes = cfg.transfer.episodes;
  protocol.step_budget = cfg.transfer.step_budget;
  protocol.planner = cfg.schedule.planner;
  protocol.planner.sweeps = cfg.transfer.sweeps;
  protocol.seed = cfg.transfer.seed;

  std::vector<std::vector<TransferRow>> per_ckpt(checkpoints.size());
  parallel_for(checkpoints.size(), parallel, [&](std::size_t ci) {
    const diff::Checkpoint ckpt = diff::load_checkpoint(checkpoints[ci]);
    const std::string model = checkpoint_model(ckpt);
    const std::string stem = checkpoints[ci].stem().string();
    const json meta = devi::detail::checkpoint_metadata(ckpt);
    const std::uint64_t ckpt_seed = meta.value("seed", std::uint64_t{0});
    for (const TaskSpec& task : tasks) {
      TransferRow r;
      r.checkpoint = checkpoints[ci].filename().string();
      r.model = model;
      r.phase = "frozen";
      r.task_prototype = to_string(task.prototype);
      r.task_seed = std::to_string(task.seed);
      r.split = to_string(task.split);
      r.in_distribution = task.split == GlyphSplit::Train &&
                          std::find(cfg.train_prototypes.begin(), cfg.train_prototypes.end(), task.prototype) !=
                              cfg.train_prototypes.end();
      TransferResult res;
      if (model == "devi") {
        const EncoderParams enc = encoder_from_checkpoint(ckpt);
        const EpisodicStore store = transfer_store(task, lib, protocol);
        if (cfg.transfer.save_stores) {
          diff::Checkpoint snap = encoder_checkpoint(enc, {{"task", task}});
          append_store(snap, store);
          diff::save_checkpoint(out / "stores" / (stem + "_" + r.task_prototype + "_" + r.task_seed + ".ckpt"), snap);
        }
        res = transfer_eval_devi(enc, store, task, lib, protocol);
      } else {
        res = transfer_eval_dqn(dqn_from_checkpoint(ckpt), task, lib, protocol);
      }
      if (!res.frozen()) throw std::logic_error("transfer: parameters changed during frozen evaluation");
      r.episodes = res.stats.episodes;
      r.return_mean = res.stats.mean;
      r.return_std = res.stats.stddev;
      r.oracle_norm = res.stats.oracle_norm;
      r.gradient_updates = res.gradient_updates;
      r.store_size = res.store_size;
      r.hash_before = res.hash_before;
      r.hash_after = res.hash_after;
      per_ckpt[ci].push_back(r);

      if (model == "dqn" && cfg.transfer.relearn_minibatches > 0) {
        TrainSchedule s = cfg.schedule;
        s.minibatches = cfg.transfer.relearn_minibatches;
        s.stop_at_oracle_norm = cfg.transfer.relearn_stop;
        s.seed = derive_seed(ckpt_seed, streams::kTask, task.seed);
        s.run_id = stem + "_" + r.task_prototype + "_" + r.task_seed;
        const DqnTrainResult rl = train_dqn(task, lib, s, dqn_from_checkpoint(ckpt), "relearn");
        TransferRow q = r;
        q.phase = "relearn";
        q.gradient_updates = rl.gradient_steps;
        q.minibatches_to_threshold = rl.reached_at;
        q.hash_after = diff::content_hash(dqn_checkpoint(rl.params));
        for (auto it = rl.log.rbegin(); it != rl.log.rend(); ++it)
          if (it->oracle_norm) {
            q.return_mean = *it->return_mean;
            q.return_std = *it->return_std;
            q.oracle_norm = *it->oracle_norm;
            q.episodes = s.eval_episodes;
            break;
          }
        per_ckpt[ci].push_back(q);
        std::ostringstream csv;
        write_metrics_csv(csv, rl.log);
        write_text(out / (s.run_id + "_relearn_metrics.csv"), csv.str());
      }
    }
  });
  std::vector<TransferRow> rows;
  for (auto& v : per_ckpt)
    for (auto& r : v) rows.push_back(std::move(r));
  const std::vector<TransferRow> agg = aggregate_transfer(rows);
  rows.insert(rows.end(), agg.begin(), agg.end());
  std::ostringstream csv;
  write_transfer_csv(csv, rows);
  write_text(out / "transfer.csv", csv.str());
  json ck = json::array();
  for (const auto& c : checkpoints) ck.push_back(c.string());
  write_provenance(out, "transfer", cfg, {{"checkpoints", ck}});
  for (const auto& a : agg)
    log << a.model << ' ' << a.phase << ' ' << a.task_prototype << " oracle_norm " << format_number(a.oracle_norm)
        << '\n';
  return rows;
}

inline std::vector<TransferRow> cmd_transfer(const ExperimentConfig& cfg, const std::vector<fs::path>& checkpoints,
                                             std::size_t parallel, std::ostream& log) {
  return cmd_transfer(cfg, make_library(cfg.library), checkpoints, parallel, log);
}

/// Q* tables of the transfer tasks, one CSV per task.
inline std::vector<fs::path> cmd_oracle_dump(const ExperimentConfig& cfg, std::ostream& log) {
  const fs::path dir = fs::path(cfg.output_dir) / "oracle";
  ensure_writable(dir, "output_dir");
  const auto lib = make_library(cfg.library);
  std::vector<fs::path> written;
  for (const TaskSpec& task : transfer_tasks(cfg, *lib)) {
    const auto sol = oracle::exact_value_iteration(task, cfg.schedule.planner.gamma);
    std::ostringstream csv;
    oracle::write_q_csv(csv, sol);
    const fs::path p = dir / (to_string(task.prototype) + "_" + std::to_string(task.seed) + ".csv");
    write_text(p, csv.str());
    written.push_back(p);
    log << "wrote " << p.string() << '\n';
  }
  write_provenance(cfg.output_dir, "oracle-dump", cfg);
  return written;
}

struct GradcheckOutcome {
  oracle::GradCheckReport devi;
  oracle::GradCheckReport dqn;
  bool ok() const { return devi.ok() && dqn.ok(); }
};

inline void write_report(std::ostream& os, const std::string& model, const oracle::GradCheckReport& r) {
  auto brief = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  os << model << ' ' << (r.ok() ? "PASS" : "FAIL") << ' ' << r.passed << '/' << r.checked << " within "
     << brief(r.tolerance) << " (need " << brief(r.required_fraction) << "); worst " << r.worst_name << '[' << r.worst.index << "] rel_err " << format_number(r.worst_error)
     << " analytic " << format_number(r.worst_analytic) << " numeric " << format_number(r.worst_numeric) << '\n';
}

/// Tape gradients against central differences for both models. `fault`
/// corrupts the backward pass only.
inline GradcheckOutcome run_gradcheck(const ExperimentConfig& cfg, diff::Fault fault = diff::Fault::None) {
  const GradcheckConfig& g = cfg.gradcheck;
  const auto lib = make_library(cfg.library);
  const TaskSpec task = make_task(g.prototype, g.seed, GlyphSplit::Train, *lib);
  Rng data_rng = data_stream(g.seed);
  const std::vector<Transition> replay = fill_buffer(task, lib, g.replay_steps, g.replay_steps, data_rng).contents();
  Rng rng(derive_seed(g.seed, streams::kBatch));
  const std::vector<Transition> batch(replay.end() - static_cast<std::ptrdiff_t>(g.batch), replay.end());
  GradcheckOutcome out;

  {
    const EpisodicStore store = subsample_store(replay, g.store_per_action, task.n_actions, rng);
    EncoderParams enc = diff::build_encoder(cfg.encoder, g.seed);
    PlannerConfig pc = cfg.schedule.planner;
    pc.sweeps = g.sweeps;
    const LossAndGradients lg = multi_horizon_loss_and_gradients(batch, enc, store, pc, fault);
    std::vector<Tensor> targets;
    {
      Tape tape;
      targets = multi_horizon_loss(tape, batch, enc, store, pc).targets;
    }
    // semi-gradient: targets are held at their current values
    const std::vector<Tensor>* hold = pc.couple_targets ? nullptr : &targets;
    const auto coords = oracle::sample_coordinates(enc.params, g.coordinates, rng);
    const auto numeric = oracle::finite_difference_grad(
        [&](const diff::ParameterSet& p) {
          EncoderParams e = enc;
          e.params = p;
          Tape tape;
          return multi_horizon_loss(tape, batch, e, store, pc, hold).loss.value().item();
        },
        enc.params, coords, g.step);
    out.devi = oracle::compare_gradients(enc.params, lg.gradients, coords, numeric, g.tolerance, g.required_fraction);
  }
  {
    dqn::DqnParams online = dqn::build_dqn(cfg.encoder, task.n_actions, g.seed);
    const dqn::DqnParams target = dqn::build_dqn(cfg.encoder, task.n_actions, g.seed + 1);
    const dqn::TdConfig td{cfg.schedule.planner.gamma, cfg.schedule.double_dqn};
    const auto lg = dqn::dqn_loss_and_gradients(batch, online, target, td, fault);
    const auto coords = oracle::sample_coordinates(online.net.params, g.coordinates, rng);
    const auto numeric = oracle::finite_difference_grad(
        [&](const diff::ParameterSet& p) {
          dqn::DqnParams q = online;
          q.net.params = p;
          Tape tape;
          return dqn::dqn_td_loss(tape, batch, q, target, td).value().item();
        },
        online.net.params, coords, g.step);
    out.dqn = oracle::compare_gradients(online.net.params, lg.gradients, coords, numeric, g.tolerance,
                                        g.required_fraction);
  }
  return out;
}

inline GradcheckOutcome cmd_gradcheck(const ExperimentConfig& cfg, diff::Fault fault, std::ostream& log) {
  ensure_writable(cfg.output_dir, "output_dir");
  const GradcheckOutcome r = run_gradcheck(cfg, fault);
  std::ostringstream report;
  write_report(report, "devi", r.devi);
  write_report(report, "dqn", r.dqn);
  write_text(fs::path(cfg.output_dir) / "gradcheck.txt", report.str());
  write_provenance(cfg.output_dir, "gradcheck", cfg,
                   {{"fault", fault == diff::Fault::None ? "none" : "relu_backward_halved"}});
  log << report.str();
  return r;
}

/// Reads metrics CSVs and writes the SVG. Nothing is written on error.
inline void cmd_plot(const std::vector<fs::path>& csvs, const fs::path& svg) {
  if (csvs.empty()) throw std::runtime_error("plot: no metrics files given");
  MetricsLog all;
  for (const auto& p : csvs) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("plot: cannot open " + p.string());
    MetricsLog part;
    try {
      part = read_metrics_csv(in);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(p.string() + ": " + e.what());
    }
    if (part.empty()) throw std::runtime_error("plot: " + p.string() + " has no rows");
    for (auto& r : part) all.push_back(std::move(r));
  }
  const std::string text = plot::render_svg(plot::panels_from_metrics(all));
  if (svg.has_parent_path()) fs::create_directories(svg.parent_path());
  write_text(svg, text);
}

}  // namespace devi::experiment
