#pragma once

// Encoder, Q-network and episodic-store snapshots in the DEVI1 container.

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "devi/diffkit/checkpoint.hpp"
#include "devi/diffkit/encoder.hpp"
#include "devi/dqn.hpp"
#include "devi/episodic.hpp"

namespace devi {

namespace detail {

inline diff::Checkpoint params_checkpoint(const diff::EncoderParams& enc, const std::string& model,
                                          std::size_t n_actions, nlohmann::json extra) {
  nlohmann::json meta = std::move(extra);
  if (meta.is_null()) meta = nlohmann::json::object();
  meta["model"] = model;
  meta["encoder"] = diff::to_string(enc.kind);
  meta["encoder_tensors"] = enc.encoder_tensors;
  meta["n_actions"] = n_actions;
  diff::Checkpoint ckpt;
  ckpt.metadata = meta.dump();
  for (std::size_t i = 0; i < enc.params.size(); ++i) ckpt.tensors.push_back({enc.params.name(i), enc.params[i]});
  return ckpt;
}

inline nlohmann::json checkpoint_metadata(const diff::Checkpoint& ckpt) {
  try {
    return nlohmann::json::parse(ckpt.metadata);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: unreadable metadata: ") + e.what());
  }
}

inline diff::EncoderParams params_from_checkpoint(const diff::Checkpoint& ckpt, const std::string& model,
                                                  std::size_t* n_actions) {
  const nlohmann::json meta = checkpoint_metadata(ckpt);
  if (meta.value("model", std::string()) != model)
    throw std::runtime_error("checkpoint: expected model '" + model + "', found '" + meta.value("model", std::string()) +
                             "'");
  diff::EncoderParams enc;
  enc.kind = diff::parse_encoder_kind(meta.at("encoder").get<std::string>());
  enc.encoder_tensors = meta.at("encoder_tensors").get<std::size_t>();
  if (n_actions) *n_actions = meta.at("n_actions").get<std::size_t>();
  for (const auto& nt : ckpt.tensors)
    if (nt.name.rfind("store.", 0) != 0) enc.params.add(nt.name, nt.tensor);
  return enc;
}

}  // namespace detail

inline diff::Checkpoint encoder_checkpoint(const diff::EncoderParams& enc, nlohmann::json extra = {}) {
  return detail::params_checkpoint(enc, "devi", kGraphActions, std::move(extra));
}

inline diff::EncoderParams encoder_from_checkpoint(const diff::Checkpoint& ckpt) {
  return detail::params_from_checkpoint(ckpt, "devi", nullptr);
}

inline diff::Checkpoint dqn_checkpoint(const dqn::DqnParams& p, nlohmann::json extra = {}) {
  return detail::params_checkpoint(p.net, "dqn", p.n_actions, std::move(extra));
}

inline dqn::DqnParams dqn_from_checkpoint(const diff::Checkpoint& ckpt) {
  dqn::DqnParams p;
  p.net = detail::params_from_checkpoint(ckpt, "dqn", &p.n_actions);
  return p;
}

inline std::string checkpoint_model(const diff::Checkpoint& ckpt) {
  return detail::checkpoint_metadata(ckpt).value("model", std::string());
}

namespace detail {

inline diff::Tensor observations_to_levels(const std::vector<ObservationPtr>& obs) {
  diff::Tensor t(diff::Shape{obs.size(), kImagePixels});
  for (std::size_t i = 0; i < obs.size(); ++i)
    for (std::size_t p = 0; p < kImagePixels; ++p) t[i * kImagePixels + p] = obs[i]->level(p);
  return t;
}

inline std::vector<ObservationPtr> levels_to_observations(const diff::Tensor& t) {
  if (t.rank() != 2 || t.shape()[1] != kImagePixels) throw std::runtime_error("store snapshot: bad observation block");
  std::vector<ObservationPtr> out;
  for (std::size_t i = 0; i < t.shape()[0]; ++i) {
    Observation::Levels levels{};
    for (std::size_t p = 0; p < kImagePixels; ++p) {
      const double v = t[i * kImagePixels + p];
      if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v)) throw std::runtime_error("store snapshot: bad pixel level");
      levels[p] = static_cast<std::uint8_t>(v);
    }
    out.push_back(std::make_shared<const Observation>(levels));
  }
  return out;
}

template <typename T>
diff::Tensor to_tensor(const std::vector<T>& v) {
  std::vector<double> d(v.begin(), v.end());
  return diff::Tensor::vector(d);
}

inline const diff::Tensor& require(const diff::Checkpoint& ckpt, const std::string& name) {
  const diff::Tensor* t = ckpt.find(name);
  if (!t) throw std::runtime_error("store snapshot: missing tensor " + name);
  return *t;
}

}  // namespace detail

/// Appends the store as tensors "store.a{k}.{origins,rewards,resultants,done,
/// origin_states,resultant_states}". Pixel levels are stored exactly.
inline void append_store(diff::Checkpoint& ckpt, const EpisodicStore& store) {
  for (std::size_t a = 0; a < store.action_count(); ++a) {
    const auto& p = store.actions[a];
    const std::string prefix = "store.a" + std::to_string(a) + ".";
    ckpt.tensors.push_back({prefix + "origins", detail::observations_to_levels(p.origins)});
    ckpt.tensors.push_back({prefix + "rewards", diff::Tensor::vector(p.rewards)});
    ckpt.tensors.push_back({prefix + "resultants", detail::observations_to_levels(p.resultants)});
    ckpt.tensors.push_back({prefix + "done", detail::to_tensor(p.done)});
    ckpt.tensors.push_back({prefix + "origin_states", detail::to_tensor(p.origin_states)});
    ckpt.tensors.push_back({prefix + "resultant_states", detail::to_tensor(p.resultant_states)});
  }
}

inline EpisodicStore store_from_checkpoint(const diff::Checkpoint& ckpt) {
  EpisodicStore store;
  for (std::size_t a = 0; ckpt.find("store.a" + std::to_string(a) + ".origins"); ++a) {
    const std::string prefix = "store.a" + std::to_string(a) + ".";
    ActionPartition p;
    p.origins = detail::levels_to_observations(detail::require(ckpt, prefix + "origins"));
    p.resultants = detail::levels_to_observations(detail::require(ckpt, prefix + "resultants"));
    for (double v : detail::require(ckpt, prefix + "rewards").values()) p.rewards.push_back(v);
    for (double v : detail::require(ckpt, prefix + "done").values()) p.done.push_back(v != 0.0);
    for (double v : detail::require(ckpt, prefix + "origin_states").values())
      p.origin_states.push_back(static_cast<std::size_t>(v));
    for (double v : detail::require(ckpt, prefix + "resultant_states").values())
      p.resultant_states.push_back(static_cast<std::size_t>(v));
    store.actions.push_back(std::move(p));
  }
  if (store.actions.empty()) throw std::runtime_error("store snapshot: no store tensors in checkpoint");
  store.validate();
  return store;
}

}  // namespace devi
