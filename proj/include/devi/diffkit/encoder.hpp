#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "devi/diffkit/tape.hpp"
#include "devi/graphworld.hpp"
#include "devi/random.hpp"

namespace devi::diff {

enum class EncoderKind {
  PaperConv,  // 4 x [conv3x3/64 + ReLU + maxpool2x2] -> dense 100 + ReLU
  SmallMlp,   // 784 -> 128 -> 64, ReLU on both layers
  Identity,   // raw pixels; no parameters
};

inline std::string to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::PaperConv: return "paper_conv";
    case EncoderKind::SmallMlp: return "small_mlp";
    case EncoderKind::Identity: return "identity";
  }
  throw std::invalid_argument("unknown encoder kind");
}

inline EncoderKind parse_encoder_kind(std::string_view name) {
  if (name == "paper_conv") return EncoderKind::PaperConv;
  if (name == "small_mlp") return EncoderKind::SmallMlp;
  if (name == "identity") return EncoderKind::Identity;
  throw std::invalid_argument("unknown encoder descriptor '" + std::string(name) + "'");
}

inline constexpr std::size_t kConvFilters = 64;
inline constexpr std::size_t kConvBlocks = 4;
inline constexpr std::size_t kConvLatent = 100;
inline constexpr std::size_t kMlpHidden = 128;
inline constexpr std::size_t kMlpLatent = 64;

inline std::size_t latent_dim(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::PaperConv: return kConvLatent;
    case EncoderKind::SmallMlp: return kMlpLatent;
    case EncoderKind::Identity: return kImagePixels;
  }
  throw std::invalid_argument("unknown encoder kind");
}

/// Encoder weights. The first `encoder_tensors` entries of `params` belong to
/// the encoder; models may append their own tensors after them.
struct EncoderParams {
  EncoderKind kind = EncoderKind::SmallMlp;
  ParameterSet params;
  std::size_t encoder_tensors = 0;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

/// Weights ~ U(-sqrt(6 / fan_in), sqrt(6 / fan_in)), biases zero.
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline EncoderParams build_encoder(EncoderKind kind, Rng& rng) {
  EncoderParams enc;
  enc.kind = kind;
  auto& p = enc.params;
  switch (kind) {
    case EncoderKind::PaperConv: {
      std::size_t channels = 1;
      for (std::size_t l = 0; l < kConvBlocks; ++l) {
        p.add("conv" + std::to_string(l) + ".w", fan_in_uniform({kConvFilters, channels, 3, 3}, channels * 9, rng));
        p.add("conv" + std::to_string(l) + ".b", Tensor(Shape{kConvFilters}));
        channels = kConvFilters;
      }
      // 28 -> 14 -> 7 -> 3 -> 1 spatial, so the flattened feature is 64 wide
      p.add("dense.w", fan_in_uniform({kConvFilters, kConvLatent}, kConvFilters, rng));
      p.add("dense.b", Tensor(Shape{kConvLatent}));
      break;
    }
    case EncoderKind::SmallMlp:
      p.add("fc0.w", fan_in_uniform({kImagePixels, kMlpHidden}, kImagePixels, rng));
      p.add("fc0.b", Tensor(Shape{kMlpHidden}));
      p.add("fc1.w", fan_in_uniform({kMlpHidden, kMlpLatent}, kMlpHidden, rng));
      p.add("fc1.b", Tensor(Shape{kMlpLatent}));
      break;
    case EncoderKind::Identity:
      break;
  }
  enc.encoder_tensors = p.size();
  return enc;
}

inline EncoderParams build_encoder(EncoderKind kind, std::uint64_t seed) {
  Rng rng(derive_seed(seed, streams::kInit));
  return build_encoder(kind, rng);
}

/// Packs observations into an [N, 784] tensor of pixel values.
inline Tensor observations_to_tensor(std::span<const ObservationPtr> batch) {
  Tensor t(Shape{batch.size(), kImagePixels});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i]) throw std::invalid_argument("observations_to_tensor: null observation");
    const auto& levels = batch[i]->levels();
    double* row = t.data() + i * kImagePixels;
    for (std::size_t k = 0; k < kImagePixels; ++k) row[k] = levels[k] / 255.0;
  }
  return t;
}

/// Maps [N, 784] pixels to [N, latent_dim(kind)] latents.
inline Var encode(Tape& tape, const EncoderParams& enc, Var pixels) {
  if (pixels.shape().size() != 2 || pixels.shape()[1] != kImagePixels)
    throw std::invalid_argument("encode: expected [N, 784] input, got " + shape_string(pixels.shape()));
  auto param = [&](std::size_t i) { return tape.parameter(enc.params, i); };
  switch (enc.kind) {
    case EncoderKind::Identity:
      return pixels;
    case EncoderKind::SmallMlp: {
      Var h = relu(dense(pixels, param(0), param(1)));
      return relu(dense(h, param(2), param(3)));
    }
    case EncoderKind::PaperConv: {
      const std::size_t n = pixels.shape()[0];
      Var h = reshape(pixels, Shape{n, 1, kImageSide, kImageSide});
      for (std::size_t l = 0; l < kConvBlocks; ++l)
        h = maxpool_2x2(relu(conv2d_3x3(h, param(2 * l), param(2 * l + 1))));
      const Shape& s = h.shape();
      h = reshape(h, Shape{n, s[1] * s[2] * s[3]});
      return relu(dense(h, param(2 * kConvBlocks), param(2 * kConvBlocks + 1)));
    }
  }
  throw std::invalid_argument("encode: unknown encoder kind");
}

inline Var encode(Tape& tape, const EncoderParams& enc, std::span<const ObservationPtr> batch) {
  return encode(tape, enc, tape.constant(observations_to_tensor(batch)));
}

}  // namespace devi::diff
