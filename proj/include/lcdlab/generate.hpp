#pragma once

#include <cstdint>
#include <string>

#include "lcdlab/config.hpp"
#include "lcdlab/tensor.hpp"

namespace lcdlab {

struct SampleRequest {
  std::string checkpoint;
  std::string sampler = "consistency";
  int steps = 4;
  float guidance = 0.0F;
  std::uint64_t seed = 0;
  int count = 16;
};

struct Generated {
  Tensor latents;
  Tensor images;     // decoded and clamped to the data range [-1, 1]
  Tensor cond_maps;  // control checkpoints only
};

/// Draws `req.count` samples from a teacher, student or control checkpoint.
/// Classes cycle 0..num_classes-1. A control checkpoint (tensors prefixed
/// "control.") is attached to the base named by train.teacher and conditioned
/// on Sobel maps of a held-out set seeded by derive_seed(train.seed,
/// "heldout"), whose labels replace the cycled classes. Samples come in chunks
/// of 64; chunk i is seeded by derive_seed(req.seed, "chunk-i").
Generated generate(const Config& config, const SampleRequest& req);

}  // namespace lcdlab
