#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "lcdlab/schedule.hpp"
#include "lcdlab/tensor.hpp"

namespace lcdlab {

struct DenoiserConfig {
  int image_size = 16;
  int patch_size = 2;
  int width = 128;
  int depth = 8;
  int heads = 4;
  int num_classes = 4;
  int mlp_ratio = 4;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size; }
  bool operator==(const DenoiserConfig&) const = default;
};

/// ε-prediction signature shared by the base model, control adapters and
/// test oracles: (z_t [B,H,W], per-sample t, per-sample class) -> ε̂ [B,H,W].
using EpsFn = std::function<Tensor(const Tensor& z, std::span<const int> t, std::span<const int> c)>;

/// Pre-norm transformer block with adaptive layer-norm modulation
/// (shift/scale/gate for attention and MLP, driven by the conditioning vector).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(int width, int heads, int mlp_ratio, Rng& rng);

  /// x: [B, L, D]; cond: activated conditioning [B, D].
  Tensor forward(const Tensor& x, const Tensor& cond) const;

  std::vector<NamedTensor> named_parameters(const std::string& prefix) const;
  TransformerBlock clone() const;

 private:
  int width_ = 0;
  int heads_ = 0;
  Tensor ada_w_, ada_b_;
  Tensor qkv_w_, qkv_b_;
  Tensor proj_w_, proj_b_;
  Tensor fc1_w_, fc1_b_;
  Tensor fc2_w_, fc2_b_;
};

/// Class-conditional diffusion transformer predicting ε.
///
/// Class index `num_classes` is the null condition used for classifier-free
/// guidance. The modulation and output layers start at zero, so a fresh model
/// predicts ε̂ = 0.
class DiffusionTransformer {
 public:
  DiffusionTransformer(const DenoiserConfig& config, std::uint64_t seed);

  const DenoiserConfig& config() const { return config_; }
  int null_class() const { return config_.num_classes; }

  Tensor forward_eps(const Tensor& z, std::span<const int> t, std::span<const int> c) const;

  // Pipeline stages; control adapters splice into them.
  Tensor embed_tokens(const Tensor& z) const;
  Tensor conditioning(std::span<const int> t, std::span<const int> c) const;
  Tensor run_block(int index, const Tensor& x, const Tensor& cond) const;
  const TransformerBlock& block(int index) const;
  Tensor head(const Tensor& x, const Tensor& cond) const;

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool value);
  /// Deep copy; the copy shares no storage with this model.
  DiffusionTransformer clone() const;

 private:
  DenoiserConfig config_;
  Tensor pos_embed_;  // fixed 2-D sin/cos, not trained
  Tensor patch_w_, patch_b_;
  Tensor time_w1_, time_b1_, time_w2_, time_b2_;
  Tensor class_table_;
  std::vector<TransformerBlock> blocks_;
  Tensor final_ada_w_, final_ada_b_;
  Tensor out_w_, out_b_;
};

EpsFn eps_fn(const DiffusionTransformer& model);

/// [B, S, S] -> [B, (S/p)^2, p*p], row-major over the patch grid.
Tensor patchify(const Tensor& images, int patch_size);
Tensor unpatchify(const Tensor& patches, int image_size, int patch_size);

/// Sinusoidal embedding of integer timesteps, [len(t), dim].
Tensor timestep_embedding(std::span<const int> t, int dim);

/// Boundary-respecting consistency parameterization
///   c_skip = σ_d² / ((s t)² + σ_d²),  c_out = s t / sqrt((s t)² + σ_d²)
/// so that c_skip(0) = 1 and c_out(0) = 0.
struct ConsistencyHead {
  double sigma_data = 0.5;
  double timestep_scaling = 10.0;

  /// Scaling normalized so that T = 1000 gives 10.
  static ConsistencyHead for_schedule(const NoiseSchedule& schedule, double sigma_data = 0.5);

  double c_skip(int t) const { return c_skip_at(timestep_scaling * t); }
  double c_out(int t) const { return c_out_at(timestep_scaling * t); }
  double c_skip_at(double scaled_t) const;
  double c_out_at(double scaled_t) const;
};

/// (z_t - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t), per-sample t.
Tensor predict_x0(const NoiseSchedule& schedule, const Tensor& z_t, std::span<const int> t, const Tensor& eps_hat);

/// f_θ(z, t, c) = c_skip(t) z + c_out(t) x̂0(z, t, ε̂). Exactly z at t = 0.
Tensor consistency_forward(const EpsFn& eps, const ConsistencyHead& head, const NoiseSchedule& schedule,
                           const Tensor& z_t, std::span<const int> t, std::span<const int> c);

/// Consistency student initialized as an exact copy of the teacher.
DiffusionTransformer init_student_from_teacher(const DiffusionTransformer& teacher);

/// FNV-1a over parameter names, shapes and raw float bytes.
std::uint64_t parameter_checksum(const std::vector<NamedTensor>& params);

/// Overwrites every parameter with N(0, stddev²) draws (tests, probes).
void randomize_parameters(const std::vector<NamedTensor>& params, Rng& rng, float stddev);

}  // namespace lcdlab
