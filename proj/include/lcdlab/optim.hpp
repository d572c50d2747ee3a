#pragma once

#include <cstdint>
#include <vector>

#include "lcdlab/tensor.hpp"

namespace lcdlab {

struct AdamWOptions {
  float beta1 = 0.9F;
  float beta2 = 0.999F;
  float eps = 1e-8F;
  float weight_decay = 0.0F;
};

/// Decoupled-weight-decay Adam with bias correction.
///
///   p <- p * (1 - lr * wd)
///   m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
///   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options = {});

  /// Throws if any parameter has no gradient buffer.
  void step(float lr);
  void zero_grad();

  const std::vector<Tensor>& params() const { return params_; }
  const AdamWOptions& options() const { return options_; }
  std::int64_t step_count() const { return step_; }

  /// Moment buffers, exposed for checkpointing.
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void set_step_count(std::int64_t step) { step_ = step; }

 private:
  std::vector<Tensor> params_;
  AdamWOptions options_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::int64_t step_ = 0;
};

/// Global L2 norm over all present gradients.
double grad_norm(const std::vector<Tensor>& params);

}  // namespace lcdlab
