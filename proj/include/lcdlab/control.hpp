#pragma once

#include <memory>
#include <string>
#include <vector>

#include "lcdlab/model.hpp"

namespace lcdlab {

enum class ControlVariant { Transformer, UNet };

std::string to_string(ControlVariant variant);
ControlVariant control_variant_from_string(const std::string& name);

/// Linear gate on token features whose weight and bias start at exactly zero.
struct ZeroLinear {
  Tensor weight;  // [D, D]
  Tensor bias;    // [D]

  explicit ZeroLinear(int width);
  ZeroLinear(Tensor w, Tensor b) : weight(std::move(w)), bias(std::move(b)) {}
  Tensor forward(const Tensor& x) const;
};

/// Patchifies a [B,S,S] condition map in [0,1] and projects it to token width.
class ConditionEmbedder {
 public:
  ConditionEmbedder(const DenoiserConfig& config, Rng& rng);
  Tensor forward(const Tensor& cond_map) const;
  std::vector<NamedTensor> named_parameters(const std::string& prefix) const;

 private:
  int image_size_;
  int patch_size_;
  Tensor weight_;
  Tensor bias_;
};

/// Trainable copies of base blocks, zero-linear gates and a condition
/// embedder attached to a frozen base model.
///
/// The adapter keeps a reference to `base`, which must outlive it. It never
/// writes to base parameters; callers freeze them with
/// `base.set_requires_grad(false)` before training.
class ControlAdapter {
 public:
  virtual ~ControlAdapter() = default;

  /// ε̂ under control. When `trace` is non-null it receives the output of
  /// every frozen block (after any gated addition feeding the next block).
  virtual Tensor forward(const Tensor& z, std::span<const int> t, std::span<const int> c, const Tensor& cond_map,
                         std::vector<Tensor>* trace = nullptr) const = 0;
  virtual ControlVariant variant() const = 0;

  const DiffusionTransformer& base() const { return *base_; }
  int n_copy() const { return static_cast<int>(copies_.size()); }
  Tensor embed_condition(const Tensor& cond_map) const { return embedder_.forward(cond_map); }

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  ZeroLinear& gate(int index) { return gates_.at(static_cast<std::size_t>(index)); }
  const ZeroLinear& gate(int index) const { return gates_.at(static_cast<std::size_t>(index)); }

  /// ε-model view with the condition map bound (rows must match the batch).
  EpsFn bind(const Tensor& cond_map) const;

 protected:
  ControlAdapter(const DiffusionTransformer& base, int n_copy, std::uint64_t seed);

  const DiffusionTransformer* base_;
  std::vector<TransformerBlock> copies_;
  std::vector<ZeroLinear> gates_;
  ConditionEmbedder embedder_;
};

/// Copies of the first N blocks; gated copy i is added to frozen block i's
/// output, which then feeds frozen block i+1.
class ControlTransformerAdapter final : public ControlAdapter {
 public:
  ControlTransformerAdapter(const DiffusionTransformer& base, int n_copy, std::uint64_t seed);
  Tensor forward(const Tensor& z, std::span<const int> t, std::span<const int> c, const Tensor& cond_map,
                 std::vector<Tensor>* trace = nullptr) const override;
  ControlVariant variant() const override { return ControlVariant::Transformer; }
};

/// Copies of the first depth/2 ("encoder") blocks. Gated copy i is added to
/// the input of frozen decoder block depth - i + 1 (1-based), mirroring UNet
/// skip order.
class ControlUNetAdapter final : public ControlAdapter {
 public:
  ControlUNetAdapter(const DiffusionTransformer& base, std::uint64_t seed);
  Tensor forward(const Tensor& z, std::span<const int> t, std::span<const int> c, const Tensor& cond_map,
                 std::vector<Tensor>* trace = nullptr) const override;
  ControlVariant variant() const override { return ControlVariant::UNet; }
};

/// Default copy count: round(depth * 13 / 28), at least 1.
int default_n_copy(int depth);

std::unique_ptr<ControlAdapter> make_control_adapter(const DiffusionTransformer& base, ControlVariant variant,
                                                     int n_copy, std::uint64_t seed);

}  // namespace lcdlab
