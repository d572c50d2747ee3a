#include "lcdlab/control.hpp"

#include <cmath>

#include "lcdlab/error.hpp"
#include "lcdlab/ops.hpp"

namespace lcdlab {

std::string to_string(ControlVariant variant) {
  return variant == ControlVariant::Transformer ? "transformer" : "unet";
}

ControlVariant control_variant_from_string(const std::string& name) {
  if (name == "transformer" || name == "controlnet-transformer") return ControlVariant::Transformer;
  if (name == "unet" || name == "controlnet-unet") return ControlVariant::UNet;
  throw ConfigError("control: unknown variant '" + name + "' (expected transformer or unet)");
}

ZeroLinear::ZeroLinear(int width) : weight(Tensor::zeros({width, width}, true)), bias(Tensor::zeros({width}, true)) {}

Tensor ZeroLinear::forward(const Tensor& x) const { return ops::linear(x, weight, bias); }

ConditionEmbedder::ConditionEmbedder(const DenoiserConfig& config, Rng& rng)
    : image_size_(config.image_size), patch_size_(config.patch_size) {
  const std::int64_t d = config.width, p = config.patch_dim();
  std::vector<float> w(static_cast<std::size_t>(d * p));
  const auto sd = static_cast<float>(std::sqrt(2.0 / static_cast<double>(d + p)));
  for (auto& x : w) x = sd * rng.normal();
  weight_ = Tensor::from_data({d, p}, std::move(w), true);
  bias_ = Tensor::zeros({d}, true);
}

Tensor ConditionEmbedder::forward(const Tensor& cond_map) const {
  if (cond_map.rank() != 3 || cond_map.dim(1) != image_size_ || cond_map.dim(2) != image_size_)
    throw ShapeError("embed_condition: expected [B," + std::to_string(image_size_) + "," + std::to_string(image_size_) +
                     "], got " + shape_str(cond_map.shape()));
  for (float v : cond_map.data())
    if (!(v >= 0.0F && v <= 1.0F)) throw ConfigError("embed_condition: condition values must lie in [0, 1]");
  return ops::linear(patchify(cond_map, patch_size_), weight_, bias_);
}

std::vector<NamedTensor> ConditionEmbedder::named_parameters(const std::string& prefix) const {
  return {{prefix + "weight", weight_}, {prefix + "bias", bias_}};
}

namespace {
Rng adapter_rng(std::uint64_t seed) { return Rng(seed).split("control"); }
}  // namespace

ControlAdapter::ControlAdapter(const DiffusionTransformer& base, int n_copy, std::uint64_t seed)
    : base_(&base), embedder_([&] {
        Rng rng = adapter_rng(seed);
        return ConditionEmbedder(base.config(), rng);
      }()) {
  if (n_copy < 1 || n_copy > base.config().depth)
    throw ConfigError("control: n_copy=" + std::to_string(n_copy) + " outside [1, " +
                      std::to_string(base.config().depth) + "]");
  for (int i = 0; i < n_copy; ++i) {
    copies_.push_back(base.block(i).clone());
    gates_.emplace_back(base.config().width);
  }
  for (auto& b : copies_)
    for (auto np : b.named_parameters("")) np.tensor.set_requires_grad(true);
}

std::vector<NamedTensor> ControlAdapter::named_parameters() const {
  std::vector<NamedTensor> out = embedder_.named_parameters("control.embed.");
  for (std::size_t i = 0; i < copies_.size(); ++i) {
    auto bp = copies_[i].named_parameters("control.copies." + std::to_string(i) + ".");
    out.insert(out.end(), bp.begin(), bp.end());
    out.push_back({"control.gates." + std::to_string(i) + ".weight", gates_[i].weight});
    out.push_back({"control.gates." + std::to_string(i) + ".bias", gates_[i].bias});
  }
  return out;
}

std::vector<Tensor> ControlAdapter::parameters() const {
  std::vector<Tensor> out;
  for (auto& np : named_parameters()) out.push_back(np.tensor);
  return out;
}

EpsFn ControlAdapter::bind(const Tensor& cond_map) const {
  return [this, cond_map](const Tensor& z, std::span<const int> t, std::span<const int> c) {
    return forward(z, t, c, cond_map);
  };
}

ControlTransformerAdapter::ControlTransformerAdapter(const DiffusionTransformer& base, int n_copy, std::uint64_t seed)
    : ControlAdapter(base, n_copy, seed) {}

Tensor ControlTransformerAdapter::forward(const Tensor& z, std::span<const int> t, std::span<const int> c,
                                          const Tensor& cond_map, std::vector<Tensor>* trace) const {
  if (cond_map.shape() != z.shape())
    throw ShapeError("control: condition map " + shape_str(cond_map.shape()) + " does not match input " +
                     shape_str(z.shape()));
  const auto& base = *base_;
  const auto cond = base.conditioning(t, c);
  auto x = base.embed_tokens(z);
  auto y = ops::add(x, embed_condition(cond_map));
  const int depth = base.config().depth;
  for (int i = 0; i < depth; ++i) {
    x = base.run_block(i, x, cond);
    if (i < n_copy()) {
      y = copies_[static_cast<std::size_t>(i)].forward(y, cond);
      x = ops::add(x, gates_[static_cast<std::size_t>(i)].forward(y));
    }
    if (trace) trace->push_back(x);
  }
  return base.head(x, cond);
}

ControlUNetAdapter::ControlUNetAdapter(const DiffusionTransformer& base, std::uint64_t seed)
    : ControlAdapter(base, base.config().depth / 2, seed) {}

Tensor ControlUNetAdapter::forward(const Tensor& z, std::span<const int> t, std::span<const int> c,
                                   const Tensor& cond_map, std::vector<Tensor>* trace) const {
  if (cond_map.shape() != z.shape())
    throw ShapeError("control: condition map " + shape_str(cond_map.shape()) + " does not match input " +
                     shape_str(z.shape()));
  const auto& base = *base_;
  const int depth = base.config().depth;
  if (depth % 2 != 0) throw ConfigError("control-unet: depth must be even");
  const int half = depth / 2;
  const auto cond = base.conditioning(t, c);
  auto x = base.embed_tokens(z);

  std::vector<Tensor> skips;
  auto y = ops::add(x, embed_condition(cond_map));
  for (int i = 0; i < half; ++i) {
    y = copies_[static_cast<std::size_t>(i)].forward(y, cond);
    skips.push_back(gates_[static_cast<std::size_t>(i)].forward(y));
  }
  for (int i = 0; i < half; ++i) {
    x = base.run_block(i, x, cond);
    if (trace) trace->push_back(x);
  }
  // 0-based decoder block j receives gated copy (depth - 1 - j).
  for (int j = half; j < depth; ++j) {
    x = ops::add(x, skips[static_cast<std::size_t>(depth - 1 - j)]);
    x = base.run_block(j, x, cond);
    if (trace) trace->push_back(x);
  }
  return base.head(x, cond);
}

int default_n_copy(int depth) {
  return std::max(1, static_cast<int>(std::lround(depth * 13.0 / 28.0)));
}

std::unique_ptr<ControlAdapter> make_control_adapter(const DiffusionTransformer& base, ControlVariant variant,
                                                     int n_copy, std::uint64_t seed) {
  if (variant == ControlVariant::UNet) return std::make_unique<ControlUNetAdapter>(base, seed);
  return std::make_unique<ControlTransformerAdapter>(base, n_copy, seed);
}

}  // namespace lcdlab
