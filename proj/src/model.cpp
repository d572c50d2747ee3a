#include "lcdlab/model.hpp"

#include <cmath>
#include <cstring>

#include "lcdlab/error.hpp"
#include "lcdlab/ops.hpp"

namespace lcdlab {

namespace {

Tensor param(const Shape& shape, Rng& rng, float stddev) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from_data(shape, std::move(v), true);
}

Tensor xavier(std::int64_t out, std::int64_t in, Rng& rng) {
  return param({out, in}, rng, static_cast<float>(std::sqrt(2.0 / static_cast<double>(in + out))));
}

Tensor zeros_param(const Shape& shape) { return Tensor::zeros(shape, true); }

Tensor copy_param(const Tensor& t) { return t.clone(); }

// [B, D] slice k of a [B, n*D] modulation vector, shaped [B, 1, D].
Tensor chunk(const Tensor& mod, int k, std::int64_t d) {
  auto part = ops::narrow(mod, 1, k * d, d);
  return ops::reshape(part, {mod.dim(0), 1, d});
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
  return ops::broadcast_add(ops::broadcast_mul(x, ops::add_scalar(scale, 1.0F)), shift);
}

Tensor sincos_2d(int grid, int dim) {
  // Half the channels encode the row, half the column.
  std::vector<float> v(static_cast<std::size_t>(grid * grid * dim));
  const int quarter = dim / 4;
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      float* row = v.data() + static_cast<std::ptrdiff_t>((r * grid + c) * dim);
      for (int i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        row[i] = static_cast<float>(std::sin(r * omega));
        row[quarter + i] = static_cast<float>(std::cos(r * omega));
        row[2 * quarter + i] = static_cast<float>(std::sin(c * omega));
        row[3 * quarter + i] = static_cast<float>(std::cos(c * omega));
      }
    }
  return Tensor::from_data({grid * grid, dim}, std::move(v));
}

}  // namespace

void DenoiserConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    throw ConfigError("model: image_size must be a positive multiple of patch_size");
  if (width <= 0 || heads <= 0 || width % heads != 0) throw ConfigError("model: width must be divisible by heads");
  if (width % 4 != 0) throw ConfigError("model: width must be divisible by 4");
  if (depth < 2 || depth % 2 != 0) throw ConfigError("model: depth must be even and >= 2");
  if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("model: mlp_ratio must be >= 1");
}

TransformerBlock::TransformerBlock(int width, int heads, int mlp_ratio, Rng& rng) : width_(width), heads_(heads) {
  const std::int64_t d = width, h = static_cast<std::int64_t>(width) * mlp_ratio;
  ada_w_ = zeros_param({6 * d, d});
  ada_b_ = zeros_param({6 * d});
  qkv_w_ = xavier(3 * d, d, rng);
  qkv_b_ = zeros_param({3 * d});
  proj_w_ = xavier(d, d, rng);
  proj_b_ = zeros_param({d});
  fc1_w_ = xavier(h, d, rng);
  fc1_b_ = zeros_param({h});
  fc2_w_ = xavier(d, h, rng);
  fc2_b_ = zeros_param({d});
}

Tensor TransformerBlock::forward(const Tensor& x, const Tensor& cond) const {
  const std::int64_t b = x.dim(0), len = x.dim(1), d = width_, dh = d / heads_;
  if (x.rank() != 3 || x.dim(2) != d) throw ShapeError("block: expected [B,L," + std::to_string(d) + "], got " + shape_str(x.shape()));
  const auto mod = ops::linear(cond, ada_w_, ada_b_);

  auto h = modulate(ops::layer_norm(x, {}, {}), chunk(mod, 0, d), chunk(mod, 1, d));
  const auto qkv = ops::linear(h, qkv_w_, qkv_b_);
  auto split_heads = [&](int k) {
    return ops::permute(ops::reshape(ops::narrow(qkv, 2, k * d, d), {b, len, heads_, dh}), {0, 2, 1, 3});
  };
  auto attn = ops::attention(split_heads(0), split_heads(1), split_heads(2));
  attn = ops::reshape(ops::permute(attn, {0, 2, 1, 3}), {b, len, d});
  attn = ops::linear(attn, proj_w_, proj_b_);
  auto out = ops::add(x, ops::broadcast_mul(attn, chunk(mod, 2, d)));

  h = modulate(ops::layer_norm(out, {}, {}), chunk(mod, 3, d), chunk(mod, 4, d));
  h = ops::linear(ops::gelu(ops::linear(h, fc1_w_, fc1_b_)), fc2_w_, fc2_b_);
  return ops::add(out, ops::broadcast_mul(h, chunk(mod, 5, d)));
}

std::vector<NamedTensor> TransformerBlock::named_parameters(const std::string& prefix) const {
  return {{prefix + "ada.weight", ada_w_},   {prefix + "ada.bias", ada_b_},   {prefix + "qkv.weight", qkv_w_},
          {prefix + "qkv.bias", qkv_b_},     {prefix + "proj.weight", proj_w_}, {prefix + "proj.bias", proj_b_},
          {prefix + "fc1.weight", fc1_w_},   {prefix + "fc1.bias", fc1_b_},   {prefix + "fc2.weight", fc2_w_},
          {prefix + "fc2.bias", fc2_b_}};
}

TransformerBlock TransformerBlock::clone() const {
  TransformerBlock b;
  b.width_ = width_;
  b.heads_ = heads_;
  b.ada_w_ = copy_param(ada_w_);
  b.ada_b_ = copy_param(ada_b_);
  b.qkv_w_ = copy_param(qkv_w_);
  b.qkv_b_ = copy_param(qkv_b_);
  b.proj_w_ = copy_param(proj_w_);
  b.proj_b_ = copy_param(proj_b_);
  b.fc1_w_ = copy_param(fc1_w_);
  b.fc1_b_ = copy_param(fc1_b_);
  b.fc2_w_ = copy_param(fc2_w_);
  b.fc2_b_ = copy_param(fc2_b_);
  return b;
}

DiffusionTransformer::DiffusionTransformer(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = Rng(seed).split("model");
  const std::int64_t d = config_.width, p = config_.patch_dim();
  pos_embed_ = sincos_2d(config_.grid(), config_.width);
  patch_w_ = xavier(d, p, rng);
  patch_b_ = zeros_param({d});
  time_w1_ = param({d, d}, rng, 0.02F);
  time_b1_ = zeros_param({d});
  time_w2_ = param({d, d}, rng, 0.02F);
  time_b2_ = zeros_param({d});
  class_table_ = param({config_.num_classes + 1, d}, rng, 0.02F);
  blocks_.reserve(static_cast<std::size_t>(config_.depth));
  for (int i = 0; i < config_.depth; ++i) blocks_.emplace_back(config_.width, config_.heads, config_.mlp_ratio, rng);
  final_ada_w_ = zeros_param({2 * d, d});
  final_ada_b_ = zeros_param({2 * d});
  out_w_ = zeros_param({p, d});
  out_b_ = zeros_param({p});
}

Tensor patchify(const Tensor& images, int patch_size) {
  if (images.rank() != 3 || images.dim(1) != images.dim(2) || images.dim(1) % patch_size != 0)
    throw ShapeError("patchify: expected square [B,S,S] divisible by patch, got " + shape_str(images.shape()));
  const std::int64_t b = images.dim(0), g = images.dim(1) / patch_size, p = patch_size;
  auto x = ops::reshape(images, {b, g, p, g, p});
  x = ops::permute(x, {0, 1, 3, 2, 4});
  return ops::reshape(x, {b, g * g, p * p});
}

Tensor unpatchify(const Tensor& patches, int image_size, int patch_size) {
  const std::int64_t b = patches.dim(0), g = image_size / patch_size, p = patch_size;
  if (patches.rank() != 3 || patches.dim(1) != g * g || patches.dim(2) != p * p)
    throw ShapeError("unpatchify: unexpected shape " + shape_str(patches.shape()));
  auto x = ops::reshape(patches, {b, g, g, p, p});
  x = ops::permute(x, {0, 1, 3, 2, 4});
  return ops::reshape(x, {b, static_cast<std::int64_t>(image_size), static_cast<std::int64_t>(image_size)});
}

Tensor timestep_embedding(std::span<const int> t, int dim) {
  const int half = dim / 2;
  std::vector<float> v(t.size() * static_cast<std::size_t>(dim), 0.0F);
  for (std::size_t i = 0; i < t.size(); ++i)
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      v[i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(j)] = static_cast<float>(std::cos(t[i] * freq));
      v[i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(half + j)] = static_cast<float>(std::sin(t[i] * freq));
    }
  return Tensor::from_data({static_cast<std::int64_t>(t.size()), dim}, std::move(v));
}

Tensor DiffusionTransformer::embed_tokens(const Tensor& z) const {
  if (z.rank() != 3 || z.dim(1) != config_.image_size || z.dim(2) != config_.image_size)
    throw ShapeError("model: expected input [B," + std::to_string(config_.image_size) + "," +
                     std::to_string(config_.image_size) + "], got " + shape_str(z.shape()));
  auto x = ops::linear(patchify(z, config_.patch_size), patch_w_, patch_b_);
  return ops::broadcast_add(x, pos_embed_);
}

Tensor DiffusionTransformer::conditioning(std::span<const int> t, std::span<const int> c) const {
  if (t.size() != c.size() || t.empty()) throw ShapeError("model: need one timestep and one class per sample");
  for (int ci : c)
    if (ci < 0 || ci > config_.num_classes)
      throw ConfigError("model: class index " + std::to_string(ci) + " outside [0, " +
                        std::to_string(config_.num_classes) + "]");
  for (int ti : t)
    if (ti < 0) throw ConfigError("model: negative timestep");
  auto temb = timestep_embedding(t, config_.width);
  temb = ops::linear(ops::silu(ops::linear(temb, time_w1_, time_b1_)), time_w2_, time_b2_);
  return ops::silu(ops::add(temb, ops::embedding(class_table_, c)));
}

const TransformerBlock& DiffusionTransformer::block(int index) const {
  if (index < 0 || index >= config_.depth) throw ConfigError("model: block index out of range");
  return blocks_[static_cast<std::size_t>(index)];
}

Tensor DiffusionTransformer::run_block(int index, const Tensor& x, const Tensor& cond) const {
  return block(index).forward(x, cond);
}

Tensor DiffusionTransformer::head(const Tensor& x, const Tensor& cond) const {
  const std::int64_t d = config_.width;
  const auto mod = ops::linear(cond, final_ada_w_, final_ada_b_);
  const auto h = modulate(ops::layer_norm(x, {}, {}), chunk(mod, 0, d), chunk(mod, 1, d));
  return unpatchify(ops::linear(h, out_w_, out_b_), config_.image_size, config_.patch_size);
}

Tensor DiffusionTransformer::forward_eps(const Tensor& z, std::span<const int> t, std::span<const int> c) const {
  if (static_cast<std::int64_t>(t.size()) != z.dim(0)) throw ShapeError("model: timestep count != batch size");
  const auto cond = conditioning(t, c);
  auto x = embed_tokens(z);
  for (int i = 0; i < config_.depth; ++i) x = run_block(i, x, cond);
  return head(x, cond);
}

std::vector<NamedTensor> DiffusionTransformer::named_parameters() const {
  std::vector<NamedTensor> out{{"patch.weight", patch_w_},     {"patch.bias", patch_b_},
                               {"time.fc1.weight", time_w1_},  {"time.fc1.bias", time_b1_},
                               {"time.fc2.weight", time_w2_},  {"time.fc2.bias", time_b2_},
                               {"class.table", class_table_}};
  for (int i = 0; i < config_.depth; ++i) {
    auto bp = blocks_[static_cast<std::size_t>(i)].named_parameters("blocks." + std::to_string(i) + ".");
    out.insert(out.end(), bp.begin(), bp.end());
  }
  out.push_back({"final.ada.weight", final_ada_w_});
  out.push_back({"final.ada.bias", final_ada_b_});
  out.push_back({"final.out.weight", out_w_});
  out.push_back({"final.out.bias", out_b_});
  return out;
}

std::vector<Tensor> DiffusionTransformer::parameters() const {
  std::vector<Tensor> out;
  for (auto& np : named_parameters()) out.push_back(np.tensor);
  return out;
}

void DiffusionTransformer::set_requires_grad(bool value) {
  for (auto& np : named_parameters()) np.tensor.set_requires_grad(value);
}

DiffusionTransformer DiffusionTransformer::clone() const {
  DiffusionTransformer m = *this;  // shares storage until replaced below
  m.patch_w_ = copy_param(patch_w_);
  m.patch_b_ = copy_param(patch_b_);
  m.time_w1_ = copy_param(time_w1_);
  m.time_b1_ = copy_param(time_b1_);
  m.time_w2_ = copy_param(time_w2_);
  m.time_b2_ = copy_param(time_b2_);
  m.class_table_ = copy_param(class_table_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) m.blocks_[i] = blocks_[i].clone();
  m.final_ada_w_ = copy_param(final_ada_w_);
  m.final_ada_b_ = copy_param(final_ada_b_);
  m.out_w_ = copy_param(out_w_);
  m.out_b_ = copy_param(out_b_);
  return m;
}

EpsFn eps_fn(const DiffusionTransformer& model) {
  return [&model](const Tensor& z, std::span<const int> t, std::span<const int> c) {
    return model.forward_eps(z, t, c);
  };
}

ConsistencyHead ConsistencyHead::for_schedule(const NoiseSchedule& schedule, double sigma_data) {
  return ConsistencyHead{sigma_data, 10.0 * 1000.0 / static_cast<double>(schedule.num_timesteps())};
}

double ConsistencyHead::c_skip_at(double st) const {
  const double s2 = sigma_data * sigma_data;
  return s2 / (st * st + s2);
}

double ConsistencyHead::c_out_at(double st) const {
  return st / std::sqrt(st * st + sigma_data * sigma_data);
}

Tensor predict_x0(const NoiseSchedule& schedule, const Tensor& z_t, std::span<const int> t, const Tensor& eps_hat) {
  if (static_cast<std::int64_t>(t.size()) != z_t.dim(0)) throw ShapeError("predict_x0: one timestep per sample required");
  std::vector<float> inv_a(t.size()), ratio(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    schedule.check_timestep(t[i], 0);
    const double a = schedule.sqrt_alpha_bar(t[i]);
    inv_a[i] = static_cast<float>(1.0 / a);
    ratio[i] = static_cast<float>(schedule.sigma(t[i]) / a);
  }
  return ops::sub(ops::broadcast_mul(z_t, per_sample_coeff(z_t, inv_a)),
                  ops::broadcast_mul(eps_hat, per_sample_coeff(eps_hat, ratio)));
}

Tensor consistency_forward(const EpsFn& eps, const ConsistencyHead& head, const NoiseSchedule& schedule,
                           const Tensor& z_t, std::span<const int> t, std::span<const int> c) {
  if (static_cast<std::int64_t>(t.size()) != z_t.dim(0)) throw ShapeError("consistency: one timestep per sample required");
  bool all_zero = true;
  for (int ti : t) {
    schedule.check_timestep(ti, 0);
    all_zero = all_zero && ti == 0;
  }
  if (all_zero) return z_t;
  std::vector<float> skip(t.size()), out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    skip[i] = static_cast<float>(head.c_skip(t[i]));
    out[i] = static_cast<float>(head.c_out(t[i]));
  }
  const auto x0 = predict_x0(schedule, z_t, t, eps(z_t, t, c));
  return ops::add(ops::broadcast_mul(z_t, per_sample_coeff(z_t, skip)), ops::broadcast_mul(x0, per_sample_coeff(x0, out)));
}

DiffusionTransformer init_student_from_teacher(const DiffusionTransformer& teacher) { return teacher.clone(); }

std::uint64_t parameter_checksum(const std::vector<NamedTensor>& params) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& np : params) {
    mix(np.name.data(), np.name.size());
    for (auto e : np.tensor.shape()) mix(&e, sizeof(e));
    auto d = np.tensor.data();
    mix(d.data(), d.size_bytes());
  }
  return h;
}

void randomize_parameters(const std::vector<NamedTensor>& params, Rng& rng, float stddev) {
  for (auto np : params)
    for (auto& x : np.tensor.mutable_data()) x = stddev * rng.normal();
}

}  // namespace lcdlab
