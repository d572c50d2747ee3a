#include "lcdlab/generate.hpp"

#include <algorithm>
#include <memory>

#include "lcdlab/checkpoint.hpp"
#include "lcdlab/control.hpp"
#include "lcdlab/distill.hpp"
#include "lcdlab/error.hpp"
#include "lcdlab/ops.hpp"
#include "lcdlab/solver.hpp"
#include "lcdlab/training.hpp"

namespace lcdlab {

namespace {

Tensor clamp_to_data_range(const Tensor& images) {
  auto v = images.to_vector();
  for (auto& x : v) x = std::clamp(x, -1.0F, 1.0F);
  return Tensor::from_data(images.shape(), std::move(v));
}

std::vector<NamedTensor> only_control(const std::vector<NamedTensor>& tensors) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors)
    if (t.name.rfind("control.", 0) == 0) out.push_back(t);
  return out;
}

bool has_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  return std::any_of(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name.rfind(prefix, 0) == 0; });
}

}  // namespace

Generated generate(const Config& config, const SampleRequest& req) {
  if (req.count < 1) throw ConfigError("sample: count must be >= 1");
  const auto tensors = load_checkpoint(req.checkpoint);
  const bool control = has_prefix(tensors, "control.");
  const auto schedule = config.make_schedule();
  const auto encoder = config.encoder();
  const int size = encoder.latent_size(config.data.image_size);

  DiffusionTransformer model(config.model, 0);
  if (control) {
    if (config.train.teacher.empty()) throw ConfigError("sample: a control checkpoint needs train.teacher (the base)");
    model = load_denoiser(config.model, config.train.teacher);
  } else {
    assign_parameters(model.named_parameters(), strip_prefix(tensors, "model."));
  }
  freeze(model);
  std::unique_ptr<ControlAdapter> adapter;
  Tensor maps;
  std::vector<int> classes(static_cast<std::size_t>(req.count));
  for (int i = 0; i < req.count; ++i) classes[static_cast<std::size_t>(i)] = i % config.model.num_classes;
  if (control) {
    adapter = make_control_adapter(model, config.control.variant, config.resolved_n_copy(), 0);
    assign_parameters(adapter->named_parameters(), only_control(tensors));
    ToyDatasetSpec held = config.dataset_spec();
    held.n_samples = req.count;
    held.seed = derive_seed(config.train.seed, "heldout");
    const ToyDataset heldout(held);
    std::vector<int> all(static_cast<std::size_t>(req.count));
    for (int i = 0; i < req.count; ++i) all[static_cast<std::size_t>(i)] = i;
    maps = sobel_edges(encoder.encode(heldout.gather_images(all)));
    classes = heldout.gather_labels(all);
  }

  SamplerConfig sc;
  sc.kind = solver_kind_from_string(req.sampler);
  sc.steps = req.steps;
  sc.guidance = req.guidance;
  sc.validate(schedule.num_timesteps());
  const auto head = ConsistencyHead::for_schedule(schedule);
  constexpr int kChunk = 64;
  std::vector<Tensor> parts;
  for (int start = 0; start < req.count; start += kChunk) {
    const int n = std::min(kChunk, req.count - start);
    const std::span<const int> c(classes.data() + start, static_cast<std::size_t>(n));
    EpsFn eps = control ? adapter->bind(ops::narrow(maps, 0, start, n)) : eps_fn(model);
    SamplerConfig chunk = sc;
    chunk.seed = derive_seed(req.seed, "chunk-" + std::to_string(start / kChunk));
    if (sc.kind == SolverKind::DDIM) {
      parts.push_back(ddim_sample(eps, schedule, chunk, c, size, model.null_class()));
    } else {
      ConsistencyFn f = [&](const Tensor& z, std::span<const int> t, std::span<const int> cc) {
        return consistency_forward(eps, head, schedule, z, t, cc);
      };
      parts.push_back(lcm_sample(f, schedule, chunk, c, size));
    }
  }
  Generated g;
  g.latents = parts.size() == 1 ? parts.front() : ops::concat(parts, 0);
  g.images = clamp_to_data_range(encoder.decode(g.latents));
  g.cond_maps = maps;
  return g;
}

}  // namespace lcdlab
