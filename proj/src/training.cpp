#include "lcdlab/training.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "lcdlab/checkpoint.hpp"
#include "lcdlab/error.hpp"
#include "lcdlab/eval.hpp"
#include "lcdlab/io.hpp"
#include "lcdlab/ops.hpp"
#include "lcdlab/solver.hpp"

namespace lcdlab {

namespace fs = std::filesystem;

namespace {

constexpr int kPreviewDdimSteps = 25;
constexpr int kPreviewLcmSteps = 4;

Tensor scalar_state(float v) { return Tensor::from_data({1}, {v}); }

float read_scalar(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor.item();
  throw FormatError("checkpoint: missing '" + name + "'");
}

// Optimizer moments and counters under `adamw.*`, keyed by parameter name.
void append_optimizer_state(std::vector<NamedTensor>& out, const AdamW& opt, const std::vector<NamedTensor>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({"adamw.m." + params[i].name, Tensor::from_data(params[i].tensor.shape(), opt.first_moments()[i])});
    out.push_back({"adamw.v." + params[i].name, Tensor::from_data(params[i].tensor.shape(), opt.second_moments()[i])});
  }
  out.push_back({"adamw.step", scalar_state(static_cast<float>(opt.step_count()))});
}

void load_optimizer_state(AdamW& opt, const std::vector<NamedTensor>& params, const std::vector<NamedTensor>& tensors) {
  const auto m = strip_prefix(tensors, "adamw.m.");
  const auto v = strip_prefix(tensors, "adamw.v.");
  std::vector<NamedTensor> m_dst, v_dst;
  for (const auto& p : params) {
    m_dst.push_back({p.name, Tensor::zeros(p.tensor.shape())});
    v_dst.push_back({p.name, Tensor::zeros(p.tensor.shape())});
  }
  assign_parameters(m_dst, m);
  assign_parameters(v_dst, v);
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.first_moments()[i] = m_dst[i].tensor.to_vector();
    opt.second_moments()[i] = v_dst[i].tensor.to_vector();
  }
  opt.set_step_count(static_cast<std::int64_t>(read_scalar(tensors, "adamw.step")));
}

std::vector<NamedTensor> only_prefixes(const std::vector<NamedTensor>& tensors, const std::vector<std::string>& prefixes) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors)
    for (const auto& p : prefixes)
      if (t.name.rfind(p, 0) == 0) {
        out.push_back(t);
        break;
      }
  return out;
}

std::vector<int> preview_classes(int count, int num_classes) {
  std::vector<int> c(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) c[static_cast<std::size_t>(i)] = i % num_classes;
  return c;
}

AdamWOptions adamw_options(const Config& config) {
  AdamWOptions o;
  o.weight_decay = config.train.weight_decay;
  return o;
}

DiffusionTransformer frozen_teacher(const Config& config) {
  if (config.train.teacher.empty())
    throw ConfigError("train.teacher: a teacher checkpoint is required for " + to_string(config.train.kind));
  auto teacher = load_denoiser(config.model, config.train.teacher);
  freeze(teacher);
  return teacher;
}

class TeacherTrainer final : public Trainer {
 public:
  TeacherTrainer(const Config& config, const ToyDataset& dataset)
      : Trainer(config, dataset), model_(config.model, derive_seed(config.train.seed, "model")),
        opt_((model_.set_requires_grad(true), model_.parameters()), adamw_options(config)) {}

  TrainKind kind() const override { return TrainKind::Teacher; }

  StepResult step(std::int64_t index) override {
    const auto idx = batch_indices(index);
    const auto z0 = batch_latents(idx);
    std::vector<int> c;
    for (int i : idx) c.push_back(labels_[static_cast<std::size_t>(i)]);
    Rng rng = step_rng(index);
    auto r = teacher_train_step(model_, opt_, schedule_, z0, c, rng, lr_, config_.train.p_drop);
    steps_done_ = index + 1;
    return r;
  }

  std::vector<NamedTensor> state_tensors() const override {
    auto params = model_.named_parameters();
    auto out = add_prefix(params, "model.");
    append_optimizer_state(out, opt_, add_prefix(params, "model."));
    out.push_back({"state.step", scalar_state(static_cast<float>(steps_done_))});
    return out;
  }

  void load_state(const std::vector<NamedTensor>& tensors) override {
    const auto params = add_prefix(model_.named_parameters(), "model.");
    assign_parameters(params, only_prefixes(tensors, {"model."}));
    load_optimizer_state(opt_, params, tensors);
    steps_done_ = static_cast<std::int64_t>(read_scalar(tensors, "state.step"));
  }

  Preview preview(int count, std::uint64_t seed) const override {
    SamplerConfig sc;
    sc.kind = SolverKind::DDIM;
    sc.steps = kPreviewDdimSteps;
    sc.guidance = config_.lcd.omega_fix;
    sc.seed = seed;
    const auto c = preview_classes(count, config_.model.num_classes);
    Preview p;
    p.latents = ddim_sample(eps_fn(model_), schedule_, sc, c, latent_size_, model_.null_class());
    p.images = encoder_.decode(p.latents);
    return p;
  }

 private:
  DiffusionTransformer model_;
  AdamW opt_;
};

class LcdTrainer final : public Trainer {
 public:
  LcdTrainer(const Config& config, const ToyDataset& dataset)
      : Trainer(config, dataset), teacher_(frozen_teacher(config)),
        state_(TrainState::from_teacher(teacher_, adamw_options(config))),
        head_(ConsistencyHead::for_schedule(schedule_)), lcd_(config.lcd_config()) {
    lcd_.lr = lr_;
  }

  TrainKind kind() const override { return TrainKind::LCD; }

  StepResult step(std::int64_t index) override {
    const auto idx = batch_indices(index);
    const auto z0 = batch_latents(idx);
    std::vector<int> c;
    for (int i : idx) c.push_back(labels_[static_cast<std::size_t>(i)]);
    Rng rng = step_rng(index);
    auto r = lcd_step(state_, teacher_, schedule_, head_, z0, c, lcd_, rng);
    steps_done_ = index + 1;
    return r;
  }

  std::vector<NamedTensor> state_tensors() const override {
    auto params = add_prefix(state_.student.named_parameters(), "model.");
    auto out = params;
    auto ema = add_prefix(state_.ema.named_parameters(), "ema.");
    out.insert(out.end(), ema.begin(), ema.end());
    append_optimizer_state(out, state_.optimizer, params);
    out.push_back({"state.step", scalar_state(static_cast<float>(steps_done_))});
    return out;
  }

  void load_state(const std::vector<NamedTensor>& tensors) override {
    const auto params = add_prefix(state_.student.named_parameters(), "model.");
    assign_parameters(params, only_prefixes(tensors, {"model."}));
    assign_parameters(add_prefix(state_.ema.named_parameters(), "ema."), only_prefixes(tensors, {"ema."}));
    load_optimizer_state(state_.optimizer, params, tensors);
    steps_done_ = static_cast<std::int64_t>(read_scalar(tensors, "state.step"));
    state_.step = steps_done_;
  }

  Preview preview(int count, std::uint64_t seed) const override {
    SamplerConfig sc;
    sc.kind = SolverKind::Consistency;
    sc.steps = kPreviewLcmSteps;
    sc.seed = seed;
    const auto c = preview_classes(count, config_.model.num_classes);
    const auto student = eps_fn(state_.student);
    const auto head = head_;
    const auto& schedule = schedule_;
    ConsistencyFn f = [student, head, &schedule](const Tensor& z, std::span<const int> t, std::span<const int> cc) {
      return consistency_forward(student, head, schedule, z, t, cc);
    };
    Preview p;
    p.latents = lcm_sample(f, schedule_, sc, c, latent_size_);
    p.images = encoder_.decode(p.latents);
    return p;
  }

  std::vector<NamedTensor> frozen_parameters() const override { return teacher_.named_parameters(); }

 private:
  DiffusionTransformer teacher_;
  TrainState state_;
  ConsistencyHead head_;
  LCDConfig lcd_;
};

class ControlTrainer final : public Trainer {
 public:
  ControlTrainer(const Config& config, const ToyDataset& dataset)
      : Trainer(config, dataset), base_(frozen_teacher(config)),
        adapter_(make_control_adapter(base_, config.control.variant, config.resolved_n_copy(),
                                      derive_seed(config.train.seed, "control"))),
        opt_(adapter_->parameters(), adamw_options(config)) {
    // Condition maps are edges of the model-space images.
    const auto n = static_cast<std::int64_t>(labels_.size());
    const auto s = static_cast<std::int64_t>(latent_size_);
    edges_ = sobel_edges(Tensor::from_data({n, s, s}, latents_)).to_vector();
    // Held-out maps for previews come from images the trainer never sees.
    ToyDatasetSpec held = dataset.spec();
    held.n_samples = std::max(config.train.sample_count, 1);
    held.seed = derive_seed(config.train.seed, "heldout");
    const ToyDataset heldout(held);
    std::vector<int> all(static_cast<std::size_t>(held.n_samples));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    heldout_latents_ = encoder_.encode(heldout.gather_images(all));
    heldout_maps_ = sobel_edges(heldout_latents_);
    heldout_labels_ = heldout.gather_labels(all);
  }

  TrainKind kind() const override { return TrainKind::ControlNet; }

  StepResult step(std::int64_t index) override {
    const auto idx = batch_indices(index);
    const auto z0 = batch_latents(idx);
    std::vector<int> c;
    for (int i : idx) c.push_back(labels_[static_cast<std::size_t>(i)]);
    const auto per = static_cast<std::size_t>(latent_size_) * static_cast<std::size_t>(latent_size_);
    std::vector<float> maps;
    maps.reserve(idx.size() * per);
    for (int i : idx) {
      const auto begin = edges_.begin() + static_cast<std::int64_t>(static_cast<std::size_t>(i) * per);
      maps.insert(maps.end(), begin, begin + static_cast<std::int64_t>(per));
    }
    const auto cond = Tensor::from_data(z0.shape(), std::move(maps));
    Rng rng = step_rng(index);
    auto r = controlnet_train_step(*adapter_, opt_, schedule_, z0, c, cond, rng, lr_, config_.control.accumulation);
    steps_done_ = index + 1;
    return r;
  }

  std::vector<NamedTensor> state_tensors() const override {
    auto params = adapter_->named_parameters();
    auto out = params;
    append_optimizer_state(out, opt_, params);
    out.push_back({"state.step", scalar_state(static_cast<float>(steps_done_))});
    return out;
  }

  void load_state(const std::vector<NamedTensor>& tensors) override {
    const auto params = adapter_->named_parameters();
    assign_parameters(params, only_prefixes(tensors, {"control."}));
    load_optimizer_state(opt_, params, tensors);
    steps_done_ = static_cast<std::int64_t>(read_scalar(tensors, "state.step"));
  }

  Preview preview(int count, std::uint64_t seed) const override {
    if (count > heldout_maps_.dim(0)) throw ConfigError("control preview: count exceeds held-out maps");
    SamplerConfig sc;
    sc.kind = SolverKind::DDIM;
    sc.steps = kPreviewDdimSteps;
    sc.guidance = config_.control.guidance;
    sc.seed = seed;
    Preview p;
    p.cond_maps = ops::narrow(heldout_maps_, 0, 0, count);
    const std::vector<int> c(heldout_labels_.begin(), heldout_labels_.begin() + count);
    p.latents = ddim_sample(adapter_->bind(p.cond_maps), schedule_, sc, c, latent_size_, base_.null_class());
    p.images = encoder_.decode(p.latents);
    return p;
  }

  std::vector<NamedTensor> frozen_parameters() const override { return base_.named_parameters(); }

 private:
  DiffusionTransformer base_;
  std::unique_ptr<ControlAdapter> adapter_;
  AdamW opt_;
  std::vector<float> edges_;
  Tensor heldout_latents_;
  Tensor heldout_maps_;
  std::vector<int> heldout_labels_;
};

}  // namespace

Trainer::Trainer(const Config& config, const ToyDataset& dataset)
    : config_(config), schedule_(config.make_schedule()), encoder_(config.encoder()),
      latent_size_(encoder_.latent_size(dataset.image_size())),
      batches_(dataset.size(), config.resolved_batch(), derive_seed(config.train.seed, "batches")),
      lr_(config.resolved_lr()) {
  config.validate();
  if (dataset.size() < 1) throw ConfigError("training: empty dataset");
  if (dataset.image_size() != config.data.image_size)
    throw ConfigError("training: dataset image size differs from data.image_size");
  const auto n = dataset.size();
  const auto s = static_cast<std::int64_t>(dataset.image_size());
  latents_ = encoder_.encode(Tensor::from_data({n, s, s}, dataset.images())).to_vector();
  labels_ = dataset.labels();
}

Tensor Trainer::batch_latents(const std::vector<int>& indices) const {
  const auto per = static_cast<std::size_t>(latent_size_) * static_cast<std::size_t>(latent_size_);
  std::vector<float> out;
  out.reserve(indices.size() * per);
  for (int i : indices) {
    const auto begin = latents_.begin() + static_cast<std::int64_t>(static_cast<std::size_t>(i) * per);
    out.insert(out.end(), begin, begin + static_cast<std::int64_t>(per));
  }
  return Tensor::from_data({static_cast<std::int64_t>(indices.size()), latent_size_, latent_size_}, std::move(out));
}

std::vector<int> Trainer::batch_indices(std::int64_t index) const { return batches_.batch(index); }

Rng Trainer::step_rng(std::int64_t index) const {
  return Rng(config_.train.seed).split("train").fork(static_cast<std::uint64_t>(index));
}

std::unique_ptr<Trainer> make_trainer(const Config& config, const ToyDataset& dataset) {
  switch (config.train.kind) {
    case TrainKind::Teacher: return std::make_unique<TeacherTrainer>(config, dataset);
    case TrainKind::LCD: return std::make_unique<LcdTrainer>(config, dataset);
    case TrainKind::ControlNet: return std::make_unique<ControlTrainer>(config, dataset);
  }
  throw ConfigError("training: unknown kind");
}

DiffusionTransformer load_denoiser(const DenoiserConfig& config, const fs::path& checkpoint, const std::string& prefix) {
  DiffusionTransformer model(config, 0);
  const auto tensors = strip_prefix(load_checkpoint(checkpoint), prefix);
  if (tensors.empty()) throw FormatError("checkpoint " + checkpoint.string() + " has no '" + prefix + "*' tensors");
  assign_parameters(model.named_parameters(), tensors);
  return model;
}

ToyDataset load_or_generate_dataset(const Config& config) {
  if (config.data.path.empty()) return ToyDataset(config.dataset_spec());
  auto ds = load_dataset(config.data.path);
  if (ds.image_size() != config.data.image_size || ds.spec().num_classes != config.data.num_classes)
    throw ConfigError("data.path: dataset spec disagrees with data.image_size / data.num_classes");
  return ds;
}

std::string metrics_csv_header() { return "step,wall_ms,loss,lr,grad_norm\n"; }

std::string format_metrics_row(const MetricsRow& row) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld,%.3f,%.9g,%.9g,%.9g\n", static_cast<long long>(row.step), row.wall_ms,
                static_cast<double>(row.loss), static_cast<double>(row.lr), row.grad_norm);
  return buf;
}

namespace {

std::string step_name(const std::string& stem, std::int64_t step, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s-%07lld%s", stem.c_str(), static_cast<long long>(step), ext);
  return buf;
}

// Keeps the header and rows whose step is <= `keep_through`.
void truncate_metrics(const fs::path& path, std::int64_t keep_through) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      kept += line + "\n";
      header = false;
      continue;
    }
    if (std::stoll(line.substr(0, line.find(','))) <= keep_through) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

void truncate_curve(const fs::path& path, std::int64_t keep_through) { truncate_metrics(path, keep_through); }

}  // namespace

RunResult run_training(const Config& config, const ToyDataset& dataset, const RunOptions& options) {
  config.validate();
  RunResult result;
  result.out_dir = config.resolved_out_dir();
  const auto ckpt_dir = result.out_dir / "checkpoints";
  const auto sample_dir = result.out_dir / "samples";
  fs::create_directories(ckpt_dir);
  fs::create_directories(sample_dir);
  write_text(result.out_dir / "effective-config.json", config_to_json(config).dump(2) + "\n");

  auto trainer = make_trainer(config, dataset);
  const auto frozen = trainer->frozen_parameters();
  if (!frozen.empty()) result.frozen_checksum_before = parameter_checksum(frozen);
  const auto metrics_path = result.out_dir / "metrics.csv";
  const auto curve_path = result.out_dir / "control-metrics.csv";
  const bool control = config.train.kind == TrainKind::ControlNet;
  const auto latest = ckpt_dir / "latest.pxdl";

  if (config.train.resume && fs::exists(latest)) {
    trainer->load_state(load_checkpoint(latest));
    result.start_step = trainer->steps_done();
    truncate_metrics(metrics_path, result.start_step);
    if (control) truncate_curve(curve_path, result.start_step);
  } else {
    write_text(metrics_path, metrics_csv_header());
    if (control) write_text(curve_path, "step,edge_iou\n");
  }

  const std::int64_t total = config.resolved_steps();
  const std::uint64_t preview_seed = derive_seed(config.train.seed, "preview");
  const auto emit_samples = [&](std::int64_t step) {
    const auto p = trainer->preview(config.train.sample_count, preview_seed);
    write_pgm_grid(sample_dir / step_name("step", step, ".pgm"), p.images);
    if (control) {
      const double iou = mean_edge_iou(p.latents, p.cond_maps, config.control.edge_threshold);
      result.edge_iou_curve.emplace_back(step, iou);
      std::ofstream(curve_path, std::ios::app) << step << ',' << iou << '\n';
    }
  };
  const auto save = [&](const fs::path& path) { save_checkpoint(path, trainer->state_tensors()); };

  if (result.start_step == 0 && config.train.sample_every > 0) emit_samples(0);

  std::ofstream metrics(metrics_path, std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  std::int64_t step = result.start_step;
  while (step < total) {
    if (options.stop_after && step >= *options.stop_after) break;
    StepResult r;
    try {
      r = trainer->step(step);
    } catch (const NumericError& e) {
      metrics.flush();
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step + 1) +
                         "; last good checkpoint kept in " + ckpt_dir.string());
    }
    ++step;
    MetricsRow row;
    row.step = step;
    row.wall_ms = config.train.log_wall_time
                      ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
                      : 0.0;
    row.loss = r.loss;
    row.lr = trainer->lr();
    row.grad_norm = r.grad_norm;
    metrics << format_metrics_row(row);
    metrics.flush();
    result.rows.push_back(row);
    if (options.on_step) options.on_step(row);
    if (config.train.checkpoint_every > 0 && step % config.train.checkpoint_every == 0) {
      save(ckpt_dir / step_name("step", step, ".pxdl"));
      save(latest);
    }
    if (config.train.sample_every > 0 && step % config.train.sample_every == 0) emit_samples(step);
  }
  result.final_step = step;
  if (!frozen.empty()) {
    result.frozen_checksum_after = parameter_checksum(frozen);
    nlohmann::json j{{"before", *result.frozen_checksum_before}, {"after", *result.frozen_checksum_after}};
    write_text(result.out_dir / "frozen-checksum.json", j.dump() + "\n");
    if (result.frozen_checksum_after != result.frozen_checksum_before)
      throw Error("frozen parameters changed during training");
  }
  save(latest);
  if (step == total) {
    save(ckpt_dir / "final.pxdl");
    if (config.train.sample_every > 0 && step % config.train.sample_every != 0) emit_samples(step);
  }
  return result;
}

}  // namespace lcdlab
