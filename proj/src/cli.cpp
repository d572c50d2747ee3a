#include "lcdlab/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include "lcdlab/checkpoint.hpp"
#include "lcdlab/config.hpp"
#include "lcdlab/control.hpp"
#include "lcdlab/distill.hpp"
#include "lcdlab/error.hpp"
#include "lcdlab/eval.hpp"
#include "lcdlab/generate.hpp"
#include "lcdlab/io.hpp"
#include "lcdlab/ops.hpp"
#include "lcdlab/solver.hpp"
#include "lcdlab/training.hpp"

namespace lcdlab {

namespace fs = std::filesystem;

namespace {

struct UsageError : Error {
  using Error::Error;
};

// `--section.key value` or `--section.key=value` pairs left over by CLI11.
std::vector<ConfigOverride> parse_overrides(const std::vector<std::string>& extras) {
  const auto defaults = config_to_json(Config{});
  std::vector<ConfigOverride> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos)
      throw UsageError("unknown argument '" + a + "'");
    std::string path = a.substr(2), value;
    if (const auto eq = path.find('='); eq != std::string::npos) {
      value = path.substr(eq + 1);
      path = path.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw UsageError("flag '" + a + "' needs a value");
      value = extras[++i];
    }
    const auto dot = path.find('.');
    const std::string section = path.substr(0, dot);
    std::string key = path.substr(dot + 1);
    std::replace(key.begin(), key.end(), '-', '_');
    if (!defaults.contains(section) || !defaults[section].contains(key)) throw UsageError("unknown flag '--" + path + "'");
    out.push_back({section + "." + key, value});
  }
  return out;
}

struct Common {
  std::string config;
  std::vector<ConfigOverride> overrides;
};

Config resolve(const Common& common, std::vector<ConfigOverride> extra_front = {}) {
  extra_front.insert(extra_front.end(), common.overrides.begin(), common.overrides.end());
  return load_config(common.config, extra_front);
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("expected a comma-separated integer list, got '" + text + "'");
    }
  }
  if (out.empty()) throw UsageError("empty step list");
  return out;
}

int cmd_gen_data(const Common& common, const std::string& out, std::ostream& os) {
  const auto config = resolve(common);
  const fs::path dir = out.empty() ? config.resolved_out_dir() / "data" : fs::path(out);
  const ToyDataset ds(config.dataset_spec());
  save_dataset(ds, dir);
  os << "dataset " << dir.string() << " n=" << ds.size() << " size=" << ds.image_size() << "\n";
  return 0;
}

int cmd_train(const Common& common, TrainKind kind, bool resume, std::ostream& os) {
  std::vector<ConfigOverride> front{{"train.kind", to_string(kind)}};
  if (resume) front.push_back({"train.resume", "true"});
  const auto config = resolve(common, front);
  const auto dataset = load_or_generate_dataset(config);
  const auto r = run_training(config, dataset);
  os << "run " << r.out_dir.string() << " kind=" << to_string(kind) << " steps=" << r.final_step;
  if (!r.rows.empty()) os << " final_loss=" << r.rows.back().loss;
  if (!r.edge_iou_curve.empty()) {
    os << " edge_iou=" << r.edge_iou_curve.back().second;
    if (const auto s = sudden_converge_step(r.edge_iou_curve)) os << " sudden_converge_step=" << *s;
  }
  os << "\n";
  return 0;
}

int cmd_sample(const Common& common, const SampleRequest& req, const std::string& out, std::ostream& os) {
  const auto config = resolve(common);
  const auto g = generate(config, req);
  const fs::path path = out.empty() ? config.resolved_out_dir() / "samples.pgm" : fs::path(out);
  write_pgm_grid(path, g.images);
  os << "samples " << path.string() << " count=" << req.count << "\n";
  return 0;
}

int cmd_eval(const Common& common, const SampleRequest& req, double bandwidth, const std::string& out,
             std::ostream& os) {
  const auto config = resolve(common);
  const auto g = generate(config, req);
  const auto dataset = load_or_generate_dataset(config);
  const auto s = static_cast<std::int64_t>(dataset.image_size());
  const auto n = std::min<std::int64_t>(req.count, dataset.size());
  const std::vector<float> ref(dataset.images().begin(), dataset.images().begin() + n * s * s);
  nlohmann::json report = nlohmann::json::array();
  MetricReport mmd{"mmd2_rbf", mmd_rbf(g.images, Tensor::from_data({n, s, s}, ref),
                                               bandwidth > 0.0 ? std::optional<double>(bandwidth) : std::nullopt)
                                           .reported(), req.count, n,
                   req.seed, config_fingerprint(config)};
  report.push_back(mmd.to_json());
  if (g.cond_maps.defined()) {
    MetricReport iou{"edge_iou", mean_edge_iou(g.latents, g.cond_maps, config.control.edge_threshold), req.count,
                     req.count, req.seed, config_fingerprint(config)};
    report.push_back(iou.to_json());
  }
  const fs::path path = out.empty() ? config.resolved_out_dir() / "eval.json" : fs::path(out);
  write_text(path, report.dump(2) + "\n");
  os << report.dump() << "\n";
  return 0;
}

int cmd_bench(const Common& common, const std::string& steps_text, const std::string& sampler, float guidance,
              int reps, const std::string& checkpoint, const std::string& out, std::ostream& os) {
  const auto config = resolve(common);
  const auto steps = parse_int_list(steps_text);
  const auto schedule = config.make_schedule();
  const int size = config.encoder().latent_size(config.data.image_size);
  DiffusionTransformer model(config.model, derive_seed(config.train.seed, "model"));
  if (!checkpoint.empty()) assign_parameters(model.named_parameters(), strip_prefix(load_checkpoint(checkpoint), "model."));
  freeze(model);
  const auto head = ConsistencyHead::for_schedule(schedule);
  std::vector<BenchResult> rows;
  for (int s : steps) {
    const std::string kind = sampler == "auto" ? (s <= 8 ? "consistency" : "ddim") : sampler;
    SamplerConfig sc;
    sc.kind = solver_kind_from_string(kind);
    sc.steps = s;
    sc.guidance = guidance;
    sc.seed = derive_seed(config.train.seed, "bench");
    sc.validate(schedule.num_timesteps());
    const auto factory = [&, sc]() -> std::function<void()> {
      auto eps = eps_fn(model);
      const std::vector<int> c{0};
      if (sc.kind == SolverKind::DDIM)
        return [&, eps, sc, c]() { (void)ddim_sample(eps, schedule, sc, c, size, model.null_class()); };
      ConsistencyFn f = [&, eps](const Tensor& z, std::span<const int> t, std::span<const int> cc) {
        return consistency_forward(eps, head, schedule, z, t, cc);
      };
      return [&, f, sc, c]() { (void)lcm_sample(f, schedule, sc, c, size); };
    };
    rows.push_back(benchmark_sampler(to_string(sc.kind), s, factory, reps));
  }
  const auto csv = bench_csv(rows);
  const fs::path path = out.empty() ? config.resolved_out_dir() / "bench.csv" : fs::path(out);
  write_text(path, csv);
  os << csv;
  return 0;
}

int cmd_ablate(const Common& common, const std::string& kind_text, const AblationOptions& opts, int teacher_steps,
               std::ostream& os) {
  const auto kind = ablation_kind_from_string(kind_text);
  auto config = resolve(common);
  const fs::path out = config.io.out_dir.empty() && std::getenv("LCDLAB_OUT") == nullptr
                           ? fs::path("runs") / ("ablate-" + kind_text)
                           : config.resolved_out_dir();
  if (config.train.teacher.empty()) {
    Config t = config;
    t.train.kind = TrainKind::Teacher;
    t.train.steps = teacher_steps;
    t.train.batch.reset();
    t.train.lr.reset();
    t.train.sample_every = 0;
    t.train.checkpoint_every = 0;
    t.train.resume = false;
    t.io.out_dir = (out / "teacher").string();
    t.validate();
    const auto r = run_training(t, load_or_generate_dataset(t));
    config.train.teacher = (r.out_dir / "checkpoints" / "final.pxdl").string();
    os << "teacher " << config.train.teacher << " steps=" << r.final_step << "\n";
  }
  const auto rows = ablation_report(kind, config, opts, out);
  os << "ablation " << (out / "ablation.csv").string() << " rows=" << rows.size() << "\n";
  return 0;
}

int cmd_schedule_dump(const std::string& kind, double beta_start, double beta_end, int T, const std::string& out,
                      std::ostream& os) {
  const NoiseSchedule s(schedule_kind_from_string(kind), beta_start, beta_end, T);
  const fs::path path = out.empty() ? fs::path("curves.csv") : fs::path(out);
  std::ostringstream csv;
  write_schedule_csv(s, csv);
  write_text(path, csv.str());
  os << "schedule " << path.string() << " T=" << T << "\n";
  return 0;
}

int fail(std::ostream& err, int code, const char* kind, const std::string& msg) {
  std::string clean = msg;
  std::replace(clean.begin(), clean.end(), '\n', ' ');
  std::replace(clean.begin(), clean.end(), '"', '\'');
  err << "lcdlab: error code=" << code << " kind=" << kind << " msg=\"" << clean << "\"\n";
  return code;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args = raw_args;
  if (args.size() >= 2 && args[0] == "schedule" && args[1] == "dump") {
    args.erase(args.begin());
    args[0] = "schedule-dump";
  }

  CLI::App app{"lcdlab: consistency distillation and control-adapter laboratory", "lcdlab"};
  app.require_subcommand(1);
  Common common;
  SampleRequest req;
  std::string out_path, steps_text = "4,14,25", bench_sampler = "auto", bench_ckpt, ablate_kind;
  bool resume = false;
  float bench_guidance = 0.0F;
  int reps = 10, teacher_steps = 300;
  AblationOptions ablate_opts;
  std::string sched_kind = "linear";
  double beta_start = 1e-4, beta_end = 0.02;
  int T = 1000;

  const auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config file");
    sub->allow_extras();
    return sub;
  };
  auto* gen = with_config(app.add_subcommand("gen-data", "Generate and save the toy dataset"));
  gen->add_option("--out", out_path, "Dataset directory (default <out_dir>/data)");
  auto* tt = with_config(app.add_subcommand("train-teacher", "Pretrain the diffusion teacher"));
  auto* ds = with_config(app.add_subcommand("distill", "Latent consistency distillation from a teacher"));
  auto* tc = with_config(app.add_subcommand("train-control", "Train a control adapter on a frozen base"));
  for (auto* sub : {tt, ds, tc}) sub->add_flag("--resume", resume, "Continue from checkpoints/latest.pxdl");

  const auto sample_opts = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", req.checkpoint, "Checkpoint to sample from")->required();
    sub->add_option("--sampler", req.sampler, "consistency or ddim");
    sub->add_option("--steps", req.steps, "Sampling steps");
    sub->add_option("--guidance", req.guidance, "CFG scale");
    sub->add_option("--seed", req.seed, "Sampling seed");
    sub->add_option("--count", req.count, "Number of samples");
    sub->add_option("--out", out_path, "Output file");
  };
  auto* sm = with_config(app.add_subcommand("sample", "Write a PGM grid of samples"));
  sample_opts(sm);
  auto* ev = with_config(app.add_subcommand("eval", "MMD (and edge IoU for control) of generated samples"));
  double eval_bandwidth = 0.0;
  ev->add_option("--bandwidth", eval_bandwidth, "RBF bandwidth h (default: median heuristic)");
  req.count = 16;
  sample_opts(ev);
  auto* bn = with_config(app.add_subcommand("bench", "Per-sample latency of samplers"));
  bn->add_option("--steps", steps_text, "Comma-separated step counts");
  bn->add_option("--sampler", bench_sampler, "auto (consistency up to 8 steps, else ddim), consistency or ddim");
  bn->add_option("--guidance", bench_guidance, "CFG scale for ddim");
  bn->add_option("--reps", reps, "Timed repetitions (>= 5)");
  bn->add_option("--checkpoint", bench_ckpt, "Optional model checkpoint");
  bn->add_option("--out", out_path, "CSV output (default <out_dir>/bench.csv)");
  auto* ab = with_config(app.add_subcommand("ablate", "Run an ablation sweep"));
  ab->add_option("--kind", ablate_kind, "cfg_scale, batch_size, n_copy or arch")->required();
  ab->add_option("--budget", ablate_opts.budget, "Training updates per configuration");
  ab->add_option("--eval-every", ablate_opts.eval_every, "Metric interval");
  ab->add_option("--eval-samples", ablate_opts.eval_samples, "Samples per metric evaluation");
  ab->add_option("--teacher-steps", teacher_steps, "Teacher pretraining steps when train.teacher is unset");
  auto* sd = app.add_subcommand("schedule-dump", "Write t, beta, alpha_bar, log_snr as CSV");
  sd->add_option("--kind", sched_kind, "linear or scaled_linear");
  sd->add_option("--beta-start", beta_start);
  sd->add_option("--beta-end", beta_end);
  sd->add_option("--T", T);
  sd->add_option("--out", out_path, "CSV path (default curves.csv)");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << app.help();
    return fail(err, 2, "usage", e.what());
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    common.overrides = parse_overrides(sub->remaining());
    const std::string name = sub->get_name();
    if (name == "gen-data") return cmd_gen_data(common, out_path, out);
    if (name == "train-teacher") return cmd_train(common, TrainKind::Teacher, resume, out);
    if (name == "distill") return cmd_train(common, TrainKind::LCD, resume, out);
    if (name == "train-control") return cmd_train(common, TrainKind::ControlNet, resume, out);
    if (name == "sample") return cmd_sample(common, req, out_path, out);
    if (name == "eval") return cmd_eval(common, req, eval_bandwidth, out_path, out);
    if (name == "bench") return cmd_bench(common, steps_text, bench_sampler, bench_guidance, reps, bench_ckpt, out_path, out);
    if (name == "ablate") return cmd_ablate(common, ablate_kind, ablate_opts, teacher_steps, out);
    if (name == "schedule-dump") return cmd_schedule_dump(sched_kind, beta_start, beta_end, T, out_path, out);
    return fail(err, 2, "usage", "unknown subcommand " + name);
  } catch (const UsageError& e) {
    err << app.help();
    return fail(err, 2, "usage", e.what());
  } catch (const ConfigError& e) {
    return fail(err, 3, "config", e.what());
  } catch (const FormatError& e) {
    return fail(err, 4, "format", e.what());
  } catch (const NumericError& e) {
    return fail(err, 5, "numeric", e.what());
  } catch (const std::exception& e) {
    return fail(err, 1, "runtime", e.what());
  }
}

int cli_dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_dispatch(args, std::cout, std::cerr);
}

}  // namespace lcdlab
