#include "lcdlab/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "lcdlab/data.hpp"
#include "lcdlab/error.hpp"
#include "lcdlab/io.hpp"
#include "lcdlab/rng.hpp"
#include "lcdlab/training.hpp"

namespace lcdlab {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD rows_as_matrix(const Tensor& t) {
  if (t.rank() < 2) throw ShapeError("mmd: expected a batch [N, ...], got " + shape_str(t.shape()));
  const auto n = t.dim(0);
  const auto d = t.numel() / n;
  const auto data = t.data();
  MatD m(n, d);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) m(i, j) = data[static_cast<std::size_t>(i * d + j)];
  return m;
}

// Pairwise squared distances between rows of a and b.
MatD sq_dists(const MatD& a, const MatD& b) {
  const Eigen::VectorXd na = a.rowwise().squaredNorm();
  const Eigen::VectorXd nb = b.rowwise().squaredNorm();
  MatD d = -2.0 * a * b.transpose();
  d.colwise() += na;
  d.rowwise() += nb.transpose();
  return d.cwiseMax(0.0);
}

}  // namespace

MmdResult mmd_rbf(const Tensor& x, const Tensor& y, std::optional<double> bandwidth) {
  if (!x.defined() || !y.defined()) throw Error("mmd: undefined input");
  if (x.dim(0) < 2 || y.dim(0) < 2) throw Error("mmd: each set needs at least two samples");
  const MatD a = rows_as_matrix(x), b = rows_as_matrix(y);
  if (a.cols() != b.cols()) throw ShapeError("mmd: sample sizes differ: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  const MatD dxx = sq_dists(a, a), dyy = sq_dists(b, b), dxy = sq_dists(a, b);
  const auto n = a.rows(), m = b.rows();

  double h;
  if (bandwidth) {
    if (!(*bandwidth > 0.0)) throw ConfigError("mmd: bandwidth must be positive");
    h = *bandwidth;
  } else {
    std::vector<double> pooled;
    pooled.reserve(static_cast<std::size_t>((n + m) * (n + m - 1) / 2));
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j) pooled.push_back(dxx(i, j));
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = i + 1; j < m; ++j) pooled.push_back(dyy(i, j));
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < m; ++j) pooled.push_back(dxy(i, j));
    const auto mid = pooled.begin() + static_cast<std::ptrdiff_t>(pooled.size() / 2);
    std::nth_element(pooled.begin(), mid, pooled.end());
    double med = *mid;
    if (pooled.size() % 2 == 0) med = 0.5 * (med + *std::max_element(pooled.begin(), mid));
    h = med > 0.0 ? std::sqrt(med / 2.0) : 1.0;
  }
  const double g = 1.0 / (2.0 * h * h);
  const auto k_sum = [g](const MatD& d, bool skip_diag) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < d.rows(); ++i)
      for (Eigen::Index j = 0; j < d.cols(); ++j)
        if (!skip_diag || i != j) s += std::exp(-g * d(i, j));
    return s;
  };
  const double sxx = k_sum(dxx, true), syy = k_sum(dyy, true), sxy = k_sum(dxy, false);
  const double nn = static_cast<double>(n), mm = static_cast<double>(m);
  MmdResult r;
  r.bandwidth = h;
  r.mmd2_unbiased = sxx / (nn * (nn - 1.0)) + syy / (mm * (mm - 1.0)) - 2.0 * sxy / (nn * mm);
  // The diagonal kernel values are exp(0) = 1.
  r.mmd2_biased = (sxx + nn) / (nn * nn) + (syy + mm) / (mm * mm) - 2.0 * sxy / (nn * mm);
  return r;
}

double edge_iou(std::span<const float> generated, std::span<const float> cond_map, int size, float threshold) {
  const auto n = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  if (generated.size() != n || cond_map.size() != n)
    throw ShapeError("edge_iou: expected two " + std::to_string(size) + "x" + std::to_string(size) + " maps");
  const auto edges = sobel_edges(generated, size, size);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool a = edges[i] > threshold;
    const bool b = cond_map[i] > threshold;
    inter += static_cast<std::size_t>(a && b);
    uni += static_cast<std::size_t>(a || b);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double mean_edge_iou(const Tensor& generated, const Tensor& cond_maps, float threshold) {
  if (generated.rank() != 3 || generated.shape() != cond_maps.shape() || generated.dim(1) != generated.dim(2))
    throw ShapeError("edge_iou: shapes " + shape_str(generated.shape()) + " and " + shape_str(cond_maps.shape()));
  const auto b = generated.dim(0);
  const auto s = static_cast<int>(generated.dim(1));
  const auto per = static_cast<std::size_t>(s) * static_cast<std::size_t>(s);
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i)
    total += edge_iou(generated.data().subspan(static_cast<std::size_t>(i) * per, per),
                      cond_maps.data().subspan(static_cast<std::size_t>(i) * per, per), s, threshold);
  return total / static_cast<double>(b);
}

std::optional<std::int64_t> sudden_converge_step(const std::vector<std::pair<std::int64_t, double>>& curve) {
  if (curve.size() < 2) return std::nullopt;
  const double first = curve.front().second;
  double best = first;
  for (const auto& [step, v] : curve) best = std::max(best, v);
  if (!(best > first)) return std::nullopt;
  const double half = first + 0.5 * (best - first);
  for (const auto& [step, v] : curve)
    if (v >= half && step != curve.front().first) return step;
  return std::nullopt;
}

BenchResult benchmark_sampler(const std::string& sampler, int steps,
                              const std::function<std::function<void()>()>& factory, int reps, int warmup) {
  if (reps < 5) throw ConfigError("bench: reps must be >= 5");
  if (warmup < 2) throw ConfigError("bench: warmup must be >= 2");
  using clock = std::chrono::steady_clock;
  // Smallest observable clock increment.
  auto tick = clock::duration::max();
  for (int i = 0; i < 1000; ++i) {
    const auto a = clock::now();
    auto b = clock::now();
    while (b == a) b = clock::now();
    tick = std::min(tick, b - a);
  }
  const auto run = factory();
  for (int i = 0; i < warmup; ++i) run();
  std::vector<double> ms;
  for (int i = 0; i < reps; ++i) {
    const auto a = clock::now();
    run();
    const auto d = clock::now() - a;
    if (d < 10 * tick)
      throw Error("bench: a timed call lasted fewer than 10 clock ticks; timer resolution is insufficient");
    ms.push_back(std::chrono::duration<double, std::milli>(d).count());
  }
  double mean = 0.0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(reps);
  double var = 0.0;
  for (double v : ms) var += (v - mean) * (v - mean);
  var /= static_cast<double>(reps - 1);
  return BenchResult{sampler, steps, mean, std::sqrt(var), reps};
}

std::string bench_csv(const std::vector<BenchResult>& rows) {
  std::string out = "sampler,steps,mean_ms,std_ms\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.4f,%.4f\n", r.sampler.c_str(), r.steps, r.mean_ms, r.std_ms);
    out += buf;
  }
  return out;
}

nlohmann::json MetricReport::to_json() const {
  return {{"metric", metric}, {"value", value}, {"n_x", n_x}, {"n_y", n_y}, {"seed", seed},
          {"config_fingerprint", config_fingerprint}};
}

std::string config_fingerprint(const Config& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config_to_json(config).dump())));
  return buf;
}

std::string to_string(AblationKind kind) {
  switch (kind) {
    case AblationKind::CfgScale: return "cfg_scale";
    case AblationKind::BatchSize: return "batch_size";
    case AblationKind::NCopy: return "n_copy";
    case AblationKind::Arch: return "arch";
  }
  return "cfg_scale";
}

AblationKind ablation_kind_from_string(const std::string& name) {
  if (name == "cfg_scale") return AblationKind::CfgScale;
  if (name == "batch_size") return AblationKind::BatchSize;
  if (name == "n_copy") return AblationKind::NCopy;
  if (name == "arch") return AblationKind::Arch;
  throw ConfigError("ablate: unknown kind '" + name + "' (expected cfg_scale, batch_size, n_copy or arch)");
}

std::vector<std::pair<std::string, Config>> ablation_configs(AblationKind kind, const Config& base) {
  std::vector<std::pair<std::string, Config>> out;
  switch (kind) {
    case AblationKind::CfgScale:
      for (float omega : {3.5F, 4.5F}) {
        Config c = base;
        c.train.kind = TrainKind::LCD;
        c.lcd.omega_fix = omega;
        char name[32];
        std::snprintf(name, sizeof name, "omega=%g", static_cast<double>(omega));
        out.emplace_back(name, c);
      }
      break;
    case AblationKind::BatchSize:
      for (int batch : {8, 64}) {
        Config c = base;
        c.train.kind = TrainKind::LCD;
        c.train.batch = batch;
        out.emplace_back("batch=" + std::to_string(batch), c);
      }
      break;
    case AblationKind::NCopy: {
      std::vector<int> grid;
      for (int n : {1, 4, 7, 13, 27}) {
        const int clipped = std::min(n, base.model.depth);
        if (std::find(grid.begin(), grid.end(), clipped) == grid.end()) grid.push_back(clipped);
      }
      for (int n : grid) {
        Config c = base;
        c.train.kind = TrainKind::ControlNet;
        c.control.variant = ControlVariant::Transformer;
        c.control.n_copy = n;
        out.emplace_back("n_copy=" + std::to_string(n), c);
      }
      break;
    }
    case AblationKind::Arch:
      for (auto v : {ControlVariant::UNet, ControlVariant::Transformer}) {
        Config c = base;
        c.train.kind = TrainKind::ControlNet;
        c.control.variant = v;
        out.emplace_back(to_string(v), c);
      }
      break;
  }
  return out;
}

std::string ablation_csv_header() { return "kind,config,step,metric,value\n"; }

std::string format_ablation_row(const AblationRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%s,%lld,%s,%.9g\n", row.kind.c_str(), row.config.c_str(),
                static_cast<long long>(row.step), row.metric.c_str(), row.value);
  return buf;
}

std::vector<AblationRow> ablation_report(AblationKind kind, const Config& base, const AblationOptions& options,
                                         const std::filesystem::path& out_dir) {
  if (options.budget < 1 || options.eval_every < 1 || options.eval_samples < 2)
    throw ConfigError("ablate: budget, eval_every must be >= 1 and eval_samples >= 2");
  const auto configs = ablation_configs(kind, base);
  if (configs.size() < 2) throw ConfigError("ablate: a sweep needs at least two configurations");
  std::filesystem::create_directories(out_dir / "samples");

  const ToyDataset dataset = load_or_generate_dataset(base);
  const auto s = static_cast<std::int64_t>(dataset.image_size());
  const auto n_ref = std::min<std::int64_t>(options.eval_samples, dataset.size());
  const std::vector<float> ref_pixels(dataset.images().begin(), dataset.images().begin() + n_ref * s * s);
  const Tensor reference = Tensor::from_data({n_ref, s, s}, ref_pixels);

  const bool control = kind == AblationKind::NCopy || kind == AblationKind::Arch;
  const std::uint64_t preview_seed = derive_seed(base.train.seed, "ablation");
  std::vector<AblationRow> rows;
  std::string curves = "kind,config,step,loss\n";
  for (const auto& [name, cfg] : configs) {
    Config c = cfg;
    c.train.steps = options.budget;
    if (control) c.train.sample_count = std::max(c.train.sample_count, options.eval_samples);
    c.validate();
    auto trainer = make_trainer(c, dataset);
    Preview last;
    const auto evaluate = [&](std::int64_t step) {
      last = trainer->preview(options.eval_samples, preview_seed);
      AblationRow row{to_string(kind), name, step, control ? "edge_iou" : "mmd2", 0.0};
      row.value = control ? mean_edge_iou(last.latents, last.cond_maps, c.control.edge_threshold)
                          : mmd_rbf(last.images, reference).reported();
      rows.push_back(row);
    };
    evaluate(0);
    for (std::int64_t step = 0; step < options.budget; ++step) {
      const auto r = trainer->step(step);
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s,%s,%lld,%.9g\n", to_string(kind).c_str(), name.c_str(),
                    static_cast<long long>(step + 1), static_cast<double>(r.loss));
      curves += buf;
      if ((step + 1) % options.eval_every == 0 || step + 1 == options.budget) evaluate(step + 1);
    }
    std::string file = name;
    std::replace(file.begin(), file.end(), '=', '-');
    write_pgm_grid(out_dir / "samples" / (file + ".pgm"), last.images);
  }
  std::string csv = ablation_csv_header();
  for (const auto& r : rows) csv += format_ablation_row(r);
  write_text(out_dir / "ablation.csv", csv);
  write_text(out_dir / "curves.csv", curves);
  return rows;
}

}  // namespace lcdlab
