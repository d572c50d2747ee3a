#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lcdlab/ops.hpp"
#include "lcdlab/rng.hpp"

namespace lcdlab::testing {

namespace {

double weighted_sum(const Tensor& out, const std::vector<double>& w) {
  auto d = out.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) acc += w[i] * static_cast<double>(d[i]);
  return acc;
}

}  // namespace

Tensor random_leaf(const Shape& shape, std::uint64_t seed, float stddev, float offset) {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = offset + stddev * rng.normal();
  return Tensor::from_data(shape, std::move(v), true);
}

GradCheckResult grad_check(const GradFn& f, const std::vector<Tensor>& inputs, double h, int max_entries,
                           std::uint64_t seed, bool wide) {
  Rng rng(seed);
  for (const auto& x : inputs) {
    Tensor t = x;
    t.zero_grad();
  }
  const Tensor out = f(inputs);
  std::vector<double> w(static_cast<std::size_t>(out.numel()));
  std::vector<float> wf(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    wf[i] = rng.normal();
    w[i] = wf[i];
  }
  ops::sum(ops::mul(out, Tensor::from_data(out.shape(), wf))).backward();

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor x = inputs[k];
    if (!x.requires_grad()) {
      result.rel_err.push_back(0.0);
      continue;
    }
    const auto n = static_cast<std::size_t>(x.numel());
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), 0);
    if (n > static_cast<std::size_t>(max_entries)) {
      for (std::size_t i = 0; i < static_cast<std::size_t>(max_entries); ++i) {
        const auto j = i + static_cast<std::size_t>(rng.next_u64() % (n - i));
        std::swap(entries[i], entries[j]);
      }
      entries.resize(static_cast<std::size_t>(max_entries));
    }
    std::vector<float> analytic(n, 0.0F);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (auto e : entries) {
      auto data = x.mutable_data();
      const float orig = data[e];
      double fd = 0.0;
      {
        NoGradGuard guard;
        const auto eval_at = [&](double offset) {
          data[e] = static_cast<float>(orig + offset);
          return weighted_sum(f(inputs), w);
        };
        // the float32 perturbation is not exactly h
        const double hu = static_cast<double>(static_cast<float>(orig + h)) - orig;
        const double hd = orig - static_cast<double>(static_cast<float>(orig - h));
        if (wide) {
          fd = (-eval_at(2 * h) + 8 * eval_at(h) - 8 * eval_at(-h) + eval_at(-2 * h)) / (12 * h);
        } else {
          fd = (eval_at(h) - eval_at(-h)) / (hu + hd);
        }
      }
      data[e] = orig;
      const double a = analytic[e];
      diff2 += (a - fd) * (a - fd);
      a2 += a * a;
      n2 += fd * fd;
    }
    const double scale = std::sqrt(std::max(a2, n2));
    const double rel = scale < 1e-7 ? 0.0 : std::sqrt(diff2) / scale;
    result.rel_err.push_back(rel);
    if (rel > result.max_rel_err) {
      result.max_rel_err = rel;
      result.worst_input = k;
    }
  }
  return result;
}

}  // namespace lcdlab::testing
