#include "lcdlab/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "lcdlab/error.hpp"

namespace lcdlab::ops {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::RowVectorXf>;
using CMapVec = Eigen::Map<const Eigen::RowVectorXf>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void check_finite(const char* op, const FloatBuffer& v) {
  // Exponent bits all set marks Inf/NaN; the integer reduction vectorizes.
  std::uint32_t bad = 0;
  for (float x : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    bad |= static_cast<std::uint32_t>((bits & 0x7f800000U) == 0x7f800000U);
  }
  if (bad != 0) throw NumericError(std::string(op) + ": non-finite output");
}

// Builds the output node; records the graph only when needed.
Tensor make_result(const char* op, Shape shape, FloatBuffer data, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs_grad = false;
  if (grad_mode_enabled())
    for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  if (needs_grad) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_result_vec(const char* op, Shape shape, FloatBuffer data, const std::vector<Tensor>& inputs,
                       std::function<void(Node&)> backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs_grad = false;
  if (grad_mode_enabled())
    for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  if (needs_grad) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool wants(const NodePtr& p) { return p->requires_grad; }

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw Error(std::string(op) + ": undefined input");
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  require_defined(op, a);
  require_defined(op, b);
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

// Broadcast of `b` against `a`, walked one row of a's last axis at a time:
// row r of `a` reads b at row_off[r] + j * step for j < inner.
struct BroadcastPlan {
  std::int64_t inner = 1;
  std::int64_t step = 1;
  std::vector<std::int64_t> row_off;
};

BroadcastPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size()) shape_fail(op, a, b);
  Shape bb(a.size() - b.size(), 1);
  bb.insert(bb.end(), b.begin(), b.end());
  for (std::size_t i = 0; i < a.size(); ++i)
    if (bb[i] != a[i] && bb[i] != 1) shape_fail(op, a, b);
  const std::size_t r = a.size();
  std::vector<std::int64_t> stride(r, 0);
  std::int64_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    stride[i] = bb[i] == 1 ? 0 : s;
    s *= bb[i];
  }
  BroadcastPlan plan;
  plan.inner = a[r - 1];
  plan.step = stride[r - 1];
  const auto rows = shape_numel(a) / plan.inner;
  plan.row_off.resize(static_cast<std::size_t>(rows));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::int64_t f = 0; f < rows; ++f) {
    plan.row_off[static_cast<std::size_t>(f)] = off;
    for (std::size_t i = r - 1; i-- > 0;) {
      ++idx[i];
      off += stride[i];
      if (idx[i] < a[i]) break;
      off -= stride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return plan;
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  require_defined(op, a);
  const auto& x = a.node()->data;
  FloatBuffer y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  auto pa = a.node();
  return make_result(op, a.shape(), std::move(y), {a}, [pa, deriv](Node& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(pa->data[i], self.data[i]);
  });
}

std::pair<std::int64_t, std::int64_t> outer_inner(const Shape& s, int axis) {
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

int normalize_axis(const char* op, int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  FloatBuffer out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  auto pa = a.node(), pb = b.node();
  return make_result("add", a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    for (const auto& p : {pa, pb}) {
      if (!wants(p)) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  FloatBuffer out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  auto pa = a.node(), pb = b.node();
  return make_result("sub", a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    if (wants(pa)) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  FloatBuffer out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  auto pa = a.node(), pb = b.node();
  return make_result("mul", a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    if (wants(pa)) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
    }
    if (wants(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same("div", a, b);
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  FloatBuffer out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / y[i];
  auto pa = a.node(), pb = b.node();
  return make_result("div", a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    if (wants(pa)) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb->data[i];
    }
    if (wants(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.data[i] / pb->data[i];
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  return unary("scale", a, [s](float x) { return s * x; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary("add_scalar", a, [s](float x) { return x + s; }, [](float, float) { return 1.0F; });
}

Tensor broadcast_add(const Tensor& a, const Tensor& b) {
  require_defined("broadcast_add", a);
  require_defined("broadcast_add", b);
  auto plan = broadcast_plan("broadcast_add", a.shape(), b.shape());
  const float* x = a.node()->data.data();
  const float* y = b.node()->data.data();
  FloatBuffer out(a.node()->data.size());
  const auto n = plan.inner, st = plan.step;
  for (std::size_t r = 0; r < plan.row_off.size(); ++r) {
    const float* yr = y + plan.row_off[r];
    const auto base = static_cast<std::int64_t>(r) * n;
    for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(base + j)] = x[base + j] + yr[j * st];
  }
  auto pa = a.node(), pb = b.node();
  return make_result("broadcast_add", a.shape(), std::move(out), {a, b},
                     [pa, pb, plan = std::move(plan)](Node& self) {
                       if (wants(pa)) {
                         auto& g = pa->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (wants(pb)) {
                         auto& g = pb->ensure_grad();
                         const auto n = plan.inner, st = plan.step;
                         for (std::size_t r = 0; r < plan.row_off.size(); ++r) {
                           float* gr = g.data() + plan.row_off[r];
                           const float* sg = self.grad.data() + static_cast<std::int64_t>(r) * n;
                           for (std::int64_t j = 0; j < n; ++j) gr[j * st] += sg[j];
                         }
                       }
                     });
}

Tensor broadcast_mul(const Tensor& a, const Tensor& b) {
  require_defined("broadcast_mul", a);
  require_defined("broadcast_mul", b);
  auto plan = broadcast_plan("broadcast_mul", a.shape(), b.shape());
  const float* x = a.node()->data.data();
  const float* y = b.node()->data.data();
  FloatBuffer out(a.node()->data.size());
  const auto n = plan.inner, st = plan.step;
  for (std::size_t r = 0; r < plan.row_off.size(); ++r) {
    const float* yr = y + plan.row_off[r];
    const auto base = static_cast<std::int64_t>(r) * n;
    for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(base + j)] = x[base + j] * yr[j * st];
  }
  auto pa = a.node(), pb = b.node();
  return make_result("broadcast_mul", a.shape(), std::move(out), {a, b},
                     [pa, pb, plan = std::move(plan)](Node& self) {
                       const auto n = plan.inner, st = plan.step;
                       if (wants(pa)) {
                         auto& g = pa->ensure_grad();
                         for (std::size_t r = 0; r < plan.row_off.size(); ++r) {
                           const float* yr = pb->data.data() + plan.row_off[r];
                           const auto base = static_cast<std::int64_t>(r) * n;
                           for (std::int64_t j = 0; j < n; ++j)
                             g[static_cast<std::size_t>(base + j)] += self.grad[static_cast<std::size_t>(base + j)] * yr[j * st];
                         }
                       }
                       if (wants(pb)) {
                         auto& g = pb->ensure_grad();
                         for (std::size_t r = 0; r < plan.row_off.size(); ++r) {
                           float* gr = g.data() + plan.row_off[r];
                           const auto base = static_cast<std::int64_t>(r) * n;
                           for (std::int64_t j = 0; j < n; ++j)
                             gr[j * st] += self.grad[static_cast<std::size_t>(base + j)] * pa->data[static_cast<std::size_t>(base + j)];
                         }
                       }
                     });
}

Tensor sqrt(const Tensor& a) {
  return unary("sqrt", a, [](float x) { return std::sqrt(x); }, [](float, float y) { return 0.5F / y; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](float x) { return x * x; }, [](float x, float) { return 2.0F * x; });
}

Tensor gelu(const Tensor& a) {
  constexpr float kC = 0.7978845608028654F;  // sqrt(2/pi)
  constexpr float kA = 0.044715F;
  require_defined("gelu", a);
  const auto n = static_cast<Eigen::Index>(a.numel());
  const Eigen::Map<const Eigen::ArrayXf> x(a.node()->data.data(), n);
  const Eigen::ArrayXf x2 = x.square();
  const Eigen::ArrayXf th = (kC * (x + kA * x2 * x)).tanh();
  FloatBuffer y(static_cast<std::size_t>(n)), dy(static_cast<std::size_t>(n));
  Eigen::Map<Eigen::ArrayXf>(y.data(), n) = 0.5F * x * (1.0F + th);
  Eigen::Map<Eigen::ArrayXf>(dy.data(), n) =
      0.5F * (1.0F + th) + 0.5F * x * (1.0F - th.square()) * kC * (1.0F + 3.0F * kA * x2);
  auto pa = a.node();
  return make_result("gelu", a.shape(), std::move(y), {a}, [pa, dy = std::move(dy)](Node& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dy[i];
  });
}

Tensor silu(const Tensor& a) {
  require_defined("silu", a);
  const auto n = static_cast<Eigen::Index>(a.numel());
  const Eigen::Map<const Eigen::ArrayXf> x(a.node()->data.data(), n);
  const Eigen::ArrayXf sig = 1.0F / (1.0F + (-x).exp());
  FloatBuffer y(static_cast<std::size_t>(n)), dy(static_cast<std::size_t>(n));
  Eigen::Map<Eigen::ArrayXf>(y.data(), n) = x * sig;
  Eigen::Map<Eigen::ArrayXf>(dy.data(), n) = sig * (1.0F + x * (1.0F - sig));
  auto pa = a.node();
  return make_result("silu", a.shape(), std::move(y), {a}, [pa, dy = std::move(dy)](Node& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dy[i];
  });
}

Tensor softmax(const Tensor& a) {
  require_defined("softmax", a);
  const auto d = a.shape().back();
  const auto rows = a.numel() / d;
  const auto& x = a.node()->data;
  FloatBuffer y(x.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = x.data() + r * d;
    float* yr = y.data() + r * d;
    const float mx = *std::max_element(xr, xr + d);
    float s = 0.0F;
    for (std::int64_t j = 0; j < d; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::int64_t j = 0; j < d; ++j) yr[j] /= s;
  }
  auto pa = a.node();
  return make_result("softmax", a.shape(), std::move(y), {a}, [pa, d, rows](Node& self) {
    auto& g = pa->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* yr = self.data.data() + r * d;
      const float* gy = self.grad.data() + r * d;
      float dot = 0.0F;
      for (std::int64_t j = 0; j < d; ++j) dot += gy[j] * yr[j];
      for (std::int64_t j = 0; j < d; ++j) g[static_cast<std::size_t>(r * d + j)] += yr[j] * (gy[j] - dot);
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  FloatBuffer out(static_cast<std::size_t>(m * n));
  MapMat(out.data(), m, n).noalias() = CMapMat(a.node()->data.data(), m, k) * CMapMat(b.node()->data.data(), k, n);
  auto pa = a.node(), pb = b.node();
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](Node& self) {
    CMapMat gy(self.grad.data(), m, n);
    if (wants(pa)) MapMat(pa->ensure_grad().data(), m, k).noalias() += gy * CMapMat(pb->data.data(), k, n).transpose();
    if (wants(pb)) MapMat(pb->ensure_grad().data(), k, n).noalias() += CMapMat(pa->data.data(), m, k).transpose() * gy;
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined("linear", x);
  require_defined("linear", weight);
  if (weight.rank() != 2 || x.shape().back() != weight.dim(1)) shape_fail("linear", x.shape(), weight.shape());
  const auto in = weight.dim(1), out_dim = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) shape_fail("linear", weight.shape(), bias.shape());
  const auto rows = x.numel() / in;
  FloatBuffer out(static_cast<std::size_t>(rows * out_dim));
  MapMat y(out.data(), rows, out_dim);
  y.noalias() = CMapMat(x.node()->data.data(), rows, in) * CMapMat(weight.node()->data.data(), out_dim, in).transpose();
  if (bias.defined()) y.rowwise() += CMapVec(bias.node()->data.data(), out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  auto px = x.node(), pw = weight.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  auto backward = [px, pw, pb, rows, in, out_dim](Node& self) {
    CMapMat gy(self.grad.data(), rows, out_dim);
    if (wants(px))
      MapMat(px->ensure_grad().data(), rows, in).noalias() += gy * CMapMat(pw->data.data(), out_dim, in);
    if (wants(pw))
      MapMat(pw->ensure_grad().data(), out_dim, in).noalias() += gy.transpose() * CMapMat(px->data.data(), rows, in);
    if (pb && wants(pb)) MapVec(pb->ensure_grad().data(), out_dim) += gy.colwise().sum();
  };
  if (bias.defined()) return make_result("linear", std::move(shape), std::move(out), {x, weight, bias}, backward);
  return make_result("linear", std::move(shape), std::move(out), {x, weight}, backward);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  require_defined("layer_norm", x);
  const auto d = x.shape().back();
  if (gain.defined() && (gain.rank() != 1 || gain.dim(0) != d)) shape_fail("layer_norm", x.shape(), gain.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d)) shape_fail("layer_norm", x.shape(), bias.shape());
  const auto rows = x.numel() / d;
  const auto& in = x.node()->data;
  FloatBuffer xhat(in.size()), rstd(static_cast<std::size_t>(rows)), out(in.size());
  const float* gp = gain.defined() ? gain.node()->data.data() : nullptr;
  const float* bp = bias.defined() ? bias.node()->data.data() : nullptr;
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = in.data() + r * d;
    double m = 0.0;
    for (std::int64_t j = 0; j < d; ++j) m += xr[j];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::int64_t j = 0; j < d; ++j) v += (xr[j] - m) * (xr[j] - m);
    v /= static_cast<double>(d);
    const float rs = static_cast<float>(1.0 / std::sqrt(v + eps));
    rstd[static_cast<std::size_t>(r)] = rs;
    for (std::int64_t j = 0; j < d; ++j) {
      const auto i = static_cast<std::size_t>(r * d + j);
      xhat[i] = static_cast<float>(xr[j] - m) * rs;
      out[i] = xhat[i] * (gp ? gp[j] : 1.0F) + (bp ? bp[j] : 0.0F);
    }
  }
  auto px = x.node();
  auto pg = gain.defined() ? gain.node() : nullptr;
  auto pbias = bias.defined() ? bias.node() : nullptr;
  auto backward = [px, pg, pbias, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
    if (pg && wants(pg)) {
      auto& g = pg->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) {
          const auto i = static_cast<std::size_t>(r * d + j);
          g[static_cast<std::size_t>(j)] += self.grad[i] * xhat[i];
        }
    }
    if (pbias && wants(pbias)) {
      auto& g = pbias->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) g[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(r * d + j)];
    }
    if (!wants(px)) return;
    auto& g = px->ensure_grad();
    FloatBuffer dxhat(static_cast<std::size_t>(d));
    for (std::int64_t r = 0; r < rows; ++r) {
      float mean_d = 0.0F, mean_dx = 0.0F;
      for (std::int64_t j = 0; j < d; ++j) {
        const auto i = static_cast<std::size_t>(r * d + j);
        dxhat[static_cast<std::size_t>(j)] = self.grad[i] * (pg ? pg->data[static_cast<std::size_t>(j)] : 1.0F);
        mean_d += dxhat[static_cast<std::size_t>(j)];
        mean_dx += dxhat[static_cast<std::size_t>(j)] * xhat[i];
      }
      mean_d /= static_cast<float>(d);
      mean_dx /= static_cast<float>(d);
      const float rs = rstd[static_cast<std::size_t>(r)];
      for (std::int64_t j = 0; j < d; ++j) {
        const auto i = static_cast<std::size_t>(r * d + j);
        g[i] += rs * (dxhat[static_cast<std::size_t>(j)] - mean_d - xhat[i] * mean_dx);
      }
    }
  };
  std::vector<Tensor> inputs{x};
  if (gain.defined()) inputs.push_back(gain);
  if (bias.defined()) inputs.push_back(bias);
  return make_result_vec("layer_norm", x.shape(), std::move(out), inputs, backward);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  require_same("attention", q, k);
  require_same("attention", q, v);
  if (q.rank() != 4) throw ShapeError("attention: expected [B,H,L,dh], got " + shape_str(q.shape()));
  const auto bh = q.dim(0) * q.dim(1), len = q.dim(2), dh = q.dim(3);
  const float sc = 1.0F / std::sqrt(static_cast<float>(dh));
  const auto blk = len * dh;
  FloatBuffer out(q.node()->data.size());
  FloatBuffer probs(static_cast<std::size_t>(bh * len * len));
  for (std::int64_t i = 0; i < bh; ++i) {
    CMapMat qm(q.node()->data.data() + i * blk, len, dh);
    CMapMat km(k.node()->data.data() + i * blk, len, dh);
    CMapMat vm(v.node()->data.data() + i * blk, len, dh);
    MapMat p(probs.data() + i * len * len, len, len);
    p.noalias() = (qm * km.transpose()) * sc;
    for (std::int64_t r = 0; r < len; ++r) {
      auto row = p.row(r);
      row.array() -= row.maxCoeff();
      row = row.array().exp().matrix();
      row /= row.sum();
    }
    MapMat(out.data() + i * blk, len, dh).noalias() = p * vm;
  }
  auto pq = q.node(), pk = k.node(), pv = v.node();
  return make_result(
      "attention", q.shape(), std::move(out), {q, k, v},
      [pq, pk, pv, bh, len, dh, sc, blk, probs = std::move(probs)](Node& self) {
        RowMat dp(len, len), ds(len, len);
        for (std::int64_t i = 0; i < bh; ++i) {
          CMapMat go(self.grad.data() + i * blk, len, dh);
          CMapMat p(probs.data() + i * len * len, len, len);
          CMapMat qm(pq->data.data() + i * blk, len, dh);
          CMapMat km(pk->data.data() + i * blk, len, dh);
          CMapMat vm(pv->data.data() + i * blk, len, dh);
          if (wants(pv)) MapMat(pv->ensure_grad().data() + i * blk, len, dh).noalias() += p.transpose() * go;
          dp.noalias() = go * vm.transpose();
          const Eigen::VectorXf rowdot = (dp.array() * p.array()).rowwise().sum();
          ds = p.array() * (dp.colwise() - rowdot).array();
          if (wants(pq)) MapMat(pq->ensure_grad().data() + i * blk, len, dh).noalias() += (ds * km) * sc;
          if (wants(pk)) MapMat(pk->ensure_grad().data() + i * blk, len, dh).noalias() += (ds.transpose() * qm) * sc;
        }
      });
}

Tensor sum(const Tensor& a) {
  require_defined("sum", a);
  double s = 0.0;
  for (float x : a.node()->data) s += x;
  auto pa = a.node();
  return make_result("sum", {1}, {static_cast<float>(s)}, {a}, [pa](Node& self) {
    auto& g = pa->ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  require_defined("mean", a);
  double s = 0.0;
  for (float x : a.node()->data) s += x;
  const auto n = static_cast<float>(a.numel());
  auto pa = a.node();
  return make_result("mean", {1}, {static_cast<float>(s / n)}, {a}, [pa, n](Node& self) {
    auto& g = pa->ensure_grad();
    const float d = self.grad[0] / n;
    for (auto& x : g) x += d;
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  require_defined("reshape", a);
  if (shape_numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
  for (auto e : shape)
    if (e <= 0) shape_fail("reshape", a.shape(), shape);
  auto pa = a.node();
  return make_result("reshape", shape, a.node()->data, {a}, [pa](Node& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<int>& dims) {
  require_defined("permute", a);
  const auto& in_shape = a.shape();
  const std::size_t r = in_shape.size();
  if (dims.size() != r) throw ShapeError("permute: expected " + std::to_string(r) + " dims for " + shape_str(in_shape));
  std::vector<bool> seen(r, false);
  for (int d : dims) {
    if (d < 0 || static_cast<std::size_t>(d) >= r || seen[static_cast<std::size_t>(d)])
      throw ShapeError("permute: invalid permutation for " + shape_str(in_shape));
    seen[static_cast<std::size_t>(d)] = true;
  }
  std::vector<std::int64_t> in_stride(r);
  std::int64_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = s;
    s *= in_shape[i];
  }
  Shape out_shape(r);
  std::vector<std::int64_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(dims[i])];
    step[i] = in_stride[static_cast<std::size_t>(dims[i])];
  }
  // Row r of the output (last axis) starts at input offset row_off[r] and
  // advances by `inner_step`.
  const auto inner = out_shape[r - 1];
  const auto inner_step = step[r - 1];
  const auto rows = a.numel() / inner;
  std::vector<std::int64_t> row_off(static_cast<std::size_t>(rows));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::int64_t f = 0; f < rows; ++f) {
    row_off[static_cast<std::size_t>(f)] = off;
    for (std::size_t i = r - 1; i-- > 0;) {
      ++idx[i];
      off += step[i];
      if (idx[i] < out_shape[i]) break;
      off -= step[i] * idx[i];
      idx[i] = 0;
    }
  }
  const float* x = a.node()->data.data();
  FloatBuffer out(static_cast<std::size_t>(a.numel()));
  for (std::int64_t q = 0; q < rows; ++q) {
    const float* xr = x + row_off[static_cast<std::size_t>(q)];
    float* yr = out.data() + q * inner;
    for (std::int64_t j = 0; j < inner; ++j) yr[j] = xr[j * inner_step];
  }
  auto pa = a.node();
  return make_result("permute", std::move(out_shape), std::move(out), {a},
                     [pa, row_off = std::move(row_off), inner, inner_step](Node& self) {
                       auto& g = pa->ensure_grad();
                       for (std::size_t q = 0; q < row_off.size(); ++q) {
                         float* gr = g.data() + row_off[q];
                         const float* sg = self.grad.data() + static_cast<std::int64_t>(q) * inner;
                         for (std::int64_t j = 0; j < inner; ++j) gr[j * inner_step] += sg[j];
                       }
                     });
}

Tensor transpose(const Tensor& a, int dim0, int dim1) {
  require_defined("transpose", a);
  std::vector<int> dims(a.rank());
  std::iota(dims.begin(), dims.end(), 0);
  dim0 = normalize_axis("transpose", dim0, a.rank());
  dim1 = normalize_axis("transpose", dim1, a.rank());
  std::swap(dims[static_cast<std::size_t>(dim0)], dims[static_cast<std::size_t>(dim1)]);
  return permute(a, dims);
}

Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
  require_defined("narrow", a);
  axis = normalize_axis("narrow", axis, a.rank());
  const auto extent = a.dim(static_cast<std::size_t>(axis));
  if (start < 0 || length <= 0 || start + length > extent)
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of " + shape_str(a.shape()));
  auto [outer, inner] = outer_inner(a.shape(), axis);
  Shape shape = a.shape();
  shape[static_cast<std::size_t>(axis)] = length;
  const auto& x = a.node()->data;
  FloatBuffer out(static_cast<std::size_t>(outer * length * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.begin() + (o * extent + start) * inner, length * inner, out.begin() + o * length * inner);
  auto pa = a.node();
  return make_result("narrow", std::move(shape), std::move(out), {a},
                     [pa, outer = outer, inner = inner, extent, start, length](Node& self) {
                       auto& g = pa->ensure_grad();
                       for (std::int64_t o = 0; o < outer; ++o)
                         for (std::int64_t j = 0; j < length * inner; ++j)
                           g[static_cast<std::size_t>((o * extent + start) * inner + j)] +=
                               self.grad[static_cast<std::size_t>(o * length * inner + j)];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined("concat", p);
  axis = normalize_axis("concat", axis, parts[0].rank());
  Shape shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) shape_fail("concat", shape, s);
    s[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
    if (s != shape) shape_fail("concat", parts[0].shape(), p.shape());
    total += p.dim(static_cast<std::size_t>(axis));
  }
  shape[static_cast<std::size_t>(axis)] = total;
  auto [outer, inner] = outer_inner(shape, axis);
  FloatBuffer out(static_cast<std::size_t>(shape_numel(shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t acc = 0;
  for (const auto& p : parts) {
    const auto len = p.dim(static_cast<std::size_t>(axis));
    offsets.push_back(acc);
    const auto& x = p.node()->data;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(x.begin() + o * len * inner, len * inner, out.begin() + (o * total + acc) * inner);
    acc += len;
  }
  std::vector<NodePtr> nodes;
  std::vector<std::int64_t> lens;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    lens.push_back(p.dim(static_cast<std::size_t>(axis)));
  }
  return make_result_vec("concat", std::move(shape), std::move(out), parts,
                         [nodes, lens, offsets, outer = outer, inner = inner, total](Node& self) {
                           for (std::size_t k = 0; k < nodes.size(); ++k) {
                             if (!wants(nodes[k])) continue;
                             auto& g = nodes[k]->ensure_grad();
                             for (std::int64_t o = 0; o < outer; ++o)
                               for (std::int64_t j = 0; j < lens[k] * inner; ++j)
                                 g[static_cast<std::size_t>(o * lens[k] * inner + j)] +=
                                     self.grad[static_cast<std::size_t>((o * total + offsets[k]) * inner + j)];
                           }
                         });
}

Tensor embedding(const Tensor& table, std::span<const int> indices) {
  require_defined("embedding", table);
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (indices.empty()) throw ShapeError("embedding: empty index list");
  const auto rows = table.dim(0), d = table.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  FloatBuffer out(idx.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows)
      throw ShapeError("embedding: index " + std::to_string(idx[i]) + " outside table of " + shape_str(table.shape()));
    std::copy_n(table.node()->data.begin() + idx[i] * d, d, out.begin() + static_cast<std::int64_t>(i) * d);
  }
  auto pt = table.node();
  const auto n = static_cast<std::int64_t>(idx.size());
  return make_result("embedding", {n, d}, std::move(out), {table},
                     [pt, idx = std::move(idx), d](Node& self) {
                       auto& g = pt->ensure_grad();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::int64_t j = 0; j < d; ++j)
                           g[static_cast<std::size_t>(idx[i] * d + j)] +=
                               self.grad[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
                     });
}

}  // namespace lcdlab::ops
