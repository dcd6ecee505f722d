#include "plc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "plc/error.hpp"
#include "plc/kernels.hpp"

namespace plc::ops {

namespace {

thread_local KinkMonitor* g_monitor = nullptr;

void report_kink(double margin) {
  if (g_monitor) g_monitor->observe(margin);
}

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

// Elementwise unary op with derivative expressed through input and output.
template <typename Fwd, typename Deriv>
Tensor unary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  Tensor y = make_op_output(x.shape(), std::move(out), op, {&x});
  if (y.requires_grad()) {
    active_tape()->record(op, {x}, y, [x, y, deriv]() mutable {
      if (!x.requires_grad()) return;
      const auto g = y.grad();
      const auto xv = x.data();
      const auto yv = y.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] * deriv(xv[i], yv[i]);
      }
    });
  }
  return y;
}

void accumulate(const Tensor& t, std::span<const double> g, double scale) {
  if (!t.requires_grad()) return;
  auto gt = t.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) gt[i] += scale * g[i];
}

}  // namespace

KinkMonitor::KinkMonitor()
    : previous_(g_monitor),
      min_margin_(std::numeric_limits<double>::infinity()) {
  g_monitor = this;
}

KinkMonitor::~KinkMonitor() { g_monitor = previous_; }

void KinkMonitor::observe(double margin) {
  min_margin_ = std::min(min_margin_, margin);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t pad) {
  constexpr std::string_view op = "conv2d";
  require_rank(op, x, 4);
  require_rank(op, w, 4);
  if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) +
                     " incompatible with input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0))) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " incompatible with weight " + shape_str(w.shape()));
  }
  kernels::ConvDims d;
  d.batch = x.dim(0);
  d.in_channels = x.dim(1);
  d.height = x.dim(2);
  d.width = x.dim(3);
  d.out_channels = w.dim(0);
  d.kernel = w.dim(2);
  d.pad = pad;
  if (d.height + 2 * pad < d.kernel || d.width + 2 * pad < d.kernel) {
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                     " larger than padded input " + shape_str(x.shape()));
  }
  const Shape out_shape{d.batch, d.out_channels, d.out_height(), d.out_width()};
  std::vector<double> out(shape_numel(out_shape));
  kernels::omp::conv2d_forward(
      d, x.data(), w.data(),
      bias.defined() ? bias.data() : std::span<const double>{}, out);
  Tensor y = make_op_output(out_shape, std::move(out), op, {&x, &w, &bias});
  if (y.requires_grad()) {
    std::vector<Tensor> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    active_tape()->record(op, std::move(inputs), y, [x, w, bias, y, d]() mutable {
      kernels::omp::conv2d_backward(
          d, x.data(), w.data(), y.grad(),
          x.requires_grad() ? x.mutable_grad() : std::span<double>{},
          w.requires_grad() ? w.mutable_grad() : std::span<double>{},
          (bias.defined() && bias.requires_grad()) ? bias.mutable_grad()
                                                   : std::span<double>{});
    });
  }
  return y;
}

Tensor relu(const Tensor& x) {
  if (g_monitor) {
    for (double v : x.data()) report_kink(std::abs(v));
  }
  // Subgradient 0 at x == 0.
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double s) { return s * (1.0 - s); });
}

Tensor logit(const Tensor& p, double eps) {
  const double lo = eps, hi = 1.0 - eps;
  if (g_monitor) {
    for (double v : p.data()) report_kink(std::min(std::abs(v - lo), std::abs(v - hi)));
  }
  return unary(
      "logit", p,
      [lo, hi](double v) {
        const double c = std::clamp(v, lo, hi);
        return std::log(c) - std::log1p(-c);
      },
      [lo, hi](double v, double) {
        if (v < lo || v > hi) return 0.0;
        return 1.0 / (v * (1.0 - v));
      });
}

Tensor log_clamped(const Tensor& x, double floor) {
  if (g_monitor) {
    for (double v : x.data()) report_kink(std::abs(v - floor));
  }
  return unary(
      "log_clamped", x,
      [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Tensor neg_log1mexp(const Tensor& s, double ceiling) {
  if (g_monitor) {
    for (double v : s.data()) report_kink(std::abs(v - ceiling));
  }
  return unary(
      "neg_log1mexp", s,
      [ceiling](double v) { return -std::log(-std::expm1(std::min(v, ceiling))); },
      [ceiling](double v, double) {
        if (v > ceiling) return 0.0;
        return 1.0 / std::expm1(-v);  // e^v / (1 - e^v)
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor y = make_op_output(a.shape(), std::move(out), "add", {&a, &b});
  if (y.requires_grad()) {
    active_tape()->record("add", {a, b}, y, [a, b, y]() mutable {
      accumulate(a, y.grad(), 1.0);
      accumulate(b, y.grad(), 1.0);
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor y = make_op_output(a.shape(), std::move(out), "sub", {&a, &b});
  if (y.requires_grad()) {
    active_tape()->record("sub", {a, b}, y, [a, b, y]() mutable {
      accumulate(a, y.grad(), 1.0);
      accumulate(b, y.grad(), -1.0);
    });
  }
  return y;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same("hadamard", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor y = make_op_output(a.shape(), std::move(out), "hadamard", {&a, &b});
  if (y.requires_grad()) {
    active_tape()->record("hadamard", {a, b}, y, [a, b, y]() mutable {
      const auto g = y.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, double scale) { return affine(a, scale, 0.0); }

Tensor affine(const Tensor& a, double scale, double shift) {
  return unary(
      "affine", a, [scale, shift](double v) { return v * scale + shift; },
      [scale](double, double) { return scale; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor y = make_op_output(Shape{}, {s}, "sum", {&x});
  if (y.requires_grad()) {
    active_tape()->record("sum", {x}, y, [x, y]() mutable {
      if (!x.requires_grad()) return;
      const double g = y.grad()[0];
      for (auto& v : x.mutable_grad()) v += g;
    });
  }
  return y;
}

Tensor masked_sum(const Tensor& x, const Tensor& mask, std::size_t keep) {
  require_same("masked_sum", x, mask);
  if (keep > x.rank()) {
    throw ShapeError("masked_sum: cannot keep " + std::to_string(keep) +
                     " axes of shape " + shape_str(x.shape()));
  }
  Shape out_shape(x.shape().begin(), x.shape().begin() + keep);
  const std::size_t groups = shape_numel(out_shape);
  const std::size_t inner = groups == 0 ? 0 : x.numel() / groups;
  std::vector<double> out(groups, 0.0);
  for (std::size_t g = 0; g < groups; ++g) {
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += x[g * inner + i] * mask[g * inner + i];
    out[g] = s;
  }
  Tensor y = make_op_output(out_shape, std::move(out), "masked_sum", {&x});
  if (y.requires_grad()) {
    active_tape()->record("masked_sum", {x}, y, [x, mask, y, groups, inner]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.mutable_grad();
      const auto g = y.grad();
      for (std::size_t gi = 0; gi < groups; ++gi) {
        for (std::size_t i = 0; i < inner; ++i) {
          gx[gi * inner + i] += g[gi] * mask[gi * inner + i];
        }
      }
    });
  }
  return y;
}

NormStats NormStats::fresh(std::size_t channels) {
  NormStats s;
  s.running_mean = Tensor(Shape{channels}, 0.0);
  s.running_var = Tensor(Shape{channels}, 1.0);
  return s;
}

Tensor affine_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                   NormStats& stats, bool training) {
  constexpr std::string_view op = "affine_norm";
  if (x.rank() < 2) {
    throw ShapeError("affine_norm: need rank >= 2, got " + shape_str(x.shape()));
  }
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t inner = x.numel() / (N * C);
  const Shape cshape{C};
  if (scale.shape() != cshape || shift.shape() != cshape ||
      stats.running_mean.shape() != cshape || stats.running_var.shape() != cshape) {
    throw ShapeError("affine_norm: per-channel parameters must be " +
                     shape_str(cshape) + " for input " + shape_str(x.shape()) +
                     ", got scale " + shape_str(scale.shape()));
  }
  const double count = static_cast<double>(N * inner);
  const auto xv = x.data();
  std::vector<double> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (training) {
      double m = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) m += xv[(n * C + c) * inner + i];
      m /= count;
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) {
          const double dlt = xv[(n * C + c) * inner + i] - m;
          v += dlt * dlt;
        }
      v /= count;
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + stats.eps);
      auto rm = stats.running_mean.mutable_data();
      auto rv = stats.running_var.mutable_data();
      rm[c] = (1.0 - stats.momentum) * rm[c] + stats.momentum * m;
      rv[c] = (1.0 - stats.momentum) * rv[c] + stats.momentum * v;
    } else {
      mean[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + stats.eps);
    }
  }
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (n * C + c) * inner + i;
        xhat[idx] = (xv[idx] - mean[c]) * inv_std[c];
        out[idx] = scale[c] * xhat[idx] + shift[c];
      }
  Tensor y = make_op_output(x.shape(), std::move(out), op, {&x, &scale, &shift});
  if (y.requires_grad()) {
    active_tape()->record(
        op, {x, scale, shift}, y,
        [x, scale, shift, y, xhat = std::move(xhat), inv_std, training, N, C,
         inner, count]() mutable {
          const auto g = y.grad();
          for (std::size_t c = 0; c < C; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (n * C + c) * inner + i;
                sum_g += g[idx];
                sum_gx += g[idx] * xhat[idx];
              }
            if (shift.requires_grad()) shift.mutable_grad()[c] += sum_g;
            if (scale.requires_grad()) scale.mutable_grad()[c] += sum_gx;
            if (!x.requires_grad()) continue;
            auto gx = x.mutable_grad();
            const double k = scale[c] * inv_std[c];
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (n * C + c) * inner + i;
                if (training) {
                  gx[idx] += k * (g[idx] - sum_g / count - xhat[idx] * sum_gx / count);
                } else {
                  gx[idx] += k * g[idx];
                }
              }
          }
        });
  }
  return y;
}

Tensor blur_downsample(const Tensor& x, std::size_t taps) {
  constexpr std::string_view op = "blur_downsample";
  require_rank(op, x, 4);
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0 || x.dim(2) == 0 || x.dim(3) == 0) {
    throw ShapeError("blur_downsample: spatial extents must be even, got " +
                     shape_str(x.shape()));
  }
  kernels::BlurDims d;
  d.planes = x.dim(0) * x.dim(1);
  d.height = x.dim(2);
  d.width = x.dim(3);
  d.taps = taps;
  (void)kernels::binomial_row(taps);  // validates the tap count
  const Shape out_shape{x.dim(0), x.dim(1), d.height / 2, d.width / 2};
  std::vector<double> out(shape_numel(out_shape));
  kernels::omp::blur_downsample_forward(d, x.data(), out);
  Tensor y = make_op_output(out_shape, std::move(out), op, {&x});
  if (y.requires_grad()) {
    active_tape()->record(op, {x}, y, [x, y, d]() mutable {
      if (x.requires_grad()) {
        kernels::omp::blur_downsample_backward(d, y.grad(), x.mutable_grad());
      }
    });
  }
  return y;
}

Tensor pac_message(const Tensor& z, const Tensor& f, const Tensor& w,
                   double bandwidth) {
  constexpr std::string_view op = "pac_message";
  require_rank(op, z, 4);
  require_rank(op, f, 4);
  require_rank(op, w, 4);
  kernels::PacDims d;
  d.batch = z.dim(0);
  d.classes = z.dim(1);
  d.grid = z.dim(2);
  d.features = f.dim(1);
  d.window = w.dim(2);
  d.bandwidth = bandwidth;
  if (z.dim(3) != d.grid || f.dim(0) != d.batch || f.dim(2) != d.grid ||
      f.dim(3) != d.grid) {
    throw ShapeError("pac_message: scores " + shape_str(z.shape()) +
                     " vs features " + shape_str(f.shape()));
  }
  if (w.dim(0) != d.classes || w.dim(1) != d.classes || w.dim(3) != d.window ||
      d.window % 2 == 0) {
    throw ShapeError("pac_message: compatibility " + shape_str(w.shape()) +
                     " vs scores " + shape_str(z.shape()));
  }
  if (!(bandwidth > 0.0)) {
    throw ConfigError("pac_message: bandwidth must be positive");
  }
  std::vector<double> out(z.numel());
  kernels::omp::pac_message_forward(d, z.data(), f.data(), w.data(), out);
  Tensor m = make_op_output(z.shape(), std::move(out), op, {&z, &f, &w});
  if (m.requires_grad()) {
    active_tape()->record(op, {z, f, w}, m, [z, f, w, m, d]() mutable {
      kernels::omp::pac_message_backward(
          d, z.data(), f.data(), w.data(), m.grad(),
          z.requires_grad() ? z.mutable_grad() : std::span<double>{},
          f.requires_grad() ? f.mutable_grad() : std::span<double>{},
          w.requires_grad() ? w.mutable_grad() : std::span<double>{});
    });
  }
  return m;
}

}  // namespace plc::ops
