#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "plc/kernels.hpp"

namespace plc::kernels::omp {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

long reflect(long i, long n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

void im2col(const ConvDims& d, const double* x, double* col) {
  const long H = static_cast<long>(d.height), W = static_cast<long>(d.width);
  const long pad = static_cast<long>(d.pad);
  const std::size_t Ho = d.out_height(), Wo = d.out_width(), k = d.kernel;
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < d.in_channels; ++c) {
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        double* dst = col + ((c * k + a) * k + b) * plane;
        for (std::size_t i = 0; i < Ho; ++i) {
          const long r = static_cast<long>(i + a) - pad;
          double* drow = dst + i * Wo;
          if (r < 0 || r >= H) {
            for (std::size_t j = 0; j < Wo; ++j) drow[j] = 0.0;
            continue;
          }
          const double* srow = x + (c * H + r) * W;
          for (std::size_t j = 0; j < Wo; ++j) {
            const long s = static_cast<long>(j + b) - pad;
            drow[j] = (s < 0 || s >= W) ? 0.0 : srow[s];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvDims& d, const double* col, double* dx) {
  const long H = static_cast<long>(d.height), W = static_cast<long>(d.width);
  const long pad = static_cast<long>(d.pad);
  const std::size_t Ho = d.out_height(), Wo = d.out_width(), k = d.kernel;
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < d.in_channels; ++c) {
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        const double* src = col + ((c * k + a) * k + b) * plane;
        for (std::size_t i = 0; i < Ho; ++i) {
          const long r = static_cast<long>(i + a) - pad;
          if (r < 0 || r >= H) continue;
          double* xrow = dx + (c * H + r) * W;
          const double* srow = src + i * Wo;
          for (std::size_t j = 0; j < Wo; ++j) {
            const long s = static_cast<long>(j + b) - pad;
            if (s >= 0 && s < W) xrow[s] += srow[j];
          }
        }
      }
    }
  }
}


}  // namespace

void conv2d_forward(const ConvDims& d, std::span<const double> x,
                    std::span<const double> w, std::span<const double> bias,
                    std::span<double> y) {
  const std::size_t rows = d.in_channels * d.kernel * d.kernel;
  const std::size_t plane = d.out_height() * d.out_width();
  const std::size_t in_size = d.in_channels * d.height * d.width;
  const long batch = static_cast<long>(d.batch);
#pragma omp parallel
  {
    std::vector<double> col(rows * plane);
#pragma omp for schedule(static)
    for (long n = 0; n < batch; ++n) {
      im2col(d, x.data() + n * in_size, col.data());
      MapMat out(y.data() + n * d.out_channels * plane, d.out_channels, plane);
      out.noalias() = ConstMapMat(w.data(), d.out_channels, rows) *
                      ConstMapMat(col.data(), rows, plane);
      if (!bias.empty()) {
        for (std::size_t o = 0; o < d.out_channels; ++o) out.row(o).array() += bias[o];
      }
    }
  }
}

void conv2d_backward(const ConvDims& d, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw,
                     std::span<double> dbias) {
  const std::size_t rows = d.in_channels * d.kernel * d.kernel;
  const std::size_t plane = d.out_height() * d.out_width();
  const std::size_t in_size = d.in_channels * d.height * d.width;
  const std::size_t wsize = d.out_channels * rows;
  const long batch = static_cast<long>(d.batch);
  // Per-sample weight-gradient partials, reduced below in sample order.
  std::vector<double> dw_part(dw.empty() ? 0 : d.batch * wsize);
  std::vector<double> db_part(dbias.empty() ? 0 : d.batch * d.out_channels);
#pragma omp parallel
  {
    std::vector<double> col(rows * plane);
    std::vector<double> dcol(dx.empty() ? 0 : rows * plane);
#pragma omp for schedule(static)
    for (long n = 0; n < batch; ++n) {
      const double* g = dy.data() + n * d.out_channels * plane;
      if (!dbias.empty()) {
        for (std::size_t o = 0; o < d.out_channels; ++o) {
          const double* go = g + o * plane;
          double s = 0.0;
          for (std::size_t p = 0; p < plane; ++p) s += go[p];
          db_part[n * d.out_channels + o] = s;
        }
      }
      if (!dw.empty()) {
        im2col(d, x.data() + n * in_size, col.data());
        MapMat part(dw_part.data() + n * wsize, d.out_channels, rows);
        part.noalias() = ConstMapMat(g, d.out_channels, plane) *
                         ConstMapMat(col.data(), rows, plane).transpose();
      }
      if (!dx.empty()) {
        MapMat(dcol.data(), rows, plane).noalias() =
            ConstMapMat(w.data(), d.out_channels, rows).transpose() *
            ConstMapMat(g, d.out_channels, plane);
        col2im_add(d, dcol.data(), dx.data() + n * in_size);
      }
    }
  }
  for (std::size_t n = 0; n < d.batch && !dw.empty(); ++n) {
    const double* part = dw_part.data() + n * wsize;
    for (std::size_t i = 0; i < wsize; ++i) dw[i] += part[i];
  }
  for (std::size_t n = 0; n < d.batch && !dbias.empty(); ++n) {
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      dbias[o] += db_part[n * d.out_channels + o];
    }
  }
}

// Separable form: horizontal pass at the even columns, then vertical pass at
// the even rows.
void blur_downsample_forward(const BlurDims& d, std::span<const double> x,
                             std::span<double> y) {
  const auto row = binomial_row(d.taps);
  const long t = static_cast<long>(d.taps), rad = (t - 1) / 2;
  const long H = static_cast<long>(d.height), W = static_cast<long>(d.width);
  const std::size_t Ho = d.height / 2, Wo = d.width / 2;
  const long planes = static_cast<long>(d.planes);
#pragma omp parallel
  {
    std::vector<double> tmp(d.height * Wo);
#pragma omp for schedule(static)
    for (long p = 0; p < planes; ++p) {
      const double* in = x.data() + p * d.height * d.width;
      for (long r = 0; r < H; ++r) {
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (long b = 0; b < t; ++b) {
            acc += row[b] * in[r * W + reflect(2 * static_cast<long>(j) + b - rad, W)];
          }
          tmp[r * Wo + j] = acc;
        }
      }
      double* out = y.data() + p * Ho * Wo;
      for (std::size_t i = 0; i < Ho; ++i) {
        for (std::size_t j = 0; j < Wo; ++j) out[i * Wo + j] = 0.0;
        for (long a = 0; a < t; ++a) {
          const long rr = reflect(2 * static_cast<long>(i) + a - rad, H);
          const double ka = row[a];
          for (std::size_t j = 0; j < Wo; ++j) out[i * Wo + j] += ka * tmp[rr * Wo + j];
        }
      }
    }
  }
}

void blur_downsample_backward(const BlurDims& d, std::span<const double> dy,
                              std::span<double> dx) {
  const auto row = binomial_row(d.taps);
  const long t = static_cast<long>(d.taps), rad = (t - 1) / 2;
  const long H = static_cast<long>(d.height), W = static_cast<long>(d.width);
  const std::size_t Ho = d.height / 2, Wo = d.width / 2;
  const long planes = static_cast<long>(d.planes);
#pragma omp parallel
  {
    std::vector<double> dtmp(d.height * Wo);
#pragma omp for schedule(static)
    for (long p = 0; p < planes; ++p) {
      const double* g = dy.data() + p * Ho * Wo;
      for (auto& v : dtmp) v = 0.0;
      for (std::size_t i = 0; i < Ho; ++i) {
        for (long a = 0; a < t; ++a) {
          const long rr = reflect(2 * static_cast<long>(i) + a - rad, H);
          for (std::size_t j = 0; j < Wo; ++j) dtmp[rr * Wo + j] += row[a] * g[i * Wo + j];
        }
      }
      double* out = dx.data() + p * d.height * d.width;
      for (long r = 0; r < H; ++r) {
        for (std::size_t j = 0; j < Wo; ++j) {
          const double v = dtmp[r * Wo + j];
          for (long b = 0; b < t; ++b) {
            out[r * W + reflect(2 * static_cast<long>(j) + b - rad, W)] += row[b] * v;
          }
        }
      }
    }
  }
}

void pac_message_forward(const PacDims& d, std::span<const double> z,
                         std::span<const double> f, std::span<const double> w,
                         std::span<double> m) {
  const long P = static_cast<long>(d.grid), S = static_cast<long>(d.window);
  const long r = S / 2;
  const std::size_t K = d.classes, F = d.features, cells = d.grid * d.grid;
  const double inv_h2 = 1.0 / (d.bandwidth * d.bandwidth);
  const long rows = static_cast<long>(d.batch) * P;
#pragma omp parallel for schedule(static)
  for (long nr = 0; nr < rows; ++nr) {
    const std::size_t n = static_cast<std::size_t>(nr / P);
    const long i = nr % P;
    const double* zn = z.data() + n * K * cells;
    const double* fn = f.data() + n * F * cells;
    double* mn = m.data() + n * K * cells;
    for (long j = 0; j < P; ++j) {
      const std::size_t jc = static_cast<std::size_t>(i * P + j);
      for (std::size_t k = 0; k < K; ++k) mn[k * cells + jc] = 0.0;
      for (long a = 0; a < S; ++a) {
        const long li = i - (a - r);
        if (li < 0 || li >= P) continue;
        for (long b = 0; b < S; ++b) {
          const long lj = j - (b - r);
          if ((a == r && b == r) || lj < 0 || lj >= P) continue;
          const std::size_t lc = static_cast<std::size_t>(li * P + lj);
          double dist2 = 0.0;
          for (std::size_t c = 0; c < F; ++c) {
            const double diff = fn[c * cells + jc] - fn[c * cells + lc];
            dist2 += diff * diff;
          }
          const double g = std::exp(-0.5 * dist2 * inv_h2);
          const std::size_t o = static_cast<std::size_t>(a * S + b);
          for (std::size_t k = 0; k < K; ++k) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < K; ++kk) {
              acc += w[(k * K + kk) * S * S + o] * zn[kk * cells + lc];
            }
            mn[k * cells + jc] += g * acc;
          }
        }
      }
    }
  }
}

void pac_message_backward(const PacDims& d, std::span<const double> z,
                          std::span<const double> f, std::span<const double> w,
                          std::span<const double> dm, std::span<double> dz,
                          std::span<double> df, std::span<double> dw) {
  const long P = static_cast<long>(d.grid), S = static_cast<long>(d.window);
  const long r = S / 2;
  const std::size_t K = d.classes, F = d.features, cells = d.grid * d.grid;
  const std::size_t offsets = static_cast<std::size_t>(S * S);
  const double inv_h2 = 1.0 / (d.bandwidth * d.bandwidth);
  const long rows = static_cast<long>(d.batch) * P;

  // Affinity G and its upstream gradient per (sample, centre, offset); zero
  // where the neighbour falls off the grid.
  std::vector<double> gtab(d.batch * cells * offsets, 0.0);
  std::vector<double> dgtab(d.batch * cells * offsets, 0.0);
#pragma omp parallel for schedule(static)
  for (long nr = 0; nr < rows; ++nr) {
    const std::size_t n = static_cast<std::size_t>(nr / P);
    const long i = nr % P;
    const double* zn = z.data() + n * K * cells;
    const double* fn = f.data() + n * F * cells;
    const double* gn = dm.data() + n * K * cells;
    for (long j = 0; j < P; ++j) {
      const std::size_t jc = static_cast<std::size_t>(i * P + j);
      for (long a = 0; a < S; ++a) {
        const long li = i - (a - r);
        if (li < 0 || li >= P) continue;
        for (long b = 0; b < S; ++b) {
          const long lj = j - (b - r);
          if ((a == r && b == r) || lj < 0 || lj >= P) continue;
          const std::size_t lc = static_cast<std::size_t>(li * P + lj);
          const std::size_t o = static_cast<std::size_t>(a * S + b);
          double dist2 = 0.0;
          for (std::size_t c = 0; c < F; ++c) {
            const double diff = fn[c * cells + jc] - fn[c * cells + lc];
            dist2 += diff * diff;
          }
          double dg = 0.0;
          for (std::size_t k = 0; k < K; ++k) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < K; ++kk) {
              acc += w[(k * K + kk) * offsets + o] * zn[kk * cells + lc];
            }
            dg += gn[k * cells + jc] * acc;
          }
          const std::size_t ti = (n * cells + jc) * offsets + o;
          gtab[ti] = std::exp(-0.5 * dist2 * inv_h2);
          dgtab[ti] = dg;
        }
      }
    }
  }

  if (!dw.empty()) {
    const long entries = static_cast<long>(K * K * offsets);
#pragma omp parallel for schedule(static)
    for (long e = 0; e < entries; ++e) {
      const std::size_t o = static_cast<std::size_t>(e) % offsets;
      const std::size_t kk = (static_cast<std::size_t>(e) / offsets) % K;
      const std::size_t k = static_cast<std::size_t>(e) / (offsets * K);
      const long a = static_cast<long>(o) / S, b = static_cast<long>(o) % S;
      if (a == r && b == r) continue;
      double acc = 0.0;
      for (std::size_t n = 0; n < d.batch; ++n) {
        for (long i = 0; i < P; ++i) {
          const long li = i - (a - r);
          if (li < 0 || li >= P) continue;
          for (long j = 0; j < P; ++j) {
            const long lj = j - (b - r);
            if (lj < 0 || lj >= P) continue;
            const std::size_t jc = static_cast<std::size_t>(i * P + j);
            const std::size_t lc = static_cast<std::size_t>(li * P + lj);
            acc += dm[(n * K + k) * cells + jc] *
                   gtab[(n * cells + jc) * offsets + o] *
                   z[(n * K + kk) * cells + lc];
          }
        }
      }
      dw[static_cast<std::size_t>(e)] += acc;
    }
  }

  if (!dz.empty()) {
#pragma omp parallel for schedule(static)
    for (long nr = 0; nr < rows; ++nr) {
      const std::size_t n = static_cast<std::size_t>(nr / P);
      const long li = nr % P;
      for (long lj = 0; lj < P; ++lj) {
        const std::size_t lc = static_cast<std::size_t>(li * P + lj);
        for (long a = 0; a < S; ++a) {
          const long i = li + (a - r);
          if (i < 0 || i >= P) continue;
          for (long b = 0; b < S; ++b) {
            const long j = lj + (b - r);
            if ((a == r && b == r) || j < 0 || j >= P) continue;
            const std::size_t jc = static_cast<std::size_t>(i * P + j);
            const std::size_t o = static_cast<std::size_t>(a * S + b);
            const double g = gtab[(n * cells + jc) * offsets + o];
            for (std::size_t kk = 0; kk < K; ++kk) {
              double acc = 0.0;
              for (std::size_t k = 0; k < K; ++k) {
                acc += dm[(n * K + k) * cells + jc] * w[(k * K + kk) * offsets + o];
              }
              dz[(n * K + kk) * cells + lc] += g * acc;
            }
          }
        }
      }
    }
  }

  if (!df.empty()) {
#pragma omp parallel for schedule(static)
    for (long nr = 0; nr < rows; ++nr) {
      const std::size_t n = static_cast<std::size_t>(nr / P);
      const long i = nr % P;
      const double* fn = f.data() + n * F * cells;
      double* dfn = df.data() + n * F * cells;
      for (long j = 0; j < P; ++j) {
        const std::size_t jc = static_cast<std::size_t>(i * P + j);
        for (long a = 0; a < S; ++a) {
          for (long b = 0; b < S; ++b) {
            if (a == r && b == r) continue;
            const std::size_t o = static_cast<std::size_t>(a * S + b);
            // as centre: neighbour at jc - offset
            const long li = i - (a - r), lj = j - (b - r);
            if (li >= 0 && li < P && lj >= 0 && lj < P) {
              const std::size_t lc = static_cast<std::size_t>(li * P + lj);
              const std::size_t ti = (n * cells + jc) * offsets + o;
              const double coef = dgtab[ti] * gtab[ti] * inv_h2;
              for (std::size_t c = 0; c < F; ++c) {
                dfn[c * cells + jc] -= coef * (fn[c * cells + jc] - fn[c * cells + lc]);
              }
            }
            // as neighbour of the centre at jc + offset
            const long ci = i + (a - r), cj = j + (b - r);
            if (ci >= 0 && ci < P && cj >= 0 && cj < P) {
              const std::size_t cc = static_cast<std::size_t>(ci * P + cj);
              const std::size_t ti = (n * cells + cc) * offsets + o;
              const double coef = dgtab[ti] * gtab[ti] * inv_h2;
              for (std::size_t c = 0; c < F; ++c) {
                dfn[c * cells + jc] += coef * (fn[c * cells + cc] - fn[c * cells + jc]);
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace plc::kernels::omp
