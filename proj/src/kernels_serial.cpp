// Reference loop nests. Written for obviousness, not speed.

#include <array>
#include <cmath>

#include "plc/error.hpp"
#include "plc/kernels.hpp"

namespace plc::kernels {

namespace {
constexpr std::array<double, 1> kTaps1{1.0};
constexpr std::array<double, 2> kTaps2{0.5, 0.5};
constexpr std::array<double, 3> kTaps3{0.25, 0.5, 0.25};
constexpr std::array<double, 5> kTaps5{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16,
                                       1.0 / 16};
}  // namespace

std::span<const double> binomial_row(std::size_t taps) {
  switch (taps) {
    case 1: return kTaps1;
    case 2: return kTaps2;
    case 3: return kTaps3;
    case 5: return kTaps5;
    default:
      throw ConfigError("blur: unsupported tap count " + std::to_string(taps) +
                        " (allowed: 1, 2, 3, 5)");
  }
}

namespace serial {

namespace {

// Reflection without edge repeat: -1 -> 1, n -> n-2.
long reflect(long i, long n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

}  // namespace

void conv2d_forward(const ConvDims& d, std::span<const double> x,
                    std::span<const double> w, std::span<const double> bias,
                    std::span<double> y) {
  const long H = static_cast<long>(d.height), W = static_cast<long>(d.width);
  const long pad = static_cast<long>(d.pad);
  const std::size_t Ho = d.out_height(), Wo = d.out_width(), k = d.kernel;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      for (std::size_t i = 0; i < Ho; ++i) {
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < d.in_channels; ++c) {
            for (std::size_t a = 0; a < k; ++a) {
              const long r = static_cast<long>(i + a) - pad;
              if (r < 0 || r >= H) continue;
              for (std::size_t b = 0; b < k; ++b) {
                const long s = static_cast<long>(j + b) - pad;
                if (s < 0 || s >= W) continue;
                acc += w[((o * d.in_channels + c) * k + a) * k + b] *
                       x[((n * d.in_channels + c) * H + r) * W + s];
              }
            }
          }
          y[((n * d.out_channels + o) * Ho + i) * Wo + j] = acc;
        }
      }
    }
  }
}

void conv2d_backward(const ConvDims& d, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw,
                     std::span<double> dbias) {
  const long H = static_cast<long>(d.height), W = static_cast<long>(d.width);
  const long pad = static_cast<long>(d.pad);
  const std::size_t Ho = d.out_height(), Wo = d.out_width(), k = d.kernel;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      for (std::size_t i = 0; i < Ho; ++i) {
        for (std::size_t j = 0; j < Wo; ++j) {
          const double g = dy[((n * d.out_channels + o) * Ho + i) * Wo + j];
          if (!dbias.empty()) dbias[o] += g;
          for (std::size_t c = 0; c < d.in_channels; ++c) {
            for (std::size_t a = 0; a < k; ++a) {
              const long r = static_cast<long>(i + a) - pad;
              if (r < 0 || r >= H) continue;
              for (std::size_t b = 0; b < k; ++b) {
                const long s = static_cast<long>(j + b) - pad;
                if (s < 0 || s >= W) continue;
                const std::size_t wi = ((o * d.in_channels + c) * k + a) * k + b;
                const std::size_t xi = ((n * d.in_channels + c) * H + r) * W + s;
                if (!dw.empty()) dw[wi] += g * x[xi];
                if (!dx.empty()) dx[xi] += g * w[wi];
              }
            }
          }
        }
      }
    }
  }
}

void blur_downsample_forward(const BlurDims& d, std::span<const double> x,
                             std::span<double> y) {
  const auto row = binomial_row(d.taps);
  const long t = static_cast<long>(d.taps);
  const long r = (t - 1) / 2;  // taps=2 looks forward only
  const long H = static_cast<long>(d.height), W = static_cast<long>(d.width);
  const std::size_t Ho = d.height / 2, Wo = d.width / 2;
  for (std::size_t p = 0; p < d.planes; ++p) {
    const double* in = x.data() + p * d.height * d.width;
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = 0.0;
        for (long a = 0; a < t; ++a) {
          const long rr = reflect(2 * static_cast<long>(i) + a - r, H);
          for (long b = 0; b < t; ++b) {
            const long cc = reflect(2 * static_cast<long>(j) + b - r, W);
            acc += row[a] * row[b] * in[rr * W + cc];
          }
        }
        y[(p * Ho + i) * Wo + j] = acc;
      }
    }
  }
}

void blur_downsample_backward(const BlurDims& d, std::span<const double> dy,
                              std::span<double> dx) {
  const auto row = binomial_row(d.taps);
  const long t = static_cast<long>(d.taps);
  const long r = (t - 1) / 2;
  const long H = static_cast<long>(d.height), W = static_cast<long>(d.width);
  const std::size_t Ho = d.height / 2, Wo = d.width / 2;
  for (std::size_t p = 0; p < d.planes; ++p) {
    double* out = dx.data() + p * d.height * d.width;
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        const double g = dy[(p * Ho + i) * Wo + j];
        for (long a = 0; a < t; ++a) {
          const long rr = reflect(2 * static_cast<long>(i) + a - r, H);
          for (long b = 0; b < t; ++b) {
            const long cc = reflect(2 * static_cast<long>(j) + b - r, W);
            out[rr * W + cc] += row[a] * row[b] * g;
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
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (long i = 0; i < P; ++i) {
      for (long j = 0; j < P; ++j) {
        for (std::size_t k = 0; k < K; ++k) {
          m[(n * K + k) * cells + i * P + j] = 0.0;
        }
        for (long a = 0; a < S; ++a) {
          for (long b = 0; b < S; ++b) {
            if (a == r && b == r) continue;
            // offset = xi_j - xi_l, so the neighbour sits at j - offset
            const long li = i - (a - r), lj = j - (b - r);
            if (li < 0 || li >= P || lj < 0 || lj >= P) continue;
            double dist2 = 0.0;
            for (std::size_t c = 0; c < F; ++c) {
              const double diff = f[(n * F + c) * cells + i * P + j] -
                                  f[(n * F + c) * cells + li * P + lj];
              dist2 += diff * diff;
            }
            const double g = std::exp(-0.5 * dist2 * inv_h2);
            for (std::size_t k = 0; k < K; ++k) {
              double acc = 0.0;
              for (std::size_t kk = 0; kk < K; ++kk) {
                acc += w[((k * K + kk) * S + a) * S + b] *
                       z[(n * K + kk) * cells + li * P + lj];
              }
              m[(n * K + k) * cells + i * P + j] += g * acc;
            }
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
  const double inv_h2 = 1.0 / (d.bandwidth * d.bandwidth);
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (long i = 0; i < P; ++i) {
      for (long j = 0; j < P; ++j) {
        const std::size_t jc = static_cast<std::size_t>(i * P + j);
        for (long a = 0; a < S; ++a) {
          for (long b = 0; b < S; ++b) {
            if (a == r && b == r) continue;
            const long li = i - (a - r), lj = j - (b - r);
            if (li < 0 || li >= P || lj < 0 || lj >= P) continue;
            const std::size_t lc = static_cast<std::size_t>(li * P + lj);
            double dist2 = 0.0;
            for (std::size_t c = 0; c < F; ++c) {
              const double diff =
                  f[(n * F + c) * cells + jc] - f[(n * F + c) * cells + lc];
              dist2 += diff * diff;
            }
            const double g = std::exp(-0.5 * dist2 * inv_h2);
            double dg = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
              const double gm = dm[(n * K + k) * cells + jc];
              for (std::size_t kk = 0; kk < K; ++kk) {
                const std::size_t wi = ((k * K + kk) * S + a) * S + b;
                const double zl = z[(n * K + kk) * cells + lc];
                dg += gm * w[wi] * zl;
                if (!dz.empty()) dz[(n * K + kk) * cells + lc] += gm * g * w[wi];
                if (!dw.empty()) dw[wi] += gm * g * zl;
              }
            }
            if (df.empty()) continue;
            for (std::size_t c = 0; c < F; ++c) {
              const double diff =
                  f[(n * F + c) * cells + jc] - f[(n * F + c) * cells + lc];
              const double grad = -dg * g * diff * inv_h2;
              df[(n * F + c) * cells + jc] += grad;
              df[(n * F + c) * cells + lc] -= grad;
            }
          }
        }
      }
    }
  }
}

}  // namespace serial
}  // namespace plc::kernels
