#pragma once

// Raw compute kernels behind the differentiable ops.
//
// Every kernel exists twice: `serial` is a direct loop-nest transcription
// kept as the reference for tests, `omp` is the OpenMP version the ops
// dispatch to. Parallel kernels only split work over independent output
// elements (or reduce fixed-size partials in a fixed order), so results do
// not depend on the thread count.
//
// Backward kernels accumulate (+=) into their gradient outputs. An empty
// span means "not requested".

#include <cstddef>
#include <span>

namespace plc::kernels {

struct ConvDims {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;  // square kernel side, odd
  std::size_t pad = 0;

  std::size_t out_height() const { return height + 2 * pad - kernel + 1; }
  std::size_t out_width() const { return width + 2 * pad - kernel + 1; }
};

struct BlurDims {
  std::size_t planes = 1;  // batch * channels
  std::size_t height = 2;
  std::size_t width = 2;
  std::size_t taps = 3;  // one of 1, 2, 3, 5
};

// Patch-grid dims for the pixel-adaptive pairwise message.
struct PacDims {
  std::size_t batch = 1;
  std::size_t classes = 1;
  std::size_t features = 1;
  std::size_t grid = 1;
  std::size_t window = 1;  // odd side of the neighbourhood
  double bandwidth = 1.0;
};

// Normalized 1-D binomial row for the given tap count.
std::span<const double> binomial_row(std::size_t taps);

namespace serial {

void conv2d_forward(const ConvDims& d, std::span<const double> x,
                    std::span<const double> w, std::span<const double> bias,
                    std::span<double> y);
void conv2d_backward(const ConvDims& d, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw,
                     std::span<double> dbias);

void blur_downsample_forward(const BlurDims& d, std::span<const double> x,
                             std::span<double> y);
void blur_downsample_backward(const BlurDims& d, std::span<const double> dy,
                              std::span<double> dx);

void pac_message_forward(const PacDims& d, std::span<const double> z,
                         std::span<const double> f, std::span<const double> w,
                         std::span<double> m);
void pac_message_backward(const PacDims& d, std::span<const double> z,
                          std::span<const double> f, std::span<const double> w,
                          std::span<const double> dm, std::span<double> dz,
                          std::span<double> df, std::span<double> dw);

}  // namespace serial

namespace omp {

void conv2d_forward(const ConvDims& d, std::span<const double> x,
                    std::span<const double> w, std::span<const double> bias,
                    std::span<double> y);
void conv2d_backward(const ConvDims& d, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw,
                     std::span<double> dbias);

void blur_downsample_forward(const BlurDims& d, std::span<const double> x,
                             std::span<double> y);
void blur_downsample_backward(const BlurDims& d, std::span<const double> dy,
                              std::span<double> dx);

void pac_message_forward(const PacDims& d, std::span<const double> z,
                         std::span<const double> f, std::span<const double> w,
                         std::span<double> m);
void pac_message_backward(const PacDims& d, std::span<const double> z,
                          std::span<const double> f, std::span<const double> w,
                          std::span<const double> dm, std::span<double> dz,
                          std::span<double> df, std::span<double> dw);

}  // namespace omp

}  // namespace plc::kernels
