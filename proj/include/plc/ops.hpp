#pragma once

// Differentiable primitives. Each op computes its result eagerly and, when a
// tape is active and an input requires grad, records its backward rule.
// Shape mismatches throw ShapeError naming the op and both shapes; non-finite
// results throw NumericError.

#include <cstddef>

#include "plc/tensor.hpp"

namespace plc::ops {

// x: [N,C,H,W], w: [O,C,k,k], bias: [O] or undefined. Stride 1, zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t pad);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
// a * scale
Tensor mul(const Tensor& a, double scale);
// a * scale + shift
Tensor affine(const Tensor& a, double scale, double shift);

// Sum of all entries; returns a scalar.
Tensor sum(const Tensor& x);

// Reduces x over every axis past the first `keep` axes, weighting each entry
// by the constant `mask` (same shape as x). Result shape is x.shape[0:keep].
Tensor masked_sum(const Tensor& x, const Tensor& mask, std::size_t keep);

struct NormStats {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  double momentum = 0.1;
  double eps = 1e-5;

  static NormStats fresh(std::size_t channels);
};

// Per-channel normalization of x: [N,C,...]. Training mode uses batch
// statistics (biased variance) and updates the running averages; inference
// mode uses the running averages. Then y = scale * xhat + shift.
Tensor affine_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                   NormStats& stats, bool training);

// Per-channel binomial low-pass followed by stride-2 subsampling.
// x: [N,C,H,W] with even H and W; reflect padding at the borders.
Tensor blur_downsample(const Tensor& x, std::size_t taps);

// log(p / (1 - p)) of p clamped to [eps, 1 - eps]; zero gradient where the
// clamp is active.
Tensor logit(const Tensor& p, double eps);

// log(max(x, floor)).
Tensor log_clamped(const Tensor& x, double floor);

// -log(1 - exp(s)) for s <= 0, with s clamped to at most `ceiling` (< 0).
Tensor neg_log1mexp(const Tensor& s, double ceiling);

// Pairwise message of the pixel-adaptive CRF.
// z: [N,K,P,P], f: [N,F,P,P], w: [K,K,S,S] indexed by the offset
// (xi_j - xi_l) + S/2. m_j,k = sum_{l in window(j), l != j}
// exp(-|f_j - f_l|^2 / (2 h^2)) * sum_k' w[k,k',offset] * z_l,k'.
Tensor pac_message(const Tensor& z, const Tensor& f, const Tensor& w,
                   double bandwidth);

// Tracks how close the current thread's evaluations come to the kinks of
// piecewise ops (relu, clamps). Gradient checks use it to reject
// configurations that sit on a breakpoint.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  double min_margin() const { return min_margin_; }
  void observe(double margin);

 private:
  KinkMonitor* previous_;
  double min_margin_;
};

}  // namespace plc::ops
